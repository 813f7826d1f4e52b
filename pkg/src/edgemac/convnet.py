"""Fully-convolutional feature extractor with global MAC pooling.

The network is a stack of conv / relu / 2x2-maxpool layers followed by a
per-channel global spatial max (MAC) and l2 normalization, producing a
unit-norm descriptor that is invariant to translation. Forward passes cache
enough state for an exact manual backward pass through every layer,
including the normalization Jacobian and max argmax routing.

No mean subtraction is ever applied to the input: the filtered edge map is
consumed as-is, with 0 meaning background.

Activations are (height, width, channels) arrays; conv kernels are
(k, k, in_channels, out_channels). Inference and training run in float32;
gradient checks build float64 weights for full precision.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    ShapeError,
    SizeError,
    StateError,
    ZeroDescriptorError,
)
from .filterlayer import FilterParams
from .rng import substream

RELU = "relu"
MAXPOOL = "maxpool"


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    same_pad: bool = True


@dataclass(frozen=True)
class NetworkConfig:
    """Layer stack plus the descriptor dimensionality it produces.

    Layers are ConvLayer instances or the strings "relu" / "maxpool"
    (maxpool is always 2x2, stride 2). The last layer before MAC pooling
    must be a conv or a relu, and descriptor_dim must equal the last conv's
    output channels.
    """

    layers: tuple
    descriptor_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        convs = [l for l in self.layers if isinstance(l, ConvLayer)]
        if not convs:
            raise ConfigError("network needs at least one conv layer")
        channels = convs[0].in_channels
        for l in self.layers:
            if isinstance(l, ConvLayer):
                if l.kernel < 1 or l.stride < 1 or l.in_channels < 1 or l.out_channels < 1:
                    raise ConfigError(f"invalid conv layer {l}")
                if l.in_channels != channels:
                    raise ConfigError(
                        f"conv expects {l.in_channels} input channels but gets {channels}"
                    )
                channels = l.out_channels
            elif l not in (RELU, MAXPOOL):
                raise ConfigError(f"unknown layer kind {l!r}")
        if self.layers[-1] == MAXPOOL:
            raise ConfigError("last layer before MAC pooling must be conv or relu")
        if self.descriptor_dim != channels:
            raise ConfigError(
                f"descriptor_dim {self.descriptor_dim} != last conv out_channels {channels}"
            )

    @property
    def input_channels(self) -> int:
        return next(l for l in self.layers if isinstance(l, ConvLayer)).in_channels

    @property
    def cumulative_stride(self) -> int:
        s = 1
        for l in self.layers:
            if l == MAXPOOL:
                s *= 2
            elif isinstance(l, ConvLayer):
                s *= l.stride
        return s


def default_config() -> NetworkConfig:
    """Desk-scale backbone: 4 conv blocks, 64-D descriptor."""
    return NetworkConfig(
        layers=(
            ConvLayer(1, 16), RELU, MAXPOOL,
            ConvLayer(16, 32), RELU, MAXPOOL,
            ConvLayer(32, 64), RELU, MAXPOOL,
            ConvLayer(64, 64), RELU,
        ),
        descriptor_dim=64,
    )


@dataclass
class NetworkWeights:
    """Kernels/biases for every conv layer plus the edge-filter parameters.

    ``revision`` counts in-place updates so stale forward caches can be
    detected in backward().
    """

    config: NetworkConfig
    filter_params: FilterParams
    kernels: list
    biases: list
    seed: int
    revision: int = 0

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(
            config=self.config,
            filter_params=self.filter_params,
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
            seed=self.seed,
            revision=self.revision,
        )

    def astype(self, dtype) -> "NetworkWeights":
        w = self.copy()
        w.kernels = [k.astype(dtype) for k in w.kernels]
        w.biases = [b.astype(dtype) for b in w.biases]
        return w

    @property
    def dtype(self):
        return self.kernels[0].dtype


def init_weights(config: NetworkConfig, seed: int, dtype=np.float32) -> NetworkWeights:
    """He-scaled random kernels, zero biases; fully determined by ``seed``."""
    config.validate()
    kernels, biases = [], []
    conv_index = 0
    for l in config.layers:
        if not isinstance(l, ConvLayer):
            continue
        rng = substream(seed, "init", conv_index)
        std = np.sqrt(2.0 / (l.kernel * l.kernel * l.in_channels))
        shape = (l.kernel, l.kernel, l.in_channels, l.out_channels)
        kernels.append((rng.standard_normal(shape) * std).astype(dtype))
        biases.append(np.zeros(l.out_channels, dtype=dtype))
        conv_index += 1
    return NetworkWeights(config, FilterParams(), kernels, biases, int(seed))


def collapse_rgb_filters(kernel: np.ndarray) -> np.ndarray:
    """Sum a (k, k, 3, C) first-layer kernel over its RGB input channels.

    Adapts a color-input first convolution to single-channel edge maps.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != 3:
        raise ShapeError(f"expected (k, k, 3, C) kernel, got shape {kernel.shape}")
    return kernel.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# Layer primitives (shift-and-matmul convolution; k*k small matmuls)
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, layer: ConvLayer, kernel: np.ndarray, bias: np.ndarray):
    k, s = layer.kernel, layer.stride
    pad = (k - 1) // 2 if layer.same_pad else 0
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    h, w, _ = xp.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    if oh < 1 or ow < 1:
        raise SizeError(f"input {x.shape[1]}x{x.shape[0]} too small for conv kernel {k}")
    out = np.tile(bias, (oh, ow, 1)).astype(x.dtype, copy=False)
    for dy in range(k):
        for dx in range(k):
            sl = xp[dy : dy + s * oh : s, dx : dx + s * ow : s, :]
            out += sl @ kernel[dy, dx]
    return out, xp


def _conv_backward(xp: np.ndarray, layer: ConvLayer, kernel: np.ndarray, grad_out: np.ndarray):
    k, s = layer.kernel, layer.stride
    pad = (k - 1) // 2 if layer.same_pad else 0
    oh, ow, _ = grad_out.shape
    grad_kernel = np.zeros_like(kernel)
    grad_xp = np.zeros_like(xp)
    for dy in range(k):
        for dx in range(k):
            sl = xp[dy : dy + s * oh : s, dx : dx + s * ow : s, :]
            grad_kernel[dy, dx] = np.tensordot(sl, grad_out, axes=([0, 1], [0, 1]))
            grad_xp[dy : dy + s * oh : s, dx : dx + s * ow : s, :] += grad_out @ kernel[dy, dx].T
    grad_bias = grad_out.sum(axis=(0, 1))
    if pad:
        grad_xp = grad_xp[pad:-pad, pad:-pad, :]
    return grad_kernel, grad_bias, grad_xp


def _pool_forward(x: np.ndarray):
    h, w, c = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise SizeError(f"activation {w}x{h} too small for 2x2 pooling")
    blocks = (
        x[: oh * 2, : ow * 2, :]
        .reshape(oh, 2, ow, 2, c)
        .transpose(0, 2, 4, 1, 3)
        .reshape(oh, ow, c, 4)
    )
    idx = blocks.argmax(axis=3)  # ties: first position in row-major (dy, dx) order
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
    return out, idx


def _pool_backward(idx: np.ndarray, in_shape, grad_out: np.ndarray):
    h, w, c = in_shape
    oh, ow, _ = grad_out.shape
    gb = np.zeros((oh, ow, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(gb, idx[..., None], grad_out[..., None], axis=3)
    gx = gb.reshape(oh, ow, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(oh * 2, ow * 2, c)
    if oh * 2 != h or ow * 2 != w:
        full = np.zeros(in_shape, dtype=grad_out.dtype)
        full[: oh * 2, : ow * 2, :] = gx
        return full
    return gx


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    weights_id: int
    revision: int
    layer_inputs: list = field(default_factory=list)  # input activation per layer
    conv_padded: list = field(default_factory=list)   # padded input per conv layer
    pool_indices: list = field(default_factory=list)  # argmax per pool layer
    mac_arg: np.ndarray | None = None
    prenorm: np.ndarray | None = None
    prenorm_norm: float = 0.0
    final_shape: tuple = ()


@dataclass
class NetGradients:
    """Gradients for the conv stack plus the gradient w.r.t. its input grid."""

    kernels: list
    biases: list
    grad_input: np.ndarray


def forward(weights: NetworkWeights, filtered: np.ndarray):
    """Run the conv stack, MAC-pool, and l2-normalize.

    ``filtered`` is the edge-filter output: an (H, W) or (H, W, C) grid.
    Returns (descriptor, cache); the descriptor is unit-norm or a
    ZeroDescriptorError is raised when every pooled activation is zero.
    """
    x = np.asarray(filtered, dtype=weights.dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ShapeError(f"expected 2-D or 3-D input, got shape {filtered.shape}")
    if x.shape[2] != weights.config.input_channels:
        raise ShapeError(
            f"input has {x.shape[2]} channels, network expects {weights.config.input_channels}"
        )
    cache = ForwardCache(weights_id=id(weights), revision=weights.revision)
    conv_i = 0
    for l in weights.config.layers:
        cache.layer_inputs.append(x)
        if isinstance(l, ConvLayer):
            x, xp = _conv_forward(x, l, weights.kernels[conv_i], weights.biases[conv_i])
            cache.conv_padded.append(xp)
            conv_i += 1
        elif l == RELU:
            x = np.maximum(x, 0)
        else:  # maxpool
            x, idx = _pool_forward(x)
            cache.pool_indices.append(idx)
    # MAC: per-channel global spatial max; ties route to the first
    # position in row-major order
    cache.final_shape = x.shape
    flat = x.reshape(-1, x.shape[2])
    arg = flat.argmax(axis=0)
    v = flat[arg, np.arange(flat.shape[1])]
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm == 0.0:
        raise ZeroDescriptorError("MAC vector is all zero; input carries no signal")
    cache.mac_arg = arg
    cache.prenorm = v
    cache.prenorm_norm = norm
    descriptor = (v.astype(np.float64) / norm).astype(weights.dtype)
    return descriptor, cache


def backward(weights: NetworkWeights, cache: ForwardCache, grad_descriptor: np.ndarray) -> NetGradients:
    """Exact gradients of descriptor . grad_descriptor w.r.t. kernels, biases, input."""
    if cache.weights_id != id(weights) or cache.revision != weights.revision:
        raise StateError("forward cache is stale; weights changed since forward()")
    g = np.asarray(grad_descriptor, dtype=weights.dtype)
    if g.shape != (weights.config.descriptor_dim,):
        raise ShapeError(f"grad_descriptor shape {g.shape} != ({weights.config.descriptor_dim},)")
    # through l2 normalization: (I - d d^T) / ||v||
    d = cache.prenorm.astype(np.float64) / cache.prenorm_norm
    g64 = g.astype(np.float64)
    gv = (g64 - np.dot(g64, d) * d) / cache.prenorm_norm
    gv = gv.astype(weights.dtype)
    # through MAC: all of a channel's gradient lands on its argmax pixel
    oh, ow, oc = cache.final_shape
    gflat = np.zeros((oh * ow, oc), dtype=weights.dtype)
    gflat[cache.mac_arg, np.arange(oc)] = gv
    gx = gflat.reshape(cache.final_shape)

    grad_kernels = [None] * len(weights.kernels)
    grad_biases = [None] * len(weights.biases)
    conv_i = len(weights.kernels)
    pool_i = len(cache.pool_indices)
    for layer_i in range(len(weights.config.layers) - 1, -1, -1):
        l = weights.config.layers[layer_i]
        x_in = cache.layer_inputs[layer_i]
        if isinstance(l, ConvLayer):
            conv_i -= 1
            gk, gb, gx = _conv_backward(cache.conv_padded[conv_i], l, weights.kernels[conv_i], gx)
            grad_kernels[conv_i] = gk
            grad_biases[conv_i] = gb
        elif l == RELU:
            gx = gx * (x_in > 0)
        else:
            pool_i -= 1
            gx = _pool_backward(cache.pool_indices[pool_i], x_in.shape, gx)
    return NetGradients(kernels=grad_kernels, biases=grad_biases, grad_input=gx)


# ---------------------------------------------------------------------------
# Weight file format ("EMWT" v1, little-endian)
# ---------------------------------------------------------------------------

_MAGIC = b"EMWT"
_VERSION = 1
_TAG_CONV, _TAG_RELU, _TAG_POOL = 1, 2, 3


def _write_weights(fh, weights: NetworkWeights) -> None:
    cfg = weights.config
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", _VERSION))
    fh.write(struct.pack("<Q", weights.seed & 0xFFFFFFFFFFFFFFFF))
    fh.write(struct.pack("<I", len(cfg.layers)))
    for l in cfg.layers:
        if isinstance(l, ConvLayer):
            fh.write(struct.pack("<BIIIIB", _TAG_CONV, l.kernel, l.in_channels,
                                 l.out_channels, l.stride, int(l.same_pad)))
        elif l == RELU:
            fh.write(struct.pack("<B", _TAG_RELU))
        else:
            fh.write(struct.pack("<B", _TAG_POOL))
    fh.write(struct.pack("<I", cfg.descriptor_dim))
    fp = weights.filter_params
    fh.write(struct.pack("<4d", fp.p, fp.tau, fp.beta, fp.out_scale))
    for kernel, bias in zip(weights.kernels, weights.biases):
        fh.write(np.ascontiguousarray(kernel, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("weight file truncated")
    return data


def _read_weights(fh) -> NetworkWeights:
    if _read_exact(fh, 4) != _MAGIC:
        raise FormatError("not a weight file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != _VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    (seed,) = struct.unpack("<Q", _read_exact(fh, 8))
    (n_layers,) = struct.unpack("<I", _read_exact(fh, 4))
    layers = []
    for _ in range(n_layers):
        (tag,) = struct.unpack("<B", _read_exact(fh, 1))
        if tag == _TAG_CONV:
            k, cin, cout, stride, same = struct.unpack("<IIIIB", _read_exact(fh, 17))
            layers.append(ConvLayer(cin, cout, kernel=k, stride=stride, same_pad=bool(same)))
        elif tag == _TAG_RELU:
            layers.append(RELU)
        elif tag == _TAG_POOL:
            layers.append(MAXPOOL)
        else:
            raise FormatError(f"unknown layer tag {tag}")
    (descriptor_dim,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        config = NetworkConfig(tuple(layers), descriptor_dim)
    except ConfigError as exc:
        raise FormatError(f"weight file config inconsistent: {exc}") from exc
    p, tau, beta, out_scale = struct.unpack("<4d", _read_exact(fh, 32))
    try:
        fp = FilterParams(p=p, tau=tau, beta=beta, out_scale=out_scale)
    except ValueError as exc:
        raise FormatError(f"weight file filter params invalid: {exc}") from exc
    kernels, biases = [], []
    for l in layers:
        if not isinstance(l, ConvLayer):
            continue
        nk = l.kernel * l.kernel * l.in_channels * l.out_channels
        kernels.append(
            np.frombuffer(_read_exact(fh, 4 * nk), dtype="<f4")
            .reshape(l.kernel, l.kernel, l.in_channels, l.out_channels)
            .copy()
        )
        biases.append(np.frombuffer(_read_exact(fh, 4 * l.out_channels), dtype="<f4").copy())
    return NetworkWeights(config, fp, kernels, biases, int(seed))


def save_weights(weights: NetworkWeights, sink) -> None:
    """Write to a path or binary file object. Round-trips bit-exactly."""
    if hasattr(sink, "write"):
        _write_weights(sink, weights)
        return
    buf = io.BytesIO()
    _write_weights(buf, weights)
    with open(sink, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(source) -> NetworkWeights:
    if hasattr(source, "read"):
        return _read_weights(source)
    with open(source, "rb") as fh:
        return _read_weights(fh)
