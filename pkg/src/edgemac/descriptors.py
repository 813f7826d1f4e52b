"""Multi-scale descriptor extraction and supervised whitening.

Extraction pipeline per input: resize to a fixed maximum side, build the
10-instance scale/mirror pyramid, zero-pad each instance, filter the edge
strengths, and run the network. The 10 unit descriptors are either kept
separate (instance-matching search protocol) or sum-aggregated and
re-normalized to one vector per image.

Whitening is learned from matching descriptor pairs: it maps intra-pair
difference directions to an isotropic covariance and rotates onto the
principal axes of the (projected) full covariance, which makes cosine
comparisons across the collection more reliable.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .convnet import NetworkWeights, forward
from .edgemap import EdgeMap, pad_zeros, resize_max_side, scale_pyramid
from .errors import (
    AggregationError,
    FormatError,
    ModalityError,
    SampleError,
    ShapeError,
    WhiteningError,
    ZeroDescriptorError,
)
from .filterlayer import filter_forward

EXTRACT_MAX_SIDE = 227
EXTRACT_PAD = 30
PYRAMID_INSTANCES = 10


def extract_edgemac(weights: NetworkWeights, m: EdgeMap, is_sketch: bool = False,
                    max_side: int = EXTRACT_MAX_SIDE, pad_border: int = EXTRACT_PAD) -> np.ndarray:
    """The 10 multi-scale unit descriptors of one edge map, pyramid order.

    Sketch inputs must already be binary (stroke-width normalization applied
    beforehand); they then go through the exact same pipeline as edge maps.
    Returns an array of shape (10, descriptor_dim).
    """
    if is_sketch and not m.is_binary():
        raise ModalityError("sketch input must be binary; run sketch preprocessing first")
    base = resize_max_side(m, max_side)
    out = []
    for idx, inst in enumerate(scale_pyramid(base)):
        padded = pad_zeros(inst, pad_border)
        filtered = filter_forward(padded, weights.filter_params)
        try:
            desc, _ = forward(weights, filtered)
        except ZeroDescriptorError as exc:
            raise ZeroDescriptorError(f"pyramid instance {idx}: {exc}") from exc
        out.append(desc.astype(np.float32))
    return np.stack(out)


def aggregate_sum(instances: np.ndarray) -> np.ndarray:
    """Sum the instance descriptors elementwise and re-normalize to unit length."""
    s = np.asarray(instances, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise ShapeError(f"expected (n_instances, dim) descriptors, got shape {s.shape}")
    total = s.sum(axis=0)
    norm = float(np.linalg.norm(total))
    if norm == 0.0:
        raise AggregationError("instance descriptors cancel; aggregate has zero norm")
    return (total / norm).astype(np.float32)


# ---------------------------------------------------------------------------
# Supervised whitening
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray
    projection: np.ndarray


def learn_whitening(pairs, eps: float | None = None) -> WhiteningTransform:
    """Learn a whitening transform from matching descriptor pairs.

    The projection is R @ S where S is the inverse square root of the
    intra-pair difference covariance (regularized by eps) and R rotates onto
    the eigenbasis of the projected full covariance, eigenvalues descending.
    After the transform, intra-pair differences have identity covariance
    (up to the regularization).

    eps defaults to 1e-6 * trace(C) / dim, which adapts to the descriptor
    scale and keeps the inverse square root well-defined for small samples.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise SampleError(f"need at least 2 matching pairs, got {len(pairs)}")
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    ys = np.stack([np.asarray(y, dtype=np.float64) for _, y in pairs])
    if xs.shape != ys.shape or xs.ndim != 2:
        raise ShapeError("pairs must be equal-length 1-D descriptors")
    dim = xs.shape[1]
    diffs = xs - ys
    c_intra = diffs.T @ diffs / len(pairs)
    if eps is None:
        trace = float(np.trace(c_intra))
        eps = 1e-6 * trace / dim if trace > 0.0 else 1e-12
    evals, evecs = np.linalg.eigh(c_intra + eps * np.eye(dim))
    s = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
    everything = np.concatenate([xs, ys])
    mean = everything.mean(axis=0)
    centered = everything - mean
    c_full = centered.T @ centered / everything.shape[0]
    proj_cov = s @ c_full @ s.T
    pevals, pevecs = np.linalg.eigh(proj_cov)
    order = np.argsort(pevals)[::-1]
    r = pevecs[:, order].T
    # fix eigenvector signs so the learned transform is reproducible
    flips = np.where(r[np.arange(dim), np.abs(r).argmax(axis=1)] < 0.0, -1.0, 1.0)
    r = r * flips[:, None]
    return WhiteningTransform(mean=mean, projection=r @ s)


def apply_whitening(t: WhiteningTransform, d: np.ndarray) -> np.ndarray:
    """Center, project, and re-normalize one descriptor."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != t.mean.shape:
        raise ShapeError(f"descriptor shape {d.shape} != transform dim {t.mean.shape}")
    v = t.projection @ (d - t.mean)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise WhiteningError("whitened descriptor has zero norm")
    return (v / norm).astype(np.float32)


# ---------------------------------------------------------------------------
# Descriptor file format ("EMDC" v1, little-endian)
# ---------------------------------------------------------------------------

_MAGIC = b"EMDC"
_VERSION = 1
_ALLOWED_PER_ITEM = (1, PYRAMID_INSTANCES)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("descriptor file truncated")
    return data


def _write_descriptors(fh, ids, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    if vectors.ndim == 2:
        vectors = vectors[:, None, :]
    if vectors.ndim != 3:
        raise ShapeError(f"expected (items, per_item, dim) descriptors, got {vectors.shape}")
    n, per_item, dim = vectors.shape
    if per_item not in _ALLOWED_PER_ITEM:
        raise FormatError(f"per-item descriptor count must be one of {_ALLOWED_PER_ITEM}")
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} ids for {n} descriptor rows")
    fh.write(_MAGIC)
    fh.write(struct.pack("<IIBQ", _VERSION, dim, per_item, n))
    fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    for item_id in ids:
        raw = str(item_id).encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _read_descriptors(fh):
    if _read_exact(fh, 4) != _MAGIC:
        raise FormatError("not a descriptor file (bad magic)")
    version, dim, per_item, n = struct.unpack("<IIBQ", _read_exact(fh, 17))
    if version != _VERSION:
        raise FormatError(f"unsupported descriptor file version {version}")
    if per_item not in _ALLOWED_PER_ITEM:
        raise FormatError(f"invalid per-item count {per_item}")
    if dim < 1:
        raise FormatError("descriptor dim must be positive")
    count = n * per_item * dim
    vectors = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(n, per_item, dim).copy()
    ids = []
    for _ in range(n):
        (length,) = struct.unpack("<I", _read_exact(fh, 4))
        ids.append(_read_exact(fh, length).decode("utf-8"))
    return ids, vectors


def save_descriptors(sink, ids, vectors: np.ndarray) -> None:
    """Write a descriptor file; ``vectors`` is (items, dim) or (items, per_item, dim)."""
    if hasattr(sink, "write"):
        _write_descriptors(sink, ids, vectors)
        return
    buf = io.BytesIO()
    _write_descriptors(buf, ids, vectors)
    with open(sink, "wb") as fh:
        fh.write(buf.getvalue())


def load_descriptors(source):
    """Read a descriptor file; returns (ids, vectors of shape (items, per_item, dim))."""
    if hasattr(source, "read"):
        return _read_descriptors(source)
    with open(source, "rb") as fh:
        return _read_descriptors(fh)


# ---------------------------------------------------------------------------
# Whitening transform file format ("EMWH" v1, little-endian)
# ---------------------------------------------------------------------------

_WH_MAGIC = b"EMWH"


def save_whitening(sink, t: WhiteningTransform) -> None:
    dim = t.mean.shape[0]
    payload = (
        _WH_MAGIC
        + struct.pack("<II", _VERSION, dim)
        + np.ascontiguousarray(t.mean, dtype="<f8").tobytes()
        + np.ascontiguousarray(t.projection, dtype="<f8").tobytes()
    )
    if hasattr(sink, "write"):
        sink.write(payload)
        return
    with open(sink, "wb") as fh:
        fh.write(payload)


def load_whitening(source) -> WhiteningTransform:
    if hasattr(source, "read"):
        fh = source
        data = fh.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != _WH_MAGIC:
        raise FormatError("not a whitening file (bad magic)")
    version, dim = struct.unpack("<II", _read_exact(buf, 8))
    if version != _VERSION:
        raise FormatError(f"unsupported whitening file version {version}")
    mean = np.frombuffer(_read_exact(buf, 8 * dim), dtype="<f8").copy()
    projection = np.frombuffer(_read_exact(buf, 8 * dim * dim), dtype="<f8").reshape(dim, dim).copy()
    return WhiteningTransform(mean=mean, projection=projection)
