"""Edge maps and sketches: loading, normalization, and geometric transforms.

An edge map is a 2-D grid of per-pixel edge strengths in [0, 1]; 0 means
background. Sketches are edge maps whose strengths are exactly 0 or 1.
Every modality (photo edges, line drawings, sketches) is unified at this
level before it reaches the descriptor network.

Raster interchange format is binary PGM ("P5", maxval 255); PNG is also
accepted. The strength <-> pixel mapping is ``s = pixel / 255`` exactly.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, DimensionError, ModalityError

#: Pyramid rescale factors, ascending. Together with mirroring they produce
#: the 10 instances used by multi-scale description.
PYRAMID_SCALES = (0.5, 1.0 / math.sqrt(2.0), 1.0, math.sqrt(2.0), 2.0)


@dataclass(frozen=True)
class EdgeMap:
    """A non-empty 2-D grid of edge strengths, each in [0, 1].

    ``strengths`` is row-major with shape (height, width), dtype float64.
    """

    strengths: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.strengths, dtype=np.float64)
        if s.ndim != 2 or s.size == 0:
            raise DimensionError(f"edge map must be a non-empty 2-D grid, got shape {s.shape}")
        if np.isnan(s).any() or s.min() < 0.0 or s.max() > 1.0:
            raise ValueError("edge strengths must lie in [0, 1]")
        object.__setattr__(self, "strengths", s)

    @property
    def height(self) -> int:
        return self.strengths.shape[0]

    @property
    def width(self) -> int:
        return self.strengths.shape[1]

    def is_binary(self) -> bool:
        """True when every strength is exactly 0 or exactly 1 (a sketch)."""
        s = self.strengths
        return bool(np.all((s == 0.0) | (s == 1.0)))


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (for positive x)."""
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Raster encoding / decoding
# ---------------------------------------------------------------------------

def _parse_pgm(data: bytes) -> np.ndarray:
    pos = 2  # past the "P5" magic
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise DecodeError(f"malformed PGM header token {token!r}")
        fields.append(int(token))
    pos += 1  # exactly one whitespace byte separates maxval from the raster
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DimensionError(f"PGM declares empty raster {width}x{height}")
    if maxval != 255:
        raise ModalityError(f"expected 8-bit raster (maxval 255), got maxval {maxval}")
    n = width * height
    if len(data) - pos < n:
        raise DecodeError("PGM raster truncated")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(height, width)


def _decode_with_pillow(data: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            mode = img.mode
            if mode != "L":
                raise ModalityError(f"expected single-channel 8-bit raster, got mode {mode!r}")
            return np.asarray(img, dtype=np.uint8)
    except ModalityError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode raster: {exc}") from exc


def load_edge_map(data: bytes) -> EdgeMap:
    """Decode an 8-bit single-channel raster (PGM P5 or PNG) into an EdgeMap.

    Strengths are pixel/255, exact division.
    """
    if not isinstance(data, (bytes, bytearray)) or len(data) < 2:
        raise DecodeError("raster data too short")
    data = bytes(data)
    magic = data[:2]
    if magic == b"P5":
        pixels = _parse_pgm(data)
    elif magic in (b"P3", b"P6"):
        raise ModalityError("color PNM rasters are not edge maps; expected single channel")
    elif magic[:1] == b"P" and magic[1:2].isdigit():
        raise DecodeError(f"unsupported PNM variant {magic!r}; binary P5 required")
    else:
        pixels = _decode_with_pillow(data)
    return EdgeMap(pixels.astype(np.float64) / 255.0)


def encode_pgm(m: EdgeMap) -> bytes:
    """Encode as binary PGM (P5, maxval 255); strengths quantize to round(s*255)."""
    pixels = np.rint(m.strengths * 255.0).astype(np.uint8)
    header = f"P5\n{m.width} {m.height}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def read_edge_map(path) -> EdgeMap:
    with open(path, "rb") as fh:
        return load_edge_map(fh.read())


def write_edge_map(m: EdgeMap, path) -> None:
    """Write as PGM, or as PNG when the path ends in .png."""
    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        pixels = np.rint(m.strengths * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(path, format="PNG")
        return
    with open(path, "wb") as fh:
        fh.write(encode_pgm(m))


# ---------------------------------------------------------------------------
# Edge detection fallback
# ---------------------------------------------------------------------------

def detect_edges_fallback(image) -> EdgeMap:
    """Gradient-magnitude edge detector (3x3 Sobel), peak-normalized to [0, 1].

    Stand-in for a proper learned edge detector: adequate for synthetic data
    and smoke tests, not for benchmark-quality edge maps. A constant image
    maps to an all-zero edge map. Borders are handled by edge replication so
    a constant image produces no spurious frame response.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ModalityError(f"expected a single-channel raster, got {img.ndim} dims")
    if img.size == 0:
        raise DimensionError("empty raster")
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0.0:
        mag /= peak
    return EdgeMap(np.clip(mag, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Sketch preprocessing: morphological thinning + dilation
# ---------------------------------------------------------------------------

def _thin_two_subiteration(mask: np.ndarray) -> np.ndarray:
    """Morphological thinning of a boolean mask to 1-px skeletons.

    Two-subiteration parallel thinning (Guo-Hall): each half-pass deletes
    boundary pixels that keep the skeleton connected, alternating between
    east/south and west/north boundaries. Unlike cruder schemes it does not
    eat the end pixel off 1-px stroke tips, so thinning followed by 3x3
    dilation is a fixed point on already-uniform strokes.
    """
    img = np.pad(mask.astype(bool), 1)
    while True:
        changed = False
        for subiter in (0, 1):
            # neighbours x1..x8 counter-clockwise starting east
            x1 = img[1:-1, 2:]
            x2 = img[:-2, 2:]
            x3 = img[:-2, 1:-1]
            x4 = img[:-2, :-2]
            x5 = img[1:-1, :-2]
            x6 = img[2:, :-2]
            x7 = img[2:, 1:-1]
            x8 = img[2:, 2:]
            crossings = (
                (~x1 & (x2 | x3)).astype(np.int32)
                + (~x3 & (x4 | x5)).astype(np.int32)
                + (~x5 & (x6 | x7)).astype(np.int32)
                + (~x7 & (x8 | x1)).astype(np.int32)
            )
            n1 = (
                (x1 | x2).astype(np.int32) + (x3 | x4).astype(np.int32)
                + (x5 | x6).astype(np.int32) + (x7 | x8).astype(np.int32)
            )
            n2 = (
                (x2 | x3).astype(np.int32) + (x4 | x5).astype(np.int32)
                + (x6 | x7).astype(np.int32) + (x8 | x1).astype(np.int32)
            )
            n = np.minimum(n1, n2)
            if subiter == 0:
                boundary = ~((x2 | x3 | ~x8) & x1)
            else:
                boundary = ~((x6 | x7 | ~x4) & x5)
            c = img[1:-1, 1:-1]
            kill = c & (crossings == 1) & (n >= 2) & (n <= 3) & boundary
            if kill.any():
                c[kill] = False
                changed = True
        if not changed:
            return img[1:-1, 1:-1].copy()


def _dilate_3x3(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy : dy + h, dx : dx + w]
    return out


def preprocess_sketch(s: EdgeMap) -> EdgeMap:
    """Normalize stroke width: thin strokes to 1-px skeletons, then dilate 3x3.

    Unifies sketch inputs (pen strokes, thin lines, brush drawings) into
    uniform 3-px strokes. Input must be binary; output is binary.
    """
    if not s.is_binary():
        raise ModalityError("sketch must be binary (strengths exactly 0 or 1)")
    mask = s.strengths == 1.0
    out = _dilate_3x3(_thin_two_subiteration(mask))
    return EdgeMap(out.astype(np.float64))


# ---------------------------------------------------------------------------
# Geometric transforms
# ---------------------------------------------------------------------------

def _resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = values.shape
    if out_h == in_h and out_w == in_w:
        return values.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    v00 = values[np.ix_(y0c, x0c)]
    v01 = values[np.ix_(y0c, x1c)]
    v10 = values[np.ix_(y1c, x0c)]
    v11 = values[np.ix_(y1c, x1c)]
    out = (
        v00 * (1.0 - wy) * (1.0 - wx)
        + v01 * (1.0 - wy) * wx
        + v10 * wy * (1.0 - wx)
        + v11 * wy * wx
    )
    return np.clip(out, 0.0, 1.0)


def resize_max_side(m: EdgeMap, target: int) -> EdgeMap:
    """Resize so the longer side equals ``target`` exactly, aspect preserved.

    The minor side is rounded half up (minimum 1). Bilinear interpolation,
    clamped to [0, 1]. Inputs smaller than the target are upscaled.
    """
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = m.height, m.width
    if max(h, w) == target:
        return EdgeMap(m.strengths.copy())
    scale = target / max(h, w)
    if w >= h:
        out_w = target
        out_h = max(1, round_half_up(h * scale))
    else:
        out_h = target
        out_w = max(1, round_half_up(w * scale))
    return EdgeMap(_resize_bilinear(m.strengths, out_h, out_w))


def rescale(m: EdgeMap, factor: float) -> EdgeMap:
    """Rescale both dimensions by ``factor`` with round-half-up."""
    if factor == 1.0:
        return EdgeMap(m.strengths.copy())
    out_h = round_half_up(m.height * factor)
    out_w = round_half_up(m.width * factor)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"rescale by {factor} degenerates {m.width}x{m.height} to zero size")
    return EdgeMap(_resize_bilinear(m.strengths, out_h, out_w))


def pad_zeros(m: EdgeMap, border: int) -> EdgeMap:
    """Zero-pad by ``border`` pixels on every side (avoids border effects)."""
    if border < 0:
        raise ValueError(f"border must be >= 0, got {border}")
    if border == 0:
        return EdgeMap(m.strengths.copy())
    return EdgeMap(np.pad(m.strengths, border))


def mirror(m: EdgeMap) -> EdgeMap:
    """Horizontal flip (columns reversed). An involution."""
    return EdgeMap(m.strengths[:, ::-1].copy())


def scale_pyramid(m: EdgeMap) -> list[EdgeMap]:
    """The 10 multi-scale instances of a map: 5 fixed scales x 2 mirror states.

    Order is deterministic: scales ascending, each original before its
    mirrored counterpart. The caller is expected to have normalized the
    maximum side already (see :func:`resize_max_side`).
    """
    out: list[EdgeMap] = []
    for factor in PYRAMID_SCALES:
        inst = rescale(m, factor)
        out.append(inst)
        out.append(mirror(inst))
    return out


def binarize_random(m: EdgeMap, rng) -> EdgeMap:
    """Threshold at t ~ Uniform[0, 0.2] and binarize (strength > t -> 1).

    The strict comparison keeps exact zeros at 0 even when t = 0. Used as a
    training-time abstraction step that mimics sketch-to-edge-map asymmetry.
    """
    t = float(rng.uniform(0.0, 0.2))
    return EdgeMap((m.strengths > t).astype(np.float64))
