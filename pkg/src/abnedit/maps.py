"""Attention map construction and editing.

All maps are single-channel float rasters in [0,1]. Editing primitives
(resize, brush strokes, bubble densities, segmentation downsampling) are
pure functions; the binary AMAP encoding lives here too.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

AMAP_MAGIC = b"AMAP"


class AttentionMap:
    """Single-channel float32 raster, every value finite and in [0,1]."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"attention map must be 2-d, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("attention map must be non-empty")
        if not np.isfinite(arr).all():
            raise ValueError("attention map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(
                f"attention map values outside [0,1]: range "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        self.values = arr

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def __eq__(self, other):
        return isinstance(other, AttentionMap) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"AttentionMap({self.height}x{self.width})"


@dataclass
class BrushStroke:
    """One brush gesture: a polyline in display pixels with a radius and strength."""

    mode: str  # "add" | "remove"
    points: list  # [(x, y), ...] in display coordinates
    radius: float
    strength: float

    def validate(self, display_size):
        if self.mode not in ("add", "remove"):
            raise ValueError(f"stroke mode must be add|remove, got {self.mode!r}")
        if self.radius < 1:
            raise ValueError(f"stroke radius must be >= 1, got {self.radius}")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError(f"stroke strength must lie in (0,1], got {self.strength}")
        if not self.points:
            raise ValueError("stroke has no points")
        h, w = display_size
        for x, y in self.points:
            if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                raise ValueError(f"stroke point ({x}, {y}) outside {w}x{h} display")


@dataclass(frozen=True)
class BubbleAnnotation:
    """Circular region in normalized [0,1]^2 coordinates."""

    center: tuple  # (x, y)
    radius: float
    annotator_id: str

    def validate(self):
        x, y = self.center
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"bubble center ({x}, {y}) outside [0,1]^2")
        if self.radius <= 0:
            raise ValueError(f"bubble radius must be > 0, got {self.radius}")


class SegmentationMask:
    """Binary raster; 1 marks the annotated region."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"segmentation mask must be non-empty 2-d, got shape {arr.shape}")
        uniq = np.unique(arr)
        if not np.isin(uniq, (0, 1)).all():
            raise ValueError(f"segmentation mask values must be 0/1, got {uniq[:8]}")
        self.values = arr.astype(np.uint8)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def resize_map(amap: AttentionMap, h: int, w: int) -> AttentionMap:
    """Bilinear resize with edge clamping (half-pixel centers)."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be >= 1, got {h}x{w}")
    src = amap.values
    if (h, w) == src.shape:
        return AttentionMap(src.copy())
    out = _bilinear(src.astype(np.float64), h, w)
    return AttentionMap(np.clip(out, 0.0, 1.0).astype(np.float32))


def _bilinear(src, h, w):
    sh, sw = src.shape
    ys = (np.arange(h) + 0.5) * (sh / h) - 0.5
    xs = (np.arange(w) + 0.5) * (sw / w) - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = ys - y0
    tx = xs - x0
    y0c = np.clip(y0, 0, sh - 1)
    y1c = np.clip(y0 + 1, 0, sh - 1)
    x0c = np.clip(x0, 0, sw - 1)
    x1c = np.clip(x0 + 1, 0, sw - 1)
    top = (1 - tx) * src[np.ix_(y0c, x0c)] + tx * src[np.ix_(y0c, x1c)]
    bot = (1 - tx) * src[np.ix_(y1c, x0c)] + tx * src[np.ix_(y1c, x1c)]
    return (1 - ty)[:, None] * top + ty[:, None] * bot


def stroke_falloff(stroke: BrushStroke, display_size) -> np.ndarray:
    """Per-cell cosine falloff in [0,1]: 1 on the stroke path, 0 at the radius."""
    stroke.validate(display_size)
    h, w = display_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = np.full((h, w), np.inf)
    pts = [(float(x), float(y)) for x, y in stroke.points]
    segments = list(zip(pts, pts[1:])) if len(pts) > 1 else [(pts[0], pts[0])]
    for (ax, ay), (bx, by) in segments:
        dx, dy = bx - ax, by - ay
        len2 = dx * dx + dy * dy
        if len2 == 0.0:
            cx, cy = ax, ay
            d2seg = (xx - cx) ** 2 + (yy - cy) ** 2
        else:
            t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / len2, 0.0, 1.0)
            d2seg = (xx - (ax + t * dx)) ** 2 + (yy - (ay + t * dy)) ** 2
        d2 = np.minimum(d2, d2seg)
    d = np.sqrt(d2)
    r = float(stroke.radius)
    return np.where(d < r, 0.5 * (1.0 + np.cos(np.pi * d / r)), 0.0)


def apply_stroke(amap: AttentionMap, stroke: BrushStroke, display_size) -> AttentionMap:
    """Move values toward 1 (add) or 0 (remove) under the brush footprint.

    The map must already be at display resolution; each cell is pulled
    toward the target by strength * falloff.
    """
    h, w = display_size
    if (amap.height, amap.width) != (h, w):
        raise ValueError(
            f"map is {amap.height}x{amap.width} but display is {h}x{w}; resize first"
        )
    fall = stroke_falloff(stroke, display_size)
    v = amap.values.astype(np.float64)
    pull = stroke.strength * fall
    if stroke.mode == "add":
        v = v + pull * (1.0 - v)
    else:
        v = v * (1.0 - pull)
    return AttentionMap(np.clip(v, 0.0, 1.0).astype(np.float32))


def bubble_density(bubbles, h: int, w: int, bandwidth: float = 0.5) -> np.ndarray:
    """Unnormalized Gaussian KDE of bubble annotations on an h x w grid.

    Each bubble contributes a normalized Gaussian with sigma =
    bandwidth * radius, so every annotation carries equal total mass.
    Bubbles are summed in a canonical order, making the result exactly
    permutation-invariant.
    """
    if not bubbles:
        raise ValueError("bubble list is empty")
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    for b in bubbles:
        b.validate()
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dens = np.zeros((h, w), dtype=np.float64)
    ordered = sorted(bubbles, key=lambda b: (b.center[0], b.center[1], b.radius,
                                             b.annotator_id))
    for b in ordered:
        cx, cy = b.center
        sigma = bandwidth * b.radius
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        dens += np.exp(-d2 / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma)
    return dens


def bubbles_to_map(bubbles, h: int, w: int, bandwidth: float = 0.5) -> AttentionMap:
    """KDE of the bubbles min-max normalized to [0,1]."""
    dens = bubble_density(bubbles, h, w, bandwidth)
    return AttentionMap(_minmax(dens))


def segmentation_to_map(mask: SegmentationMask, h: int, w: int) -> AttentionMap:
    """Area-average resample of a binary mask, then min-max normalized.

    A constant mask (all zero or all one) is passed through unchanged so
    the degenerate normalization never divides by zero.
    """
    if h < 1 or w < 1:
        raise ValueError(f"target size must be >= 1, got {h}x{w}")
    down = area_resample(mask.values.astype(np.float64), h, w)
    return AttentionMap(_minmax(down))


def area_resample(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Exact box-filter resample (each output cell averages its source area)."""
    out = _area_resample_axis(arr.astype(np.float64), h, axis=0)
    return _area_resample_axis(out, w, axis=1)


def _area_resample_axis(arr, new, axis):
    n = arr.shape[axis]
    moved = np.moveaxis(arr, axis, 0)
    # cumulative integral of the piecewise-constant signal; linear interp is exact
    cum = np.zeros((n + 1,) + moved.shape[1:], dtype=np.float64)
    np.cumsum(moved, axis=0, out=cum[1:])
    edges = np.arange(new + 1, dtype=np.float64) * (n / new)
    idx = np.clip(np.floor(edges).astype(int), 0, n - 1)
    frac = edges - idx
    vals = cum[idx] + frac.reshape((-1,) + (1,) * (moved.ndim - 1)) * (
        cum[idx + 1] - cum[idx]
    )
    widths = np.diff(edges).reshape((-1,) + (1,) * (moved.ndim - 1))
    out = np.diff(vals, axis=0) / widths
    return np.moveaxis(out, 0, axis)


def _minmax(arr):
    lo = float(arr.min())
    hi = float(arr.max())
    if hi > lo:
        return np.clip((arr - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def jet_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] -> RGB in [0,1] with the classic jet ramp, shape (..., 3)."""
    v = np.asarray(values, dtype=np.float64)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(image: np.ndarray, amap: AttentionMap, alpha: float) -> np.ndarray:
    """Alpha-blend a jet rendering of the map over an image.

    image is (H,W) grayscale or (H,W,3) RGB in [0,1]; the result is
    always (H,W,3). Display-only; the map itself is untouched.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0,1], got {alpha}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H,W) or (H,W,3), got shape {image.shape}")
    h, w = img.shape[:2]
    if (amap.height, amap.width) != (h, w):
        amap = resize_map(amap, h, w)
    heat = jet_colormap(amap.values)
    return ((1.0 - alpha) * img + alpha * heat).astype(np.float32)


def encode_map(amap: AttentionMap) -> bytes:
    """AMAP binary encoding: magic, u32 height, u32 width, float32 LE values."""
    head = AMAP_MAGIC + struct.pack("<II", amap.height, amap.width)
    body = amap.values.astype("<f4").tobytes()
    return head + body


def decode_map(blob: bytes) -> AttentionMap:
    if len(blob) < 12:
        raise ValueError(f"AMAP blob truncated: {len(blob)} bytes, header needs 12")
    if blob[:4] != AMAP_MAGIC:
        raise ValueError(f"bad AMAP magic {blob[:4]!r} at byte 0")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise ValueError(
            f"AMAP payload for {h}x{w} map must be {expected} bytes, got {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w)
    return AttentionMap(values.copy())


def save_map(amap: AttentionMap, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_map(amap))


def load_map(path) -> AttentionMap:
    with open(path, "rb") as f:
        return decode_map(f.read())


def parse_bubbles(text: str):
    """Parse `x y radius annotator_id` lines into BubbleAnnotations."""
    bubbles = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'x y radius annotator_id', got {line!r}")
        try:
            x, y, r = float(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric bubble fields in {line!r}")
        b = BubbleAnnotation(center=(x, y), radius=r, annotator_id=parts[3])
        b.validate()
        bubbles.append(b)
    return bubbles


def format_bubbles(bubbles) -> str:
    return "".join(
        f"{b.center[0]:.6f} {b.center[1]:.6f} {b.radius:.6f} {b.annotator_id}\n"
        for b in bubbles
    )


def load_bubbles(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_bubbles(f.read())


def save_bubbles(bubbles, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_bubbles(bubbles))
