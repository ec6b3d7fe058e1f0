"""Synthetic glyph dataset: generation, image and manifest I/O, oracle maps.

Images are 64x64 grayscale PGMs holding one target glyph (the class) plus,
with some probability, one distractor glyph of another class placed in a
disjoint region. Every sample records the bounding boxes, so a ground-truth
"look here" attention map can be derived for any sample.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .maps import AttentionMap, _minmax

GLYPH_NAMES = ("disk", "square", "triangle", "cross")
IMAGE_SIZE = (64, 64)
MANIFEST_HEADER = "# glyphs-manifest v1"


@dataclass
class SyntheticSample:
    sample_id: str
    image: np.ndarray  # uint8 (H, W)
    label: int
    target_box: tuple  # (x0, y0, x1, y1) half-open pixel bounds
    distractor_box: tuple | None = None


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    label: int
    target_box: tuple
    distractor_box: tuple | None = None


@dataclass
class DatasetManifest:
    split: str
    seed: int
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids in manifest: {dupes[:5]}")


def _glyph_mask(kind, h, w, cx, cy, s):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= s * s
    if kind == "square":
        return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    if kind == "triangle":
        # upward triangle inscribed in the 2s x 2s box
        top = (cx, cy - s)
        left = (cx - s, cy + s)
        right = (cx + s, cy + s)
        m = np.ones((h, w), dtype=bool)
        for (ax, ay), (bx, by) in ((top, right), (right, left), (left, top)):
            m &= (bx - ax) * (yy - ay) - (by - ay) * (xx - ax) >= 0
        return m
    if kind == "cross":
        t = s / 3.0
        horiz = (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= t)
        vert = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= s)
        return horiz | vert
    raise ValueError(f"unknown glyph kind {kind!r}")


def glyph_area(kind, s):
    """Analytic area of a glyph with half-extent s, for sanity checks."""
    if kind == "disk":
        return np.pi * s * s
    if kind == "square":
        return 4.0 * s * s
    if kind == "triangle":
        return 2.0 * s * s
    if kind == "cross":
        t = s / 3.0
        return 2.0 * (2 * s) * (2 * t) - (2 * t) ** 2
    raise ValueError(f"unknown glyph kind {kind!r}")


def _mask_box(mask):
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _boxes_disjoint(a, b, margin=2):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return (
        ax1 + margin <= bx0 or bx1 + margin <= ax0
        or ay1 + margin <= by0 or by1 + margin <= ay0
    )


def render_sample(rng, label, num_classes, distractor_rate, h, w):
    """Draw one sample. Consumes a deterministic number-stream from rng."""
    s = rng.uniform(8.0, 13.0)
    cx = rng.uniform(s + 1.0, w - s - 2.0)
    cy = rng.uniform(s + 1.0, h - s - 2.0)
    target = _glyph_mask(GLYPH_NAMES[label], h, w, cx, cy, s)
    tbox = _mask_box(target)

    canvas = np.full((h, w), 0.08, dtype=np.float64)
    amp = rng.uniform(0.70, 0.95)
    canvas[target] = amp

    dbox = None
    if rng.random() < distractor_rate:
        dlabel = int((label + 1 + rng.integers(0, num_classes - 1)) % num_classes)
        for _ in range(40):
            ds = rng.uniform(6.0, 11.0)
            dcx = rng.uniform(ds + 1.0, w - ds - 2.0)
            dcy = rng.uniform(ds + 1.0, h - ds - 2.0)
            dmask = _glyph_mask(GLYPH_NAMES[dlabel], h, w, dcx, dcy, ds)
            cand = _mask_box(dmask)
            if _boxes_disjoint(tbox, cand):
                canvas[dmask] = rng.uniform(0.70, 0.95)
                dbox = cand
                break

    canvas += rng.normal(0.0, 0.08, size=(h, w))
    img = np.clip(np.round(np.clip(canvas, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return img, tbox, dbox


def generate(n, num_classes=4, seed=0, distractor_rate=0.5, split="train",
             image_size=IMAGE_SIZE):
    """Generate n samples deterministically. Labels round-robin over classes."""
    if not 1 <= num_classes <= len(GLYPH_NAMES):
        raise ValueError(f"num_classes must lie in [1, {len(GLYPH_NAMES)}], got {num_classes}")
    if not 0.0 <= distractor_rate <= 1.0:
        raise ValueError(f"distractor_rate must lie in [0,1], got {distractor_rate}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = image_size
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = i % num_classes
        img, tbox, dbox = render_sample(rng, label, num_classes, distractor_rate, h, w)
        samples.append(SyntheticSample(
            sample_id=f"{split}_{i:04d}", image=img, label=label,
            target_box=tbox, distractor_box=dbox))
    return samples


def save_dataset(samples, root, split, seed):
    """Write PGMs under root/images/ and a manifest at root/<split>.tsv."""
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    entries = []
    for s in samples:
        rel = os.path.join("images", f"{s.sample_id}.pgm")
        save_pgm(s.image, os.path.join(root, rel))
        entries.append(ManifestEntry(
            sample_id=s.sample_id, path=rel, label=s.label,
            target_box=s.target_box, distractor_box=s.distractor_box))
    manifest = DatasetManifest(split=split, seed=seed, entries=entries)
    mpath = os.path.join(root, f"{split}.tsv")
    save_manifest(manifest, mpath)
    return mpath


def oracle_map(sample, h, w, image_size=IMAGE_SIZE):
    """Ground-truth map: 1 over the target box, gaussian-blurred, renormalized."""
    return box_to_map(sample.target_box, image_size, h, w)


def box_to_map(box, image_size, h, w, sigma=1.0):
    ih, iw = image_size
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= iw and 0 <= y0 < y1 <= ih):
        raise ValueError(f"box {box} outside {iw}x{ih} image")
    cy = (np.arange(h, dtype=np.float64) + 0.5) * (ih / h)
    cx = (np.arange(w, dtype=np.float64) + 0.5) * (iw / w)
    inside = ((cy >= y0) & (cy < y1))[:, None] & ((cx >= x0) & (cx < x1))[None, :]
    raw = inside.astype(np.float64)
    blurred = gaussian_filter(raw, sigma=sigma, mode="nearest", truncate=3.0)
    return AttentionMap(_minmax(blurred))


# ---------------------------------------------------------------------------
# netpbm image I/O (binary PGM/PPM, maxval 255)

def _read_pnm_tokens(data, count, path):
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ValueError(f"{path}: truncated header at byte {pos}")
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def load_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: expected P5 magic, got {data[:2]!r} at byte 0")
    tokens, offset = _read_pnm_tokens(data[2:], 3, path)
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    body = data[2 + offset :]
    if len(body) < h * w:
        raise ValueError(
            f"{path}: pixel data truncated at byte {2 + offset + len(body)}, "
            f"need {h * w} bytes"
        )
    return np.frombuffer(body[: h * w], dtype=np.uint8).reshape(h, w).copy()


def save_pgm(image, path):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM image must be uint8 (H,W), got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise ValueError(f"{path}: expected P6 magic, got {data[:2]!r} at byte 0")
    tokens, offset = _read_pnm_tokens(data[2:], 3, path)
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    body = data[2 + offset :]
    if len(body) < h * w * 3:
        raise ValueError(f"{path}: pixel data truncated, need {h * w * 3} bytes")
    return np.frombuffer(body[: h * w * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def save_ppm(image, path):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM image must be uint8 (H,W,3), got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


# ---------------------------------------------------------------------------
# manifest I/O (tab-separated, one sample per line)

def _fmt_box(box):
    return "-" if box is None else ",".join(str(v) for v in box)


def _parse_box(text, lineno):
    if text == "-":
        return None
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"manifest line {lineno}: box must be x0,y0,x1,y1, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"manifest line {lineno}: non-integer box {text!r}")


def save_manifest(manifest: DatasetManifest, path):
    lines = [MANIFEST_HEADER,
             f"# split\t{manifest.split}",
             f"# seed\t{manifest.seed}"]
    for e in manifest.entries:
        lines.append("\t".join([
            e.sample_id, e.path, str(e.label),
            _fmt_box(e.target_box), _fmt_box(e.distractor_box)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    lines = raw.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        head = lines[0] if lines else ""
        raise ValueError(f"{path}: line 1: expected {MANIFEST_HEADER!r}, got {head!r}")
    split, seed = None, None
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if len(parts) == 2 and parts[0] == "split":
                split = parts[1]
            elif len(parts) == 2 and parts[0] == "seed":
                seed = int(parts[1])
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{path}: line {lineno}: expected 5 tab-separated fields, "
                             f"got {len(fields)}")
        sid, rel, label, tbox, dbox = fields
        if tbox == "-":
            raise ValueError(f"{path}: line {lineno}: sample {sid} has no target box")
        entries.append(ManifestEntry(
            sample_id=sid, path=rel, label=int(label),
            target_box=_parse_box(tbox, lineno),
            distractor_box=_parse_box(dbox, lineno)))
    if split is None or seed is None:
        raise ValueError(f"{path}: missing split/seed header lines")
    return DatasetManifest(split=split, seed=seed, entries=entries)


class ArrayDataset:
    """In-memory dataset: float32 images in [0,1], int labels, target boxes."""

    def __init__(self, ids, images, labels, target_boxes):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"images must be (N,1,H,W), got {images.shape}")
        if len(ids) != images.shape[0] or labels.shape[0] != images.shape[0]:
            raise ValueError("ids, images and labels must have equal length")
        self.ids = list(ids)
        self.images = images
        self.labels = labels
        self.target_boxes = list(target_boxes)
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self):
        return self.images.shape[0]

    def row(self, sample_id):
        if sample_id not in self._index:
            raise KeyError(f"unknown sample id {sample_id!r}")
        return self._index[sample_id]

    @classmethod
    def from_samples(cls, samples):
        imgs = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
        return cls(
            ids=[s.sample_id for s in samples],
            images=imgs[:, None, :, :],
            labels=[s.label for s in samples],
            target_boxes=[s.target_box for s in samples])

    @classmethod
    def from_manifest(cls, manifest_path):
        manifest = load_manifest(manifest_path)
        root = os.path.dirname(os.path.abspath(manifest_path))
        imgs, ids, labels, boxes = [], [], [], []
        for e in manifest.entries:
            p = e.path if os.path.isabs(e.path) else os.path.join(root, e.path)
            if not os.path.exists(p):
                raise FileNotFoundError(f"manifest entry {e.sample_id}: missing image {p}")
            imgs.append(load_pgm(p).astype(np.float32) / 255.0)
            ids.append(e.sample_id)
            labels.append(e.label)
            boxes.append(e.target_box)
        images = np.stack(imgs)[:, None, :, :]
        return cls(ids=ids, images=images, labels=labels, target_boxes=boxes)
