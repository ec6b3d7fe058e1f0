"""Attention branch classifier.

Three pieces wired in sequence: a convolutional feature extractor, an
attention branch that yields class logits plus a single-channel sigmoid
attention map, and a perception branch that classifies features reweighted
by that map (residual form: features * (1 + map)). The map is an explicit,
substitutable input: `infer_with_map` runs the perception branch under any
externally supplied map, which is what makes human edits trainable targets.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .maps import AttentionMap, resize_map

CHECKPOINT_MAGIC = b"ABNM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: tuple = (64, 64)
    map_size: tuple = (16, 16)
    in_channels: int = 1
    num_classes: int = 4
    extractor_channels: tuple = (8, 16, 16)
    residual_attention: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.map_size = tuple(int(v) for v in self.map_size)
        self.extractor_channels = tuple(int(c) for c in self.extractor_channels)
        ih, iw = self.image_size
        mh, mw = self.map_size
        if min(ih, iw, mh, mw) < 1:
            raise ValueError(f"sizes must be positive, got image {self.image_size} "
                             f"map {self.map_size}")
        if ih % mh or iw % mw:
            raise ValueError(f"map size {self.map_size} must divide image size "
                             f"{self.image_size}")
        if ih // mh != iw // mw:
            raise ValueError(f"image/map ratio must match on both axes, got "
                             f"{ih // mh} vs {iw // mw}")
        ratio = ih // mh
        if ratio & (ratio - 1):
            raise ValueError(f"image/map ratio must be a power of two, got {ratio}")
        self._downsamples = ratio.bit_length() - 1
        if self._downsamples > len(self.extractor_channels):
            raise ValueError(
                f"need {self._downsamples} stride-2 stages but only "
                f"{len(self.extractor_channels)} extractor stages configured")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if any(c < 1 for c in self.extractor_channels):
            raise ValueError(f"extractor channels must be positive, "
                             f"got {self.extractor_channels}")

    def strides(self):
        k = self._downsamples
        return [2] * k + [1] * (len(self.extractor_channels) - k)


def _parameter_spec(config: ModelConfig):
    """Declaration-ordered (name, shape) pairs for every trainable tensor."""
    spec = []
    c_in = config.in_channels
    for i, c_out in enumerate(config.extractor_channels):
        spec.append((f"extractor.conv{i}.weight", (c_out, c_in, 3, 3)))
        spec.append((f"extractor.conv{i}.bias", (c_out,)))
        c_in = c_out
    c = config.extractor_channels[-1]
    k = config.num_classes
    spec.append(("attention.conv0.weight", (c, c, 3, 3)))
    spec.append(("attention.conv0.bias", (c,)))
    spec.append(("attention.score.weight", (k, c, 1, 1)))
    spec.append(("attention.score.bias", (k,)))
    spec.append(("attention.collapse.weight", (1, k, 1, 1)))
    spec.append(("attention.collapse.bias", (1,)))
    spec.append(("perception.conv0.weight", (c, c, 3, 3)))
    spec.append(("perception.conv0.bias", (c,)))
    spec.append(("perception.conv1.weight", (c, c, 3, 3)))
    spec.append(("perception.conv1.bias", (c,)))
    spec.append(("perception.fc.weight", (c, k)))
    spec.append(("perception.fc.bias", (k,)))
    return spec


class ABNModel:
    """Config plus named parameters, grouped by dotted prefix."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        expected = _parameter_spec(config)
        names = [n for n, _ in expected]
        if list(params.keys()) != names:
            missing = [n for n in names if n not in params]
            extra = [n for n in params if n not in names]
            raise ValueError(f"parameter set mismatch: missing {missing[:4]}, "
                             f"unexpected {extra[:4]}")
        for name, shape in expected:
            got = tuple(params[name].data.shape)
            if got != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}, got {got}")
        self.params = params

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def group(self, prefix):
        return [t for n, t in self.params.items() if n.startswith(prefix + ".")]

    def extractor_parameters(self):
        return self.group("extractor")

    def branch_parameters(self):
        return self.group("attention") + self.group("perception")


def build_model(config: ModelConfig, seed: int = 0) -> ABNModel:
    """He-uniform init, deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _parameter_spec(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            limit = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return ABNModel(config, params)


@dataclass
class ForwardResult:
    attention_logits: Tensor   # [N, num_classes]
    attention_map: Tensor      # [N, 1, mh, mw], values in [0,1]
    perception_logits: Tensor  # [N, num_classes]


def _as_batch(images, config):
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    ih, iw = config.image_size
    if x.ndim != 4 or x.shape[1] != config.in_channels or x.shape[2:] != (ih, iw):
        raise ValueError(
            f"expected images [N,{config.in_channels},{ih},{iw}], got {x.shape}")
    if isinstance(images, Tensor) and images.data.ndim == 4:
        return images
    return Tensor(x)


def extract_features(model: ABNModel, images) -> Tensor:
    x = _as_batch(images, model.config)
    for i, stride in enumerate(model.config.strides()):
        w = model.params[f"extractor.conv{i}.weight"]
        b = model.params[f"extractor.conv{i}.bias"]
        x = ad.relu(ad.conv2d(x, w, b, stride=stride, pad=1))
    return x


def attention_branch(model: ABNModel, features: Tensor):
    p = model.params
    a = ad.relu(ad.conv2d(features, p["attention.conv0.weight"],
                          p["attention.conv0.bias"], stride=1, pad=1))
    score = ad.conv2d(a, p["attention.score.weight"], p["attention.score.bias"],
                      stride=1, pad=0)
    logits = ad.global_average_pool(score)
    amap = ad.sigmoid(ad.conv2d(score, p["attention.collapse.weight"],
                                p["attention.collapse.bias"], stride=1, pad=0))
    return logits, amap


def apply_attention(features: Tensor, amap: Tensor, residual: bool = True) -> Tensor:
    """Reweight features by the map: residual (1 + m) * f, or plain m * f."""
    if residual:
        one = Tensor(np.asarray(1.0, dtype=amap.data.dtype))
        return ad.mul(ad.add(amap, one), features)
    return ad.mul(amap, features)


def perception_branch(model: ABNModel, gated: Tensor) -> Tensor:
    p = model.params
    x = ad.relu(ad.conv2d(gated, p["perception.conv0.weight"],
                          p["perception.conv0.bias"], stride=1, pad=1))
    x = ad.relu(ad.conv2d(x, p["perception.conv1.weight"],
                          p["perception.conv1.bias"], stride=1, pad=1))
    pooled = ad.global_average_pool(x)
    return ad.linear(pooled, p["perception.fc.weight"], p["perception.fc.bias"])


def forward(model: ABNModel, images) -> ForwardResult:
    features = extract_features(model, images)
    att_logits, amap = attention_branch(model, features)
    gated = apply_attention(features, amap, model.config.residual_attention)
    per_logits = perception_branch(model, gated)
    return ForwardResult(attention_logits=att_logits, attention_map=amap,
                         perception_logits=per_logits)


def infer_with_map(model: ABNModel, image, amap) -> np.ndarray:
    """Perception logits for one image under a substituted attention map.

    The map must hold values in [0,1]; anything outside is rejected, never
    clamped. A map at a different resolution is bilinearly resized to the
    model's map size first. Returns a (num_classes,) float array.
    """
    if not isinstance(amap, AttentionMap):
        amap = AttentionMap(amap)  # validates range and shape
    mh, mw = model.config.map_size
    if (amap.height, amap.width) != (mh, mw):
        amap = resize_map(amap, mh, mw)
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image [C,H,W] or [1,C,H,W], got {x.shape}")
    with ad.no_grad():
        features = extract_features(model, x)
        m = Tensor(amap.values[None, None].astype(features.data.dtype))
        gated = apply_attention(features, m, model.config.residual_attention)
        logits = perception_branch(model, gated)
    return logits.data[0].copy()


def predict_topk(logits, k: int):
    """Top-k labels and softmax probabilities, ties broken by lower index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None]
    if arr.ndim != 2:
        raise ValueError(f"logits must be [C] or [N,C], got shape {arr.shape}")
    n_cls = arr.shape[1]
    if not 1 <= k <= n_cls:
        raise ValueError(f"k must lie in [1, {n_cls}], got {k}")
    probs = ad.softmax(arr)
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    top_p = np.take_along_axis(probs, order, axis=1)
    if squeeze:
        return order[0], top_p[0]
    return order, top_p


# ---------------------------------------------------------------------------
# checkpoint I/O

def _config_to_json(config: ModelConfig) -> bytes:
    d = asdict(config)
    d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
    return json.dumps(d, sort_keys=True).encode("utf-8")


def save_checkpoint(model: ABNModel, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = _config_to_json(model.config)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, tensor in model.named_parameters():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        shape = tensor.data.shape
        buf.write(struct.pack("<I", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated reading {what} at byte {self.pos} "
                             f"(need {n} bytes, {len(self.blob) - self.pos} left)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self):
        return self.pos >= len(self.blob)


def load_checkpoint(path) -> ABNModel:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, str(path))
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0, "
                         f"expected {CHECKPOINT_MAGIC!r}")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = r.u32("config length")
    cfg_pos = r.pos
    try:
        cfg_dict = json.loads(r.take(cfg_len, "config json").decode("utf-8"))
        config = ModelConfig(**cfg_dict)
    except (ValueError, TypeError) as e:
        raise ValueError(f"{path}: invalid config at byte {cfg_pos}: {e}")
    params = {}
    while not r.done:
        name_pos = r.pos
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        if name in params:
            raise ValueError(f"{path}: duplicate parameter {name!r} at byte {name_pos}")
        rank = r.u32(f"{name} rank")
        if rank > 8:
            raise ValueError(f"{path}: implausible rank {rank} for {name} "
                             f"at byte {r.pos - 4}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} shape"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(4 * count, f"{name} data")
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=True)
    return ABNModel(config, params)
