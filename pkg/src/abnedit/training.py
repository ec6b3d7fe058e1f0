"""Training loops: base training, misclassification harvest, map-guided fine-tune.

The fine-tune stage freezes the feature extractor and trains only the two
branches, adding a map-matching penalty gamma * ||predicted - edited||_2 on
samples that carry an edited attention map. Every step logs an additive
loss breakdown so the map term's contribution stays auditable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor
from .maps import AttentionMap, resize_map
from .model import ABNModel, forward


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    gamma: float = 0.1
    seed: int = 0
    edited_only: bool = False

    def __post_init__(self):
        TrainConfig(self.epochs, self.batch_size, self.learning_rate,
                    self.momentum, self.seed)
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass
class LossBreakdown:
    step: int
    l_att: float
    l_per: float
    l_abn: float
    l_map: float
    total: float


class Misclassified(NamedTuple):
    sample_id: str
    attention_map: AttentionMap
    predicted: int
    true_label: int


HISTORY_COLUMNS = ("step", "l_att", "l_per", "l_abn", "l_map", "total")


def _batches(rows, batch_size):
    for i in range(0, len(rows), batch_size):
        yield rows[i : i + batch_size]


def _abn_losses(model, images, labels):
    result = forward(model, images)
    l_att = ad.softmax_cross_entropy(result.attention_logits, labels)
    l_per = ad.softmax_cross_entropy(result.perception_logits, labels)
    l_abn = ad.add(l_att, l_per)
    return result, l_att, l_per, l_abn


def train_abn(model: ABNModel, dataset, config: TrainConfig, callback=None):
    """Train all parameters on softmax cross-entropy of both branches."""
    n = len(dataset)
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.for_params(model.parameters(), config.learning_rate,
                                      config.momentum)
    history = []
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for rows in _batches(perm, config.batch_size):
            images = dataset.images[rows]
            labels = dataset.labels[rows]
            _, l_att, l_per, l_abn = _abn_losses(model, images, labels)
            ad.backward(l_abn)
            ad.sgd_step(model.parameters(), state)
            entry = LossBreakdown(
                step=step,
                l_att=float(l_att.data), l_per=float(l_per.data),
                l_abn=float(l_abn.data), l_map=0.0, total=float(l_abn.data))
            history.append(entry)
            if callback is not None:
                callback(entry)
            step += 1
    return history


def accuracy(model: ABNModel, dataset, batch_size: int = 64) -> float:
    """Fraction of samples whose perception-branch argmax matches the label."""
    correct = 0
    with ad.no_grad():
        for rows in _batches(np.arange(len(dataset)), batch_size):
            logits = forward(model, dataset.images[rows]).perception_logits.data
            correct += int((logits.argmax(axis=1) == dataset.labels[rows]).sum())
    return correct / len(dataset)


def collect_misclassified(model: ABNModel, dataset, batch_size: int = 64):
    """All samples the perception branch gets wrong, with their current maps.

    Deterministic: repeated calls return identical entries with bitwise-equal
    map values.
    """
    out = []
    with ad.no_grad():
        for rows in _batches(np.arange(len(dataset)), batch_size):
            result = forward(model, dataset.images[rows])
            preds = result.perception_logits.data.argmax(axis=1)
            maps = result.attention_map.data
            for j, row in enumerate(rows):
                truth = int(dataset.labels[row])
                if int(preds[j]) != truth:
                    out.append(Misclassified(
                        sample_id=dataset.ids[row],
                        attention_map=AttentionMap(maps[j, 0]),
                        predicted=int(preds[j]),
                        true_label=truth))
    return out


def loss_map(predicted: Tensor, target, gamma: float) -> Tensor:
    """gamma * mean Euclidean distance between predicted and target maps."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if predicted.data.shape != t.data.shape:
        raise ValueError(f"map shapes differ: {predicted.data.shape} vs {t.data.shape}")
    dist = ad.l2_norm_loss(predicted, t)
    g = Tensor(np.asarray(gamma, dtype=dist.data.dtype))
    return ad.mul(dist, g)


class _FrozenExtractor:
    def __init__(self, model):
        self.tensors = model.extractor_parameters()

    def __enter__(self):
        self.saved = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
            t.grad = None
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self.tensors, self.saved):
            t.requires_grad = flag
        return False


def finetune_with_maps(model: ABNModel, dataset, edited: dict,
                       config: FinetuneConfig, callback=None):
    """Fine-tune attention and perception branches against edited maps.

    `edited` maps sample ids to AttentionMaps; maps at a different resolution
    are resized to the model's map size up front. The extractor never
    receives gradients, so its weights are bit-identical afterwards. With
    edited_only=True training visits only the edited samples.
    """
    n = len(dataset)
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    mh, mw = model.config.map_size
    targets = {}
    for sid, amap in edited.items():
        row = dataset.row(sid)  # raises KeyError for unknown ids
        if (amap.height, amap.width) != (mh, mw):
            amap = resize_map(amap, mh, mw)
        targets[row] = amap.values
    if config.edited_only:
        if not targets:
            raise ValueError("edited_only=True requires a non-empty edit set")
        pool = np.array(sorted(targets.keys()))
    else:
        pool = np.arange(n)
    batch_size = min(config.batch_size, len(pool))

    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    with _FrozenExtractor(model):
        trainable = model.branch_parameters()
        state = OptimizerState.for_params(trainable, config.learning_rate,
                                          config.momentum)
        for _ in range(config.epochs):
            perm = pool[rng.permutation(len(pool))]
            for rows in _batches(perm, batch_size):
                images = dataset.images[rows]
                labels = dataset.labels[rows]
                result, l_att, l_per, l_abn = _abn_losses(model, images, labels)
                hit = [j for j, r in enumerate(rows) if int(r) in targets]
                if hit:
                    goal = np.stack([targets[int(rows[j])] for j in hit])[:, None]
                    sub = ad.take_rows(result.attention_map, hit)
                    l_m = loss_map(sub, goal.astype(np.float32), config.gamma)
                    total = ad.add(l_abn, l_m)
                else:
                    l_m = None
                    total = l_abn
                ad.backward(total)
                ad.sgd_step(trainable, state)
                entry = LossBreakdown(
                    step=step,
                    l_att=float(l_att.data), l_per=float(l_per.data),
                    l_abn=float(l_abn.data),
                    l_map=float(l_m.data) if l_m is not None else 0.0,
                    total=float(total.data))
                history.append(entry)
                if callback is not None:
                    callback(entry)
                step += 1
    return history


def write_history(history, path) -> None:
    """Loss history as CSV with full round-trip float precision."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for e in history:
            writer.writerow([e.step, repr(e.l_att), repr(e.l_per), repr(e.l_abn),
                             repr(e.l_map), repr(e.total)])


def read_history(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(HISTORY_COLUMNS):
            raise ValueError(f"{path}: expected header {','.join(HISTORY_COLUMNS)}, "
                             f"got {header}")
        out = []
        for lineno, fields in enumerate(reader, start=2):
            if len(fields) != len(HISTORY_COLUMNS):
                raise ValueError(f"{path}: line {lineno}: expected "
                                 f"{len(HISTORY_COLUMNS)} fields, got {len(fields)}")
            out.append(LossBreakdown(
                step=int(fields[0]), l_att=float(fields[1]), l_per=float(fields[2]),
                l_abn=float(fields[3]), l_map=float(fields[4]), total=float(fields[5])))
    return out
