"""Explanation-quality metrics: deletion/insertion curves and map MSE.

Deletion replaces image pixels with a baseline value in order of attention
(most attended first) and tracks the class softmax score; a faithful map
makes the score collapse early, so lower AUC is better. Insertion reveals
pixels into the baseline in the same order; higher AUC is better. Both
integrate the score over the modified fraction by the trapezoidal rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .maps import AttentionMap, resize_map
from .model import ABNModel, forward


@dataclass
class CurvePoint:
    fraction: float
    score: float


@dataclass
class SampleMetrics:
    sample_id: str
    deletion_auc: float
    insertion_auc: float
    map_mse: float | None = None


@dataclass
class MetricReport:
    deletion_auc: float
    insertion_auc: float
    map_mse: float | None
    rows: list = field(default_factory=list)


def pixel_order(values: np.ndarray) -> np.ndarray:
    """Flat pixel indices sorted by value descending, ties in raster order."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    return np.argsort(-flat, kind="stable")


def _resolve_baseline(image: np.ndarray, baseline):
    if isinstance(baseline, str):
        if baseline == "mean":
            per_channel = image.reshape(image.shape[0], -1).mean(axis=1)
            return np.broadcast_to(per_channel[:, None, None], image.shape).copy()
        if baseline == "zero":
            return np.zeros_like(image)
        if baseline == "gray":
            return np.full_like(image, 0.5)
        raise ValueError(f"baseline must be mean|zero|gray or a float, got {baseline!r}")
    return np.full_like(image, float(baseline))


def _curve(model: ABNModel, image, amap: AttentionMap, steps: int,
           evaluated_class: int, baseline, insert: bool):
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(image, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"image must be [C,H,W], got shape {x.shape}")
    n_cls = model.config.num_classes
    if not 0 <= evaluated_class < n_cls:
        raise ValueError(f"evaluated_class {evaluated_class} outside [0, {n_cls})")
    h, w = x.shape[1:]
    if (amap.height, amap.width) != (h, w):
        amap = resize_map(amap, h, w)
    order = pixel_order(amap.values)
    base = _resolve_baseline(x, baseline).astype(np.float32)

    total = h * w
    xf = x.reshape(x.shape[0], -1)
    bf = base.reshape(x.shape[0], -1)
    variants = np.empty((steps + 1,) + x.shape, dtype=np.float32)
    for i in range(steps + 1):
        k = int(round(total * i / steps))
        sel = order[:k]
        v = bf.copy() if insert else xf.copy()
        src = xf if insert else bf
        v[:, sel] = src[:, sel]
        variants[i] = v.reshape(x.shape)

    with ad.no_grad():
        logits = forward(model, variants).perception_logits.data
    scores = ad.softmax(logits)[:, evaluated_class]
    fractions = np.arange(steps + 1, dtype=np.float64) / steps
    auc = float(np.trapezoid(scores, fractions))
    curve = [CurvePoint(float(f), float(s)) for f, s in zip(fractions, scores)]
    return auc, curve


def deletion_score(model: ABNModel, image, amap: AttentionMap, steps: int = 50,
                   evaluated_class: int = 0, baseline=0.0):
    """AUC of class score as attended pixels are replaced by the baseline."""
    return _curve(model, image, amap, steps, evaluated_class, baseline, insert=False)


def insertion_score(model: ABNModel, image, amap: AttentionMap, steps: int = 50,
                    evaluated_class: int = 0, baseline=0.0):
    """AUC of class score as attended pixels are revealed into the baseline."""
    return _curve(model, image, amap, steps, evaluated_class, baseline, insert=True)


def map_similarity_mse(produced: AttentionMap, reference: AttentionMap) -> float:
    """Mean squared difference; maps must already share a resolution."""
    if (produced.height, produced.width) != (reference.height, reference.width):
        raise ValueError(f"map resolutions differ: "
                         f"{produced.height}x{produced.width} vs "
                         f"{reference.height}x{reference.width}; resize first")
    diff = produced.values.astype(np.float64) - reference.values.astype(np.float64)
    return float(np.mean(diff * diff))


def evaluate_model(model: ABNModel, dataset, reference_maps: dict | None = None,
                   steps: int = 50, baseline="mean", sample_ids=None) -> MetricReport:
    """Deletion/insertion AUC (and MSE against reference maps when given).

    Curves are evaluated at the model's own predicted class, using the
    model's own attention map for each sample. reference_maps is a dict of
    sample id to AttentionMap; references at another resolution are resized.
    """
    if sample_ids is None:
        rows = list(range(len(dataset)))
    else:
        rows = [dataset.row(sid) for sid in sample_ids]
    if not rows:
        raise ValueError("no samples selected for evaluation")
    mh, mw = model.config.map_size

    with ad.no_grad():
        out = forward(model, dataset.images[rows])
    preds = out.perception_logits.data.argmax(axis=1)
    maps = out.attention_map.data

    report_rows = []
    for j, row in enumerate(rows):
        sid = dataset.ids[row]
        amap = AttentionMap(maps[j, 0])
        image = dataset.images[row]
        cls = int(preds[j])
        del_auc, _ = deletion_score(model, image, amap, steps, cls, baseline)
        ins_auc, _ = insertion_score(model, image, amap, steps, cls, baseline)
        mse = None
        if reference_maps is not None and sid in reference_maps:
            ref = reference_maps[sid]
            if (ref.height, ref.width) != (mh, mw):
                ref = resize_map(ref, mh, mw)
            mse = map_similarity_mse(amap, ref)
        report_rows.append(SampleMetrics(sample_id=sid, deletion_auc=del_auc,
                                         insertion_auc=ins_auc, map_mse=mse))

    mses = [r.map_mse for r in report_rows if r.map_mse is not None]
    return MetricReport(
        deletion_auc=float(np.mean([r.deletion_auc for r in report_rows])),
        insertion_auc=float(np.mean([r.insertion_auc for r in report_rows])),
        map_mse=float(np.mean(mses)) if mses else None,
        rows=report_rows)


def write_report(report: MetricReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "deletion_auc", "insertion_auc", "map_mse"])
        for r in report.rows:
            writer.writerow([r.sample_id, repr(r.deletion_auc), repr(r.insertion_auc),
                             "" if r.map_mse is None else repr(r.map_mse)])
