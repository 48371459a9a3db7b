"""Accuracy reports, feature-space class distances, failure binning, feature export."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import PARAM_FIELDS, Dataset, params_table
from .layers import fc_forward

log = logging.getLogger(__name__)

N_BINS = 10


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list
    confusion: np.ndarray  # rows: true class, cols: predicted
    intra: Optional[float] = None
    inter: Optional[float] = None
    ratio: Optional[float] = None
    failure_bins: dict = field(default_factory=dict)
    count: int = 0

    def to_dict(self) -> dict:
        d = {
            "count": self.count,
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
            "intra_class_distance": self.intra,
            "inter_class_distance": self.inter,
            "intra_inter_ratio": _json_float(self.ratio),
        }
        if self.failure_bins:
            d["failure_bins"] = {k: {"edges": e.tolist(), "counts": c.tolist()}
                                 for k, (e, c) in self.failure_bins.items()}
        return d

    def to_text(self) -> str:
        """One ``key: value`` pair per line."""
        lines = [f"count: {self.count}", f"accuracy: {self.accuracy:.6f}"]
        for k, acc in enumerate(self.per_class_accuracy):
            lines.append(f"class_{k}_accuracy: {'nan' if acc is None else f'{acc:.6f}'}")
        for k, row in enumerate(self.confusion):
            lines.append(f"confusion_row_{k}: {' '.join(str(int(v)) for v in row)}")
        for key, val in (("intra_class_distance", self.intra), ("inter_class_distance", self.inter),
                         ("intra_inter_ratio", self.ratio)):
            if val is not None:
                lines.append(f"{key}: {val:.9g}")
        for name, (_, counts) in self.failure_bins.items():
            lines.append(f"failures_{name}: {' '.join(str(int(c)) for c in counts)}")
        return "\n".join(lines) + "\n"

    def write(self, stem) -> tuple:
        stem = Path(stem)
        txt = stem.with_suffix(".txt")
        js = stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return txt, js


def _json_float(v):
    if v is None:
        return None
    return "inf" if np.isinf(v) else v


def predict(logits) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def report_from_predictions(pred, labels, num_classes: int = 10) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / totals[k]) if totals[k] else None
                 for k in range(num_classes)]
    acc = float(np.trace(confusion) / len(labels)) if len(labels) else 0.0
    return EvalReport(acc, per_class, confusion, count=len(labels))


def batched_forward(model, images, batch_size: int = 500):
    """Logits and global-max features for every image, in order."""
    logits, feats = [], []
    for start in range(0, len(images), batch_size):
        f, _ = model.forward_features(images[start:start + batch_size])
        logits.append(fc_forward(f, model.fc)[0])
        feats.append(f)
    return np.concatenate(logits), np.concatenate(feats)


def evaluate(model, dataset: Dataset, batch_size: int = 500, distances: bool = True) -> EvalReport:
    logits, feats = batched_forward(model, dataset.images, batch_size)
    pred = predict(logits)
    report = report_from_predictions(pred, dataset.labels, model.config.num_classes)
    if distances:
        report.intra, report.inter, report.ratio = class_distances(
            feats, dataset.labels, model.config.num_classes)
    if dataset.params is not None:
        report.failure_bins = failure_bins(pred == dataset.labels, dataset.params,
                                           dataset.ranges or None)
    return report


def class_distances(features, labels, num_classes: Optional[int] = None):
    """(intra, inter, intra/inter) in feature space.

    intra: mean over classes of the mean Euclidean distance from each member
    to its class centroid. inter: mean pairwise distance between centroids.
    The ratio is ``inf`` when all centroids coincide.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels) if num_classes is None else range(num_classes)
    centroids, spreads = [], []
    for c in classes:
        members = x[labels == c]
        if len(members) == 0:
            log.warning("class %s has no samples; excluded", c)
            continue
        mu = members.mean(axis=0)
        centroids.append(mu)
        spreads.append(np.linalg.norm(members - mu, axis=1).mean())
    intra = float(np.mean(spreads))
    if len(centroids) < 2:
        return intra, 0.0, float("inf")
    cen = np.stack(centroids)
    i, j = np.triu_indices(len(cen), k=1)
    inter = float(np.linalg.norm(cen[i] - cen[j], axis=1).mean())
    ratio = intra / inter if inter > 0 else float("inf")
    return intra, inter, ratio


def bin_index(values, low: float, high: float, bins: int = N_BINS) -> np.ndarray:
    """Bin of each value over [low, high]; interior edges go to the upper bin."""
    v = np.asarray(values, dtype=np.float64)
    if high <= low:
        return np.zeros(v.shape, dtype=np.int64)
    edges = np.linspace(low, high, bins + 1)
    idx = np.searchsorted(edges, v, side="right") - 1
    return np.clip(idx, 0, bins - 1).astype(np.int64)


def failure_bins(correct, params, ranges: Optional[dict] = None, bins: int = N_BINS) -> dict:
    """Histogram of failures over each affine parameter, ``{name: (edges, counts)}``.

    ``ranges`` gives ``(low, high)`` per parameter; parameters without one use
    the observed min/max.
    """
    correct = np.asarray(correct, dtype=bool)
    table = params_table(params)
    out = {}
    for name in PARAM_FIELDS:
        vals = table[name]
        if ranges and name in ranges:
            lo, hi = (float(r) for r in ranges[name])
        else:
            lo, hi = float(vals.min()), float(vals.max())
        edges = np.linspace(lo, hi, bins + 1)
        counts = np.bincount(bin_index(vals[~correct], lo, hi, bins), minlength=bins)
        out[name] = (edges, counts)
    return out


def export_features(model, dataset: Dataset, path, batch_size: int = 500) -> Path:
    """CSV ``index,label,f0..f{D-1}`` of global-max features, 9 significant digits."""
    _, feats = batched_forward(model, dataset.images, batch_size)
    path = Path(path)
    d = feats.shape[1]
    with open(path, "w") as f:
        f.write(",".join(["index", "label"] + [f"f{k}" for k in range(d)]) + "\n")
        for i, (lab, row) in enumerate(zip(dataset.labels, feats)):
            f.write(f"{i},{int(lab)}," + ",".join(f"{v:.9g}" for v in row) + "\n")
    return path
