"""Pixel confusion counts and the five derived scores (overall accuracy,
precision, recall, F1, IoU), with water as the positive class.

Zero-denominator scores are reported as explicitly undefined (None), never
silently zero. Default evaluation micro-averages: one confusion matrix pooled
over every pixel of every image.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import tensor as T
from .tensor import Tensor


@dataclasses.dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def confusion_accumulate(cm: ConfusionMatrix, pred_mask: np.ndarray,
                         gt_mask: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    cm.tp += int(np.count_nonzero(p & g))
    cm.fp += int(np.count_nonzero(p & ~g))
    cm.fn += int(np.count_nonzero(~p & g))
    cm.tn += int(np.count_nonzero(~p & ~g))
    return cm


@dataclasses.dataclass
class MetricsReport:
    oa: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    iou: Optional[float]

    def defined(self) -> dict[str, bool]:
        return {k: getattr(self, k) is not None
                for k in ("oa", "precision", "recall", "f1", "iou")}

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("oa", "precision", "recall", "f1", "iou")}
        d["defined"] = self.defined()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")

    def ratio(num: int, den: int) -> Optional[float]:
        return num / den if den > 0 else None

    return MetricsReport(
        oa=(cm.tp + cm.tn) / cm.total,
        precision=ratio(cm.tp, cm.tp + cm.fp),
        recall=ratio(cm.tp, cm.tp + cm.fn),
        f1=ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        iou=ratio(cm.tp, cm.tp + cm.fp + cm.fn),
    )


def format_fraction(x: Optional[float]) -> str:
    """Five decimal places with trailing zeros trimmed (0.94397, 0.9754, 1.0)."""
    if x is None:
        return "undefined"
    s = f"{x:.5f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


# column order used by every comparison table
METRIC_COLUMNS = ("OA", "IoU", "Precision", "Recall", "F_S")


def metrics_row(report: MetricsReport) -> list[str]:
    return [format_fraction(v) for v in
            (report.oa, report.iou, report.precision, report.recall, report.f1)]


def format_metrics_table(named_reports: Sequence[tuple[str, MetricsReport]]) -> str:
    header = ["Model", *METRIC_COLUMNS]
    rows = [[name, *metrics_row(rep)] for name, rep in named_reports]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for r in [header] + rows:
        lines.append("  ".join(f"{cell:<{w}}" for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def predict_mask(model, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Run one image through the model; returns a {0,1} uint8 mask."""
    x = Tensor(D.to_model_input(image)[None])
    with T.no_grad():
        logits = model(x)
    prob = 1.0 / (1.0 + np.exp(-logits.numpy()[0, 0].astype(np.float64)))
    return (prob >= threshold).astype(np.uint8)


def evaluate_dataset(model, samples: Sequence[D.Sample], threshold: float = 0.5,
                     macro: bool = False) -> MetricsReport:
    """Micro-averaged metrics over all pixels of all samples (deterministic
    manifest order); ``macro=True`` averages per-image metrics instead."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if macro:
        per_image = []
        for s in samples:
            cm = confusion_accumulate(ConfusionMatrix(),
                                      predict_mask(model, D.load_image(s.image_path), threshold),
                                      D.load_mask(s.mask_path))
            per_image.append(compute_metrics(cm))
        fields = ("oa", "precision", "recall", "f1", "iou")
        means = {}
        for f in fields:
            vals = [getattr(r, f) for r in per_image if getattr(r, f) is not None]
            means[f] = sum(vals) / len(vals) if vals else None
        return MetricsReport(**means)
    cm = ConfusionMatrix()
    for s in samples:
        confusion_accumulate(cm, predict_mask(model, D.load_image(s.image_path), threshold),
                             D.load_mask(s.mask_path))
    return compute_metrics(cm)
