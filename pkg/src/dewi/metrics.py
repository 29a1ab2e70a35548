"""Confusion matrix, per-class recall/precision, accuracy, macro-F1 and G-mean."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp


@dataclass
class ClassStats:
    recall: np.ndarray
    precision: np.ndarray
    recall_undefined: np.ndarray
    precision_undefined: np.ndarray

    @property
    def mean_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def mean_precision(self) -> float:
        return float(self.precision.mean())


@dataclass
class MetricsReport:
    recall: np.ndarray
    precision: np.ndarray
    mrec: float
    mpre: float
    acc: float
    mf1: float
    gm: float
    confusion: ConfusionMatrix = None
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"acc": self.acc, "mf1": self.mf1, "gm": self.gm, "mrec": self.mrec, "mpre": self.mpre}

    def to_text(self, with_confusion: bool = True) -> str:
        lines = [f"acc: {self.acc:.6f}", f"mf1: {self.mf1:.6f}", f"gm: {self.gm:.6f}"]
        if with_confusion and self.confusion is not None:
            lines += [",".join(str(int(v)) for v in row) for row in self.confusion.counts]
        return "\n".join(lines)


def confusion_matrix(predictions, truths, K: int) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(truths, dtype=int)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions but {true.size} truths")
    for name, arr in (("prediction", pred), ("truth", true)):
        bad = np.flatnonzero((arr < 0) | (arr >= K))
        if bad.size:
            raise ValueError(f"{name} index {arr[bad[0]]} at position {bad[0]} outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def class_stats(cm: ConfusionMatrix) -> ClassStats:
    """Per-class recall TP/(TP+FN) and precision TP/(TP+FP); 0 (flagged) on empty denominators."""
    tp = cm.tp.astype(float)
    rden = tp + cm.fn
    pden = tp + cm.fp
    rec = np.divide(tp, rden, out=np.zeros_like(tp), where=rden > 0)
    pre = np.divide(tp, pden, out=np.zeros_like(tp), where=pden > 0)
    return ClassStats(rec, pre, rden == 0, pden == 0)


def geometric_mean(values: np.ndarray) -> float:
    """K-th root of the product, computed as exp(mean(log)); exactly 0 if any value is 0."""
    values = np.asarray(values, dtype=float)
    if values.size == 0 or (values <= 0).any():
        return 0.0
    return float(np.exp(np.log(values).mean()))


def aggregate(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total < 1:
        raise ValueError("cannot aggregate an empty confusion matrix")
    st = class_stats(cm)
    mrec, mpre = st.mean_recall, st.mean_precision
    acc = float(cm.tp.sum() / cm.total)
    mf1 = 0.0 if mrec + mpre == 0 else 2 * mrec * mpre / (mrec + mpre)
    flags = [f"recall undefined for class {k}" for k in np.flatnonzero(st.recall_undefined)]
    flags += [f"precision undefined for class {k}" for k in np.flatnonzero(st.precision_undefined)]
    return MetricsReport(st.recall, st.precision, mrec, mpre, acc, mf1,
                         geometric_mean(st.recall), cm, flags)


def evaluate_predictions(predictions, truths, K: int) -> MetricsReport:
    return aggregate(confusion_matrix(predictions, truths, K))


def read_prediction_file(path: Union[str, os.PathLike]) -> tuple:
    """Parse ``sample_id<TAB>predicted_index<TAB>true_index`` lines ('#' starts a comment)."""
    ids, pred, true = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {raw!r}")
        ids.append(parts[0])
        pred.append(int(parts[1]))
        true.append(int(parts[2]))
    return ids, np.array(pred, dtype=int), np.array(true, dtype=int)
