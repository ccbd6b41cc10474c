"""Accuracy, macro F1 and quadratic weighted kappa from a confusion matrix.

Labels are 1-based throughout; ``cm[t - 1, p - 1]`` counts samples with true
class ``t`` predicted as ``p``.
"""

from __future__ import annotations

import io

import numpy as np


class MetricError(ValueError):
    pass


def confusion_matrix(truths, predictions, num_classes: int) -> np.ndarray:
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise MetricError(f"{t.size} truths but {p.size} predictions")
    for name, arr in (("truth", t), ("prediction", p)):
        if arr.size and (arr.min() < 1 or arr.max() > num_classes):
            raise MetricError(f"{name} label outside 1..{num_classes}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def _total(cm: np.ndarray) -> int:
    total = int(np.asarray(cm).sum())
    if total <= 0:
        raise MetricError("empty confusion matrix")
    return total


def accuracy(cm: np.ndarray) -> float:
    return float(np.trace(cm)) / _total(cm)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class; 0 where precision + recall is 0 (incl. absent classes)."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm: np.ndarray) -> float:
    _total(cm)
    return float(per_class_f1(cm).mean())


def quadratic_weights(num_classes: int) -> np.ndarray:
    idx = np.arange(num_classes)
    return (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2


def quadratic_weighted_kappa(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.shape[0]
    if n < 2:
        raise MetricError("kappa needs at least 2 classes")
    O = cm / _total(cm)
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    w = quadratic_weights(n)
    expected = float((w * E).sum())
    if expected == 0.0:
        raise MetricError("weighted kappa is undefined: expected weighted disagreement is 0")
    return 1.0 - float((w * O).sum()) / expected


def evaluate(truths, predictions, num_classes: int) -> dict:
    cm = confusion_matrix(truths, predictions, num_classes)
    try:
        kappa = quadratic_weighted_kappa(cm)
    except MetricError:
        kappa = float("nan")
    return {"acc": accuracy(cm), "f1": macro_f1(cm), "kappa": kappa, "cm": cm}


def report_csv(result: dict) -> str:
    buf = io.StringIO()
    buf.write("acc,f1,kappa\n")
    buf.write(f"{result['acc']:.6f},{result['f1']:.6f},{result['kappa']:.6f}\n")
    buf.write("\n")
    cm = result["cm"]
    buf.write(",".join(f"pred{c + 1}" for c in range(cm.shape[1])) + "\n")
    for row in cm:
        buf.write(",".join(str(int(v)) for v in row) + "\n")
    return buf.getvalue()
