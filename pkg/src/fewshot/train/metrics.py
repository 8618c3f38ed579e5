"""Confusion-matrix metrics with macro averaging."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(truths, preds, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truths, dtype=np.intp), np.asarray(preds, dtype=np.intp)), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict[str, dict[str, float]]
    n_episodes: int
    confusion: np.ndarray = field(repr=False)
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": self.per_class,
            "n_episodes": self.n_episodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _safe_div(num: np.ndarray, den: np.ndarray, what: str, names) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    if not ok.all():
        bad = [names[i] for i in np.flatnonzero(~ok)]
        warnings.warn(f"{what} is undefined for classes {bad}; set to 0")
    return out


def metrics_from_confusion(cm: np.ndarray, class_names=None, n_episodes: int = 0) -> MetricsReport:
    """Macro precision/recall/F1 over classes that occur in truths or predictions."""
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n)]
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    present = (pred_tot + true_tot) > 0
    idx = np.flatnonzero(present)
    pnames = [names[i] for i in idx]
    prec = _safe_div(tp[idx], pred_tot[idx], "precision", pnames)
    rec = _safe_div(tp[idx], true_tot[idx], "recall", pnames)
    den = prec + rec
    f1 = np.where(den > 0, 2 * prec * rec / np.where(den > 0, den, 1.0), 0.0)
    total = cm.sum()
    per_class = {
        name: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(true_tot[i])}
        for name, i, p, r, f in zip(pnames, idx, prec, rec, f1)
    }
    return MetricsReport(
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision=float(prec.mean()) if idx.size else 0.0,
        recall=float(rec.mean()) if idx.size else 0.0,
        f1=float(f1.mean()) if idx.size else 0.0,
        per_class=per_class,
        n_episodes=n_episodes,
        confusion=cm,
        class_names=names,
    )


def compute_metrics(truths, preds, n_classes: int | None = None, class_names=None, n_episodes: int = 0) -> MetricsReport:
    truths = np.asarray(truths)
    preds = np.asarray(preds)
    if n_classes is None:
        n_classes = int(max(truths.max(initial=-1), preds.max(initial=-1))) + 1
    return metrics_from_confusion(confusion_matrix(truths, preds, n_classes), class_names, n_episodes)
