"""Patch MAP labels, slide-level probability sums, and evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import io, labels

Z95 = 1.96


def patch_map(p: Sequence[float]) -> int:
    """Most probable class index; ties go to the lowest index."""
    return int(np.argmax(np.asarray(p, dtype=np.float64)))


@dataclass
class SlideInference:
    slide_id: str
    n_patches: int
    score: np.ndarray
    normalized: np.ndarray
    predicted: int
    truth: int | None = None

    def to_dict(self) -> dict:
        d = {
            "slide_id": self.slide_id,
            "n_patches": self.n_patches,
            "score": [float(v) for v in self.score],
            "normalized": [float(v) for v in self.normalized],
            "predicted": labels.name(self.predicted),
        }
        if self.truth is not None:
            d["truth"] = labels.name(self.truth)
        return d


def slide_infer(probs, slide_id: str = "", truth: int | None = None) -> SlideInference:
    """Sum the patch probability vectors of one slide and take the argmax."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError(f"slide {slide_id or '?'}: no tissue patches survived filtering")
    p = p.reshape(-1, labels.N_CLASSES)
    score = p.sum(axis=0)
    total = score.sum()
    normalized = score / total if total > 0 else np.full_like(score, 1.0 / len(score))
    return SlideInference(slide_id, len(p), score, normalized, int(np.argmax(score)), truth)


def infer_slides(slide_ids: Sequence[str], probs, truths: dict[str, int] | None = None) -> list[SlideInference]:
    """Group patch rows by slide (first-appearance order) and aggregate each group."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1, labels.N_CLASSES)
    groups: dict[str, list[int]] = {}
    for i, sid in enumerate(slide_ids):
        groups.setdefault(sid, []).append(i)
    truths = truths or {}
    return [slide_infer(p[idx], sid, truths.get(sid)) for sid, idx in groups.items()]


@dataclass
class Rate:
    value: float | None
    lower: float | None
    upper: float | None
    n: int

    def to_dict(self) -> dict:
        return {"value": self.value, "ci95": [self.lower, self.upper], "n": self.n}


def wald_interval(p: float, n: int, z: float = Z95) -> tuple[float, float]:
    """Normal-approximation binomial interval, clipped to [0, 1]."""
    if n <= 0:
        raise ValueError("interval needs n > 0")
    half = z * math.sqrt(max(p * (1.0 - p), 0.0) / n)
    return max(0.0, p - half), min(1.0, p + half)


def _rate(num: float, den: int, ci_n: int) -> Rate:
    if den == 0:
        return Rate(None, None, None, ci_n)
    p = num / den
    lo, hi = wald_interval(p, ci_n) if ci_n > 0 else (None, None)
    return Rate(p, lo, hi, ci_n)


@dataclass
class ClassMetrics:
    support: int
    accuracy: Rate
    precision: Rate
    recall: Rate
    f1: Rate

    def to_dict(self) -> dict:
        return {"support": self.support, "accuracy": self.accuracy.to_dict(), "precision": self.precision.to_dict(),
                "recall": self.recall.to_dict(), "f1": self.f1.to_dict()}


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    confusion: np.ndarray
    overall_accuracy: float
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "overall_accuracy": self.overall_accuracy,
            "classes": {k: v.to_dict() for k, v in self.per_class.items()},
            "confusion": self.confusion.tolist(),
            "confusion_axes": {"rows": "truth", "cols": "predicted", "labels": list(labels.CLASSES)},
        }


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def compute_metrics(preds: Sequence[int], truths: Sequence[int], precision_ci_n: str = "predicted") -> MetricsReport:
    """Per-class accuracy (= recall), precision, recall and F1 with Wald 95% intervals.

    Each interval is sized by its rate's denominator: class support for
    recall/accuracy/F1, predicted-positive count for precision.  Pass
    ``precision_ci_n="support"`` to size precision by class support too.
    """
    preds = np.asarray([labels.index(int(p)) for p in preds], dtype=np.int64)
    truths = np.asarray([labels.index(int(t)) for t in truths], dtype=np.int64)
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if len(preds) == 0:
        raise ValueError("no predictions to evaluate")
    if precision_ci_n not in ("support", "predicted"):
        raise ValueError("precision_ci_n must be 'support' or 'predicted'")
    k = labels.N_CLASSES
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truths, preds), 1)
    per_class = {}
    for c, cname in enumerate(labels.CLASSES):
        tp = int(confusion[c, c])
        support = int(confusion[c].sum())
        predicted = int(confusion[:, c].sum())
        recall = _rate(tp, support, support)
        precision = _rate(tp, predicted, support if precision_ci_n == "support" else predicted)
        if recall.value is None or precision.value is None:
            f1 = Rate(None, None, None, support)
        else:
            f1 = _rate(f1_score(precision.value, recall.value), 1, support)
        per_class[cname] = ClassMetrics(support, recall, precision, recall, f1)
    overall = float(np.trace(confusion) / confusion.sum())
    return MetricsReport(per_class, confusion, overall, int(len(preds)))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))


def roc_curve(scores: Sequence[float], positive: Sequence[bool]) -> RocCurve | None:
    """One-vs-rest ROC by threshold sweep; tied scores form a single step.

    Returns ``None`` when there are no positives or no negatives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, auc, np.r_[np.inf, s[last_of_group]])


def roc_auc(probs, truths: Sequence[int]) -> dict[str, RocCurve | None]:
    """Per-class one-vs-rest ROC curves over patch probability vectors."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1, labels.N_CLASSES)
    t = np.asarray(truths, dtype=np.int64)
    if len(p) != len(t):
        raise ValueError("scores and truths differ in length")
    return {cname: roc_curve(p[:, c], t == c) for c, cname in enumerate(labels.CLASSES)}


def slide_metrics(inferences: Iterable[SlideInference]) -> MetricsReport:
    inf = [s for s in inferences if s.truth is not None]
    return compute_metrics([s.predicted for s in inf], [s.truth for s in inf])


def slides_json(inferences: Iterable[SlideInference]) -> str:
    return json.dumps([s.to_dict() for s in inferences], indent=2, sort_keys=True) + "\n"


def metrics_json(report: MetricsReport, curves: dict[str, RocCurve | None] | None = None,
                 slides: MetricsReport | None = None) -> str:
    d = {"patch": report.to_dict()}
    if curves is not None:
        d["auc"] = {k: (None if c is None else c.auc) for k, c in curves.items()}
    if slides is not None:
        d["slide"] = slides.to_dict()
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def roc_csv(curve: RocCurve) -> str:
    return io.csv_text(("fpr", "tpr"), ((repr(float(f)), repr(float(t))) for f, t in zip(curve.fpr, curve.tpr)))


def plot_roc(curves: dict[str, RocCurve | None], path: str | Path) -> bool:
    """Write a ROC figure if matplotlib is importable; returns whether it did."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, c in curves.items():
        if c is not None:
            ax.plot(c.fpr, c.tpr, label=f"{name} (AUC {c.auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return True
