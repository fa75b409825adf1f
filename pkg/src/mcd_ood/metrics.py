"""Inference-time scoring and OOD detection metrics.

Conventions used by every metric here:

* OOD is the positive class for FPR@TPR, detection error and AUROC, and
  a higher score means "more OOD".
* A threshold ``t`` predicts positive for ``score >= t``; thresholds are
  swept over the unique scores, so tied samples always move together.
* ROC area is trapezoidal from (0, 0) to (1, 1). PR area is a step sum
  (average precision); precision with nothing predicted positive is 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, MetricsError

FORMAT_VERSION = 1
DEFAULT_DELTA = 1.0


@dataclass(frozen=True)
class ScoredSample:
    score: float
    is_ood: bool

    def __post_init__(self):
        if not 0.0 <= self.score <= 2.0:
            raise MetricsError(f"score {self.score} outside [0, 2]")


def l1_score(p1, p2):
    """Sum of absolute differences between two probability vectors (or rows of two matrices)."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise DimensionError(f"l1_score: shapes {p1.shape} and {p2.shape} differ")
    return np.abs(p1 - p2).sum(axis=-1)


def classify_ood(score, delta=DEFAULT_DELTA):
    """True (OOD) when the score is strictly above ``delta``."""
    return np.asarray(score) > delta


def _unpack(samples):
    if isinstance(samples, tuple) and len(samples) == 2:
        scores, is_ood = samples
    else:
        samples = list(samples)
        scores = [s.score for s in samples]
        is_ood = [s.is_ood for s in samples]
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    if scores.shape != is_ood.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {is_ood.shape} must be matching 1-D arrays")
    n_pos = int(is_ood.sum())
    if n_pos == 0 or n_pos == len(is_ood):
        raise MetricsError(f"need both classes, got {n_pos} OOD and {len(is_ood) - n_pos} ID samples")
    return scores, is_ood


def _sweep(scores, positive):
    """Cumulative TP/FP counts at each unique threshold, highest threshold first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    pos = positive[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(pos)[ends]
    fps = (ends + 1) - tps
    return tps, fps


def fpr_at_tpr(samples, tpr_target=0.95):
    scores, is_ood = _unpack(samples)
    tps, fps = _sweep(scores, is_ood)
    n_pos, n_neg = int(is_ood.sum()), int((~is_ood).sum())
    tpr = tps / n_pos
    fpr = fps / n_neg
    return float(fpr[tpr >= tpr_target].min())


def detection_error(samples):
    scores, is_ood = _unpack(samples)
    tps, fps = _sweep(scores, is_ood)
    n_pos, n_neg = int(is_ood.sum()), int((~is_ood).sum())
    fpr = fps / n_neg
    fnr = (n_pos - tps) / n_pos
    return float(((fpr + fnr) / 2).min())


def roc_curve(samples):
    scores, is_ood = _unpack(samples)
    tps, fps = _sweep(scores, is_ood)
    tpr = np.r_[0, tps] / is_ood.sum()
    fpr = np.r_[0, fps] / (~is_ood).sum()
    return fpr, tpr


def auroc(samples):
    fpr, tpr = roc_curve(samples)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def aupr(samples, positive="out"):
    """Area under precision-recall; ``positive='in'`` treats low scores as positive ID."""
    scores, is_ood = _unpack(samples)
    if positive == "out":
        s, pos = scores, is_ood
    elif positive == "in":
        s, pos = -scores, ~is_ood
    else:
        raise MetricsError(f"positive must be 'in' or 'out', got {positive!r}")
    tps, fps = _sweep(s, pos)
    precision = tps / (tps + fps)
    recall = np.r_[0, tps] / pos.sum()
    return float(np.sum(np.diff(recall) * precision))


def aupr_in(samples):
    return aupr(samples, "in")


def aupr_out(samples):
    return aupr(samples, "out")


@dataclass
class MetricsReport:
    fpr_at_95_tpr: float
    detection_error: float
    auroc: float
    aupr_in: float
    aupr_out: float
    mean_discrepancy_id: float | None
    mean_discrepancy_ood: float | None
    threshold_used: float
    threshold_accuracy: float
    n_id: int
    n_ood: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        extra = d.pop("extra")
        return {"format_version": FORMAT_VERSION, **d, **extra}


def report_from_scores(scores, is_ood, delta=DEFAULT_DELTA, discrepancy=None):
    scores, is_ood = _unpack((scores, is_ood))
    samples = (scores, is_ood)
    disc_id = disc_ood = None
    if discrepancy is not None:
        discrepancy = np.asarray(discrepancy, dtype=np.float64)
        disc_id = float(discrepancy[~is_ood].mean())
        disc_ood = float(discrepancy[is_ood].mean())
    return MetricsReport(
        fpr_at_95_tpr=fpr_at_tpr(samples, 0.95),
        detection_error=detection_error(samples),
        auroc=auroc(samples),
        aupr_in=aupr_in(samples),
        aupr_out=aupr_out(samples),
        mean_discrepancy_id=disc_id,
        mean_discrepancy_ood=disc_ood,
        threshold_used=float(delta),
        threshold_accuracy=float(np.mean(classify_ood(scores, delta) == is_ood)),
        n_id=int((~is_ood).sum()),
        n_ood=int(is_ood.sum()),
    )


def score_inputs(model, x):
    """Per-sample L1 score, entropy discrepancy, per-head max probability and predictions."""
    p1, p2 = model.predict_proba(x)
    return score_probabilities(p1, p2)


def score_probabilities(p1, p2):
    eps = 1e-12
    h1 = -(p1 * np.log(p1 + eps)).sum(axis=1)
    h2 = -(p2 * np.log(p2 + eps)).sum(axis=1)
    return {
        "score": l1_score(p1, p2),
        "discrepancy": h1 - h2,
        "max_p1": p1.max(axis=1),
        "max_p2": p2.max(axis=1),
        "pred": np.argmax(p1 + p2, axis=1),
        "pred1": np.argmax(p1, axis=1),
        "pred2": np.argmax(p2, axis=1),
        "baseline": 1.0 - np.max((p1 + p2) / 2, axis=1),
    }


def evaluate(model, x, is_ood, delta=DEFAULT_DELTA):
    """Score a labeled ID/OOD set with the two-head model and fill a report."""
    s = score_inputs(model, x)
    return report_from_scores(s["score"], is_ood, delta, s["discrepancy"])


def histogram(scores, is_ood, bins=50, lo=0.0, hi=2.0):
    """Per-class counts of scores over ``bins`` equal bins on ``[lo, hi]``."""
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(np.clip(scores[~is_ood], lo, hi), bins=edges)
    ood_counts, _ = np.histogram(np.clip(scores[is_ood], lo, hi), bins=edges)
    return edges, id_counts, ood_counts
