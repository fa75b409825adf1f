"""Training objectives: entropy discrepancy, two-head cross-entropy, margin hinge."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataError, DimensionError

EPS = 1e-12
DEFAULT_MARGIN = 1.2


@dataclass
class LossValue:
    value: ad.Tensor
    breakdown: dict = field(default_factory=dict)

    def item(self):
        return self.value.item()


def _check_prob_rows(p, tol=1e-9):
    data = p.data
    if data.ndim != 2:
        raise DimensionError(f"expected an n x K probability matrix, got shape {p.shape}")
    sums = data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(data < 0):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"row {bad} is not a probability vector (sum {sums[bad]!r})")


def entropy(p):
    """Per-row Shannon entropy in nats, ``-sum p log(p + eps)``."""
    _check_prob_rows(p)
    return ad.mul(ad.sum(ad.mul(p, ad.log(p, EPS)), axis=1), -1.0)


def discrepancy(p1, p2):
    """Entropy of head 1 minus entropy of head 2, per sample."""
    if p1.shape != p2.shape:
        raise DimensionError(f"discrepancy: head outputs differ in shape, {p1.shape} vs {p2.shape}")
    return ad.sub(entropy(p1), entropy(p2))


def _check_labels(y, k):
    y = np.asarray(y)
    bad = np.flatnonzero((y < 0) | (y >= k))
    if bad.size:
        raise DataError(f"label {y[bad[0]]} at sample {bad[0]} outside [0, {k})")
    return y.astype(np.int64)


def supervised_loss(model, batch_x, batch_y):
    """Batch mean of ``-(log p1(y|x) + log p2(y|x))``."""
    y = _check_labels(batch_y, model.config.num_classes)
    logits1, logits2 = model.forward(batch_x)
    if len(y) != logits1.shape[0]:
        raise DimensionError(f"{logits1.shape[0]} inputs but {len(y)} labels")
    return supervised_from_logits(logits1, logits2, y)


def supervised_from_logits(logits1, logits2, y):
    nll = ad.add(ad.pick(ad.log_softmax(logits1), y), ad.pick(ad.log_softmax(logits2), y))
    value = ad.mul(ad.mean(nll), -1.0)
    return LossValue(value, {"sup": value.item()})


def hinge_on_mean(mean_disc, margin):
    """``max(margin - mean_disc, 0)`` on a scalar tensor."""
    return ad.relu(ad.sub(margin, mean_disc))


def unsupervised_loss(model, batch_ul, margin=DEFAULT_MARGIN):
    """Margin hinge on the batch-mean discrepancy of unlabeled inputs.

    Minimizing this pushes the mean discrepancy up until it reaches
    ``margin``; beyond that the hinge is flat and contributes no gradient.
    """
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    if len(batch_ul) == 0:
        raise ContractError("unsupervised loss needs a nonempty unlabeled batch")
    p1, p2 = model.probabilities(batch_ul)
    return unsupervised_from_probs(p1, p2, margin)


def unsupervised_from_probs(p1, p2, margin):
    mean_disc = ad.mean(discrepancy(p1, p2))
    value = hinge_on_mean(mean_disc, margin)
    return LossValue(value, {"unsup": value.item(), "discrepancy_mean": mean_disc.item()})


def combined_loss(model, batch_in, batch_y, batch_ul, margin=DEFAULT_MARGIN):
    """Supervised plus unsupervised loss on one graph; both batches must be the same size."""
    n_in, n_ul = len(batch_in), len(batch_ul)
    if n_in == 0 or n_ul == 0:
        raise ContractError("combined loss needs nonempty labeled and unlabeled batches")
    if n_in != n_ul:
        raise ContractError(f"labeled batch has {n_in} samples but unlabeled batch has {n_ul}")
    sup = supervised_loss(model, batch_in, batch_y)
    unsup = unsupervised_loss(model, batch_ul, margin)
    value = ad.add(sup.value, unsup.value)
    return LossValue(value, {**sup.breakdown, **unsup.breakdown, "total": value.item()})
