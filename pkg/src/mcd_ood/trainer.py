"""Supervised pre-training and the alternating two-step fine-tuning loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import metrics
from .data import training_guard
from .errors import ConfigError, ContractError, TrainingError
from .losses import DEFAULT_MARGIN, supervised_from_logits, unsupervised_from_probs

EARLY_STOP_METRICS = {
    # name -> True when higher is better
    "auroc": True,
    "aupr_in": True,
    "aupr_out": True,
    "detection_error": False,
    "fpr_at_95_tpr": False,
}


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 100
    finetune_epochs: int = 10
    lr_pretrain: float = 0.1
    lr_finetune: float = 0.1
    lr_drop_points: tuple = (0.5, 0.75)
    lr_drop_factor: float = 10.0
    batch_size: int = 64
    margin: float = DEFAULT_MARGIN
    seed: int = 0
    early_stop_metric: str = "auroc"
    weight_decay: float = 0.0
    freeze_extractor_in_step_b: bool = False
    swap_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_points", tuple(self.lr_drop_points))
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError("pretrain_epochs and finetune_epochs must be >= 1")
        if self.lr_pretrain < 0 or self.lr_finetune < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.lr_drop_factor <= 0:
            raise ConfigError("lr_drop_factor must be positive")
        if any(not 0 < p < 1 for p in self.lr_drop_points):
            raise ConfigError(f"lr_drop_points must lie in (0, 1), got {self.lr_drop_points}")
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ConfigError(f"early_stop_metric must be one of {sorted(EARLY_STOP_METRICS)}")


def lr_at_epoch(base_lr, epoch, total_epochs, drop_points=(0.5, 0.75), factor=10.0):
    """Learning rate for 1-based ``epoch``: divided by ``factor`` once past each drop point."""
    drops = sum(epoch > p * total_epochs for p in drop_points)
    return base_lr / factor**drops


def cycle_batches(n, batch_size, rng):
    """Endless stream of index batches over ``range(n)``.

    Consecutive shuffled passes are concatenated; when a batch straddles two
    passes, the new pass is reordered so indices already in that batch come
    last, so no batch holds a duplicate. Requires ``batch_size <= n``.
    """
    if not 1 <= batch_size <= n:
        raise ContractError(f"batch size {batch_size} must be in [1, {n}]")
    buf = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size <= n:
            yield buf[pos:pos + batch_size]
            pos += batch_size
            continue
        head = buf[pos:]
        nxt = rng.permutation(n)
        taken = np.isin(nxt, head)
        nxt = np.concatenate([nxt[~taken], nxt[taken]])
        need = batch_size - len(head)
        yield np.concatenate([head, nxt[:need]])
        buf, pos = nxt, need


def cycle_unlabeled(x_ul, batch_size, rng):
    """Endless stream of full unlabeled feature batches, reshuffled on every pass."""
    x_ul = np.asarray(x_ul)
    if len(x_ul) == 0:
        raise ContractError("unlabeled set is empty")
    for idx in cycle_batches(len(x_ul), batch_size, rng):
        yield x_ul[idx]


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    lr: float
    sup_loss: float
    unsup_loss: float | None = None
    disc_labeled: float | None = None
    disc_unlabeled: float | None = None
    val_auroc: float | None = None
    val_detection_error: float | None = None
    val_fpr_at_95_tpr: float | None = None
    acc_head1: float | None = None
    acc_head2: float | None = None


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path):
        names = [f.name for f in fields(EpochRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.records:
                row = asdict(r)
                w.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                            for k in names])


def _check_finite(value, epoch, batch):
    if not math.isfinite(value):
        raise TrainingError(f"loss became {value}", epoch, batch)


def _validate(model, validation, rec):
    """Fill validation metrics and per-head ID accuracy into an epoch record."""
    s = metrics.score_inputs(model, validation.x)
    report = metrics.report_from_scores(s["score"], validation.is_ood)
    rec.val_auroc = report.auroc
    rec.val_detection_error = report.detection_error
    rec.val_fpr_at_95_tpr = report.fpr_at_95_tpr
    keep = ~validation.is_ood
    rec.acc_head1 = float(np.mean(s["pred1"][keep] == validation.y[keep]))
    rec.acc_head2 = float(np.mean(s["pred2"][keep] == validation.y[keep]))
    return report


def head_accuracy(model, labeled):
    s = metrics.score_inputs(model, labeled.x)
    return float(np.mean(s["pred1"] == labeled.y)), float(np.mean(s["pred2"] == labeled.y))


def _mean_discrepancy_np(l1, l2):
    p = metrics.score_probabilities(_softmax_np(l1), _softmax_np(l2))
    return float(p["discrepancy"].mean())


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pretrain(model, train, cfg, validation=None):
    """Minimize the two-head cross-entropy on labeled ID data with the stepped LR schedule."""
    if len(train) == 0:
        raise ContractError("labeled training set is empty")
    rng = np.random.default_rng([cfg.seed, 0])
    opt = ad.SgdOptimizer(model.parameters(), cfg.lr_pretrain, cfg.weight_decay)
    log = TrainLog()
    n = len(train)
    for epoch in range(1, cfg.pretrain_epochs + 1):
        opt.learning_rate = lr_at_epoch(cfg.lr_pretrain, epoch, cfg.pretrain_epochs,
                                        cfg.lr_drop_points, cfg.lr_drop_factor)
        perm = rng.permutation(n)
        sup_sum, disc_sum, batches = 0.0, 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            l1, l2 = model.forward(train.x[idx])
            loss = supervised_from_logits(l1, l2, train.y[idx])
            _check_finite(loss.item(), epoch, b)
            opt.zero_grads()
            loss.value.backward()
            opt.step()
            sup_sum += loss.item()
            disc_sum += _mean_discrepancy_np(l1.data, l2.data)
            batches += 1
        rec = EpochRecord("pretrain", epoch, opt.learning_rate, sup_sum / batches,
                          disc_labeled=disc_sum / batches)
        if validation is not None:
            _validate(model, validation, rec)
        else:
            rec.acc_head1, rec.acc_head2 = head_accuracy(model, train)
        log.records.append(rec)
    return log


def finetune(model, train, unlabeled_x, validation, cfg):
    """Alternate a supervised step and a supervised-plus-discrepancy step per mini-batch.

    ``unlabeled_x`` is a plain feature array: the trainer never sees whether
    an unlabeled sample is ID or OOD. After each epoch the model is scored on
    the labeled validation holdout and the best snapshot (by
    ``cfg.early_stop_metric``) is loaded back into ``model`` on return.
    """
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    if len(unlabeled_x) == 0:
        raise ContractError("unlabeled set X_ul is empty")
    if len(train) == 0:
        raise ContractError("labeled training set is empty")
    higher_better = EARLY_STOP_METRICS[cfg.early_stop_metric]
    bs_b = min(cfg.batch_size, len(unlabeled_x), len(train))
    rng = np.random.default_rng([cfg.seed, 1])
    ul_stream = cycle_unlabeled(unlabeled_x, bs_b, np.random.default_rng([cfg.seed, 2]))
    lab_stream = cycle_batches(len(train), bs_b, np.random.default_rng([cfg.seed, 3]))
    params = model.parameters()
    head_params = model.parameter_groups()["head1"] + model.parameter_groups()["head2"]
    opt_a = ad.SgdOptimizer(params, cfg.lr_finetune, cfg.weight_decay)
    opt_b = ad.SgdOptimizer(head_params if cfg.freeze_extractor_in_step_b else params, cfg.lr_finetune,
                            cfg.weight_decay)
    log = TrainLog()
    best_value, best_state = None, None
    n = len(train)
    with training_guard():
        for epoch in range(1, cfg.finetune_epochs + 1):
            perm = rng.permutation(n)
            sums = np.zeros(4)
            batches = 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                # step A: classification only
                idx = perm[start:start + cfg.batch_size]
                l1, l2 = model.forward(train.x[idx])
                loss_a = supervised_from_logits(l1, l2, train.y[idx])
                _check_finite(loss_a.item(), epoch, b)
                for p in params:
                    p.grad[...] = 0.0
                loss_a.value.backward()
                opt_a.step()

                # step B: fresh labeled batch plus an equal-size unlabeled batch
                lidx = next(lab_stream)
                xu = next(ul_stream)
                l1, l2 = model.forward(train.x[lidx])
                sup = supervised_from_logits(l1, l2, train.y[lidx])
                p1u, p2u = model.probabilities(xu)
                if cfg.swap_heads:
                    p1u, p2u = p2u, p1u
                unsup = unsupervised_from_probs(p1u, p2u, cfg.margin)
                total = ad.add(sup.value, unsup.value)
                _check_finite(total.item(), epoch, b)
                for p in params:
                    p.grad[...] = 0.0
                total.backward()
                opt_b.step()

                sums += (sup.item(), unsup.item(), _mean_discrepancy_np(l1.data, l2.data),
                         unsup.breakdown["discrepancy_mean"])
                batches += 1
            sums /= batches
            rec = EpochRecord("finetune", epoch, cfg.lr_finetune, *(float(v) for v in sums))
            report = _validate(model, validation, rec)
            log.records.append(rec)
            value = getattr(report, cfg.early_stop_metric)
            improved = best_value is None or (value > best_value if higher_better else value < best_value)
            if improved:
                best_value, best_state, log.best_epoch = value, model.state(), epoch
    model.load_state(best_state)
    return log
