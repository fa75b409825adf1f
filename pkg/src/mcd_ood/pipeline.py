"""Experiment orchestration shared by the CLI and the acceptance tests."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import metrics
from .config import model_config_for
from .errors import ConfigError
from .idx import load_idx_images
from .model import init_model
from .trainer import finetune, head_accuracy, pretrain

SEED_TAGS = ("data_train", "data_id_pool", "data_ood_pool", "data_test_ood_pool", "split",
             "extractor", "head1", "head2", "train")


def derive_seed(seed, *tags):
    """Stable 63-bit sub-seed from a run seed and any JSON-able tags."""
    digest = hashlib.sha256(json.dumps([seed, *tags]).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def run_seeds(seed):
    seeds = {tag: derive_seed(seed, tag) for tag in SEED_TAGS}
    if seeds["head1"] == seeds["head2"]:
        seeds["head2"] += 1
    return seeds


@dataclass
class Experiment:
    seed: int
    seeds: dict
    split: D.DatasetSplit
    model_config: object
    train_config: object


def _ood_features(kind, n, dcfg, seed):
    if kind == "ring":
        return D.gen_ring_ood(n, dcfg.ring_radius, dcfg.ring_width, seed=seed)
    return D.gen_shifted_blobs_ood(n, dcfg.num_classes, dcfg.shifted_radius, dcfg.sigma, seed=seed)


def _pool_size(n_ul, n_test, val_fraction):
    return math.ceil((1 + val_fraction) * (n_ul + n_test)) + 2


def build_split(cfg, seed, cell=None):
    """Generate or load the data and split it. Returns ``(split, input_kind, input_shape, K)``."""
    d = cfg.data
    cell = cell or {}
    n_ul_id = cell.get("n_ul_id", d.n_ul_id)
    n_ul_ood = cell.get("n_ul_ood", d.n_ul_ood)
    ood_kind = cell.get("ood_generator") or d.ood_generator
    test_ood_kind = cell.get("test_ood_generator") or d.test_ood_generator
    disjoint = cell.get("disjoint_test")
    disjoint = d.disjoint_test if disjoint is None else disjoint
    n_test_id = (d.n_test_id or n_ul_id) if disjoint else n_ul_id
    # a held-out test set defaults to balanced classes, so a 0-OOD X_ul still gets OOD test data
    n_test_ood = (d.n_test_ood or n_test_id) if disjoint else n_ul_ood
    s = run_seeds(seed)
    gen = {"kind": d.kind}
    test_ood_pool = None

    if d.kind == "blobs":
        k = d.num_classes
        train = D.gen_gaussian_blobs(k, d.n_train_per_class, d.centers, d.sigma, seed=s["data_train"])
        per_class = math.ceil(_pool_size(n_ul_id, n_test_id if disjoint else 0, d.val_fraction) / k)
        id_pool = D.gen_gaussian_blobs(k, per_class, d.centers, d.sigma, seed=s["data_id_pool"])
        n_ood = _pool_size(n_ul_ood, n_test_ood if disjoint else 0, d.val_fraction)
        ood_pool = _ood_features(ood_kind, n_ood, d, s["data_ood_pool"])
        if test_ood_kind is not None and test_ood_kind != ood_kind:
            test_ood_pool = _ood_features(test_ood_kind, n_test_ood, d, s["data_test_ood_pool"])
        centers = D.default_centers(k) if d.centers is None else np.asarray(d.centers)
        gen.update(num_classes=k, n_train_per_class=d.n_train_per_class, sigma=d.sigma,
                   centers=centers.tolist(), ood_generator=ood_kind,
                   test_ood_generator=test_ood_kind or ood_kind, ring_radius=d.ring_radius,
                   ring_width=d.ring_width, shifted_radius=d.shifted_radius)
        input_kind, input_shape = "vector", (2,)
    elif d.kind == "csv":
        x, y = D.read_vector_csv(cfg.resolve(d.train_csv))
        train = D.LabeledSet(x, y)
        x, y = D.read_vector_csv(cfg.resolve(d.id_pool_csv))
        id_pool = D.LabeledSet(x, y)
        ood_pool, _ = D.read_vector_csv(cfg.resolve(d.ood_pool_csv))
        if d.test_ood_csv is not None:
            test_ood_pool, _ = D.read_vector_csv(cfg.resolve(d.test_ood_csv))
        k = d.num_classes
        for name, labels in (("train_csv", train.y), ("id_pool_csv", id_pool.y)):
            if labels.min() < 0 or labels.max() >= k:
                raise ConfigError(f"data.{name}: labels must all be present and in [0, {k})")
        gen.update({key: str(v) for key, v in d.paths().items()}, num_classes=k)
        input_kind, input_shape = "vector", (x.shape[1],)
    else:
        id_classes = list(d.id_classes)
        k = len(id_classes)
        if k < 2:
            raise ConfigError("data.id_classes needs at least two classes")
        remap = {c: i for i, c in enumerate(id_classes)}
        tr = load_idx_images(cfg.resolve(d.train_images), cfg.resolve(d.train_labels))
        te = load_idx_images(cfg.resolve(d.test_images), cfg.resolve(d.test_labels))
        keep = np.isin(tr.y, id_classes)
        train = D.LabeledSet(tr.x[keep], [remap[c] for c in tr.y[keep]])
        is_id = np.isin(te.y, id_classes)
        id_pool = D.LabeledSet(te.x[is_id], [remap[c] for c in te.y[is_id]])
        ood_pool = te.x[~is_id]
        gen.update({key: str(v) for key, v in d.paths().items()}, id_classes=id_classes)
        input_kind, input_shape = "image", tuple(tr.x.shape[1:])

    split = D.make_split(train, id_pool, ood_pool, n_ul_id, n_ul_ood, s["split"],
                         val_fraction=d.val_fraction, disjoint_test=disjoint,
                         n_test_id=n_test_id, n_test_ood=n_test_ood, test_ood_pool=test_ood_pool)
    split.manifest.update(run_seed=seed, seeds=s, generator=gen)
    return split, input_kind, input_shape, k


def prepare(cfg, seed, cell=None):
    split, kind, shape, k = build_split(cfg, seed, cell)
    seeds = run_seeds(seed)
    mcfg = model_config_for(kind, shape, k, cfg.model, seeds)
    overrides = {}
    if cell and cell.get("finetune_epochs"):
        overrides["finetune_epochs"] = cell["finetune_epochs"]
    tcfg = cfg.train.to_train_config(seeds["train"] % 2**32, **overrides)
    return Experiment(seed, seeds, split, mcfg, tcfg)


def run_pretrain(exp):
    model = init_model(exp.model_config)
    log = pretrain(model, exp.split.train_labeled, exp.train_config, exp.split.validation)
    return model, log


def run_finetune(exp, pretrained):
    model = pretrained.copy()
    log = finetune(model, exp.split.train_labeled, exp.split.unlabeled.x, exp.split.validation,
                   exp.train_config)
    return model, log


def score_table(model, eval_set=None, x=None):
    """Per-sample scoring columns; ``is_ood`` only when ground truth is known."""
    if eval_set is not None:
        x = eval_set.x
    s = metrics.score_inputs(model, x)
    table = {"score": s["score"]}
    if eval_set is not None:
        table["is_ood"] = eval_set.is_ood
    table.update(max_p1=s["max_p1"], max_p2=s["max_p2"], discrepancy=s["discrepancy"])
    return table


def _ensemble_accuracy(model, labeled):
    s = metrics.score_inputs(model, labeled.x)
    return float(np.mean(s["pred"] == labeled.y))


def finetune_summary(exp, pretrained, finetuned):
    """ID accuracy before/after fine-tuning and the pre-trained max-softmax baseline AUROC."""
    test = exp.split.test
    id_test = test.id_part
    pre_acc = _ensemble_accuracy(pretrained, id_test)
    post_acc = _ensemble_accuracy(finetuned, id_test)
    pre_h = head_accuracy(pretrained, id_test)
    post_h = head_accuracy(finetuned, id_test)
    pre_test = metrics.score_inputs(pretrained, test.x)
    return {
        "id_accuracy_pretrained": pre_acc,
        "id_accuracy_finetuned": post_acc,
        "id_accuracy_delta": post_acc - pre_acc,
        "head_accuracy_pretrained": list(pre_h),
        "head_accuracy_finetuned": list(post_h),
        "baseline_max_softmax_auroc": metrics.auroc((pre_test["baseline"], test.is_ood)),
        "pretrained_l1_auroc": metrics.auroc((pre_test["score"], test.is_ood)),
    }


def build_report(table, delta, summary=None):
    rep = metrics.report_from_scores(table["score"], table["is_ood"], delta, table.get("discrepancy"))
    if summary:
        rep.extra.update(summary)
    return rep


@dataclass
class RunResult:
    experiment: Experiment
    pretrained: object
    finetuned: object
    pretrain_log: object
    finetune_log: object
    table: dict
    report: metrics.MetricsReport
    summary: dict = field(default_factory=dict)


def run_pipeline(cfg, seed=None, cell=None):
    seed = cfg.seed if seed is None else seed
    exp = prepare(cfg, seed, cell)
    pre, pre_log = run_pretrain(exp)
    fin, fin_log = run_finetune(exp, pre)
    summary = finetune_summary(exp, pre, fin)
    table = score_table(fin, exp.split.test)
    report = build_report(table, cfg.eval.delta, summary)
    return RunResult(exp, pre, fin, pre_log, fin_log, table, report, summary)


ABLATION_COLUMNS = ("cell", "seed", "n_ul_id", "n_ul_ood", "ood_generator", "test_ood_generator",
                    "disjoint_test", "detection_error", "id_discrepancy", "ood_discrepancy", "auroc",
                    "fpr_at_95_tpr")


def cell_dict(cell):
    return cell.model_dump() if hasattr(cell, "model_dump") else dict(cell)


def run_ablation(cfg, seed=None, on_cell=None):
    """One full pipeline per grid cell, each with a sub-seed hashed from (run seed, cell index)."""
    if cfg.ablate is None or not cfg.ablate.cells:
        raise ConfigError("ablate needs a nonempty 'ablate.cells' grid in the config")
    seed = cfg.seed if seed is None else seed
    rows = []
    for i, cell in enumerate(cfg.ablate.cells):
        c = cell_dict(cell)
        sub = derive_seed(seed, "ablate", i) % 2**32
        result = run_pipeline(cfg, sub, c)
        gen = result.experiment.split.manifest["generator"]
        rep = result.report
        row = {
            "cell": i,
            "seed": sub,
            "n_ul_id": c["n_ul_id"],
            "n_ul_ood": c["n_ul_ood"],
            "ood_generator": gen.get("ood_generator", ""),
            "test_ood_generator": gen.get("test_ood_generator", ""),
            "disjoint_test": result.experiment.split.manifest["disjoint_test"],
            "detection_error": rep.detection_error,
            "id_discrepancy": rep.mean_discrepancy_id,
            "ood_discrepancy": rep.mean_discrepancy_ood,
            "auroc": rep.auroc,
            "fpr_at_95_tpr": rep.fpr_at_95_tpr,
        }
        rows.append(row)
        if on_cell is not None:
            on_cell(i, row, result)
    return rows
