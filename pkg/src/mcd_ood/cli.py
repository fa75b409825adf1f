"""``mcd-ood`` command line: pretrain, finetune, score, eval, ablate (and ``run`` for all four stages)."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from . import pipeline as P
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import read_vector_csv
from .errors import ConfigError, DataError, FormatError, McdError

SCORE_COLUMNS = ("score", "is_ood", "max_p1", "max_p2", "discrepancy")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def write_scores(path, table):
    cols = [c for c in SCORE_COLUMNS if c in table]
    write_csv(path, cols, zip(*(table[c] for c in cols)))


def read_scores(path):
    """Read a score dump; returns a dict of numpy columns (``is_ood`` required)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"score file {path} not found") from None
    if not rows or rows[0][:1] != ["score"]:
        raise FormatError(f"{path}: expected a header starting with 'score'")
    header = rows[0]
    if "is_ood" not in header:
        raise DataError(f"{path}: no is_ood column, ground truth is needed for evaluation")
    cols = {name: [] for name in header}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        for name, value in zip(header, row):
            cols[name].append(value)
    out = {}
    try:
        for name, values in cols.items():
            if name == "is_ood":
                if any(v not in ("0", "1") for v in values):
                    raise ValueError("is_ood must be 0 or 1")
                out[name] = np.array([v == "1" for v in values], dtype=bool)
            else:
                out[name] = np.array([float(v) for v in values])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return out


def _out_dir(args, cfg):
    if args.out:
        out = Path(args.out)
    elif cfg is not None:
        out = cfg.resolve(cfg.output_dir)
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg):
    return cfg.seed if args.seed is None else args.seed


def _load_stage_ckpt(path, phase):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    model, header = load_checkpoint(path)
    if phase is not None and header["phase"] != phase:
        raise ConfigError(f"{path}: checkpoint phase is {header['phase']!r}, expected {phase!r}")
    seed = header.get("seeds", {}).get("run_seed")
    if seed is None:
        raise FormatError(f"{path}: checkpoint carries no run_seed")
    return model, header, seed


def _ckpt_seeds(exp):
    return {"run_seed": exp.seed, **exp.seeds}


def _check_model_matches(exp, model, path):
    if model.config != exp.model_config:
        raise ConfigError(f"{path}: checkpoint architecture or seeds do not match the config")


def _distinct(src, dst):
    if Path(src).resolve() == Path(dst).resolve():
        raise ConfigError(f"refusing to overwrite input file {src}")


def cmd_pretrain(args):
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    exp = P.prepare(cfg, _seed(args, cfg))
    model, log = P.run_pretrain(exp)
    save_checkpoint(out / "pretrained.ckpt", model, "pretrained", _ckpt_seeds(exp))
    log.write_csv(out / "pretrain_log.csv")
    write_json(out / "split_manifest.json", {"format_version": 1, **exp.split.manifest})
    print(f"pretrained: {out / 'pretrained.ckpt'}")
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    ckpt = Path(args.ckpt) if args.ckpt else out / "pretrained.ckpt"
    pre, _, seed = _load_stage_ckpt(ckpt, "pretrained")
    _distinct(ckpt, out / "finetuned.ckpt")
    exp = P.prepare(cfg, seed)
    _check_model_matches(exp, pre, ckpt)
    fin, log = P.run_finetune(exp, pre)
    save_checkpoint(out / "finetuned.ckpt", fin, "finetuned", _ckpt_seeds(exp))
    log.write_csv(out / "finetune_log.csv")
    summary = P.finetune_summary(exp, pre, fin)
    write_json(out / "finetune_summary.json", {"format_version": 1, "best_epoch": log.best_epoch, **summary})
    print(f"finetuned: {out / 'finetuned.ckpt'} (best epoch {log.best_epoch})")
    return 0


def cmd_score(args):
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    ckpt = Path(args.ckpt) if args.ckpt else out / "finetuned.ckpt"
    model, _, seed = _load_stage_ckpt(ckpt, None)
    if args.data:
        x, _ = read_vector_csv(args.data)
        table = P.score_table(model, x=x)
    else:
        exp = P.prepare(cfg, seed)
        _check_model_matches(exp, model, ckpt)
        table = P.score_table(model, exp.split.test)
    write_scores(out / "scores.csv", table)
    print(f"scores: {out / 'scores.csv'} ({len(table['score'])} samples)")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else None
    out = _out_dir(args, cfg)
    scores = Path(args.scores) if args.scores else out / "scores.csv"
    delta = args.delta if args.delta is not None else (cfg.eval.delta if cfg else metrics.DEFAULT_DELTA)
    bins = cfg.eval.histogram_bins if cfg else 50
    table = read_scores(scores)
    summary_path = out / "finetune_summary.json"
    summary = None
    if summary_path.exists():
        summary = {k: v for k, v in json.loads(summary_path.read_text()).items() if k != "format_version"}
    report = P.build_report(table, delta, summary)
    _distinct(scores, out / "report.json")
    write_json(out / "report.json", report.to_dict())
    edges, c_id, c_ood = metrics.histogram(table["score"], table["is_ood"], bins)
    write_csv(out / "histogram.csv", ("bin_lo", "bin_hi", "count_id", "count_ood"),
              zip(edges[:-1], edges[1:], c_id, c_ood))
    print(f"auroc {report.auroc:.4f}  fpr@95tpr {report.fpr_at_95_tpr:.4f}  "
          f"detection_error {report.detection_error:.4f}  accuracy@delta {report.threshold_accuracy:.4f}")
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)

    def progress(i, row, _):
        print(f"cell {i}: detection_error {row['detection_error']:.4f} "
              f"disc id/ood {row['id_discrepancy']:.3f}/{row['ood_discrepancy']:.3f}")

    rows = P.run_ablation(cfg, _seed(args, cfg), progress)
    write_csv(out / "ablation.csv", P.ABLATION_COLUMNS, ([r[c] for c in P.ABLATION_COLUMNS] for r in rows))
    return 0


def cmd_run(args):
    for step in (cmd_pretrain, cmd_finetune, cmd_score, cmd_eval):
        step(args)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mcd-ood", description="Two-head discrepancy OOD detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "pretrain": (cmd_pretrain, "supervised pre-training of both heads"),
        "finetune": (cmd_finetune, "discrepancy fine-tuning from a pre-trained checkpoint"),
        "score": (cmd_score, "write per-sample scores for the test split or a vector CSV"),
        "eval": (cmd_eval, "metrics report and histogram from a score CSV"),
        "ablate": (cmd_ablate, "one full run per grid cell in the config's ablate section"),
        "run": (cmd_run, "pretrain, finetune, score and eval in sequence"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name != "eval", help="experiment JSON config")
        p.add_argument("--ckpt", help="input checkpoint")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="run seed override")
        p.add_argument("--delta", type=float, help="OOD threshold on the L1 score")
        if name in ("score", "run"):
            p.add_argument("--data", help="vector CSV to score instead of the test split")
        if name in ("eval", "run"):
            p.add_argument("--scores", help="score CSV (default: <out>/scores.csv)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.command == "run":
        args.ckpt = None  # each stage reads the previous stage's output
    try:
        return args.func(args)
    except McdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
