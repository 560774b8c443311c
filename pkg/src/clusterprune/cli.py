"""Command-line entry point: ``clusterprune <subcommand>``.

Exit codes: 0 success, 1 usage or config error, 2 data/file error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from .clusters import build_cluster_spec
from .config import CRITERIA, apply_overrides, load_config
from .errors import ClusterError, ConfigError, DataError, DecisionError, FormatError, NumericError, ShapeError
from .experiments import (
    COMPARE_COLUMNS,
    COMPARE_RUN_COLUMNS,
    build_model,
    compare_summary,
    describe_run,
    lambda_sweep,
    load_data,
    prune_with,
    rows_to_csv,
    run_compare,
    write_manifest,
)
from .serialize import load_checkpoint, save_model
from .trainer import evaluate, finetune, train, train_from_scratch

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out=True):
    p.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.lam=0.1 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    if out:
        p.add_argument("--out", help="output directory (default: config output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clusterprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model, with the cluster loss unless disabled")
    _common(p)
    p.add_argument("--no-cluster", action="store_true", help="plain training without the cluster term")

    p = sub.add_parser("prune", help="prune a checkpoint with a selection criterion")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--ratio", type=float, help="uniform pruned ratio for every prunable layer")

    p = sub.add_parser("finetune", help="fine-tune a pruned checkpoint")
    _common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    _common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("compare", help="criterion x pruned-ratio grid")
    _common(p)
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p.add_argument("--lambda-grid", type=float, nargs="+", metavar="LAM",
                   help="also sweep the cluster-loss weight over these values")

    p = sub.add_parser("report", help="render CSV outputs of earlier runs as tables")
    p.add_argument("path", help="run directory or a CSV file")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    return parser


def _config(args):
    cfg = load_config(args.config)
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"train.seed={args.seed}")
    if getattr(args, "ratio", None) is not None:
        sets.append(f"ratios={args.ratio}")
    if getattr(args, "criterion", None) is not None:
        sets.append(f"criterion={json.dumps(args.criterion)}")
    return apply_overrides(cfg, sets) if sets else cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_data, test_data = load_data(cfg)
    model = build_model(cfg, train_data.shape, train_data.num_classes, cfg.train.seed)
    spec = None if args.no_cluster or cfg.criterion != "cluster" else build_cluster_spec(model, cfg.ratios)
    start = time.perf_counter()
    trained, metrics = train(model, train_data, spec, cfg.train, test_data)
    save_model(trained, out / "model.bin", spec)
    (out / "metrics.csv").write_text(metrics.to_csv())
    print(describe_run(metrics))
    write_manifest(out, cfg, "train", [out / "model.bin", out / "metrics.csv"],
                   {"wall_clock_s": time.perf_counter() - start, "cluster_loss": spec is not None})
    return 0


def cmd_prune(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, spec = load_checkpoint(args.model)
    train_data, test_data = load_data(cfg)
    criterion = cfg.criterion
    if criterion == "scratch":
        raise UsageError("'scratch' is a training baseline, not a selector; run finetune with "
                         "--set criterion='\"scratch\"' on a pruned checkpoint")
    if criterion == "cluster" and (spec is None or args.ratio is not None):
        spec = build_cluster_spec(model, cfg.ratios)
    pruned, decision, report = prune_with(cfg, model, criterion, train_data, spec=spec)
    save_model(pruned, out / "pruned.bin")
    (out / "decision.json").write_text(decision.to_json() + "\n")
    (out / "prune_report.csv").write_text(report.to_csv())
    (out / "prune_report.txt").write_text(report.summary() + "\n")
    before, after = evaluate(model, test_data), evaluate(pruned, test_data)
    print(report.summary())
    print(f"accuracy before {before:.4f}, after pruning {after:.4f}")
    write_manifest(out, cfg, "prune",
                   [out / "pruned.bin", out / "decision.json", out / "prune_report.csv"],
                   {"source_model": str(args.model), "acc_before": before, "acc_after": after})
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, _ = load_checkpoint(args.model)
    train_data, test_data = load_data(cfg)
    if cfg.criterion == "scratch":
        tuned, metrics = train_from_scratch(model, train_data, cfg.train, test_data)
    else:
        tuned, metrics = finetune(model, train_data, cfg.finetune, test_data)
    save_model(tuned, out / "finetuned.bin")
    (out / "metrics.csv").write_text(metrics.to_csv())
    print(describe_run(metrics))
    write_manifest(out, cfg, "finetune", [out / "finetuned.bin", out / "metrics.csv"],
                   {"source_model": str(args.model), "wall_clock_s": metrics.wall_clock})
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.model)
    _, test_data = load_data(cfg)
    acc = evaluate(model, test_data)
    print(f"accuracy {acc:.4f} on {len(test_data)} examples")
    if args.out:
        out = _out_dir(args, cfg)
        (out / "eval.json").write_text(json.dumps({"model": str(args.model), "accuracy": acc}) + "\n")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    start = time.perf_counter()
    runs, agg = run_compare(cfg, args.workers)
    (out / "compare_runs.csv").write_text(rows_to_csv(runs, COMPARE_RUN_COLUMNS))
    (out / "compare.csv").write_text(rows_to_csv(agg, COMPARE_COLUMNS))
    summary = compare_summary(agg)
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    outputs = [out / "compare.csv", out / "compare_runs.csv"]
    if args.lambda_grid:
        rows = lambda_sweep(cfg, args.lambda_grid, cfg.compare.ratios)
        (out / "lambda_sweep.csv").write_text(
            rows_to_csv(rows, ["lam", "p", "seed", "cluster_loss", "acc", "pruned_acc"]))
        outputs.append(out / "lambda_sweep.csv")
    write_manifest(out, cfg, "compare", outputs, {"wall_clock_s": time.perf_counter() - start})
    return 0


def _table(path: Path) -> str:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return f"{path.name}: empty"
    widths = [max(len(_fmt(r[i])) for r in rows if i < len(r)) for i in range(len(rows[0]))]
    lines = [path.name]
    for r in rows:
        lines.append("  ".join(_fmt(c).rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def _fmt(cell: str) -> str:
    try:
        v = float(cell)
    except ValueError:
        return cell
    if v.is_integer() and "." not in cell:
        return cell
    return f"{v:.4f}"


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        files = [path / n for n in ("prune_report.csv", "compare.csv", "compare_runs.csv",
                                    "lambda_sweep.csv", "metrics.csv") if (path / n).exists()]
    else:
        files = [path]
    if not files:
        raise FileNotFoundError(f"no CSV outputs under {path}")
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f)
        print(f.read_text() if args.format == "csv" else _table(f) + "\n", end="" if args.format == "csv" else "\n")
    return 0


COMMANDS = {
    "train": cmd_train, "prune": cmd_prune, "finetune": cmd_finetune,
    "eval": cmd_eval, "compare": cmd_compare, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ClusterError, DecisionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
