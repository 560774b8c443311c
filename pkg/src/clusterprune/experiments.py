"""Pipelines built on the library: train, prune, fine-tune, and criterion sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .clusters import ClusterSpec, build_cluster_spec
from .config import ExperimentConfig, config_hash, render_config
from .data import Dataset, load_idx, synth_dataset
from .graph import ModelGraph, count_costs, desk_cnn, residual_cnn
from .pruner import prune
from .rng import Rng
from .trainer import RunMetrics, evaluate, finetune, train, train_from_scratch


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = config.data
    if d.source == "idx":
        return (
            load_idx(d.train_images, d.train_labels, d.classes, "train"),
            load_idx(d.test_images, d.test_labels, d.classes, "test"),
        )
    return (
        synth_dataset(d.seed, d.n_train, d.classes, d.difficulty, d.size, "train"),
        synth_dataset(d.seed, d.n_test, d.classes, d.difficulty, d.size, "test"),
    )


def build_model(config: ExperimentConfig, input_shape, num_classes: int, seed: int) -> ModelGraph:
    build = desk_cnn if config.arch.name == "desk-cnn" else residual_cnn
    return build(tuple(input_shape), tuple(config.arch.filters), num_classes, seed=seed)


def cluster_spec_for(config: ExperimentConfig, model: ModelGraph, ratios=None) -> ClusterSpec:
    return build_cluster_spec(model, config.ratios if ratios is None else ratios)


def apoz_sample(config: ExperimentConfig, data: Dataset) -> np.ndarray:
    return data.images[:config.data.apoz_samples]


def prune_with(config: ExperimentConfig, model: ModelGraph, criterion: str, data: Dataset,
               spec: ClusterSpec | None = None, ratios=None, seed: int | None = None):
    """Apply one selection criterion. Returns ``(pruned, decision, report)``."""
    ratios = config.ratios if ratios is None else ratios
    if criterion == "cluster" and spec is None:
        spec = build_cluster_spec(model, ratios)
    seed = config.train.seed if seed is None else seed
    return prune(
        model, criterion, ratios, spec=spec,
        images=apoz_sample(config, data) if criterion == "apoz" else None,
        rng=Rng(seed).derive(11),
    )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, config: ExperimentConfig, command: str, outputs: list, extra: dict | None = None):
    """Record what produced the files in ``out_dir``; enough to rerun it exactly."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": json.loads(render_config(config)),
        "seed": config.train.seed,
        "versions": {
            "clusterprune": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "outputs": {Path(p).name: file_digest(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


COMPARE_RUN_COLUMNS = [
    "criterion", "p", "seed", "source_acc", "pruned_acc", "final_acc",
    "params_before", "params_after", "macs_before", "macs_after", "speedup", "compression",
    "costs_match",
]
COMPARE_COLUMNS = [
    "criterion", "p", "seeds", "source_acc_mean", "pruned_acc_mean", "final_acc_mean",
    "final_acc_std", "speedup", "compression",
]


def _compare_seed(config: ExperimentConfig, seed: int, train_data=None, test_data=None) -> list[dict]:
    if train_data is None:
        train_data, test_data = load_data(config)
    train_cfg = config.train.model_copy(update={"seed": seed})
    ft_cfg = config.finetune.model_copy(update={"seed": seed})
    init = build_model(config, train_data.shape, train_data.num_classes, seed)
    base, _ = train(init, train_data, None, train_cfg)
    base_acc = evaluate(base, test_data)
    rows = []
    for p in config.compare.ratios:
        for criterion in config.compare.criteria:
            if criterion == "cluster":
                spec = build_cluster_spec(init, p)
                source, _ = train(init, train_data, spec, train_cfg)
                source_acc = evaluate(source, test_data)
                pruned, _, report = prune(source, "cluster", p, spec=spec)
            elif criterion == "scratch":
                source, source_acc = base, base_acc
                arch, _, report = prune(base, "weight-sum", p)
                pruned, _ = train_from_scratch(arch, train_data, train_cfg)
            else:
                source, source_acc = base, base_acc
                pruned, _, report = prune_with(config, base, criterion, train_data, ratios=p, seed=seed)
            pruned_acc = evaluate(pruned, test_data)
            if criterion == "scratch":
                final_acc = pruned_acc
            else:
                tuned, _ = finetune(pruned, train_data, ft_cfg)
                final_acc = evaluate(tuned, test_data)
            rows.append({
                "criterion": criterion, "p": p, "seed": seed,
                "source_acc": source_acc, "pruned_acc": pruned_acc, "final_acc": final_acc,
                "params_before": report.params_before, "params_after": report.params_after,
                "macs_before": report.macs_before, "macs_after": report.macs_after,
                "speedup": report.speedup, "compression": report.compression,
                "costs_match": _costs_match(report, pruned),
            })
    return rows


def _costs_match(report, model: ModelGraph) -> bool:
    """Report's after-counts agree with a fresh count of the model, layer by layer."""
    costs = count_costs(model).by_name()
    return all(
        costs[r.name].params == r.params_after and costs[r.name].macs == r.macs_after
        for r in report.layers
    ) and len(costs) == len(report.layers)


def _compare_seed_job(args):
    config_json, seed = args
    return _compare_seed(ExperimentConfig.model_validate_json(config_json), seed)


def run_compare(config: ExperimentConfig, workers: int | None = None) -> tuple[list[dict], list[dict]]:
    """Criterion x pruned-ratio grid over the configured seeds.

    Every criterion within a seed prunes the same plainly trained checkpoint
    (the cluster criterion uses a cluster-trained model from the same
    initialization). Returns ``(per_seed_rows, aggregated_rows)``, both
    ordered by criterion then ratio.
    """
    workers = workers or config.compare.workers
    seeds = list(config.compare.seeds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_compare_seed_job, [(config.model_dump_json(), s) for s in seeds]))
    else:
        train_data, test_data = load_data(config)
        chunks = [_compare_seed(config, s, train_data, test_data) for s in seeds]
    runs = [r for chunk in chunks for r in chunk]
    crit_order = {c: i for i, c in enumerate(config.compare.criteria)}
    runs.sort(key=lambda r: (crit_order[r["criterion"]], r["p"], seeds.index(r["seed"])))
    agg = []
    for c in config.compare.criteria:
        for p in sorted(config.compare.ratios):
            cell = [r for r in runs if r["criterion"] == c and r["p"] == p]
            finals = [r["final_acc"] for r in cell]
            agg.append({
                "criterion": c, "p": p, "seeds": len(cell),
                "source_acc_mean": statistics.fmean(r["source_acc"] for r in cell),
                "pruned_acc_mean": statistics.fmean(r["pruned_acc"] for r in cell),
                "final_acc_mean": statistics.fmean(finals),
                "final_acc_std": statistics.pstdev(finals),
                "speedup": cell[0]["speedup"], "compression": cell[0]["compression"],
            })
    return runs, agg


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def compare_summary(agg: list[dict]) -> str:
    ratios = sorted({r["p"] for r in agg})
    crits = list(dict.fromkeys(r["criterion"] for r in agg))
    lines = ["final accuracy (mean over seeds) by criterion and pruned ratio",
             f"{'criterion':<12}" + "".join(f"{p:>10.3f}" for p in ratios)]
    for c in crits:
        cells = {r["p"]: r["final_acc_mean"] for r in agg if r["criterion"] == c}
        lines.append(f"{c:<12}" + "".join(f"{cells[p]:>10.4f}" for p in ratios))
    speed = {r["p"]: r["speedup"] for r in agg}
    lines.append(f"{'speedup':<12}" + "".join(f"{speed[p]:>10.3f}" for p in ratios))
    return "\n".join(lines)


def lambda_sweep(config: ExperimentConfig, lams, ratios, seed: int | None = None) -> list[dict]:
    """Final cluster loss and accuracy before/after pruning over a lambda x ratio grid."""
    train_data, test_data = load_data(config)
    seed = config.train.seed if seed is None else seed
    init = build_model(config, train_data.shape, train_data.num_classes, seed)
    rows = []
    for p in ratios:
        spec = build_cluster_spec(init, p)
        for lam in lams:
            cfg = config.train.model_copy(update={"lam": lam, "seed": seed})
            model, metrics = train(init, train_data, spec, cfg)
            pruned, _, _ = prune(model, "cluster", p, spec=spec)
            rows.append({
                "lam": lam, "p": p, "seed": seed,
                "cluster_loss": sum(metrics.final.cluster_layers.values()),
                "acc": evaluate(model, test_data),
                "pruned_acc": evaluate(pruned, test_data),
            })
    return rows


def pipeline(config: ExperimentConfig, train_data: Dataset | None = None, test_data: Dataset | None = None):
    """Cluster-train, prune, fine-tune; returns a dict of models, metrics and accuracies."""
    if train_data is None:
        train_data, test_data = load_data(config)
    init = build_model(config, train_data.shape, train_data.num_classes, config.train.seed)
    spec = cluster_spec_for(config, init)
    trained, train_metrics = train(init, train_data, spec, config.train, test_data)
    pruned, decision, report = prune(trained, "cluster", config.ratios, spec=spec)
    tuned, ft_metrics = finetune(pruned, train_data, config.finetune, test_data)
    return {
        "trained": trained, "pruned": pruned, "tuned": tuned, "spec": spec,
        "decision": decision, "report": report,
        "train_metrics": train_metrics, "finetune_metrics": ft_metrics,
        "trained_acc": evaluate(trained, test_data),
        "pruned_acc": evaluate(pruned, test_data),
        "tuned_acc": evaluate(tuned, test_data),
    }


def describe_run(metrics: RunMetrics) -> str:
    f = metrics.final
    if f is None:
        return "no epochs run"
    text = f"epochs {f.epoch}: loss {f.total:.4f} (ce {f.ce:.4f}, cluster {f.cluster:.5f}), train acc {f.train_acc:.4f}"
    if f.eval_acc is not None:
        text += f", eval acc {f.eval_acc:.4f}"
    return text + f", {metrics.wall_clock:.1f}s"

