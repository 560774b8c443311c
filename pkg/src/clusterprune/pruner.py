"""Filter selection criteria, the prune-and-merge rewrite, and cost reports.

When a dropped filter is an exact copy of a kept one (weights and bias), its
feature map duplicates the kept map. Every consumer can then fold the input
channel of the dropped filter into the kept filter's channel and discard it,
leaving the network function unchanged.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .clusters import ClusterSpec, pair_count, resolve_ratios
from .errors import DecisionError
from .graph import ChannelGroup, LayerKind, ModelGraph, channel_groups, count_costs, forward
from .rng import Rng


@dataclass(frozen=True)
class LayerDecision:
    keep: tuple[int, ...]
    drop: tuple[int, ...]
    merge: dict[int, int] = field(default_factory=dict)  # dropped index -> kept partner

    def to_dict(self) -> dict:
        return {
            "keep": list(self.keep),
            "drop": list(self.drop),
            "merge": {str(k): v for k, v in sorted(self.merge.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerDecision":
        return cls(
            tuple(d["keep"]),
            tuple(d["drop"]),
            {int(k): int(v) for k, v in d.get("merge", {}).items()},
        )


@dataclass
class PruneDecision:
    criterion: str
    layers: dict[str, LayerDecision]

    def to_json(self) -> str:
        return json.dumps(
            {"criterion": self.criterion, "layers": {n: d.to_dict() for n, d in self.layers.items()}},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PruneDecision":
        d = json.loads(text)
        return cls(d["criterion"], {n: LayerDecision.from_dict(v) for n, v in d["layers"].items()})

    def drop_counts(self) -> dict[str, int]:
        return {n: len(d.drop) for n, d in self.layers.items()}


def _decision(n: int, drop) -> LayerDecision:
    drop = sorted(int(i) for i in drop)
    keep = [i for i in range(n) if i not in set(drop)]
    return LayerDecision(tuple(keep), tuple(drop))


def _per_group(model: ModelGraph, ratios, score_drop) -> dict[str, LayerDecision]:
    ratios = resolve_ratios(model, ratios)
    out = {}
    for group in channel_groups(model):
        rs = {ratios[n] for n in group.producers}
        if len(rs) != 1:
            raise DecisionError(f"residual-joined layers {group.producers} need one ratio")
        k = pair_count(group.channels, rs.pop())
        dec = _decision(group.channels, score_drop(group, k) if k else [])
        for name in group.producers:
            out[name] = dec
    return out


def _lowest(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` smallest scores, lower index first on ties."""
    return list(np.lexsort((np.arange(len(scores)), scores))[:k])


def select_cluster(model: ModelGraph, spec: ClusterSpec) -> PruneDecision:
    """Keep the lower-index member of every size-2 cluster, drop the other."""
    spec.check(model)
    layers = {}
    for name, lc in spec.layers.items():
        pairs = lc.pairs()
        dec = _decision(lc.n_filters, pairs[:, 1])
        layers[name] = replace(dec, merge={int(b): int(a) for a, b in pairs})
    return PruneDecision("cluster", layers)


def weight_sums(weights: np.ndarray) -> np.ndarray:
    """Sum of absolute weights per filter (bias excluded)."""
    return np.abs(weights.reshape(-1, weights.shape[-1])).sum(axis=0)


def select_weight_sum(model: ModelGraph, ratios) -> PruneDecision:
    """Drop the filters with the smallest absolute weight sum."""
    def drop(group: ChannelGroup, k):
        scores = sum(weight_sums(model.params[n][0]) for n in group.producers)
        return _lowest(scores, k)

    return PruneDecision("weight-sum", _per_group(model, ratios, drop))


def apoz(model: ModelGraph, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Fraction of exactly-zero post-ReLU activations per channel, per group.

    Measured at the first ReLU downstream of each group's producers and keyed
    by every producer in the group.
    """
    if len(images) == 0:
        raise DecisionError("APoZ needs a non-empty sample")
    groups = channel_groups(model)
    zeros = {g.producers[0]: 0 for g in groups}
    sizes = {}
    for i in range(0, len(images), batch_size):
        _, acts = forward(model, images[i:i + batch_size], record=True)
        for g in groups:
            if g.relu is None:
                raise DecisionError(f"no ReLU after {g.producers}; APoZ is undefined")
            a = acts[g.relu]
            zeros[g.producers[0]] = zeros[g.producers[0]] + (a == 0.0).reshape(-1, a.shape[-1]).sum(axis=0)
            sizes[g.producers[0]] = int(np.prod(a.shape[1:-1]))
    out = {}
    for g in groups:
        value = zeros[g.producers[0]] / (len(images) * sizes[g.producers[0]])
        for name in g.producers:
            out[name] = value
    return out


def select_apoz(model: ModelGraph, images: np.ndarray, ratios) -> PruneDecision:
    """Drop the filters whose activations are most often zero."""
    scores = apoz(model, images)

    def drop(group: ChannelGroup, k):
        return _lowest(-scores[group.producers[0]], k)

    return PruneDecision("apoz", _per_group(model, ratios, drop))


def select_random(model: ModelGraph, ratios, rng: Rng) -> PruneDecision:
    """Drop a uniformly random subset of each group's filters."""
    def drop(group: ChannelGroup, k):
        return rng.choice(group.channels, k)

    return PruneDecision("random", _per_group(model, ratios, drop))


def check_decision(model: ModelGraph, decision: PruneDecision) -> list[tuple[ChannelGroup, LayerDecision]]:
    groups = channel_groups(model)
    known = {n for g in groups for n in g.producers}
    extra = set(decision.layers) - known
    if extra:
        raise DecisionError(f"decision names non-prunable layers {sorted(extra)}")
    out = []
    for g in groups:
        decs = [decision.layers.get(n) for n in g.producers]
        if all(d is None for d in decs):
            continue
        if any(d != decs[0] for d in decs):
            raise DecisionError(f"residual-joined layers {g.producers} need identical decisions")
        d = decs[0]
        if sorted(d.keep + d.drop) != list(range(g.channels)):
            raise DecisionError(f"keep/drop of {g.producers[0]!r} do not partition 0..{g.channels - 1}")
        if not d.keep:
            raise DecisionError(f"decision removes every filter of {g.producers[0]!r}")
        for j2, j1 in d.merge.items():
            if j2 not in d.drop or j1 not in d.keep:
                raise DecisionError(f"merge {j2}->{j1} in {g.producers[0]!r} must map dropped to kept")
        out.append((g, d))
    return out


def prune_and_merge(model: ModelGraph, decision: PruneDecision, use_centroid: bool = False) -> ModelGraph:
    """Remove dropped filters and rewrite every consumer of their channels.

    For a merged pair ``dropped -> kept`` the consumer's input-channel slice of
    the dropped filter is added into the kept slice before removal. Plain
    drops (no partner) just delete the slice. With ``use_centroid`` the kept
    filter is first replaced by the mean of itself and its dropped partner.
    """
    plan = check_decision(model, decision)
    params = {n: (w.copy(), b.copy()) for n, (w, b) in model.params.items()}
    specs = {s.name: s for s in model.layers}
    for group, dec in plan:
        keep = list(dec.keep)
        for name in group.producers:
            w, b = params[name]
            if use_centroid:
                for j2, j1 in dec.merge.items():
                    w[..., j1] = 0.5 * (w[..., j1] + w[..., j2])
                    b[j1] = 0.5 * (b[j1] + b[j2])
            params[name] = (np.ascontiguousarray(w[..., keep]), b[keep])
            specs[name] = replace(specs[name], out_channels=len(keep))
        for name in group.consumers:
            spec = specs[name]
            w, b = params[name]
            c = group.channels
            w3 = w.reshape(-1, c, w.shape[-1]).copy()
            for j2, j1 in sorted(dec.merge.items()):
                w3[:, j1, :] += w3[:, j2, :]
            w3 = w3[:, keep, :]
            if spec.kind == LayerKind.CONV:
                new_w = w3.reshape(spec.kernel, spec.kernel, len(keep), w.shape[-1])
                specs[name] = replace(spec, in_channels=len(keep))
            else:
                new_w = w3.reshape(-1, w.shape[-1])
                specs[name] = replace(spec, in_channels=new_w.shape[0])
            params[name] = (np.ascontiguousarray(new_w), b)
    return ModelGraph(model.input_shape, [specs[s.name] for s in model.layers], params)


@dataclass(frozen=True)
class LayerReport:
    name: str
    kind: str
    filters_before: int
    filters_after: int
    p_in: Fraction
    p_out: Fraction
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int

    @property
    def formula_ratio(self) -> Fraction:
        return (1 - self.p_in) * (1 - self.p_out)

    @property
    def mac_ratio(self) -> Fraction:
        return Fraction(self.macs_after, self.macs_before) if self.macs_before else Fraction(1)

    @property
    def param_ratio(self) -> Fraction:
        return Fraction(self.params_after, self.params_before) if self.params_before else Fraction(1)

    @property
    def activation_ratio(self) -> Fraction:
        return 1 - self.p_out


REPORT_COLUMNS = [
    "layer", "kind", "filters_before", "filters_after", "p_in", "p_out",
    "formula_ratio", "mac_ratio", "param_ratio", "activation_ratio",
    "params_before", "params_after", "macs_before", "macs_after",
]


@dataclass
class PruneReport:
    criterion: str
    layers: list[LayerReport]

    @property
    def params_before(self) -> int:
        return sum(r.params_before for r in self.layers)

    @property
    def params_after(self) -> int:
        return sum(r.params_after for r in self.layers)

    @property
    def macs_before(self) -> int:
        return sum(r.macs_before for r in self.layers)

    @property
    def macs_after(self) -> int:
        return sum(r.macs_after for r in self.layers)

    @property
    def speedup(self) -> float:
        return self.macs_before / self.macs_after

    @property
    def compression(self) -> float:
        return self.params_before / self.params_after

    def rows(self) -> list[dict]:
        out = []
        for r in self.layers:
            out.append({
                "layer": r.name, "kind": r.kind,
                "filters_before": r.filters_before, "filters_after": r.filters_after,
                "p_in": float(r.p_in), "p_out": float(r.p_out),
                "formula_ratio": float(r.formula_ratio), "mac_ratio": float(r.mac_ratio),
                "param_ratio": float(r.param_ratio), "activation_ratio": float(r.activation_ratio),
                "params_before": r.params_before, "params_after": r.params_after,
                "macs_before": r.macs_before, "macs_after": r.macs_after,
            })
        out.append({
            "layer": "TOTAL", "kind": "", "filters_before": "", "filters_after": "",
            "p_in": "", "p_out": "", "formula_ratio": "",
            "mac_ratio": self.macs_after / self.macs_before,
            "param_ratio": self.params_after / self.params_before, "activation_ratio": "",
            "params_before": self.params_before, "params_after": self.params_after,
            "macs_before": self.macs_before, "macs_after": self.macs_after,
        })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"criterion: {self.criterion}",
                 f"{'layer':<14}{'N':>9}{'p_in':>8}{'p_out':>8}{'ratio':>8}{'MACs':>22}{'params':>18}"]
        for r in self.layers:
            lines.append(
                f"{r.name:<14}{r.filters_before:>4}->{r.filters_after:<4}"
                f"{float(r.p_in):>7.3f}{float(r.p_out):>8.3f}{float(r.mac_ratio):>8.3f}"
                f"{r.macs_before:>11}->{r.macs_after:<9}{r.params_before:>8}->{r.params_after:<8}"
            )
        lines.append(
            f"total params {self.params_before} -> {self.params_after} "
            f"(compression {self.compression:.3f}x), MACs {self.macs_before} -> {self.macs_after} "
            f"(speedup {self.speedup:.3f}x)"
        )
        return "\n".join(lines)


def make_report(before: ModelGraph, after: ModelGraph, decision: PruneDecision) -> PruneReport:
    """Per-layer and total costs of a rewrite, checked against the rewritten model."""
    check_decision(before, decision)
    cb, ca = count_costs(before).by_name(), count_costs(after).by_name()
    if set(cb) != set(ca):
        raise DecisionError("models have different conv/dense layers")
    rows = []
    for spec in before.layers:
        if spec.name not in cb:
            continue
        new = after.layer(spec.name)
        p_in = 1 - Fraction(new.in_channels, spec.in_channels)
        p_out = 1 - Fraction(new.out_channels, spec.out_channels)
        dec = decision.layers.get(spec.name)
        if dec is not None and len(dec.keep) != new.out_channels:
            raise DecisionError(f"layer {spec.name!r} has {new.out_channels} filters, decision keeps {len(dec.keep)}")
        rows.append(LayerReport(
            spec.name, spec.kind.value, spec.out_channels, new.out_channels, p_in, p_out,
            cb[spec.name].params, ca[spec.name].params, cb[spec.name].macs, ca[spec.name].macs,
        ))
    return PruneReport(decision.criterion, rows)


def prune(model: ModelGraph, criterion: str, ratios, *, spec: ClusterSpec | None = None,
          images: np.ndarray | None = None, rng: Rng | None = None):
    """Select with the named criterion, rewrite, and report.

    Returns ``(pruned_model, decision, report)``.
    """
    if criterion == "cluster":
        if spec is None:
            raise DecisionError("cluster criterion needs a ClusterSpec")
        decision = select_cluster(model, spec)
    elif criterion == "weight-sum":
        decision = select_weight_sum(model, ratios)
    elif criterion == "apoz":
        if images is None:
            raise DecisionError("apoz criterion needs sample images")
        decision = select_apoz(model, images, ratios)
    elif criterion == "random":
        decision = select_random(model, ratios, rng or Rng(0))
    else:
        raise DecisionError(f"unknown criterion {criterion!r}")
    pruned = prune_and_merge(model, decision)
    return pruned, decision, make_report(model, pruned, decision)

