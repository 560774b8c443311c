"""Fixed filter clusters and the cluster loss that pulls their members together.

A filter's cluster vector is its flattened weights with its bias appended,
so two members with zero cluster distance produce identical feature maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClusterError
from .graph import ModelGraph, channel_groups

MAX_RATIO = 0.5


def pair_count(n: int, ratio: float) -> int:
    """``floor(n * ratio)``, robust to float error in products like 100 * 0.29."""
    return math.floor(n * ratio + 1e-9)


def check_ratio(ratio: float) -> None:
    if ratio < 0:
        raise ClusterError(f"pruned ratio must be >= 0, got {ratio}")
    if ratio > MAX_RATIO:
        raise ClusterError(f"pruned ratio {ratio} exceeds the 0.5 limit for clusters of size 2")


@dataclass(frozen=True)
class LayerClusters:
    """Assignment of each filter of one layer to a cluster id."""

    assignment: tuple[int, ...]
    ratio: float

    @property
    def n_filters(self) -> int:
        return len(self.assignment)

    @property
    def n_clusters(self) -> int:
        return len(set(self.assignment))

    def members(self) -> list[tuple[int, ...]]:
        """Filter indices of each cluster, ordered by cluster id."""
        out: dict[int, list[int]] = {}
        for idx, t in enumerate(self.assignment):
            out.setdefault(t, []).append(idx)
        return [tuple(out[t]) for t in sorted(out)]

    def pairs(self) -> np.ndarray:
        """``(P, 2)`` array of size-2 clusters, lower index first."""
        p = [m for m in self.members() if len(m) == 2]
        return np.array(p, dtype=np.int64).reshape(-1, 2)

    @property
    def effective_ratio(self) -> float:
        return len(self.pairs()) / self.n_filters

    def validate(self) -> None:
        check_ratio(self.ratio)
        sizes = [len(m) for m in self.members()]
        if any(s > 2 for s in sizes):
            raise ClusterError("cluster larger than two filters")
        n2 = sizes.count(2)
        if n2 != pair_count(self.n_filters, self.ratio):
            raise ClusterError(
                f"{n2} size-2 clusters but floor({self.n_filters} * {self.ratio}) "
                f"= {pair_count(self.n_filters, self.ratio)}"
            )


def assign_clusters(n: int, ratio: float) -> LayerClusters:
    """Pair adjacent filters ``(2t, 2t+1)`` for the first ``floor(n * ratio)`` clusters.

    The remaining filters become singletons.
    """
    if n < 1:
        raise ClusterError(f"filter count must be >= 1, got {n}")
    check_ratio(ratio)
    pairs = pair_count(n, ratio)
    assignment = [i // 2 for i in range(2 * pairs)]
    assignment += [pairs + k for k in range(n - 2 * pairs)]
    return LayerClusters(tuple(assignment), float(ratio))


@dataclass
class ClusterSpec:
    """Cluster assignment for each clustered layer, keyed by layer name."""

    layers: dict[str, LayerClusters] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            name: {"assignment": list(lc.assignment), "ratio": lc.ratio}
            for name, lc in self.layers.items()
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        spec = cls({
            name: LayerClusters(tuple(int(t) for t in v["assignment"]), float(v["ratio"]))
            for name, v in d.items()
        })
        for lc in spec.layers.values():
            lc.validate()
        return spec

    def check(self, model: ModelGraph) -> None:
        """Raise unless every prunable layer is covered with the right filter count
        and residual-tied layers share one assignment."""
        for group in channel_groups(model):
            first = None
            for name in group.producers:
                if name not in self.layers:
                    raise ClusterError(f"no clusters defined for layer {name!r}")
                lc = self.layers[name]
                if lc.n_filters != model.layer(name).out_channels:
                    raise ClusterError(
                        f"layer {name!r} has {model.layer(name).out_channels} filters, "
                        f"clusters cover {lc.n_filters}"
                    )
                if first is not None and lc.assignment != first:
                    raise ClusterError(f"residual-joined layers {group.producers} must share clusters")
                first = lc.assignment
        known = {n for g in channel_groups(model) for n in g.producers}
        extra = set(self.layers) - known
        if extra:
            raise ClusterError(f"clusters given for non-prunable layers {sorted(extra)}")


def build_cluster_spec(model: ModelGraph, ratios) -> ClusterSpec:
    """Clusters for every prunable layer.

    ``ratios`` is one float, a list aligned with ``model.prunable()``, or a
    dict keyed by layer name. Residual-tied layers get the same assignment and
    must be given the same ratio.
    """
    ratios = resolve_ratios(model, ratios)
    layers = {}
    for group in channel_groups(model):
        rs = {ratios[n] for n in group.producers}
        if len(rs) != 1:
            raise ClusterError(f"residual-joined layers {group.producers} need one ratio, got {sorted(rs)}")
        lc = assign_clusters(group.channels, rs.pop())
        for name in group.producers:
            layers[name] = lc
    return ClusterSpec(layers)


def resolve_ratios(model: ModelGraph, ratios) -> dict[str, float]:
    names = model.prunable()
    if isinstance(ratios, dict):
        unknown = set(ratios) - set(names)
        if unknown:
            raise ClusterError(f"ratios given for non-prunable layers {sorted(unknown)}")
        out = {n: float(ratios.get(n, 0.0)) for n in names}
    elif isinstance(ratios, (int, float)):
        out = {n: float(ratios) for n in names}
    else:
        ratios = list(ratios)
        if len(ratios) != len(names):
            raise ClusterError(f"{len(ratios)} ratios for {len(names)} prunable layers {names}")
        out = dict(zip(names, map(float, ratios)))
    for r in out.values():
        check_ratio(r)
    return out


def cluster_vectors(weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``(N, K+1)`` rows: each filter's flattened weights followed by its bias."""
    n = weights.shape[-1]
    return np.concatenate([weights.reshape(-1, n).T, bias[:, None]], axis=1)


def centroid(members) -> np.ndarray:
    """Elementwise mean of the member vectors."""
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise ClusterError("empty cluster has no centroid")
    shape = members[0].shape
    if any(m.shape != shape for m in members):
        raise ClusterError("cluster members differ in shape")
    return np.mean(np.stack(members), axis=0)


@dataclass(frozen=True)
class ClusterLossReport:
    per_layer: dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(self.per_layer.values()))


def _layer_loss(vectors: np.ndarray, lc: LayerClusters) -> float:
    pairs = lc.pairs()
    if not len(pairs):
        return 0.0
    a, b = vectors[pairs[:, 0]], vectors[pairs[:, 1]]
    c = 0.5 * (a + b)
    return float(np.sum((a - c) ** 2) + np.sum((b - c) ** 2))


def cluster_loss(model: ModelGraph, spec: ClusterSpec, check: bool = True) -> tuple[float, ClusterLossReport]:
    """Sum over clustered layers and clusters of squared member-to-centroid distance.

    Not scaled by the loss weight; the trainer applies that.
    """
    if check:
        spec.check(model)
    per_layer = {}
    for name, lc in spec.layers.items():
        w, b = model.params[name]
        per_layer[name] = _layer_loss(cluster_vectors(w, b), lc)
    report = ClusterLossReport(per_layer)
    return report.total, report


def cluster_loss_grad(model: ModelGraph, spec: ClusterSpec, mode: str = "frozen", check: bool = True) -> dict:
    """Gradient of :func:`cluster_loss` per layer as ``(grad_weights, grad_bias)``.

    ``frozen`` treats each centroid as a constant, giving ``2 (k - c)``.
    ``differentiated`` also carries the path through the centroid; because the
    centroid is the member mean that extra term sums to zero, so both modes
    agree up to rounding.
    """
    if mode not in ("frozen", "differentiated"):
        raise ValueError(f"unknown cluster gradient mode {mode!r}")
    if check:
        spec.check(model)
    grads = {}
    for name, lc in spec.layers.items():
        w, b = model.params[name]
        v = cluster_vectors(w, b)
        g = np.zeros_like(v)
        pairs = lc.pairs()
        if len(pairs):
            ka, kb = v[pairs[:, 0]], v[pairs[:, 1]]
            if mode == "frozen":
                # 2 (k_a - c) with c the pair mean; written so the two halves negate exactly
                g[pairs[:, 0]] = ka - kb
                g[pairs[:, 1]] = kb - ka
            else:
                c = 0.5 * (ka + kb)
                da, db = ka - c, kb - c
                through_c = (da + db) / 2
                g[pairs[:, 0]] = 2.0 * (da - through_c)
                g[pairs[:, 1]] = 2.0 * (db - through_c)
        grads[name] = (g[:, :-1].T.reshape(w.shape), g[:, -1].copy())
    return grads
