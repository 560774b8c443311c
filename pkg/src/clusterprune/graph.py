"""Small CNN graphs: description, execution, backprop, and cost accounting."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Rng

INPUT = "input"


class LayerKind(str, Enum):
    CONV = "conv"
    DENSE = "dense"
    RELU = "relu"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    FLATTEN = "flatten"
    ADD = "add"


PARAM_KINDS = (LayerKind.CONV, LayerKind.DENSE)


@dataclass(frozen=True)
class LayerSpec:
    """One node of a model graph.

    ``in_channels``/``out_channels`` are M/N for conv layers and D/N for dense
    layers. ``kernel`` and ``stride`` double as pool size and stride.
    """

    name: str
    kind: LayerKind
    inputs: tuple[str, ...]
    kernel: int = 1
    stride: int = 1
    padding: int | str = 0
    in_channels: int = 0
    out_channels: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            name=d["name"],
            kind=LayerKind(d["kind"]),
            inputs=tuple(d["inputs"]),
            kernel=int(d["kernel"]),
            stride=int(d["stride"]),
            padding=d["padding"],
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
        )


@dataclass
class ModelGraph:
    """Layers in topological order plus a parameter store.

    ``params`` maps each conv/dense layer name to ``(weights, bias)``. The last
    layer is the model output.
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    params: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def output(self) -> str:
        return self.layers[-1].name

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes()[self.output]))

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {INPUT: []}
        for spec in self.layers:
            out.setdefault(spec.name, [])
            for src in spec.inputs:
                out[src].append(spec.name)
        return out

    def prunable(self) -> list[str]:
        """Conv/dense layers whose filters may be removed (never the output layer)."""
        return [s.name for s in self.layers if s.kind in PARAM_KINDS and s.name != self.output]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer (and of ``input``)."""
        shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        for spec in self.layers:
            ins = [shapes[i] for i in spec.inputs]
            shapes[spec.name] = _infer(spec, ins)
        return shapes

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("model has no layers")
        seen = {INPUT}
        for spec in self.layers:
            if spec.name in seen:
                raise ShapeError(f"duplicate or reserved layer name {spec.name!r}")
            for src in spec.inputs:
                if src not in seen:
                    raise ShapeError(f"layer {spec.name!r} reads {src!r} before it is defined")
            want = 2 if spec.kind == LayerKind.ADD else 1
            if len(spec.inputs) != want:
                raise ShapeError(f"layer {spec.name!r} needs {want} input(s), has {len(spec.inputs)}")
            seen.add(spec.name)
            if spec.kind in PARAM_KINDS:
                if spec.out_channels < 1 or spec.kernel < 1:
                    raise ShapeError(f"layer {spec.name!r} has empty geometry")
                if spec.name not in self.params:
                    raise ShapeError(f"layer {spec.name!r} has no parameters")
                w, b = self.params[spec.name]
                want_w = (
                    (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)
                    if spec.kind == LayerKind.CONV
                    else (spec.in_channels, spec.out_channels)
                )
                if w.shape != want_w or b.shape != (spec.out_channels,):
                    raise ShapeError(
                        f"layer {spec.name!r} parameters {w.shape}/{b.shape} do not match {want_w}"
                    )
        dangling = [n for n, c in self.consumers().items() if not c and n != self.output]
        if dangling:
            raise ShapeError(f"graph has more than one output: {dangling + [self.output]}")
        self.shapes()

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [s.to_dict() for s in self.layers],
        }

    @classmethod
    def from_architecture(cls, arch: dict, params=None, rng: Rng | None = None) -> "ModelGraph":
        layers = [LayerSpec.from_dict(d) for d in arch["layers"]]
        if params is None:
            params = init_params(layers, rng or Rng(0))
        return cls(tuple(arch["input_shape"]), layers, params)


def _infer(spec: LayerSpec, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    k = spec.kind
    shape = ins[0]
    if k == LayerKind.CONV:
        if len(shape) != 3 or shape[2] != spec.in_channels:
            raise ShapeError(f"layer {spec.name!r} expects (H, W, {spec.in_channels}) input, got {shape}")
        pad = T.resolve_padding(spec.padding, spec.kernel)
        try:
            h = T.conv_output_size(shape[0], spec.kernel, spec.stride, pad)
            w = T.conv_output_size(shape[1], spec.kernel, spec.stride, pad)
        except ShapeError as e:
            raise ShapeError(f"layer {spec.name!r}: {e}") from None
        return (h, w, spec.out_channels)
    if k == LayerKind.DENSE:
        if len(shape) != 1 or shape[0] != spec.in_channels:
            raise ShapeError(f"layer {spec.name!r} expects ({spec.in_channels},) input, got {shape}")
        return (spec.out_channels,)
    if k in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
        if len(shape) != 3:
            raise ShapeError(f"layer {spec.name!r} expects a 3-d input, got {shape}")
        try:
            h = T.conv_output_size(shape[0], spec.kernel, spec.stride, 0)
            w = T.conv_output_size(shape[1], spec.kernel, spec.stride, 0)
        except ShapeError as e:
            raise ShapeError(f"layer {spec.name!r}: {e}") from None
        return (h, w, shape[2])
    if k == LayerKind.FLATTEN:
        return (int(np.prod(shape)),)
    if k == LayerKind.ADD:
        if ins[0] != ins[1]:
            raise ShapeError(f"layer {spec.name!r} joins branches of shape {ins[0]} and {ins[1]}")
        return shape
    return shape


def init_params(layers: list[LayerSpec], rng: Rng) -> dict:
    """Fan-in scaled Gaussian weights (std sqrt(2 / fan_in)) and zero biases."""
    params = {}
    for i, spec in enumerate(layers):
        if spec.kind == LayerKind.CONV:
            shape = (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)
            fan_in = spec.kernel * spec.kernel * spec.in_channels
        elif spec.kind == LayerKind.DENSE:
            shape = (spec.in_channels, spec.out_channels)
            fan_in = spec.in_channels
        else:
            continue
        w = rng.derive(i).normal(shape, scale=np.sqrt(2.0 / fan_in))
        params[spec.name] = (w, np.zeros(spec.out_channels))
    return params


class Builder:
    """Helper for writing layer lists; each call chains off the previous layer."""

    def __init__(self, input_shape):
        self.input_shape = tuple(input_shape)
        self.layers: list[LayerSpec] = []
        self._shape = {INPUT: self.input_shape}
        self.last = INPUT

    def _add(self, spec: LayerSpec) -> str:
        self.layers.append(spec)
        self._shape[spec.name] = _infer(spec, [self._shape[i] for i in spec.inputs])
        self.last = spec.name
        return spec.name

    def conv(self, name, filters, kernel=3, stride=1, padding="same", src=None):
        src = src or self.last
        m = self._shape[src][2]
        return self._add(LayerSpec(name, LayerKind.CONV, (src,), kernel, stride, padding, m, filters))

    def dense(self, name, units, src=None):
        src = src or self.last
        return self._add(LayerSpec(name, LayerKind.DENSE, (src,), in_channels=self._shape[src][0], out_channels=units))

    def relu(self, name, src=None):
        return self._add(LayerSpec(name, LayerKind.RELU, (src or self.last,)))

    def maxpool(self, name, size=2, src=None):
        return self._add(LayerSpec(name, LayerKind.MAXPOOL, (src or self.last,), kernel=size, stride=size))

    def avgpool(self, name, size=2, src=None):
        return self._add(LayerSpec(name, LayerKind.AVGPOOL, (src or self.last,), kernel=size, stride=size))

    def flatten(self, name, src=None):
        return self._add(LayerSpec(name, LayerKind.FLATTEN, (src or self.last,)))

    def add(self, name, a, b):
        return self._add(LayerSpec(name, LayerKind.ADD, (a, b)))

    def build(self, rng: Rng) -> ModelGraph:
        return ModelGraph(self.input_shape, list(self.layers), init_params(self.layers, rng))


def desk_cnn(input_shape=(16, 16, 1), filters=(16, 32, 32), num_classes=10, seed=0) -> ModelGraph:
    """Plain conv stack: [conv3x3 -> relu (-> maxpool)] per stage, then a dense head.

    A 2x2 max-pool follows every stage except the last.
    """
    b = Builder(input_shape)
    for i, n in enumerate(filters, start=1):
        b.conv(f"conv{i}", n)
        b.relu(f"relu{i}")
        if i < len(filters):
            b.maxpool(f"pool{i}")
    b.flatten("flatten")
    b.dense("fc", num_classes)
    return b.build(Rng(seed))


def residual_cnn(input_shape=(16, 16, 1), filters=(16, 16), num_classes=10, seed=0) -> ModelGraph:
    """Stem conv followed by residual blocks with 1x1 conv shortcuts.

    Each block is ``relu(convB(relu(convA(x))) + shortcut(x))`` and blocks are
    separated by 2x2 max-pools.
    """
    b = Builder(input_shape)
    b.conv("stem", filters[0])
    x = b.relu("stem_relu")
    for i, n in enumerate(filters, start=1):
        b.conv(f"block{i}_a", n, src=x)
        b.relu(f"block{i}_a_relu")
        main = b.conv(f"block{i}_b", n)
        short = b.conv(f"block{i}_short", n, kernel=1, padding=0, src=x)
        b.add(f"block{i}_add", main, short)
        x = b.relu(f"block{i}_relu")
        if i < len(filters):
            x = b.maxpool(f"block{i}_pool")
    b.flatten("flatten")
    b.dense("fc", num_classes)
    return b.build(Rng(seed))


def forward(model: ModelGraph, x, record: bool = False):
    """Run the model on ``(H, W, M)`` or ``(B, H, W, M)`` input.

    Returns ``(logits, activations)``; ``activations`` maps every layer name to
    its output when ``record`` is set, else it is ``None``.
    """
    logits, acts, _ = _run(model, x, keep_cache=False)
    return logits, (acts if record else None)


def _run(model: ModelGraph, x, keep_cache: bool):
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or xb.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    acts = {INPUT: xb}
    cache = {}
    for spec in model.layers:
        a = acts[spec.inputs[0]]
        k = spec.kind
        try:
            if k == LayerKind.CONV:
                w, bias = model.params[spec.name]
                out, cols = T.conv2d_forward_cols(a, w, bias, spec.stride, spec.padding)
                if keep_cache:
                    cache[spec.name] = cols
            elif k == LayerKind.DENSE:
                w, bias = model.params[spec.name]
                out = T.dense_forward(a, w, bias)
            elif k == LayerKind.RELU:
                out = T.relu_forward(a)
            elif k == LayerKind.MAXPOOL:
                out = T.maxpool_forward(a, spec.kernel, spec.stride)
            elif k == LayerKind.AVGPOOL:
                out = T.avgpool_forward(a, spec.kernel, spec.stride)
            elif k == LayerKind.FLATTEN:
                out = a.reshape(a.shape[0], -1)
            else:
                out = a + acts[spec.inputs[1]]
        except ShapeError as e:
            raise ShapeError(f"layer {spec.name!r}: {e}") from None
        acts[spec.name] = out
    logits = acts[model.output]
    if single:
        logits = logits[0]
        acts = {n: v[0] for n, v in acts.items()}
    return logits, acts, cache


def backward(model: ModelGraph, x, labels):
    """Mean softmax cross-entropy over the batch and its parameter gradients.

    Returns ``(loss, grads, logits)`` with ``grads`` mapping layer name to
    ``(grad_weights, grad_bias)``.
    """
    x = np.asarray(x)
    xb = x[None] if x.ndim == 3 else x
    logits, acts, cache = _run(model, xb, keep_cache=True)
    loss, g = T.softmax_cross_entropy(logits, np.atleast_1d(labels))
    upstream = {model.output: g}
    grads = {}
    for spec in reversed(model.layers):
        g = upstream.pop(spec.name, None)
        if g is None:
            continue
        a = acts[spec.inputs[0]]
        k = spec.kind
        if k == LayerKind.CONV:
            w, _ = model.params[spec.name]
            pad = T.resolve_padding(spec.padding, spec.kernel)
            gi, gw, gb = T.conv2d_backward_cols(cache[spec.name], a.shape, w, g, spec.stride, pad)
            grads[spec.name] = (gw, gb)
        elif k == LayerKind.DENSE:
            w, _ = model.params[spec.name]
            gi, gw, gb = T.dense_backward(a, w, g)
            grads[spec.name] = (gw, gb)
        elif k == LayerKind.RELU:
            gi = T.relu_backward(a, g)
        elif k == LayerKind.MAXPOOL:
            gi = T.maxpool_backward(a, g, spec.kernel, spec.stride)
        elif k == LayerKind.AVGPOOL:
            gi = T.avgpool_backward(a, g, spec.kernel, spec.stride)
        elif k == LayerKind.FLATTEN:
            gi = g.reshape(a.shape)
        else:
            _accumulate(upstream, spec.inputs[1], g)
            gi = g
        _accumulate(upstream, spec.inputs[0], gi)
    return loss, grads, logits


def _accumulate(upstream, name, g):
    if name == INPUT:
        return
    if name in upstream:
        upstream[name] = upstream[name] + g
    else:
        upstream[name] = g


def predict(model: ModelGraph, x, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward(model, x[i:i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class CostReport:
    layers: list[LayerCost]

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(c.macs for c in self.layers)

    def by_name(self) -> dict[str, LayerCost]:
        return {c.name: c for c in self.layers}


def count_costs(model: ModelGraph | None) -> CostReport:
    """Parameter and multiply-accumulate counts per conv/dense layer."""
    if model is None:
        return CostReport([])
    shapes = model.shapes()
    rows = []
    for spec in model.layers:
        if spec.kind == LayerKind.CONV:
            h, w, n = shapes[spec.name]
            weights = spec.kernel * spec.kernel * spec.in_channels * n
            rows.append(LayerCost(spec.name, spec.kind.value, weights + n, h * w * weights))
        elif spec.kind == LayerKind.DENSE:
            weights = spec.in_channels * spec.out_channels
            rows.append(LayerCost(spec.name, spec.kind.value, weights + spec.out_channels, weights))
    return CostReport(rows)


@dataclass(frozen=True)
class ChannelGroup:
    """Producers whose output channels must be pruned together.

    Producers meeting at a residual add share channel indices, so they form
    one group. ``consumers`` are the conv/dense layers reading those channels
    and ``relu`` is the first ReLU downstream (where APoZ is measured).
    """

    producers: tuple[str, ...]
    consumers: tuple[str, ...]
    channels: int
    relu: str | None


def _sources(model: ModelGraph, name: str) -> set[str]:
    """conv/dense layers (or ``input``) feeding ``name`` through channelwise layers."""
    if name == INPUT:
        return {INPUT}
    spec = model.layer(name)
    if spec.kind in PARAM_KINDS:
        return {name}
    out: set[str] = set()
    for src in spec.inputs:
        out |= _sources(model, src)
    return out


def channel_groups(model: ModelGraph) -> list[ChannelGroup]:
    """Group the prunable layers; groups tied to the model input are left out."""
    prunable = set(model.prunable())
    parent = {n: n for n in prunable | {INPUT}}

    def find(n):
        while parent[n] != n:
            n = parent[n]
        return n

    for spec in model.layers:
        if spec.kind == LayerKind.ADD:
            members = sorted(_sources(model, spec.inputs[0]) | _sources(model, spec.inputs[1]),
                             key=lambda n: (n != INPUT, n))
            for other in members[1:]:
                if other in parent and members[0] in parent:
                    parent[find(other)] = find(members[0])

    order = {s.name: i for i, s in enumerate(model.layers)}
    order[INPUT] = -1
    grouped: dict[str, list[str]] = {}
    for n in prunable:
        grouped.setdefault(find(n), []).append(n)

    consumers = model.consumers()
    groups = []
    for root, members in grouped.items():
        if find(INPUT) == root:
            continue
        members.sort(key=order.__getitem__)
        found, relu = set(), None
        stack = list(members)
        seen = set()
        while stack:
            cur = stack.pop()
            for nxt in consumers[cur]:
                if nxt in seen:
                    continue
                seen.add(nxt)
                kind = model.layer(nxt).kind
                if kind in PARAM_KINDS:
                    found.add(nxt)
                else:
                    if kind == LayerKind.RELU and (relu is None or order[nxt] < order[relu]):
                        relu = nxt
                    stack.append(nxt)
        groups.append(ChannelGroup(
            producers=tuple(members),
            consumers=tuple(sorted(found, key=order.__getitem__)),
            channels=model.layer(members[0]).out_channels,
            relu=relu,
        ))
    groups.sort(key=lambda g: order[g.producers[0]])
    return groups
