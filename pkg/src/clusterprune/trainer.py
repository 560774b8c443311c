"""Momentum SGD on cross-entropy + weight decay + weighted cluster loss."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .clusters import ClusterSpec, cluster_loss, cluster_loss_grad
from .data import Dataset, augment
from .errors import NumericError
from .graph import ModelGraph, backward, init_params, predict
from .rng import Rng


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lam: float = Field(0.05, ge=0, description="cluster-loss weight")
    weight_decay: float = Field(5e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(128, gt=0)
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.05, gt=0)
    # (epoch, divisor) pairs; None divides by 5 at every 20% of the epoch budget
    lr_steps: list[tuple[int, float]] | None = None
    seed: int = Field(0, ge=0, lt=2**64)
    cluster_grad: Literal["frozen", "differentiated"] = "frozen"
    augment: bool = False

    @field_validator("lr_steps")
    @classmethod
    def _steps_increase(cls, v):
        if v is None:
            return v
        epochs = [e for e, _ in v]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if any(d <= 0 for _, d in v):
            raise ValueError("schedule divisors must be positive")
        return v

    def schedule(self) -> list[tuple[int, float]]:
        if self.lr_steps is not None:
            return [tuple(s) for s in self.lr_steps]
        marks = sorted({round(self.epochs * k / 5) for k in range(1, 5)} - {0})
        return [(m, 5.0) for m in marks]

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, div in self.schedule():
            if epoch >= start:
                lr /= div
        return lr


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    total: float
    ce: float
    reg: float
    cluster: float
    train_acc: float
    eval_acc: float | None
    cluster_layers: dict[str, float] = field(default_factory=dict)


@dataclass
class RunMetrics:
    epochs: list[EpochMetrics] = field(default_factory=list)
    wall_clock: float = 0.0

    def columns(self) -> list[str]:
        layers = list(self.epochs[0].cluster_layers) if self.epochs else []
        return ["epoch", "lr", "loss_total", "loss_ce", "loss_reg", "loss_cluster",
                "train_acc", "eval_acc"] + [f"cluster:{n}" for n in layers]

    def to_csv(self) -> str:
        """One row per epoch. Floats use repr so reruns compare byte for byte."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for m in self.epochs:
            writer.writerow(
                [m.epoch, repr(m.lr), repr(m.total), repr(m.ce), repr(m.reg), repr(m.cluster),
                 repr(m.train_acc), "" if m.eval_acc is None else repr(m.eval_acc)]
                + [repr(v) for v in m.cluster_layers.values()]
            )
        return buf.getvalue()

    @property
    def final(self) -> EpochMetrics | None:
        return self.epochs[-1] if self.epochs else None


def weight_penalty(model: ModelGraph) -> float:
    """Half the squared L2 norm of all conv/dense weights, biases excluded."""
    return 0.5 * float(sum(np.sum(w * w) for w, _ in model.params.values()))


EpochHook = Callable[[int, ModelGraph, EpochMetrics], None]


def train(model: ModelGraph, data: Dataset, spec: ClusterSpec | None, config: TrainConfig,
          eval_data: Dataset | None = None, on_epoch: EpochHook | None = None):
    """Minimize ``CE + weight_decay * R + lam * cluster_loss`` with momentum SGD.

    ``model`` is not modified; a trained copy is returned with the metrics.
    Each step uses ``v <- momentum * v + g`` then ``w <- w - lr * v``, where
    ``g`` is the full objective gradient. Without ``spec`` the cluster term is
    omitted.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if spec is not None:
        spec.check(model)
    model = model.copy()
    rng = Rng(config.seed)
    velocity = {n: (np.zeros_like(w), np.zeros_like(b)) for n, (w, b) in model.params.items()}
    metrics = RunMetrics()
    start = time.perf_counter()
    lam = config.lam if spec is not None else 0.0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.derive(1, epoch).permutation(len(data))
        sums = np.zeros(4)
        correct = 0
        steps = 0
        for step, i in enumerate(range(0, len(data), config.batch_size)):
            idx = order[i:i + config.batch_size]
            x = data.images[idx]
            if config.augment:
                x = augment(x, rng.derive(2, epoch, step))
            # overflow shows up as a non-finite loss below; no need for numpy warnings too
            with np.errstate(over="ignore", invalid="ignore"):
                ce, grads, logits = backward(model, x, data.labels[idx])
                reg = weight_penalty(model)
            if spec is not None:
                cl, _ = cluster_loss(model, spec, check=False)
                cgrads = cluster_loss_grad(model, spec, config.cluster_grad, check=False)
            else:
                cl, cgrads = 0.0, {}
            total = ce + config.weight_decay * reg + lam * cl
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {step}")
            sums += (total, ce, reg, cl)
            steps += 1
            correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[idx]))
            for name, (w, b) in model.params.items():
                gw, gb = grads[name]
                gw = gw + config.weight_decay * w
                if name in cgrads:
                    gw = gw + lam * cgrads[name][0]
                    gb = gb + lam * cgrads[name][1]
                vw, vb = velocity[name]
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
                w -= lr * vw
                b -= lr * vb
        means = sums / steps
        layer_cl = cluster_loss(model, spec)[1].per_layer if spec is not None else {}
        m = EpochMetrics(
            epoch=epoch + 1, lr=lr, total=float(means[0]), ce=float(means[1]),
            reg=float(means[2]), cluster=float(means[3]), train_acc=correct / len(data),
            eval_acc=evaluate(model, eval_data) if eval_data is not None else None,
            cluster_layers=dict(layer_cl),
        )
        metrics.epochs.append(m)
        if on_epoch is not None:
            on_epoch(epoch + 1, model, m)
    metrics.wall_clock = time.perf_counter() - start
    return model, metrics


def finetune(model: ModelGraph, data: Dataset, config: TrainConfig, eval_data: Dataset | None = None,
             on_epoch: EpochHook | None = None):
    """Plain training (no cluster term) of an already pruned model."""
    return train(model, data, None, config, eval_data, on_epoch)


def train_from_scratch(architecture: ModelGraph, data: Dataset, config: TrainConfig,
                       eval_data: Dataset | None = None):
    """Fresh initialization of ``architecture``'s layers, then plain training."""
    fresh = ModelGraph(
        architecture.input_shape, list(architecture.layers),
        init_params(architecture.layers, Rng(config.seed).derive(7)),
    )
    return train(fresh, data, None, config, eval_data)


def evaluate(model: ModelGraph, data: Dataset) -> float:
    """Top-1 accuracy."""
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    return float(np.mean(predict(model, data.images) == data.labels))
