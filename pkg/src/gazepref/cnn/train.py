"""Mini-batch SGD training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import LabeledImages
from .network import (NetworkState, backward, forward, init_state, loss, predict_batch,
                      scale_inputs, sgd_step)
from .spec import NetworkSpec


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 6000
    batch: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_decay_step: int = 4000
    dropout: float = 0.5
    seed: int = 0
    val_every: int = 500

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1:
            raise ValueError("iterations must be >= 0 and batch >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.lr_decay_step < 1 or self.val_every < 1:
            raise ValueError("lr_decay_step and val_every must be >= 1")

    def lr_at(self, it: int) -> float:
        """Learning rate for 0-based iteration ``it``."""
        return self.lr * self.lr_decay ** (it // self.lr_decay_step)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    val_acc: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0
    config: TrainConfig | None = None

    def to_jsonl(self) -> str:
        lines = [json.dumps({"iter": i + 1, "loss": v}) for i, v in enumerate(self.losses)]
        lines += [json.dumps({"iter": i, "val_acc": a}) for i, a in self.val_acc]
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self) -> dict:
        return {"iterations": len(self.losses),
                "final_loss": self.losses[-1] if self.losses else None,
                "val_acc": self.val_acc,
                "seconds": round(self.seconds, 3),
                "config": asdict(self.config) if self.config else None}


class BatchStream:
    """Endless index stream: a fresh permutation per epoch, short tails wrap."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.pool = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch
        while need:
            if self.pos == self.n:
                self.pool = self.rng.permutation(self.n)
                self.pos = 0
            take = min(need, self.n - self.pos)
            out.append(self.pool[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return np.concatenate(out)


def _with_dropout(spec: NetworkSpec, p: float) -> NetworkSpec:
    from .spec import Dropout
    layers = tuple(Dropout(p) if isinstance(l, Dropout) else l for l in spec.layers)
    return NetworkSpec(layers, spec.input_shape)


def accuracy(state: NetworkState, data: LabeledImages) -> float:
    pred, _ = predict_batch(state, data.images)
    return float(np.mean(pred == data.labels)) if len(data) else 0.0


def train(spec: NetworkSpec, train_data: LabeledImages, val_data: LabeledImages | None,
          config: TrainConfig = TrainConfig(), state: NetworkState | None = None,
          log=None) -> tuple[NetworkState, TrainReport]:
    """Train from scratch (or from ``state``) with momentum SGD.

    ``log`` is an optional callable receiving each report record as a dict.
    """
    spec = _with_dropout(spec, config.dropout)
    if len(train_data) == 0:
        raise ValueError("empty training set")
    labels = train_data.labels
    if labels.max() >= spec.classes:
        raise ValueError(f"training labels exceed the network's {spec.classes} classes")
    if state is None:
        state = init_state(spec, config.seed)
    else:
        state.spec = spec
    report = TrainReport(config=config)
    stream = BatchStream(len(train_data), config.batch, np.random.default_rng([config.seed, 1]))
    drop_rng = np.random.default_rng([config.seed, 2])

    start = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        _run(state, spec, train_data, val_data, config, report, stream, drop_rng, labels, log)
    report.seconds = time.perf_counter() - start
    return state, report


def _run(state, spec, train_data, val_data, config, report, stream, drop_rng, labels, log):
    for it in range(config.iterations):
        idx = stream.next()
        x = scale_inputs(train_data.images[idx])
        probs, cache = forward(state, x, "train", drop_rng)
        value = loss(probs, labels[idx])
        if not np.isfinite(value):
            raise DivergenceError(
                f"non-finite loss at iteration {it + 1} (lr={config.lr_at(it)}); "
                "lower the learning rate")
        sgd_step(state, backward(cache, labels[idx]), config.lr_at(it), config.momentum)
        report.losses.append(value)
        if log:
            log({"iter": it + 1, "loss": value})
        if val_data is not None and len(val_data) and (it + 1) % config.val_every == 0:
            acc = accuracy(state, val_data)
            report.val_acc.append((it + 1, acc))
            if log:
                log({"iter": it + 1, "val_acc": acc})
