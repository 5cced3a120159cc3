"""Training configuration and the shared minibatch SGD epoch."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 60
    lr_drop_epoch: int = 40
    lr_drop_factor: float = 0.1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "lr_drop_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "max_epochs", "lr_drop_epoch", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` (one step drop)."""
        return self.lr * (self.lr_drop_factor if self.lr_drop_epoch and epoch >= self.lr_drop_epoch else 1.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**data)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled index chunks of near-equal size (never a lone sample when n >= 2)."""
    if n == 0:
        return []
    order = rng.permutation(n)
    return np.array_split(order, -(-n // batch_size))


def sgd_epoch(graph, x, y, config: TrainConfig, rng, velocity: dict, epoch: int = 0):
    """One pass of momentum SGD; returns ``(mean loss, running train accuracy)``."""
    lr = config.lr_at(epoch)
    total, correct = 0.0, 0
    for idx in minibatches(len(y), config.batch_size, rng):
        logits, tape = graph.run(x[idx], "train", record=True)
        loss, dlogits, _ = tc.softmax_cross_entropy(logits, y[idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"epoch {epoch}: non-finite loss")
        _, grads = graph.backward(dlogits, tape, need_input_grad=False)
        try:
            tc.sgd_step(graph.params, grads, velocity, lr, config.momentum, config.weight_decay)
        except tc.NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from None
        total += loss * len(idx)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y[idx]))
    n = max(len(y), 1)
    return total / n, correct / n
