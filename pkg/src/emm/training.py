"""Minibatch trainer shared by the single-task pool and the fused model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Adam, Parameter, Tensor


@dataclass
class TrainConfig:
    """Optimiser and loop settings. Defaults are the Census-Income profile."""

    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 100
    seed: int = 0
    decoupled_weight_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.weight_decay < 0:
            from .exceptions import ConfigError
            raise ConfigError(f"invalid training settings: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


CENSUS_PROFILE = TrainConfig(batch_size=1024, lr=1e-3, weight_decay=1e-6, epochs=100)
LARGE_SCALE_PROFILE = TrainConfig(batch_size=32768, lr=1e-3, weight_decay=1e-5, epochs=10)


@dataclass
class TrainRun:
    """Settings plus the per-epoch metric log (one entry per completed epoch)."""

    config: TrainConfig
    log: list[list[dict]] = field(default_factory=list)

    @property
    def records(self) -> list[dict]:
        return [r for epoch in self.log for r in epoch]


def make_optimizer(params: Sequence[Parameter], config: TrainConfig) -> Adam:
    return Adam([p for p in params if not p.frozen], lr=config.lr, beta1=config.beta1,
                beta2=config.beta2, eps=config.eps, weight_decay=config.weight_decay,
                decoupled=config.decoupled_weight_decay)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield start // batch_size, order[start:start + batch_size]


def run_epochs(params: Sequence[Parameter], n_rows: int, config: TrainConfig,
               step_loss: Callable[[int, int, np.ndarray], Tensor],
               on_epoch: Callable[[int, float], list[dict]] | None = None) -> TrainRun:
    """Generic Adam loop.

    ``step_loss(epoch, batch_index, rows)`` builds the scalar loss for a batch;
    ``on_epoch(epoch, mean_loss)`` returns the log records for that epoch.
    """
    opt = make_optimizer(params, config)
    rng = np.random.default_rng([config.seed, 0x5EED])
    run = TrainRun(config)
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for b, rows in iterate_minibatches(n_rows, config.batch_size, rng):
            opt.zero_grad()
            loss = step_loss(epoch, b, rows)
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            seen += len(rows)
        mean_loss = total / max(seen, 1)
        run.log.append(on_epoch(epoch, mean_loss) if on_epoch else
                       [{"epoch": epoch, "split": "train", "loss": mean_loss}])
    return run
