"""Run configuration: a nested YAML/JSON mapping validated up front."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .exceptions import ConfigError
from .training import TrainConfig

DATASET_KINDS = ("csv", "synthetic", "census_like")


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    spec: Any = None  # path to a feature-spec file or an inline mapping
    n_rows: int = 20000
    n_tasks: int = 2
    rho: float = 0.8
    noise: float = 0.1
    n_features: int = 20
    n_sparse: int = 33
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "csv" and (not self.path or self.spec is None):
            raise ConfigError("csv datasets need both dataset.path and dataset.spec")
        if self.n_rows < 10:
            raise ConfigError("dataset.n_rows must be at least 10")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tasks: list[str] | None = None
    architectures: Any = field(default_factory=lambda: [[8, 8], [16, 8, 16, 8]])
    train: TrainConfig = field(default_factory=TrainConfig)
    pool_train: TrainConfig | None = None
    seed: int = 0
    tail: str = "keep"
    tail_mode: str = "strict"
    mtm_score: str = "self"
    use_pretrained: bool = True
    use_mtm: bool = True
    tower_hidden: list[int] | None = None
    gate_input: str = "auto"
    out: str = "runs"

    def __post_init__(self):
        if self.tail not in ("keep", "drop"):
            raise ConfigError(f"tail must be keep|drop, got {self.tail!r}")
        if self.tail_mode not in ("strict", "adapter"):
            raise ConfigError(f"tail_mode must be strict|adapter, got {self.tail_mode!r}")
        if self.mtm_score not in ("self", "cross"):
            raise ConfigError(f"mtm_score must be self|cross, got {self.mtm_score!r}")
        arch = self.architectures
        if isinstance(arch, dict):
            lists = list(arch.values())
        else:
            lists = [arch]
        for archs in lists:
            if not isinstance(archs, list) or not archs or not all(
                    isinstance(a, list) and all(isinstance(w, int) and w > 0 for w in a)
                    for a in archs):
                raise ConfigError("architectures must be a non-empty list of width lists "
                                  "(or a mapping task -> such a list)")

    def architectures_for(self, task: str) -> list[list[int]]:
        if isinstance(self.architectures, dict):
            if task not in self.architectures:
                raise ConfigError(f"no architectures configured for task {task!r}")
            return self.architectures[task]
        return self.architectures

    def train_config(self, pool: bool = False) -> TrainConfig:
        base = self.pool_train if (pool and self.pool_train is not None) else self.train
        return TrainConfig(**{**asdict(base), "seed": self.seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        _reject_unknown("config", raw, [f.name for f in fields(cls)])
        ds = raw.pop("dataset", {}) or {}
        if not isinstance(ds, dict):
            raise ConfigError("dataset must be a mapping")
        _reject_unknown("dataset", ds, [f.name for f in fields(DatasetConfig)])
        kwargs: dict[str, Any] = {"dataset": DatasetConfig(**ds)}
        for key in ("train", "pool_train"):
            if raw.get(key) is not None:
                section = raw.pop(key)
                if not isinstance(section, dict):
                    raise ConfigError(f"{key} must be a mapping")
                _reject_unknown(key, section, [f.name for f in fields(TrainConfig)])
                kwargs[key] = TrainConfig(**section)
            else:
                raw.pop(key, None)
        kwargs.update(raw)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = cls.from_dict(raw)
        # relative dataset paths resolve against the config file
        for attr in ("path", "spec"):
            val = getattr(cfg.dataset, attr)
            if isinstance(val, str) and not Path(val).is_absolute():
                setattr(cfg.dataset, attr, str(path.parent / val))
        return cfg
