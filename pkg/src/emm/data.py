"""Tabular multi-task data: feature specs, encoding, splits, generators."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
import yaml
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DataError

ROLES = ("dense", "sparse", "label")
OOV = "<oov>"


@dataclass
class ColumnSpec:
    name: str
    role: str
    task: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.role == "label" and not self.task:
            self.task = self.name


@dataclass
class FeatureSpec:
    """Column roles for one dataset. Label columns name the task they supervise."""

    columns: list[ColumnSpec]
    emb_dim: int = 4

    def __post_init__(self):
        self.columns = [c if isinstance(c, ColumnSpec) else ColumnSpec(**c) for c in self.columns]
        if not self.labels:
            raise ConfigError("feature spec needs at least one label column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate column names in feature spec: {names}")
        if self.emb_dim < 1:
            raise ConfigError("emb_dim must be positive")

    @property
    def dense(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "dense"]

    @property
    def sparse(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "sparse"]

    @property
    def labels(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.role == "label"]

    @property
    def tasks(self) -> list[str]:
        return [c.task for c in self.labels]

    def to_dict(self) -> dict:
        return {"emb_dim": self.emb_dim,
                "columns": [{"name": c.name, "role": c.role, **({"task": c.task} if c.task else {})}
                            for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        unknown = set(d) - {"columns", "emb_dim"}
        if unknown:
            raise ConfigError(f"unknown feature-spec keys: {sorted(unknown)}")
        return cls(columns=d.get("columns", []), emb_dim=d.get("emb_dim", 4))

    @classmethod
    def load(cls, path) -> "FeatureSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


class TabularEncoder(TransformerMixin, BaseEstimator):
    """Z-scores dense columns and maps sparse columns to integer ids.

    Output rows are ``[dense... | sparse ids...]``; id 0 is reserved for
    categories unseen during ``fit``. Embedding lookup itself happens inside
    the models (see :class:`emm.layers.EmbeddingConcat`).
    """

    def __init__(self, dense=(), sparse=()):
        self.dense = dense
        self.sparse = sparse

    def fit(self, X: pd.DataFrame, y=None):
        self._check_columns(X)
        dense = X[list(self.dense)].to_numpy(dtype=np.float64) if self.dense else np.empty((len(X), 0))
        self.mean_ = dense.mean(axis=0) if len(dense) else np.zeros(dense.shape[1])
        self.std_ = dense.std(axis=0) if len(dense) else np.zeros(dense.shape[1])
        self.vocabularies_ = {}
        for col in self.sparse:
            cats = pd.unique(X[col].astype(str))
            self.vocabularies_[col] = {c: i + 1 for i, c in enumerate(sorted(cats))}
        self.n_features_out_ = len(self.dense) + len(self.sparse)
        return self

    @property
    def cardinalities_(self) -> tuple[int, ...]:
        check_is_fitted(self, "vocabularies_")
        return tuple(len(self.vocabularies_[c]) + 1 for c in self.sparse)

    def transform(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "vocabularies_")
        self._check_columns(X)
        out = np.zeros((len(X), self.n_features_out_))
        if self.dense:
            dense = X[list(self.dense)].to_numpy(dtype=np.float64)
            safe = np.where(self.std_ > 0, self.std_, 1.0)
            # constant columns carry no signal: encode as zeros
            out[:, :len(self.dense)] = np.where(self.std_ > 0, (dense - self.mean_) / safe, 0.0)
        for j, col in enumerate(self.sparse):
            vocab = self.vocabularies_[col]
            out[:, len(self.dense) + j] = X[col].astype(str).map(vocab).fillna(0).to_numpy()
        return out

    def _check_columns(self, X: pd.DataFrame) -> None:
        missing = [c for c in (*self.dense, *self.sparse) if c not in X.columns]
        if missing:
            raise DataError(f"missing feature columns: {missing}")


@dataclass
class Batch:
    x: np.ndarray
    labels: dict[str, np.ndarray]

    def __post_init__(self):
        if len(self.x) < 1:
            raise DataError("empty batch")


@dataclass
class TaskDataset:
    """Encoded features, per-task 0/1 labels and a train/val/test tag per row."""

    X: np.ndarray
    labels: dict[str, np.ndarray]
    splits: np.ndarray
    n_dense: int
    cardinalities: tuple[int, ...] = ()
    emb_dim: int = 4
    spec: FeatureSpec | None = None
    name: str = "dataset"
    encoder: TabularEncoder | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.X)
        for task, y in self.labels.items():
            if len(y) != n:
                raise DataError(f"label {task!r} has {len(y)} rows, features have {n}")
        if len(self.splits) != n:
            raise DataError("split tags do not cover every row")

    @property
    def tasks(self) -> list[str]:
        return list(self.labels)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return len(self.X)

    def split(self, name: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        rows = self.splits == name
        return self.X[rows], {t: y[rows] for t, y in self.labels.items()}

    def label_matrix(self, name: str | None = None, tasks: Sequence[str] | None = None) -> np.ndarray:
        tasks = list(tasks or self.tasks)
        rows = slice(None) if name is None else self.splits == name
        return np.stack([self.labels[t][rows] for t in tasks], axis=1)

    def batches(self, name: str, batch_size: int, seed: int | None = None) -> Iterator[Batch]:
        X, Y = self.split(name)
        order = np.arange(len(X)) if seed is None else np.random.default_rng(seed).permutation(len(X))
        for start in range(0, len(X), batch_size):
            rows = order[start:start + batch_size]
            yield Batch(X[rows], {t: y[rows] for t, y in Y.items()})

    def select_tasks(self, tasks: Sequence[str]) -> "TaskDataset":
        missing = [t for t in tasks if t not in self.labels]
        if missing:
            raise DataError(f"dataset has no labels for tasks {missing}")
        return TaskDataset(self.X, {t: self.labels[t] for t in tasks}, self.splits, self.n_dense,
                           self.cardinalities, self.emb_dim, self.spec, self.name, self.encoder)


def assign_splits(n: int, seed: int, test_fraction: float = 0.2,
                  val_fraction: float = 0.1) -> np.ndarray:
    """Seeded row tags: ``test_fraction`` held out, then ``val_fraction`` of the rest."""
    if not (0 <= test_fraction < 1 and 0 <= val_fraction < 1):
        raise ConfigError("split fractions must lie in [0, 1)")
    order = np.random.default_rng([seed, 0x5B117]).permutation(n)
    n_test = int(round(n * test_fraction))
    n_val = int(round((n - n_test) * val_fraction))
    tags = np.full(n, "train", dtype=object)
    tags[order[:n_test]] = "test"
    tags[order[n_test:n_test + n_val]] = "val"
    return tags.astype(str)


def _binary_labels(frame: pd.DataFrame, col: str) -> np.ndarray:
    values = frame[col]
    numeric = pd.to_numeric(values, errors="coerce")
    bad = numeric.isna() | ~numeric.isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"label column {col!r} is not binary: row {row} holds {values.iloc[row]!r}")
    return numeric.to_numpy(dtype=np.float64)


def encode_frame(frame: pd.DataFrame, spec: FeatureSpec, seed: int = 0,
                 test_fraction: float = 0.2, val_fraction: float = 0.1,
                 name: str = "dataset") -> TaskDataset:
    """Validate, split and encode a DataFrame; encoder statistics use train rows only."""
    if frame.empty:
        raise DataError(f"{name}: no rows")
    missing = [c.name for c in spec.columns if c.name not in frame.columns]
    if missing:
        raise DataError(f"{name}: missing columns {missing}")
    labels = {c.task: _binary_labels(frame, c.name) for c in spec.labels}
    for col in spec.dense:
        vals = pd.to_numeric(frame[col], errors="coerce")
        if vals.isna().any():
            row = int(np.flatnonzero(vals.isna().to_numpy())[0])
            raise DataError(f"{name}: dense column {col!r} has a non-numeric value at row {row}")
    splits = assign_splits(len(frame), seed, test_fraction, val_fraction)
    encoder = TabularEncoder(dense=tuple(spec.dense), sparse=tuple(spec.sparse))
    encoder.fit(frame.loc[splits == "train"])
    X = encoder.transform(frame)
    return TaskDataset(X, labels, splits, len(spec.dense), encoder.cardinalities_, spec.emb_dim,
                       spec, name, encoder)


def ingest_csv(path, spec: FeatureSpec, seed: int = 0, test_fraction: float = 0.2,
               val_fraction: float = 0.1) -> TaskDataset:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path}: empty file") from exc
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such file") from exc
    return encode_frame(frame, spec, seed, test_fraction, val_fraction, name=path.stem)


# ---------------------------------------------------------------------------
# generators


def task_directions(n_tasks: int, n_features: int, rho: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Unit vectors with pairwise cosine similarity exactly ``rho``."""
    if n_features < n_tasks + 1:
        raise ConfigError("need n_features > n_tasks for the shared direction")
    q, _ = np.linalg.qr(rng.standard_normal((n_features, n_tasks + 1)))
    shared, own = q[:, 0], q[:, 1:]
    return (np.sqrt(rho) * shared[:, None] + np.sqrt(1.0 - rho) * own).T


def make_synthetic(n_rows: int, n_tasks: int, rho: float, seed: int, n_features: int = 20,
                   noise: float = 0.1, test_fraction: float = 0.2,
                   val_fraction: float = 0.1) -> TaskDataset:
    """Gaussian features with ``label_t = 1[w_t . x + eps > 0]``.

    The task directions ``w_t`` are unit vectors with pairwise cosine ``rho``;
    ``eps ~ N(0, noise^2)`` independently per task.
    """
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    rng = np.random.default_rng([seed, 0xD47A])
    W = task_directions(n_tasks, max(n_features, n_tasks + 1), rho, rng)
    X = rng.standard_normal((n_rows, W.shape[1]))
    margins = X @ W.T + noise * rng.standard_normal((n_rows, n_tasks))
    labels = {f"task{t + 1}": (margins[:, t] > 0).astype(np.float64) for t in range(n_tasks)}
    splits = assign_splits(n_rows, seed, test_fraction, val_fraction)
    return TaskDataset(X, labels, splits, X.shape[1], (), 4, None, f"synthetic-rho{rho:g}")


CENSUS_DENSE = ["age", "wage_per_hour", "capital_gains", "capital_losses", "dividends",
                "num_persons_worked", "weeks_worked"]


def make_census_like(n_rows: int, seed: int, n_sparse: int = 33) -> tuple[pd.DataFrame, FeatureSpec]:
    """Census-Income shaped frame: 7 dense, ``n_sparse`` categorical, two labels.

    ``income`` (rare positive, ~10%) and ``marital`` (~45% positive) share
    latent drivers (age, education, work intensity) so the tasks are related
    but not identical. Relationships are non-linear in the raw columns.
    """
    rng = np.random.default_rng([seed, 0xCE5])
    n = n_rows
    age = np.clip(rng.gamma(6.0, 6.5, n), 0, 90).round()
    edu = rng.integers(0, 17, n)
    worker = rng.integers(0, 9, n)
    occupation = rng.integers(0, 15, n)
    industry = rng.integers(0, 24, n)
    sex = rng.integers(0, 2, n)
    household = rng.integers(0, 8, n)
    adult = age >= 18
    weeks = np.where(adult, np.clip(rng.normal(40, 18, n), 0, 52), 0).round()
    wage = np.where(weeks > 0, np.abs(rng.normal(0, 1, n)) * 30 * (1 + edu / 8), 0).round(2)
    gains = np.where(rng.random(n) < 0.05, rng.exponential(5000, n), 0).round()
    losses = np.where(rng.random(n) < 0.03, rng.exponential(1500, n), 0).round()
    dividends = np.where(rng.random(n) < 0.12, rng.exponential(800, n), 0).round()
    persons = rng.integers(0, 7, n)

    occ_effect = rng.normal(0, 0.6, 15)
    ind_effect = rng.normal(0, 0.4, 24)
    hh_effect = rng.normal(0, 1.0, 8)
    age_c = (age - 45.0) / 15.0
    income_score = (1.2 * (edu - 8) / 4 - 1.0 * age_c ** 2 + 1.0 * weeks / 52
                    + occ_effect[occupation] + ind_effect[industry] + 0.5 * sex
                    + 1.5 * (gains > 0) + 0.6 * (dividends > 0) + 0.4 * hh_effect[household]
                    + rng.normal(0, 0.8, n))
    income = (income_score > np.quantile(income_score, 0.90)).astype(int)
    marital_score = (1.8 * np.tanh((age - 30) / 8) + 1.2 * hh_effect[household]
                     + 0.3 * (income_score - income_score.mean()) + rng.normal(0, 0.6, n))
    marital = ((marital_score > 0.4) & adult).astype(int)

    frame = pd.DataFrame({
        "age": age, "wage_per_hour": wage, "capital_gains": gains, "capital_losses": losses,
        "dividends": dividends, "num_persons_worked": persons, "weeks_worked": weeks,
    })
    informative = {"education": edu, "class_of_worker": worker, "occupation": occupation,
                   "industry": industry, "sex": sex, "household_status": household}
    sparse_names = []
    for k, (col, vals) in enumerate(informative.items()):
        if k >= n_sparse:
            break
        frame[col] = [f"{col[:3]}{v}" for v in vals]
        sparse_names.append(col)
    for j in range(len(sparse_names), n_sparse):
        col = f"cat_{j:02d}"
        card = int(rng.integers(2, 12))
        frame[col] = [f"v{v}" for v in rng.integers(0, card, n)]
        sparse_names.append(col)
    frame["income"] = income
    frame["marital"] = marital
    spec = FeatureSpec(
        [ColumnSpec(c, "dense") for c in CENSUS_DENSE]
        + [ColumnSpec(c, "sparse") for c in sparse_names]
        + [ColumnSpec("income", "label", "income"), ColumnSpec("marital", "label", "marital")],
        emb_dim=4)
    return frame, spec
