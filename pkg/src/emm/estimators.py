"""scikit-learn style wrappers around pool training and fusion."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, DataError
from .data import TaskDataset
from .fusion import EmmConfig, emm_logits, fuse_pool, predict_proba, task_aucs, train_emm
from .store import ModelPool, TrainedModel, build_single, check_binary, fit_model
from .training import TrainConfig


def _train_config(est) -> TrainConfig:
    return TrainConfig(batch_size=est.batch_size, lr=est.lr, weight_decay=est.weight_decay,
                       epochs=est.epochs, seed=est.seed)


class SingleTaskMLP(ClassifierMixin, BaseEstimator):
    """Binary MLP classifier whose fitted network can join a fusion pool.

    Parameters
    ----------
    hidden : sequence of int
        Hidden widths; each hidden Dense layer is followed by a ReLU.
    cardinalities : sequence of int
        Vocabulary sizes (including the OOV row) of trailing sparse-id columns.
        Empty means all columns are dense.
    emb_dim : int
        Embedding width for each sparse column.
    """

    def __init__(self, hidden=(8,), cardinalities=(), emb_dim=4, task="task", model_id=None,
                 batch_size=1024, lr=1e-3, weight_decay=1e-6, epochs=100, seed=0):
        self.hidden = hidden
        self.cardinalities = cardinalities
        self.emb_dim = emb_dim
        self.task = task
        self.model_id = model_id
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_array(X, dtype=np.float64)
        y = check_binary(np.asarray(y).ravel(), self.task)
        if len(y) != len(X):
            raise DataError(f"X has {len(X)} rows but y has {len(y)}")
        mid = self.model_id or f"{self.task}-{'x'.join(map(str, self.hidden)) or 'linear'}"
        self.model_ = build_single(mid, self.task, X.shape[1], list(self.hidden), self.seed,
                                   tuple(self.cardinalities), self.emb_dim)
        if X_val is not None:
            X_val = check_array(X_val, dtype=np.float64)
        self.history_ = fit_model(self.model_, X, y, _train_config(self), X_val, y_val)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: TrainedModel) -> "SingleTaskMLP":
        est = cls(task=model.task, model_id=model.id)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = model.in_dim
        return est

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.logits(X).data[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        p = self.model_.predict_proba(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


class EMMClassifier(ClassifierMixin, BaseEstimator):
    """Multi-task classifier assembled from a pool of fitted single-task models.

    ``fit(X, Y)`` takes one 0/1 label column per pooled task (in ``pool.tasks``
    order); ``predict_proba`` returns one positive-class probability per task.
    """

    def __init__(self, pool=None, tail="keep", tail_mode="strict", mtm_score="self",
                 use_pretrained=True, use_mtm=True, tower_hidden=None, gate_input="auto",
                 batch_size=1024, lr=1e-3, weight_decay=1e-6, epochs=100, seed=0):
        self.pool = pool
        self.tail = tail
        self.tail_mode = tail_mode
        self.mtm_score = mtm_score
        self.use_pretrained = use_pretrained
        self.use_mtm = use_mtm
        self.tower_hidden = tower_hidden
        self.gate_input = gate_input
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed

    def _pool(self) -> ModelPool:
        pool = self.pool
        if pool is None:
            raise ConfigError("EMMClassifier needs a pool of fitted single-task models")
        if isinstance(pool, ModelPool):
            return pool
        models = [p.model_ if isinstance(p, SingleTaskMLP) else p for p in pool]
        return ModelPool(models)

    def _config(self) -> EmmConfig:
        return EmmConfig(use_pretrained=self.use_pretrained, use_mtm=self.use_mtm,
                         mtm_score=self.mtm_score,
                         tower_hidden=None if self.tower_hidden is None else list(self.tower_hidden),
                         gate_input=self.gate_input, seed=self.seed)

    def fit(self, X, Y, X_val=None, Y_val=None):
        pool = self._pool()
        X = check_array(X, dtype=np.float64)
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape != (len(X), len(pool.tasks)):
            raise DataError(f"Y must have shape ({len(X)}, {len(pool.tasks)}), got {Y.shape}")
        labels = {t: check_binary(Y[:, j], t) for j, t in enumerate(pool.tasks)}
        splits = np.full(len(X), "train")
        if X_val is not None:
            X_val = check_array(X_val, dtype=np.float64)
            Y_val = np.asarray(Y_val).reshape(len(X_val), -1)
            X = np.vstack([X, X_val])
            labels = {t: np.r_[labels[t], check_binary(Y_val[:, j], t)]
                      for j, t in enumerate(pool.tasks)}
            splits = np.r_[splits, np.full(len(X_val), "val")]
        data = TaskDataset(X, labels, splits, X.shape[1])
        self.model_ = fuse_pool(pool, self._config(), self.tail_mode, self.tail)
        self.model_, self.history_ = train_emm(self.model_, data, _train_config(self))
        self.tasks_ = list(pool.tasks)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return np.concatenate([z.data for z in emm_logits(self.model_, X)], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        """Positive-class probability per task, shape ``(n_samples, n_tasks)``."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return predict_proba(self.model_, X, batch_size=max(self.batch_size, 1024))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def score(self, X, Y, sample_weight=None) -> float:
        """Mean per-task AUC."""
        probs = self.predict_proba(X)
        Y = np.asarray(Y).reshape(len(probs), -1)
        aucs = task_aucs(probs, {t: Y[:, j] for j, t in enumerate(self.tasks_)}, self.tasks_)
        vals = [a for a in aucs.values() if a is not None]
        return float(np.mean(vals)) if vals else float("nan")
