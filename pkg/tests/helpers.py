"""Shared oracles and builders for the test suite."""
from __future__ import annotations

import itertools

import numpy as np
from hypothesis import strategies as st

from emm.layers import build_mlp
from emm.store import ModelPool, TrainedModel, build_single

FD_EPS = 1e-5
REL_FLOOR = 1e-4


def finite(bound: float = 1e3):
    return st.floats(-bound, bound, allow_nan=False, allow_infinity=False)


def relative_error(a, n) -> float:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def numeric_gradient(loss_fn, param, eps: float = FD_EPS, valid=None,
                     coords=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences; ``valid()`` may veto a probe (returns False at a kink).

    ``coords`` restricts probing to those flat indices; the rest are marked not kept.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    keep = np.zeros(param.data.shape, dtype=bool)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        ok = valid() if valid else True
        flat[i] = orig - eps
        down = loss_fn().item()
        ok = ok and (valid() if valid else True)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
        keep.reshape(-1)[i] = ok
    return grad, keep


def check_gradients(loss_fn, params, eps: float = FD_EPS, valid=None, max_coords=None,
                    rng=None) -> float:
    """Max relative error between backprop and central differences over ``params``.

    With ``max_coords``, at most that many entries of each parameter are probed.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, a in zip(params, analytic):
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            coords = rng.choice(p.data.size, max_coords, replace=False)
        n, keep = numeric_gradient(loss_fn, p, eps, valid, coords)
        worst = max(worst, relative_error(a[keep], n[keep]))
    return worst


def is_subsequence(sub, seq) -> bool:
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def brute_force_common_length(seqs) -> int:
    """Longest common subsequence length by enumerating subsets of the shortest sequence."""
    shortest = min(seqs, key=len)
    for r in range(len(shortest), 0, -1):
        for idx in itertools.combinations(range(len(shortest)), r):
            cand = [shortest[i] for i in idx]
            if all(is_subsequence(cand, s) for s in seqs):
                return r
    return 0


def pairwise_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def pairwise_auc_np(scores, labels) -> float:
    """Same oracle as :func:`pairwise_auc`, vectorised over the positive x negative grid."""
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = np.count_nonzero(pos[:, None] > neg[None, :])
    ties = np.count_nonzero(pos[:, None] == neg[None, :])
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def small_pool(in_dim: int = 6, archs=((8, 8), (16, 8, 16, 8)), tasks=("a", "b"),
               seed: int = 0) -> ModelPool:
    models = [build_single(f"{t}-tm{k + 1}", t, in_dim, list(arch), seed)
              for t in tasks for k, arch in enumerate(archs)]
    return ModelPool(models, list(tasks))


def mlp_model(model_id: str, task: str, in_dim: int, hidden, seed: int = 0) -> TrainedModel:
    layers = build_mlp(in_dim, list(hidden), 1, model_id, seed)
    return TrainedModel(model_id, task, layers, len(layers) - 1)
