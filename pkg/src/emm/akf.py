"""Adaptive Knowledge Fusion: one fusion level over frozen expert components.

Per task a level computes

* the task's own representation: a task-gate softmax weighting of its expert outputs,
* a partner: the most probable other task under the task's fusion gate, with that
  probability as its weight,
* the output: an attention-style merge of the own representation with the weighted
  partner representation.

All tensors are batched: shape ``(B, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .exceptions import ConfigError, DimensionError, NotApplicable
from .layers import Dense, Layer, forward_chain

SCORE_MODES = ("self", "cross")


class TaskGate:
    """Linear map to one logit per expert of a task, followed by softmax."""

    def __init__(self, task: int, in_dim: int, n_experts: int, prefix: str, seed: int):
        self.task = task
        self.n_experts = n_experts
        self.linear = Dense(in_dim, n_experts, prefix, seed)

    @property
    def params(self) -> list[Parameter]:
        return self.linear.params

    def logits(self, x: Tensor) -> Tensor:
        return self.linear(x)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.softmax(self.logits(x), axis=-1)


class FusionGate(TaskGate):
    """Linear map to one logit per task (self included, excluded at selection)."""

    def __init__(self, task: int, in_dim: int, n_tasks: int, prefix: str, seed: int):
        super().__init__(task, in_dim, n_tasks, prefix, seed)


class MtmHead:
    """Query/key/value projections, each ``Dense(d, d) + ReLU``.

    The value map starts as the identity so that, at initialisation, the
    merge passes the non-negative part of its inputs through unchanged and
    frozen components further down still see the representation they were
    trained on.
    """

    def __init__(self, task: int, d: int, prefix: str, seed: int):
        self.task = task
        self.d = d
        self.q = Dense(d, d, prefix + ".Q", seed, he=True)
        self.k = Dense(d, d, prefix + ".K", seed, he=True)
        self.v = Dense(d, d, prefix + ".V", seed, weight=np.eye(d), bias=np.zeros(d))

    @property
    def params(self) -> list[Parameter]:
        return self.q.params + self.k.params + self.v.params

    def Q(self, x: Tensor) -> Tensor:
        return ag.relu(self.q(x))

    def K(self, x: Tensor) -> Tensor:
        return ag.relu(self.k(x))

    def V(self, x: Tensor) -> Tensor:
        return ag.relu(self.v(x))


@dataclass
class Expert:
    """A (usually frozen) model component plus an optional trainable adapter to ``d``."""

    model_id: str
    layers: list[Layer]
    in_dim: int
    out_dim: int
    adapter: Dense | None = None

    def __call__(self, x: Tensor) -> Tensor:
        out = forward_chain(self.layers, x)
        return self.adapter(out) if self.adapter is not None else out

    @property
    def params(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def adapter_params(self) -> list[Parameter]:
        return self.adapter.params if self.adapter is not None else []


@dataclass
class AkfLevel:
    index: int
    groups: list[list[Expert]]
    d: int
    gate_in_dim: int
    task_gates: list[TaskGate]
    fusion_gates: list[FusionGate] = field(default_factory=list)
    heads: list[MtmHead] = field(default_factory=list)
    use_mtm: bool = True
    mtm_score: str = "self"
    gate_from_experts: bool = False

    @classmethod
    def build(cls, index: int, groups: list[list[Expert]], d: int, gate_in_dim: int, seed: int,
              use_mtm: bool = True, mtm_score: str = "self",
              gate_from_experts: bool = False) -> "AkfLevel":
        if mtm_score not in SCORE_MODES:
            raise ConfigError(f"mtm_score must be one of {SCORE_MODES}, got {mtm_score!r}")
        n_tasks = len(groups)
        if any(not g for g in groups):
            raise ConfigError(f"level {index}: every task needs at least one expert")
        pre = f"akf{index}"
        tgates = [TaskGate(i, gate_in_dim, len(g), f"{pre}.T{i}.G", seed)
                  for i, g in enumerate(groups)]
        fgates, heads = [], []
        if n_tasks > 1 and use_mtm:
            fgates = [FusionGate(i, gate_in_dim, n_tasks, f"{pre}.T{i}.F", seed)
                      for i in range(n_tasks)]
            heads = [MtmHead(i, d, f"{pre}.T{i}.MTM", seed) for i in range(n_tasks)]
        return cls(index, groups, d, gate_in_dim, tgates, fgates, heads, use_mtm, mtm_score,
                   gate_from_experts)

    @property
    def n_tasks(self) -> int:
        return len(self.groups)

    @property
    def in_dim(self) -> int:
        return self.groups[0][0].in_dim

    def expert_parameters(self) -> list[Parameter]:
        return [p for g in self.groups for e in g for p in e.params]

    def fusion_parameters(self) -> list[Parameter]:
        """Gates, MTM heads and adapters (always trainable)."""
        ps = [p for g in self.task_gates for p in g.params]
        ps += [p for g in self.fusion_gates for p in g.params]
        ps += [p for h in self.heads for p in h.params]
        ps += [p for g in self.groups for e in g for p in e.adapter_params]
        return ps


def run_experts(level: AkfLevel, inputs: Sequence[Tensor]) -> list[list[Tensor]]:
    """Every expert of task ``i`` applied to ``inputs[i]``; outputs grouped by task."""
    if len(inputs) != level.n_tasks:
        raise DimensionError(f"level {level.index}: got {len(inputs)} inputs for "
                             f"{level.n_tasks} tasks")
    out = []
    for i, (group, x) in enumerate(zip(level.groups, inputs)):
        if x.ndim != 2 or x.shape[1] != group[0].in_dim:
            raise DimensionError(f"level {level.index}, task {i}: expected input width "
                                 f"{group[0].in_dim}, got shape {x.shape}")
        out.append([e(x) for e in group])
    return out


def intra_task_fuse(gate: TaskGate, gate_input: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """Gate-weighted sum of one task's expert outputs."""
    if len(experts) != gate.n_experts:
        raise ConfigError(f"task gate {gate.task} has {gate.n_experts} outputs but "
                          f"{len(experts)} experts were given")
    if len(experts) == 1:
        return experts[0]
    weights = gate(gate_input)  # (B, n)
    stacked = ag.stack(experts, axis=1)  # (B, n, d)
    b, n = weights.shape
    return ag.tsum(ag.reshape(weights, (b, n, 1)) * stacked, axis=1)


def select_partner(gate: FusionGate, gate_input: Tensor, H: Sequence[Tensor],
                   self_task: int) -> tuple[np.ndarray, Tensor]:
    """Per row, the most probable other task and its (differentiable) probability.

    Returns ``(y, weight)`` with ``y`` of shape ``(B,)`` and ``weight`` of shape ``(B, 1)``.
    Ties go to the smallest task index.
    """
    if len(H) < 2:
        raise NotApplicable("partner selection needs at least two tasks")
    probs = gate(gate_input)  # (B, T)
    if probs.shape[1] != len(H):
        raise ConfigError(f"fusion gate {gate.task} scores {probs.shape[1]} tasks, got {len(H)}")
    masked = probs.data.copy()
    masked[:, self_task] = -np.inf
    y = np.argmax(masked, axis=1)
    onehot = np.zeros_like(masked)
    onehot[np.arange(len(y)), y] = 1.0
    weight = ag.tsum(probs * onehot, axis=1, keepdims=True)
    return y, weight


def gather_partner(H: Sequence[Tensor], y: np.ndarray) -> Tensor:
    """Row-wise pick ``H[y[b]][b]``."""
    stacked = ag.stack(H, axis=1)  # (B, T, d)
    onehot = np.zeros(stacked.shape[:2])
    onehot[np.arange(len(y)), y] = 1.0
    return ag.tsum(stacked * onehot[:, :, None], axis=1)


def _rowdot(a: Tensor, b: Tensor) -> Tensor:
    return ag.tsum(a * b, axis=1, keepdims=True)


def mtm_merge(head: MtmHead, own: Tensor, partner: Tensor, score: str = "self") -> Tensor:
    """Two-way attention merge ``a V(own) + b V(partner)`` with ``a + b = 1``.

    ``score="self"`` scores each input against itself, ``<Q(v), K(v)>``;
    ``score="cross"`` uses the own query for both, ``<Q(own), K(v)>``.
    Scores are divided by ``sqrt(d)`` and softmax-normalised.
    """
    if own.shape != partner.shape or own.shape[-1] != head.d:
        raise DimensionError(f"mtm_merge: inputs {own.shape} and {partner.shape}, head dim {head.d}")
    scale = 1.0 / np.sqrt(head.d)
    q_own = head.Q(own)
    if score == "self":
        s_own = _rowdot(q_own, head.K(own)) * scale
        s_partner = _rowdot(head.Q(partner), head.K(partner)) * scale
    elif score == "cross":
        s_own = _rowdot(q_own, head.K(own)) * scale
        s_partner = _rowdot(q_own, head.K(partner)) * scale
    else:
        raise ConfigError(f"unknown mtm score mode {score!r}")
    attn = ag.softmax(ag.concat([s_own, s_partner], axis=1), axis=1)  # (B, 2)
    b = attn.shape[0]
    values = ag.stack([head.V(own), head.V(partner)], axis=1)  # (B, 2, d)
    return ag.tsum(ag.reshape(attn, (b, 2, 1)) * values, axis=1)


def akf_forward(level: AkfLevel, inputs: Sequence[Tensor],
                gate_inputs: Sequence[Tensor] | None = None) -> list[Tensor]:
    """Full level: experts, intra-task fusion, partner selection, MTM merge."""
    experts = run_experts(level, inputs)
    if gate_inputs is None:
        if level.gate_from_experts:
            flat = [o for group in experts for o in group]
            shared = ag.mul(ag.tsum(ag.stack(flat, axis=0), axis=0), 1.0 / len(flat))
            gate_inputs = [shared] * level.n_tasks
        else:
            gate_inputs = list(inputs)
    H = [intra_task_fuse(g, gi, e) for g, gi, e in zip(level.task_gates, gate_inputs, experts)]
    if not level.use_mtm or level.n_tasks == 1:
        return H
    Z = []
    for i in range(level.n_tasks):
        y, weight = select_partner(level.fusion_gates[i], gate_inputs[i], H, i)
        partner = weight * gather_partner(H, y)
        Z.append(mtm_merge(level.heads[i], H[i], partner, level.mtm_score))
    return Z
