"""Cut pooled models into aligned components at their shared layers.

The shared layers are the longest ordered common subsequence of layer
signatures across every model (heads excluded). Each model is cut right after
each matched layer; the layers after the last cut, minus the head, form an
optional trailing component.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .exceptions import ConfigError, DimensionError, NoCommonStructure, TailMismatch
from .layers import Layer, LayerSignature, forward_chain
from .store import ModelPool, TrainedModel

TAIL_MODES = ("strict", "adapter")
TAIL_POLICIES = ("keep", "drop")

# exact multi-sequence DP is used while the state space stays below this
MAX_DP_STATES = 2_000_000


@dataclass
class CommonLayerSet:
    signatures: list[LayerSignature]
    cuts: dict[str, tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.signatures)


@dataclass
class ModelComponent:
    model_id: str
    task: str
    level: int
    layers: list[Layer]
    start: int
    stop: int
    in_dim: int
    out_dim: int
    needs_adapter: bool = False

    def forward(self, x: Tensor) -> Tensor:
        return forward_chain(self.layers, x)

    __call__ = forward

    @property
    def is_identity(self) -> bool:
        return not self.layers


@dataclass
class ComponentSet:
    tasks: list[str]
    per_model: dict[str, list[ModelComponent]]
    common: CommonLayerSet
    tail_mode: str = "strict"
    tail: str = "keep"
    level_dims: list[int] = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return len(next(iter(self.per_model.values())))

    def level(self, k: int) -> dict[str, list[ModelComponent]]:
        """Components at 1-based level ``k`` grouped by task (pool order within a task)."""
        out: dict[str, list[ModelComponent]] = {t: [] for t in self.tasks}
        for comps in self.per_model.values():
            c = comps[k - 1]
            out[c.task].append(c)
        return out

    def __len__(self) -> int:
        return sum(len(c) for c in self.per_model.values())

    def manifest(self) -> dict:
        return {
            "levels": self.n_levels,
            "tail": self.tail,
            "tail_mode": self.tail_mode,
            "common_signatures": [str(s) for s in self.common.signatures],
            "level_dims": self.level_dims,
            "models": {
                mid: {"task": comps[0].task if comps else None,
                      "cuts": list(self.common.cuts[mid]),
                      "components": [{"level": c.level, "layers": [c.start, c.stop],
                                      "in_dim": c.in_dim, "out_dim": c.out_dim,
                                      "adapter": c.needs_adapter} for c in comps]}
                for mid, comps in self.per_model.items()},
        }


def _body(model: TrainedModel) -> list[LayerSignature]:
    return model.signatures[:model.head_index]


def _lcs_length_pair(a: Sequence, b: Sequence) -> int:
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    for i in range(len(a) - 1, -1, -1):
        for j in range(len(b) - 1, -1, -1):
            dp[i, j] = dp[i + 1, j + 1] + 1 if a[i] == b[j] else max(dp[i + 1, j], dp[i, j + 1])
    return int(dp[0, 0])


def _first_at_or_after(seq: Sequence, item, start: int) -> int | None:
    for j in range(start, len(seq)):
        if seq[j] == item:
            return j
    return None


def common_subsequence(seqs: Sequence[Sequence]) -> list[tuple[int, ...]]:
    """Match positions of a longest common subsequence of ``seqs``.

    Among optimal choices the next match is always taken at the smallest
    index in the first sequence, then the earliest index in every other.
    """
    k = len(seqs)
    n_states = int(np.prod([len(s) + 1 for s in seqs], dtype=float))
    if n_states > MAX_DP_STATES:
        return _progressive_subsequence(seqs)

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10 * sum(len(s) for s in seqs) + 1000))

    @lru_cache(maxsize=None)
    def best(pos: tuple[int, ...]) -> int:
        if any(p >= len(s) for p, s in zip(pos, seqs)):
            return 0
        head = seqs[0][pos[0]]
        if all(s[p] == head for s, p in zip(seqs, pos)):
            return 1 + best(tuple(p + 1 for p in pos))
        return max(best(pos[:i] + (pos[i] + 1,) + pos[i + 1:]) for i in range(k))

    try:
        matches: list[tuple[int, ...]] = []
        pos = (0,) * k
        remaining = best(pos)
        while remaining:
            for j0 in range(pos[0], len(seqs[0])):
                item = seqs[0][j0]
                nxt = [j0]
                for s, p in zip(seqs[1:], pos[1:]):
                    j = _first_at_or_after(s, item, p)
                    if j is None:
                        break
                    nxt.append(j)
                else:
                    after = tuple(j + 1 for j in nxt)
                    if 1 + best(after) == remaining:
                        matches.append(tuple(nxt))
                        pos, remaining = after, remaining - 1
                        break
        return matches
    finally:
        sys.setrecursionlimit(old_limit)


def _progressive_subsequence(seqs: Sequence[Sequence]) -> list[tuple[int, ...]]:
    """Fallback for very large pools: fold pairwise LCS from the first sequence on.

    Not guaranteed optimal; used only when the exact DP would be too large.
    """
    current = list(range(len(seqs[0])))  # indices into seqs[0]
    for other in seqs[1:]:
        sub = [seqs[0][i] for i in current]
        pair = common_subsequence([sub, other])
        current = [current[a] for a, _ in pair]
    # align the surviving signatures in every other sequence at earliest positions
    positions = [[i] for i in current]
    for s in seqs[1:]:
        p = 0
        for row in positions:
            j = _first_at_or_after(s, seqs[0][row[0]], p)
            row.append(j)
            p = j + 1
    return [tuple(r) for r in positions]


def find_common_layers(pool: ModelPool) -> CommonLayerSet:
    """Longest ordered run of signatures present (in order) in every pooled model."""
    models = pool.models
    # identical architectures align identically; solve once per distinct sequence
    distinct: list[tuple[LayerSignature, ...]] = []
    for m in models:
        body = tuple(_body(m))
        if body not in distinct:
            distinct.append(body)
    matches = common_subsequence(distinct)
    if not matches:
        raise NoCommonStructure(*_most_dissimilar(models))
    sigs = [distinct[0][i] for i in (row[0] for row in matches)]
    cuts = {}
    for m in models:
        col = distinct.index(tuple(_body(m)))
        cuts[m.id] = tuple(row[col] for row in matches)
    return CommonLayerSet(sigs, cuts)


def _most_dissimilar(models: Sequence[TrainedModel]) -> tuple[str, tuple[str, str]]:
    if len(models) == 1:
        m = models[0]
        return (f"model {m.id} has no layers before its head", (m.id, m.id))
    best_pair, best_score = None, None
    for a, b in combinations(models, 2):
        score = _lcs_length_pair(_body(a), _body(b))
        if best_score is None or score < best_score:
            best_pair, best_score = (a.id, b.id), score
    return (f"no layer structure is shared by every pooled model; most dissimilar pair: "
            f"{best_pair[0]} and {best_pair[1]} (common layers: {best_score})", best_pair)


def deconstruct_pool(pool: ModelPool, common: CommonLayerSet, tail_mode: str = "strict",
                     tail: str = "keep") -> ComponentSet:
    """Split every pooled model into level-aligned components."""
    if tail_mode not in TAIL_MODES:
        raise ConfigError(f"tail_mode must be one of {TAIL_MODES}, got {tail_mode!r}")
    if tail not in TAIL_POLICIES:
        raise ConfigError(f"tail must be one of {TAIL_POLICIES}, got {tail!r}")
    if not len(common):
        raise NoCommonStructure("common layer set is empty")

    per_model: dict[str, list[ModelComponent]] = {}
    tails: dict[str, tuple[int, int]] = {}
    for m in pool.models:
        cuts = common.cuts[m.id]
        if list(cuts) != sorted(set(cuts)):
            raise ConfigError(f"cut positions for {m.id} are not strictly increasing: {cuts}")
        comps, start = [], 0
        for level, cut in enumerate(cuts, start=1):
            comps.append(_component(m, level, start, cut + 1))
            start = cut + 1
        per_model[m.id] = comps
        tails[m.id] = (start, m.head_index)

    level_dims = [s.out_dim for s in common.signatures]
    if tail == "keep":
        nonempty = [mid for mid, (a, b) in tails.items() if b > a]
        if nonempty:
            _attach_tails(pool, per_model, tails, nonempty, tail_mode, level_dims)
    return ComponentSet(list(pool.tasks), per_model, common, tail_mode, tail, level_dims)


def _component(m: TrainedModel, level: int, start: int, stop: int) -> ModelComponent:
    layers = m.layers[start:stop]
    if layers:
        in_dim, out_dim = layers[0].signature.in_dim, layers[-1].signature.out_dim
    else:
        # identity segment: passes the previous level's output through
        in_dim = out_dim = m.layers[start - 1].signature.out_dim
    return ModelComponent(m.id, m.task, level, layers, start, stop, in_dim, out_dim)


def _attach_tails(pool, per_model, tails, nonempty, tail_mode, level_dims) -> None:
    empty = [mid for mid in per_model if mid not in nonempty]
    level = len(level_dims) + 1
    comps = {m.id: _component(m, level, *tails[m.id]) for m in pool.models}
    dims = {mid: c.out_dim for mid, c in comps.items()}
    if tail_mode == "strict":
        if empty:
            raise TailMismatch(
                f"trailing segments are empty for {empty} but not for {nonempty}", empty)
        if len(set(dims.values())) > 1:
            offenders = sorted(dims, key=lambda mid: (dims[mid], mid))
            raise TailMismatch(f"trailing segment widths disagree: {dims}", offenders)
        d = next(iter(dims.values()))
    else:
        d = max(dims.values())
        for c in comps.values():
            c.needs_adapter = c.out_dim != d
    for mid, c in comps.items():
        per_model[mid].append(c)
    level_dims.append(d)


def verify_roundtrip(model: TrainedModel, components: Sequence[ModelComponent], probe) -> float:
    """Max |chain-of-components(x) - model truncated at the same depth (x)|."""
    x = probe if isinstance(probe, Tensor) else Tensor(np.asarray(probe, dtype=np.float64))
    out = x
    for c in components:
        out = c.forward(out)
    stop = components[-1].stop if components else 0
    ref = forward_chain(model.layers[:stop], x)
    if out.shape != ref.shape:
        raise DimensionError(f"component chain output {out.shape} vs model {ref.shape}")
    return float(np.max(np.abs(out.data - ref.data))) if out.data.size else 0.0
