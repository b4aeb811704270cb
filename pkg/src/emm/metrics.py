"""Rank-based AUC, gain against single-task references, and report emission."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, UndefinedMetric


def average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ascending ranks; tied scores share the mean of their positions."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    n = len(scores)
    # boundaries of runs of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + 1 + ends) / 2.0  # mean of positions start+1..end
    ranks = np.empty(n)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """ROC AUC as ``(sum of positive ranks - N+(N+ + 1)/2) / (N+ N-)``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise ValueError("labels must be 0/1")
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    rank_sum = average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class TaskGain:
    name: str
    auc: float
    reference_auc: float | None
    gain: float | None

    def to_dict(self) -> dict:
        return {"name": self.name, "auc": self.auc, "reference_auc": self.reference_auc,
                "gain": self.gain}


@dataclass
class GainReport:
    tasks: list[TaskGain]
    dataset: str = ""
    seed: int | None = None
    variant: str = "full"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"dataset": self.dataset, "seed": self.seed,
               "tasks": [t.to_dict() for t in self.tasks], "variant": self.variant}
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        return format_table(
            ["task", "AUC", "reference", "gain"],
            [[t.name, _fmt(t.auc), _fmt(t.reference_auc), _fmt(t.gain, signed=True)]
             for t in self.tasks])


def gain_report(model_aucs: Mapping[str, float],
                tm_aucs: Mapping[str, Sequence[float]] | None = None,
                **meta) -> GainReport:
    """Per-task gain of ``model_aucs`` over the mean of the single-task AUCs."""
    if tm_aucs is None:
        return GainReport([TaskGain(t, float(a), None, None) for t, a in model_aucs.items()],
                          **meta)
    if set(model_aucs) != set(tm_aucs):
        raise ConfigError(
            f"task mismatch: model has {sorted(model_aucs)}, references have {sorted(tm_aucs)}")
    rows = []
    for task, a in model_aucs.items():
        refs = list(tm_aucs[task])
        if not refs:
            raise ConfigError(f"no reference AUCs for task {task!r}")
        ref = float(np.mean(refs))
        rows.append(TaskGain(task, float(a), ref, float(a) - ref))
    return GainReport(rows, **meta)


def _fmt(x, signed: bool = False) -> str:
    if x is None:
        return "-"
    return f"{x:+.5f}" if signed else f"{x:.5f}"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def ablation_table(variant_aucs: Mapping[str, Mapping[str, float]], tasks: Sequence[str],
                   baseline: str = "baseline") -> str:
    """Table-3 style listing: per-variant task AUCs and gain versus ``baseline``."""
    base = variant_aucs.get(baseline)
    header = ["variant"] + [f"{t} AUC" for t in tasks] + [f"{t} gain" for t in tasks]
    rows = []
    for name, aucs in variant_aucs.items():
        gains = ["-" if base is None or name == baseline else _fmt(aucs[t] - base[t], True)
                 for t in tasks]
        rows.append([name] + [_fmt(aucs[t]) for t in tasks] + gains)
    return format_table(header, rows)
