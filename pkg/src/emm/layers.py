"""Layer kinds shared by pooled models, fusion components and towers."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .exceptions import DimensionError


class LayerKind(enum.IntEnum):
    DENSE = 0
    RELU = 1
    SIGMOID = 2
    EMBEDDING_CONCAT = 3


@dataclass(frozen=True)
class LayerSignature:
    """Structural identity of a layer. Two layers "match" iff signatures are equal."""

    kind: LayerKind
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")

    def __str__(self) -> str:
        short = {LayerKind.DENSE: "D", LayerKind.RELU: "R", LayerKind.SIGMOID: "S",
                 LayerKind.EMBEDDING_CONCAT: "E"}[self.kind]
        return f"{short}({self.in_dim},{self.out_dim})"


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Differentiable column slice ``x[:, start:stop]``."""
    out = x.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return ((x, full),)

    return ag._result(out, (x,), backward, "columns")


class Layer:
    signature: LayerSignature
    params: list[Parameter]

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.signature.in_dim:
            raise DimensionError(
                f"{self.signature} expects input of width {self.signature.in_dim}, got {x.shape}")

    def copy(self, prefix: str, frozen: bool) -> "Layer":
        """Deep copy with renamed parameters; values are copied bit-for-bit."""
        raise NotImplementedError

    def reinitialized(self, prefix: str, seed: int, he: bool) -> "Layer":
        """Same structure, fresh random values, trainable."""
        return self.copy(prefix, frozen=False)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, prefix: str = "dense", seed: int = 0,
                 he: bool = False, frozen: bool = False, weight=None, bias=None):
        self.signature = LayerSignature(LayerKind.DENSE, in_dim, out_dim)
        if weight is None:
            rng = ag.param_rng(seed, prefix + ".W")
            weight = (ag.he_uniform((in_dim, out_dim), in_dim, rng) if he
                      else ag.xavier_uniform((in_dim, out_dim), in_dim, out_dim, rng))
        if bias is None:
            bias = np.zeros(out_dim)
        self.weight = Parameter(np.array(weight, dtype=np.float64).reshape(in_dim, out_dim),
                                prefix + ".W", frozen=frozen)
        self.bias = Parameter(np.array(bias, dtype=np.float64).reshape(out_dim),
                              prefix + ".b", frozen=frozen)
        self.params = [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return ag.matmul(x, self.weight) + self.bias

    def copy(self, prefix: str, frozen: bool) -> "Dense":
        s = self.signature
        return Dense(s.in_dim, s.out_dim, prefix, frozen=frozen,
                     weight=self.weight.data.copy(), bias=self.bias.data.copy())

    def reinitialized(self, prefix: str, seed: int, he: bool) -> "Dense":
        return Dense(self.signature.in_dim, self.signature.out_dim, prefix, seed=seed, he=he)


class ReLU(Layer):
    def __init__(self, dim: int):
        self.signature = LayerSignature(LayerKind.RELU, dim, dim)
        self.params = []

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return ag.relu(x)

    def copy(self, prefix: str, frozen: bool) -> "ReLU":
        return ReLU(self.signature.in_dim)


class Sigmoid(Layer):
    def __init__(self, dim: int):
        self.signature = LayerSignature(LayerKind.SIGMOID, dim, dim)
        self.params = []

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return ag.sigmoid(x)

    def copy(self, prefix: str, frozen: bool) -> "Sigmoid":
        return Sigmoid(self.signature.in_dim)


class EmbeddingConcat(Layer):
    """Maps ``[dense | sparse ids]`` rows to ``[dense | emb(id_1) | ... | emb(id_k)]``.

    Sparse ids arrive as float-encoded integers in the trailing columns.
    """

    def __init__(self, n_dense: int, cardinalities: Sequence[int], emb_dim: int,
                 prefix: str = "emb", seed: int = 0, frozen: bool = False, tables=None):
        self.n_dense = int(n_dense)
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.emb_dim = int(emb_dim)
        n_sparse = len(self.cardinalities)
        self.signature = LayerSignature(LayerKind.EMBEDDING_CONCAT, self.n_dense + n_sparse,
                                        self.n_dense + n_sparse * self.emb_dim)
        if tables is None:
            tables = []
            for j, card in enumerate(self.cardinalities):
                rng = ag.param_rng(seed, f"{prefix}.T{j}")
                tables.append(ag.xavier_uniform((card, self.emb_dim), self.emb_dim,
                                                self.emb_dim, rng))
        self.tables = [Parameter(np.array(t, dtype=np.float64).reshape(c, self.emb_dim),
                                 f"{prefix}.T{j}", frozen=frozen)
                       for j, (t, c) in enumerate(zip(tables, self.cardinalities))]
        self.params = list(self.tables)

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        parts = []
        if self.n_dense:
            parts.append(columns(x, 0, self.n_dense))
        ids = np.rint(x.data[:, self.n_dense:]).astype(np.int64)
        for j, table in enumerate(self.tables):
            # out-of-range ids fall back to the reserved OOV row 0
            col = ids[:, j]
            col = np.where((col < 0) | (col >= table.shape[0]), 0, col)
            parts.append(ag.embedding(table, col))
        return ag.concat(parts, axis=1)

    def copy(self, prefix: str, frozen: bool) -> "EmbeddingConcat":
        return EmbeddingConcat(self.n_dense, self.cardinalities, self.emb_dim, prefix,
                               frozen=frozen, tables=[t.data.copy() for t in self.tables])

    def reinitialized(self, prefix: str, seed: int, he: bool) -> "EmbeddingConcat":
        return EmbeddingConcat(self.n_dense, self.cardinalities, self.emb_dim, prefix, seed=seed)


def forward_chain(layers: Sequence[Layer], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


def build_mlp(in_dim: int, hidden: Sequence[int], out_dim: int, prefix: str, seed: int,
              head: bool = True, offset: int = 0) -> list[Layer]:
    """Dense/ReLU stack; the final Dense (the head) has no activation when ``head``."""
    layers: list[Layer] = []
    d = in_dim
    for w in hidden:
        layers.append(Dense(d, w, f"{prefix}.L{len(layers) + offset}", seed, he=True))
        layers.append(ReLU(w))
        d = w
    if head:
        layers.append(Dense(d, out_dim, f"{prefix}.L{len(layers) + offset}", seed, he=False))
    return layers
