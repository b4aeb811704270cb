"""Pooled single-task models: structure, training, and the EMM1 file format.

File layout (little-endian)::

    "EMM1" | version u32 | task-name length u16 + UTF-8 bytes | layer count u32
    | per layer: kind u8, in_dim u32, out_dim u32 | head_index u32
    | payload | CRC32(payload) u32

The payload holds, per parameterised layer in order, row-major float64 values
(dense: weights then bias). Embedding layers prefix their tables with
``n_dense u32, n_sparse u32, emb_dim u32, cardinality u32 * n_sparse`` since
table shapes are not recoverable from the signature alone.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import Parameter, Tensor, bce_with_logits, sigmoid
from .exceptions import (ChecksumError, ConfigError, DataError, DimensionError, FormatError,
                         TruncatedFile, VersionError)
from .layers import (Dense, EmbeddingConcat, Layer, LayerKind, LayerSignature, ReLU, Sigmoid,
                     build_mlp, forward_chain)
from .training import TrainConfig, TrainRun, run_epochs

MAGIC = b"EMM1"
FORMAT_VERSION = 1


@dataclass
class TrainedModel:
    id: str
    task: str
    layers: list[Layer]
    head_index: int

    def __post_init__(self):
        if not 0 <= self.head_index < len(self.layers):
            raise ConfigError(f"head index {self.head_index} out of range for {self.id}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.signature.out_dim != b.signature.in_dim:
                raise DimensionError(
                    f"model {self.id}: {a.signature} does not chain into {b.signature}")

    @property
    def signatures(self) -> list[LayerSignature]:
        return [layer.signature for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].signature.in_dim

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params]

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return forward_chain(self.layers[:self.head_index + 1], x)

    def hidden(self, x) -> Tensor:
        """Forward through every layer strictly before the head."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        return forward_chain(self.layers[:self.head_index], x)

    def predict_proba(self, x, batch_size: int = 8192) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [sigmoid(self.logits(x[i:i + batch_size])).data[:, 0]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.empty(0)


@dataclass
class ModelPool:
    models: list[TrainedModel]
    tasks: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.models:
            raise ConfigError("model pool is empty")
        if not self.tasks:
            self.tasks = list(dict.fromkeys(m.task for m in self.models))
        missing = [t for t in self.tasks if not any(m.task == t for m in self.models)]
        if missing:
            raise ConfigError(f"tasks without any pooled model: {missing}")
        stray = sorted({m.task for m in self.models} - set(self.tasks))
        if stray:
            raise ConfigError(f"models for tasks not in the task list: {stray}")
        dims = {m.in_dim for m in self.models}
        if len(dims) != 1:
            raise DimensionError(f"pooled models disagree on input width: {sorted(dims)}")
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate model ids in pool: {ids}")
        # group by task, keeping the task order
        self.models = [m for t in self.tasks for m in self.models if m.task == t]

    def __len__(self) -> int:
        return len(self.models)

    @property
    def in_dim(self) -> int:
        return self.models[0].in_dim

    def by_task(self, task: str) -> list[TrainedModel]:
        return [m for m in self.models if m.task == task]


# ---------------------------------------------------------------------------
# serialization


def _layer_from_record(kind: int, in_dim: int, out_dim: int, payload: io.BytesIO) -> Layer:
    if kind == LayerKind.DENSE:
        w = _read_floats(payload, in_dim * out_dim)
        b = _read_floats(payload, out_dim)
        return Dense(in_dim, out_dim, weight=w, bias=b)
    if kind == LayerKind.RELU:
        return ReLU(in_dim)
    if kind == LayerKind.SIGMOID:
        return Sigmoid(in_dim)
    if kind == LayerKind.EMBEDDING_CONCAT:
        n_dense, n_sparse, emb_dim = _read(payload, "<III")
        cards = _read(payload, f"<{n_sparse}I")
        tables = [_read_floats(payload, c * emb_dim) for c in cards]
        layer = EmbeddingConcat(n_dense, cards, emb_dim, tables=tables)
        if layer.signature != LayerSignature(LayerKind(kind), in_dim, out_dim):
            raise FormatError("embedding metadata disagrees with its layer record")
        return layer
    raise FormatError(f"unknown layer kind {kind}")


def _read(buf: io.BytesIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise TruncatedFile("model file ends early")
    return struct.unpack(fmt, raw)


def _read_floats(buf: io.BytesIO, n: int) -> np.ndarray:
    raw = buf.read(8 * n)
    if len(raw) != 8 * n:
        raise TruncatedFile("model file ends early inside the parameter payload")
    return np.frombuffer(raw, dtype="<f8").copy()


def _payload(layers: Iterable[Layer]) -> bytes:
    out = io.BytesIO()
    for layer in layers:
        if isinstance(layer, EmbeddingConcat):
            out.write(struct.pack("<III", layer.n_dense, len(layer.cardinalities), layer.emb_dim))
            out.write(struct.pack(f"<{len(layer.cardinalities)}I", *layer.cardinalities))
        for p in layer.params:
            out.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return out.getvalue()


def model_to_bytes(m: TrainedModel) -> bytes:
    task = m.task.encode("utf-8")
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<I", FORMAT_VERSION))
    head.write(struct.pack("<H", len(task)) + task)
    head.write(struct.pack("<I", len(m.layers)))
    for layer in m.layers:
        s = layer.signature
        head.write(struct.pack("<BII", int(s.kind), s.in_dim, s.out_dim))
    head.write(struct.pack("<I", m.head_index))
    payload = _payload(m.layers)
    return head.getvalue() + payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(data: bytes, model_id: str = "model") -> TrainedModel:
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if len(magic) < 4 and MAGIC.startswith(magic):
        raise TruncatedFile("model file ends inside the magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = _read(buf, "<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {version}")
    (n,) = _read(buf, "<H")
    raw = buf.read(n)
    if len(raw) != n:
        raise TruncatedFile("model file ends inside the task name")
    task = raw.decode("utf-8")
    (n_layers,) = _read(buf, "<I")
    records = [_read(buf, "<BII") for _ in range(n_layers)]
    (head_index,) = _read(buf, "<I")
    start = buf.tell()
    layers = [_layer_from_record(k, i, o, buf) for k, i, o in records]
    payload = data[start:buf.tell()]
    (crc,) = _read(buf, "<I")
    if buf.read(1):
        raise FormatError("trailing bytes after checksum")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("parameter payload fails its CRC32 check")
    return TrainedModel(model_id, task, layers, head_index)


def read_signatures(path) -> tuple[str, list[LayerSignature], int]:
    """Task, signature sequence and head index, without touching parameters."""
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise FormatError(f"{path}: not an EMM1 model file")
    (version,) = _read(buf, "<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {version}")
    (n,) = _read(buf, "<H")
    task = buf.read(n).decode("utf-8")
    (n_layers,) = _read(buf, "<I")
    sigs = [LayerSignature(LayerKind(k), i, o) for k, i, o in
            (_read(buf, "<BII") for _ in range(n_layers))]
    (head_index,) = _read(buf, "<I")
    return task, sigs, head_index


def save_model(m: TrainedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(m))
    return path


def load_model(path, model_id: str | None = None) -> TrainedModel:
    """Load an EMM1 file; the model id defaults to the file stem."""
    path = Path(path)
    return model_from_bytes(path.read_bytes(), model_id or path.stem)


# ---------------------------------------------------------------------------
# single-task training


def build_single(model_id: str, task: str, in_dim: int, hidden: Sequence[int], seed: int,
                 cardinalities: Sequence[int] = (), emb_dim: int = 4) -> TrainedModel:
    """Fresh MLP: optional embedding-concat input layer, Dense/ReLU blocks, 1-logit head."""
    if any(int(w) < 1 for w in hidden):
        raise ConfigError(f"hidden widths must be positive, got {list(hidden)}")
    layers: list[Layer] = []
    d = in_dim
    if cardinalities:
        emb = EmbeddingConcat(in_dim - len(cardinalities), cardinalities, emb_dim,
                              prefix=f"{model_id}.L0", seed=seed)
        layers.append(emb)
        d = emb.signature.out_dim
    layers += build_mlp(d, [int(w) for w in hidden], 1, prefix=model_id, seed=seed,
                        offset=len(layers))
    return TrainedModel(model_id, task, layers, len(layers) - 1)


def check_binary(y: np.ndarray, name: str) -> np.ndarray:
    y = np.asarray(y)
    bad = ~np.isin(y, (0, 1))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"label column {name!r} is not binary (row {row}: {y[row]!r})")
    return y.astype(np.float64)


def fit_model(model: TrainedModel, X: np.ndarray, y: np.ndarray, config: TrainConfig,
              X_val: np.ndarray | None = None, y_val: np.ndarray | None = None) -> TrainRun:
    """Minimise sigmoid BCE of the model's head on ``(X, y)`` with Adam."""
    from .metrics import auc
    from .exceptions import UndefinedMetric

    X = np.asarray(X, dtype=np.float64)
    y = check_binary(y, model.task)
    params = model.parameters()

    def step_loss(epoch, b, rows):
        return bce_with_logits(model.logits(X[rows]), y[rows])

    def on_epoch(epoch, loss):
        records = [{"epoch": epoch, "task": model.task, "split": "train", "loss": loss,
                    "auc": None}]
        if X_val is not None and len(X_val):
            p = model.predict_proba(X_val)
            try:
                val_auc = auc(p, y_val)
            except UndefinedMetric:
                val_auc = None
            records.append({"epoch": epoch, "task": model.task, "split": "val",
                            "loss": None, "auc": val_auc})
        return records

    return run_epochs(params, len(X), config, step_loss, on_epoch)


def train_single(task: str, arch: Sequence[int], data, hyper: TrainConfig,
                 model_id: str | None = None) -> TrainedModel:
    """Train one pooled MLP for ``task`` on the train split of a TaskDataset."""
    if task not in data.tasks:
        raise DataError(f"dataset has no label column for task {task!r}")
    model_id = model_id or f"{task}-{'x'.join(map(str, arch)) or 'linear'}"
    model = build_single(model_id, task, data.n_features, arch, hyper.seed,
                         data.cardinalities, data.emb_dim)
    X, Y = data.split("train")
    Xv, Yv = data.split("val")
    fit_model(model, X, Y[task], hyper, Xv, Yv[task] if len(Xv) else None)
    return model
