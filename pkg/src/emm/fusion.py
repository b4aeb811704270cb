"""Stacked fusion levels + task towers: construction, training, persistence."""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .akf import AkfLevel, Expert, akf_forward
from .autograd import Parameter, Tensor
from .deconstruct import ComponentSet, deconstruct_pool, find_common_layers
from .exceptions import (ChecksumError, ConfigError, DimensionError, FormatError, NonFiniteError,
                         TrainingDiverged, TruncatedFile, UndefinedMetric, VersionError)
from .layers import Dense, EmbeddingConcat, Layer, ReLU, build_mlp, forward_chain
from .metrics import auc
from .store import ModelPool, model_from_bytes, model_to_bytes
from .training import TrainConfig, TrainRun, run_epochs

FUSED_MAGIC = b"EMMF"
FUSED_VERSION = 1

VARIANTS = {
    # name: (use_pretrained, use_mtm)
    "baseline": (False, False),
    "baseline+MTM": (False, True),
    "baseline+p": (True, False),
    "full": (True, True),
}


@dataclass
class EmmConfig:
    use_pretrained: bool = True
    use_mtm: bool = True
    mtm_score: str = "self"
    tower_hidden: list[int] | None = None
    gate_input: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.gate_input not in ("auto", "raw", "experts"):
            raise ConfigError(f"gate_input must be auto|raw|experts, got {self.gate_input!r}")
        if self.mtm_score not in ("self", "cross"):
            raise ConfigError(f"mtm_score must be self|cross, got {self.mtm_score!r}")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "EmmConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
        pre, mtm = VARIANTS[variant]
        return cls(use_pretrained=pre, use_mtm=mtm, **kw)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.use_pretrained, self.use_mtm):
                return name
        raise AssertionError("unreachable")


@dataclass
class EmmModel:
    tasks: list[str]
    levels: list[AkfLevel]
    towers: list[list[Layer]]
    config: EmmConfig
    components: ComponentSet | None = None
    pool: ModelPool | None = None
    towers_calibrated: bool = False

    def __post_init__(self):
        if len(self.towers) != len(self.tasks):
            raise ConfigError(f"{len(self.towers)} towers for {len(self.tasks)} tasks")

    @property
    def in_dim(self) -> int:
        return self.levels[0].in_dim

    def component_parameters(self) -> list[Parameter]:
        return [p for lv in self.levels for p in lv.expert_parameters()]

    def parameters(self) -> list[Parameter]:
        ps = []
        for lv in self.levels:
            ps += lv.expert_parameters()
            ps += lv.fusion_parameters()
        ps += [p for tower in self.towers for layer in tower for p in layer.params]
        return ps

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.frozen]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def logits(self, x) -> list[Tensor]:
        return emm_logits(self, x)

    def predict_proba(self, X, batch_size: int = 8192, threads: int | None = None) -> np.ndarray:
        return predict_proba(self, X, batch_size, threads)


def _he_flags(per_model_layers: Sequence[Layer]) -> list[bool]:
    return [i + 1 < len(per_model_layers) and isinstance(per_model_layers[i + 1], ReLU)
            for i in range(len(per_model_layers))]


def build_emm(components: ComponentSet, config: EmmConfig | None = None,
              pool: ModelPool | None = None) -> EmmModel:
    """One fusion level per component level, then one tower per task."""
    config = config or EmmConfig()
    tasks = list(components.tasks)
    seed = config.seed
    n_levels = components.n_levels

    # per-model copies of every layer, frozen or re-initialised
    copied: dict[str, list[list[Layer]]] = {}
    for mid, comps in components.per_model.items():
        flat = [layer for c in comps for layer in c.layers]
        he = _he_flags(flat)
        out, pos = [], 0
        for c in comps:
            layers = []
            for layer in c.layers:
                prefix = f"emm.{mid}.L{c.start + len(layers)}"
                if config.use_pretrained:
                    layers.append(layer.copy(prefix, frozen=True))
                else:
                    layers.append(layer.reinitialized(prefix, seed, he[pos]))
                pos += 1
            out.append(layers)
        copied[mid] = out

    first = components.level(1)
    has_embedding = any(c.layers and isinstance(c.layers[0], EmbeddingConcat)
                        for group in first.values() for c in group)
    gate_from_experts = (config.gate_input == "experts"
                         or (config.gate_input == "auto" and has_embedding))

    levels: list[AkfLevel] = []
    prev_d = None
    for k in range(1, n_levels + 1):
        d = components.level_dims[k - 1]
        groups = []
        for ti, task in enumerate(tasks):
            group = []
            for c in components.level(k)[task]:
                adapter = None
                if c.needs_adapter or c.out_dim != d:
                    adapter = Dense(c.out_dim, d, f"akf{k}.{c.model_id}.adapter", seed)
                group.append(Expert(c.model_id, copied[c.model_id][k - 1], c.in_dim, c.out_dim,
                                    adapter))
            groups.append(group)
        in_dims = {e.in_dim for g in groups for e in g}
        expected = prev_d if prev_d is not None else (pool.in_dim if pool else None)
        if len(in_dims) != 1 or (expected is not None and in_dims != {expected}):
            raise DimensionError(f"level {k} components take inputs of width {sorted(in_dims)}, "
                                 f"but level {k - 1} produces width {expected}")
        if k == 1:
            gate_in = d if gate_from_experts else next(iter(in_dims))
        else:
            gate_in = prev_d
        levels.append(AkfLevel.build(k, groups, d, gate_in, seed, config.use_mtm,
                                     config.mtm_score, gate_from_experts and k == 1))
        prev_d = d

    hidden = config.tower_hidden if config.tower_hidden is not None else [max(prev_d // 2, 4)]
    towers = [build_mlp(prev_d, hidden, 1, f"tower{ti}", seed) for ti in range(len(tasks))]
    return EmmModel(tasks, levels, towers, config, components, pool)


def emm_logits(model: EmmModel, x) -> list[Tensor]:
    """Per-task logits, each of shape ``(B, 1)``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise DimensionError(f"expected input width {model.in_dim}, got shape {x.shape}")
    return [forward_chain(tower, z) for tower, z in zip(model.towers, level_outputs(model, x))]


def emm_forward(model: EmmModel, x) -> Tensor:
    """Per-task probabilities, shape ``(B, |T|)``."""
    return ag.sigmoid(ag.concat(emm_logits(model, x), axis=1))


def _threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    try:
        return max(1, int(os.environ.get("EMM_THREADS", "1")))
    except ValueError:
        return 1


def predict_proba(model: EmmModel, X, batch_size: int = 8192,
                  threads: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    chunks = [X[i:i + batch_size] for i in range(0, len(X), batch_size)]
    if not chunks:
        return np.empty((0, len(model.tasks)))
    n = _threads(threads)
    if n == 1 or len(chunks) == 1:
        parts = [emm_forward(model, c).data for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n) as ex:
            parts = list(ex.map(lambda c: emm_forward(model, c).data, chunks))
    return np.concatenate(parts, axis=0)


def task_aucs(probs: np.ndarray, Y: dict[str, np.ndarray], tasks: Sequence[str]) -> dict:
    out = {}
    for j, t in enumerate(tasks):
        try:
            out[t] = auc(probs[:, j], Y[t])
        except UndefinedMetric:
            out[t] = None
    return out


def level_outputs(model: EmmModel, x) -> list[Tensor]:
    """Per-task output of the last fusion level (the tower inputs)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    Z = [x] * len(model.tasks)
    for k, level in enumerate(model.levels):
        Z = akf_forward(level, Z, gate_inputs=None if k == 0 else Z)
    return Z


def calibrate_towers(model: EmmModel, X: np.ndarray, seed: int = 0, n_rows: int = 4096) -> None:
    """Centre each tower's first hidden layer on a sample of training rows.

    Tower inputs are non-negative and often concentrated in a few dimensions,
    so a random hidden layer can start with every unit switched off. Setting
    the bias to minus the mean pre-activation puts each unit at its median-ish
    operating point. Runs once per model.
    """
    if model.towers_calibrated or not len(X):
        return
    rows = np.random.default_rng([seed, 0x70E4]).permutation(len(X))[:n_rows]
    Z = level_outputs(model, X[np.sort(rows)])
    for tower, z in zip(model.towers, Z):
        first = tower[0]
        if len(tower) > 1 and isinstance(first, Dense) and isinstance(tower[1], ReLU):
            first.bias.data[...] = -(z.data @ first.weight.data).mean(axis=0)
    model.towers_calibrated = True


def multitask_loss(logits: Sequence[Tensor], Y: dict[str, np.ndarray], tasks: Sequence[str],
                   rows=slice(None)) -> tuple[Tensor, list[Tensor]]:
    """Unweighted sum of per-task mean BCE, plus the per-task terms."""
    per_task = [ag.bce_with_logits(z, Y[t][rows]) for z, t in zip(logits, tasks)]
    total = per_task[0]
    for term in per_task[1:]:
        total = total + term
    return total, per_task


def train_emm(model: EmmModel, data, run: TrainConfig | TrainRun) -> tuple[EmmModel, TrainRun]:
    """Joint training of every non-frozen parameter on the dataset's train split.

    Per-epoch records: train loss per task, and validation AUC per task when
    the dataset carries a ``val`` split.
    """
    config = run.config if isinstance(run, TrainRun) else run
    tasks = model.tasks
    missing = [t for t in tasks if t not in data.labels]
    if missing:
        raise ConfigError(f"dataset lacks labels for tasks {missing}")
    X, Y = data.split("train")
    Xv, Yv = data.split("val")
    running = {t: 0.0 for t in tasks}
    counts = {"rows": 0}
    calibrate_towers(model, X, config.seed)

    def step_loss(epoch, b, rows):
        try:
            logits = emm_logits(model, X[rows])
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, b, "<shared levels>") from exc
        try:
            total, per_task = multitask_loss(logits, Y, tasks, rows)
        except NonFiniteError as exc:
            bad = next((t for z, t in zip(logits, tasks)
                        if not np.isfinite(z.data).all()), tasks[0])
            raise TrainingDiverged(epoch, b, bad) from exc
        for t, term in zip(tasks, per_task):
            if not np.isfinite(term.item()):
                raise TrainingDiverged(epoch, b, t)
            running[t] += term.item() * len(rows)
        counts["rows"] += len(rows)
        return total

    def on_epoch(epoch, _):
        n = max(counts["rows"], 1)
        records = [{"epoch": epoch, "task": t, "split": "train", "loss": running[t] / n,
                    "auc": None} for t in tasks]
        if len(Xv):
            aucs = task_aucs(predict_proba(model, Xv), Yv, tasks)
            records += [{"epoch": epoch, "task": t, "split": "val", "loss": None,
                         "auc": aucs[t]} for t in tasks]
        for t in tasks:
            running[t] = 0.0
        counts["rows"] = 0
        return records

    trained = run_epochs(model.trainable_parameters(), len(X), config, step_loss, on_epoch)
    if isinstance(run, TrainRun):
        run.log.extend(trained.log)
        trained = run
    return model, trained


def fuse_pool(pool: ModelPool, config: EmmConfig | None = None, tail_mode: str = "strict",
              tail: str = "keep") -> EmmModel:
    """Deconstruct ``pool`` and assemble an untrained fused model."""
    common = find_common_layers(pool)
    components = deconstruct_pool(pool, common, tail_mode, tail)
    return build_emm(components, config, pool)


# ---------------------------------------------------------------------------
# persistence: EMMF container
#
# "EMMF" | version u32 | header length u32 | header JSON (UTF-8)
# | per pooled model: length u32 + EMM1 bytes | parameter payload (float64,
# model.parameters() order) | CRC32 of everything after the version field


def emm_to_bytes(model: EmmModel) -> bytes:
    if model.pool is None or model.components is None:
        raise ConfigError("only models built from a pool can be saved")
    header = json.dumps({
        "tasks": model.tasks,
        "config": asdict(model.config),
        "tail": model.components.tail,
        "tail_mode": model.components.tail_mode,
        "model_ids": [m.id for m in model.pool.models],
    }, sort_keys=True).encode("utf-8")
    body = io.BytesIO()
    body.write(struct.pack("<I", len(header)) + header)
    for m in model.pool.models:
        raw = model_to_bytes(m)
        body.write(struct.pack("<I", len(raw)) + raw)
    for p in model.parameters():
        body.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = body.getvalue()
    return FUSED_MAGIC + struct.pack("<I", FUSED_VERSION) + body + struct.pack("<I", zlib.crc32(body))


def emm_from_bytes(data: bytes) -> EmmModel:
    if data[:4] != FUSED_MAGIC:
        raise FormatError("not a fused EMMF model file")
    if len(data) < 12:
        raise TruncatedFile("fused model file too short")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FUSED_VERSION:
        raise VersionError(f"unsupported fused format version {version}")
    body, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("fused model file fails its CRC32 check")
    buf = io.BytesIO(body)

    def read(n):
        raw = buf.read(n)
        if len(raw) != n:
            raise TruncatedFile("fused model file ends early")
        return raw

    (hlen,) = struct.unpack("<I", read(4))
    header = json.loads(read(hlen).decode("utf-8"))
    models = []
    for mid in header["model_ids"]:
        (n,) = struct.unpack("<I", read(4))
        models.append(model_from_bytes(read(n), mid))
    pool = ModelPool(models, header["tasks"])
    model = fuse_pool(pool, EmmConfig(**header["config"]), header["tail_mode"], header["tail"])
    for p in model.parameters():
        raw = read(p.data.size * 8)
        p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.data.shape)
    model.towers_calibrated = True
    if buf.read(1):
        raise FormatError("trailing bytes in fused model payload")
    return model


def save_emm(model: EmmModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(emm_to_bytes(model))
    return path


def load_emm(path) -> EmmModel:
    return emm_from_bytes(Path(path).read_bytes())
