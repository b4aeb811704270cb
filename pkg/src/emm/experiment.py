"""Workflow steps shared by the command line and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .config import RunConfig
from .data import FeatureSpec, TaskDataset, encode_frame, ingest_csv, make_census_like, make_synthetic
from .exceptions import ConfigError, DataError, DimensionError, UndefinedMetric
from .fusion import VARIANTS, EmmConfig, EmmModel, fuse_pool, predict_proba, task_aucs, train_emm
from .metrics import GainReport, auc, gain_report
from .store import ModelPool, TrainedModel, build_single, fit_model
from .training import TrainRun


def load_dataset(cfg: RunConfig, n_tasks: int | None = None) -> TaskDataset:
    """Materialise the configured dataset, restricted to the configured tasks.

    ``n_tasks`` overrides the task count: synthetic data is generated with that
    many tasks, other datasets keep their first ``n_tasks`` label columns.
    """
    ds = cfg.dataset
    fractions = dict(test_fraction=ds.test_fraction, val_fraction=ds.val_fraction)
    if ds.kind == "synthetic":
        data = make_synthetic(ds.n_rows, n_tasks or ds.n_tasks, ds.rho, cfg.seed,
                              ds.n_features, ds.noise, **fractions)
    elif ds.kind == "census_like":
        frame, spec = make_census_like(ds.n_rows, cfg.seed, ds.n_sparse)
        data = encode_frame(frame, spec, cfg.seed, name="census-like", **fractions)
    else:
        spec = (FeatureSpec.from_dict(ds.spec) if isinstance(ds.spec, dict)
                else FeatureSpec.load(ds.spec))
        data = ingest_csv(ds.path, spec, cfg.seed, **fractions)
    tasks = list(cfg.tasks) if cfg.tasks else data.tasks
    if n_tasks is not None and ds.kind != "synthetic":
        if n_tasks > len(tasks):
            raise ConfigError(f"{n_tasks} tasks requested but the dataset has {len(tasks)}")
        tasks = tasks[:n_tasks]
    return data.select_tasks(tasks)


def pool_model_id(task: str, k: int) -> str:
    return f"{task}-tm{k + 1}"


def train_pool(data: TaskDataset, cfg: RunConfig) -> tuple[ModelPool, list[TrainRun]]:
    """One model per (task, architecture), all seeded from the run seed."""
    hyper = cfg.train_config(pool=True)
    X, Y = data.split("train")
    Xv, Yv = data.split("val")
    models, runs = [], []
    for task in data.tasks:
        for k, arch in enumerate(cfg.architectures_for(task)):
            model = build_single(pool_model_id(task, k), task, data.n_features, arch, hyper.seed,
                                 data.cardinalities, data.emb_dim)
            runs.append(fit_model(model, X, Y[task], hyper, Xv, Yv[task] if len(Xv) else None))
            models.append(model)
    return ModelPool(models, data.tasks), runs


def check_compatible(in_dim: int, data: TaskDataset, what: str) -> None:
    if in_dim != data.n_features:
        raise DimensionError(f"{what} expects {in_dim} input columns, dataset has "
                             f"{data.n_features}")


def model_auc(model: TrainedModel, data: TaskDataset, split: str = "test") -> float | None:
    check_compatible(model.in_dim, data, f"model {model.id!r}")
    if model.task not in data.labels:
        raise DataError(f"dataset has no labels for task {model.task!r}")
    X, Y = data.split(split)
    try:
        return auc(model.predict_proba(X), Y[model.task])
    except UndefinedMetric:
        return None


def pool_aucs(pool: ModelPool, data: TaskDataset, split: str = "test") -> dict[str, float | None]:
    return {m.id: model_auc(m, data, split) for m in pool.models}


def reference_aucs(pool: ModelPool, aucs: dict[str, float | None]) -> dict[str, list[float]]:
    return {t: [aucs[m.id] for m in pool.by_task(t) if aucs[m.id] is not None]
            for t in pool.tasks}


def emm_config(cfg: RunConfig, variant: str | None = None) -> EmmConfig:
    kw = dict(mtm_score=cfg.mtm_score, tower_hidden=cfg.tower_hidden,
              gate_input=cfg.gate_input, seed=cfg.seed)
    if variant is None:
        return EmmConfig(use_pretrained=cfg.use_pretrained, use_mtm=cfg.use_mtm, **kw)
    return EmmConfig.for_variant(variant, **kw)


def emm_aucs(model: EmmModel, data: TaskDataset, split: str = "test") -> dict[str, float | None]:
    check_compatible(model.in_dim, data, "fused model")
    missing = [t for t in model.tasks if t not in data.labels]
    if missing:
        raise DataError(f"dataset has no labels for tasks {missing}")
    X, Y = data.split(split)
    return task_aucs(predict_proba(model, X), Y, model.tasks)


@dataclass
class FuseOutcome:
    variant: str
    model: EmmModel
    run: TrainRun
    aucs: dict[str, float | None]
    report: GainReport


@dataclass
class Experiment:
    """A dataset, a trained pool, its test AUCs and any number of fused variants."""

    cfg: RunConfig
    data: TaskDataset
    pool: ModelPool
    tm_aucs: dict[str, float | None]
    pool_runs: list[TrainRun] = field(default_factory=list)
    outcomes: dict[str, FuseOutcome] = field(default_factory=dict)

    def fuse(self, variant: str | None = None) -> FuseOutcome:
        config = emm_config(self.cfg, variant)
        name = config.variant
        model = fuse_pool(self.pool, config, self.cfg.tail_mode, self.cfg.tail)
        model, run = train_emm(model, self.data, self.cfg.train_config())
        aucs = emm_aucs(model, self.data)
        refs = reference_aucs(self.pool, self.tm_aucs)
        scored = {t: a for t, a in aucs.items() if a is not None and refs[t]}
        report = gain_report(scored, {t: refs[t] for t in scored}, dataset=self.data.name,
                             seed=self.cfg.seed, variant=name)
        outcome = FuseOutcome(name, model, run, aucs, report)
        self.outcomes[name] = outcome
        return outcome


def prepare(cfg: RunConfig, pool: ModelPool | None = None, n_tasks: int | None = None,
            data: TaskDataset | None = None) -> Experiment:
    """Load data and train (or check) the pool."""
    data = data if data is not None else load_dataset(cfg, n_tasks)
    runs: list[TrainRun] = []
    if pool is None:
        pool, runs = train_pool(data, cfg)
    else:
        check_compatible(pool.in_dim, data, "model pool")
        missing = [t for t in pool.tasks if t not in data.labels]
        if missing:
            raise DataError(f"dataset has no labels for pooled tasks {missing}")
        data = data.select_tasks(pool.tasks)
    return Experiment(cfg, data, pool, pool_aucs(pool, data), runs)


def variants_for(ablate: str) -> list[str | None]:
    """``none`` -> the configured variant; ``all`` -> every variant; else that one."""
    if ablate == "none":
        return [None]
    if ablate == "all":
        return list(VARIANTS)
    if ablate not in VARIANTS:
        raise ConfigError(f"--ablate must be none, all or one of {list(VARIANTS)}")
    return [ablate]


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed)
