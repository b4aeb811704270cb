"""``emm`` command line: train a pool, deconstruct, fuse, evaluate, ablate, sweep task counts.

Exit codes: 0 ok, 1 other failure, 2 configuration, 3 data, 4 no common
structure / tail mismatch, 5 dimension mismatch, 6 unreadable model file.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .deconstruct import deconstruct_pool, find_common_layers
from .exceptions import ConfigError, EmmError, FormatError
from .experiment import Experiment, emm_aucs, load_dataset, model_auc, prepare, variants_for
from .fusion import FUSED_MAGIC, emm_from_bytes, save_emm
from .metrics import ablation_table, format_table, gain_report
from .store import MAGIC, ModelPool, load_model, model_from_bytes, save_model
from .training import TrainRun

MODEL_SUFFIX = ".emm"
FUSED_SUFFIX = ".emmf"


class RunDirs:
    """``<out>/{models,manifests,logs,reports}/<run-id>/``, created on demand."""

    def __init__(self, out, run_id: str):
        self.root = Path(out)
        self.run_id = run_id

    def path(self, kind: str, name: str) -> Path:
        d = self.root / kind / self.run_id
        d.mkdir(parents=True, exist_ok=True)
        return d / name

    def write_json(self, kind: str, name: str, obj) -> Path:
        p = self.path(kind, name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")
        return p

    def write_text(self, kind: str, name: str, text: str) -> Path:
        p = self.path(kind, name)
        p.write_text(text.rstrip("\n") + "\n", encoding="utf-8")
        return p

    def write_log(self, name: str, runs: list[tuple[dict, TrainRun]]) -> Path:
        p = self.path("logs", name)
        with p.open("w", encoding="utf-8") as fh:
            for extra, run in runs:
                for rec in run.records:
                    fh.write(json.dumps({**rec, **extra}) + "\n")
        return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.tail is not None:
        overrides["tail"] = args.tail
    if args.mtm_score is not None:
        overrides["mtm_score"] = args.mtm_score
    if args.out is not None:
        overrides["out"] = args.out
    return replace(cfg, **overrides) if overrides else cfg


def _dirs(args, cfg: RunConfig) -> RunDirs:
    run_id = args.run_id or f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"
    return RunDirs(cfg.out, run_id)


def _load_pool(paths) -> ModelPool:
    return ModelPool([load_model(p) for p in paths])


def _save_pool(exp: Experiment, dirs: RunDirs) -> list[Path]:
    return [save_model(m, dirs.path("models", m.id + MODEL_SUFFIX)) for m in exp.pool.models]


def _pool_summary(exp: Experiment) -> dict:
    return {"dataset": exp.data.name, "seed": exp.cfg.seed,
            "models": [{"id": m.id, "task": m.task, "layers": [str(s) for s in m.signatures],
                        "test_auc": exp.tm_aucs[m.id]} for m in exp.pool.models]}


def _pool_table(exp: Experiment) -> str:
    rows = [[m.id, m.task, "-" if exp.tm_aucs[m.id] is None else f"{exp.tm_aucs[m.id]:.5f}"]
            for m in exp.pool.models]
    return format_table(["model", "task", "test AUC"], rows)


def cmd_train_single(args) -> int:
    cfg = _config(args)
    dirs = _dirs(args, cfg)
    exp = prepare(cfg, n_tasks=args.tasks)
    paths = _save_pool(exp, dirs)
    dirs.write_log("pool.jsonl", [({"model": m.id}, r)
                                  for m, r in zip(exp.pool.models, exp.pool_runs)])
    dirs.write_json("reports", "pool.json", _pool_summary(exp))
    print(_pool_table(exp))
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_deconstruct(args) -> int:
    cfg = _config(args)
    dirs = _dirs(args, cfg)
    pool = _load_pool(args.pool)
    components = deconstruct_pool(pool, find_common_layers(pool), cfg.tail_mode, cfg.tail)
    manifest = components.manifest()
    path = dirs.write_json("manifests", "manifest.json", manifest)
    print(json.dumps(manifest, indent=2))
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _run_fuse(args, ablate: str) -> int:
    cfg = _config(args)
    dirs = _dirs(args, cfg)
    pool = _load_pool(args.pool) if args.pool else None
    exp = prepare(cfg, pool=pool, n_tasks=args.tasks)
    if pool is None:
        _save_pool(exp, dirs)
        dirs.write_log("pool.jsonl", [({"model": m.id}, r)
                                      for m, r in zip(exp.pool.models, exp.pool_runs)])
    dirs.write_json("reports", "pool.json", _pool_summary(exp))
    for variant in variants_for(ablate):
        out = exp.fuse(variant)
        if out.model.components is not None and not dirs.path("manifests", "manifest.json").exists():
            dirs.write_json("manifests", "manifest.json", out.model.components.manifest())
        save_emm(out.model, dirs.path("models", f"fused-{out.variant}{FUSED_SUFFIX}"))
        dirs.write_log(f"{out.variant}.jsonl", [({}, out.run)])
        dirs.write_json("reports", f"{out.variant}.json", out.report.to_dict())
        dirs.write_text("reports", f"{out.variant}.txt", out.report.to_table())
        print(f"[{out.variant}]")
        print(out.report.to_table())
    if len(exp.outcomes) > 1:
        table = {name: o.aucs for name, o in exp.outcomes.items()}
        dirs.write_json("reports", "ablation.json",
                        {"dataset": exp.data.name, "seed": cfg.seed, "tasks": exp.data.tasks,
                         "variants": table})
        text = ablation_table(table, exp.data.tasks)
        dirs.write_text("reports", "ablation.txt", text)
        print(text)
    print(f"run {dirs.run_id} written under {dirs.root}", file=sys.stderr)
    return 0


def cmd_fuse(args) -> int:
    return _run_fuse(args, args.ablate or "none")


def cmd_ablate(args) -> int:
    return _run_fuse(args, args.ablate or "all")


def _read_any(path: Path):
    data = path.read_bytes()
    if data[:4] == FUSED_MAGIC:
        return emm_from_bytes(data)
    if data[:4] == MAGIC:
        return model_from_bytes(data, path.stem)
    raise FormatError(f"{path}: not an EMM model file")


def cmd_eval(args) -> int:
    cfg = _config(args)
    dirs = _dirs(args, cfg)
    path = Path(args.model)
    try:
        model = _read_any(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {path}") from exc
    if hasattr(model, "levels"):
        data = load_dataset(cfg, n_tasks=len(model.tasks) if cfg.dataset.kind == "synthetic" else None)
        aucs = emm_aucs(model, data)
        variant = model.config.variant
    else:
        data = load_dataset(cfg)
        aucs = {model.task: model_auc(model, data)}
        variant = "single"
    report = gain_report(aucs, dataset=data.name, seed=cfg.seed, variant=variant)
    report.extra["model"] = str(path)
    dirs.write_json("reports", f"eval-{path.stem}.json", report.to_dict())
    print(report.to_table())
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    if cfg.dataset.kind != "synthetic":
        raise ConfigError("adapt sweeps the task count and needs a synthetic dataset")
    dirs = _dirs(args, cfg)
    counts = [args.tasks] if args.tasks else [1, 2, 3, 4]
    results = []
    for n in counts:
        exp = prepare(cfg, n_tasks=n)
        out = exp.fuse()
        tm = {t: {m.id: exp.tm_aucs[m.id] for m in exp.pool.by_task(t)} for t in exp.data.tasks}
        results.append({"n_tasks": n, "variant": out.variant,
                        "tasks": [{"name": t, "auc": out.aucs[t], "single_task": tm[t]}
                                  for t in exp.data.tasks]})
        dirs.write_log(f"adapt-{n}.jsonl", [({}, out.run)])
        print(f"[{n} task{'s' if n > 1 else ''}]")
        print(out.report.to_table())
    dirs.write_json("reports", "adapt.json",
                    {"dataset": cfg.dataset.kind, "seed": cfg.seed, "runs": results})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration (YAML or JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--tasks", type=int, metavar="N", help="number of tasks to use")
    common.add_argument("--tail", choices=("keep", "drop"))
    common.add_argument("--mtm-score", choices=("self", "cross"))
    common.add_argument("--out", metavar="DIR", help="output root directory")
    common.add_argument("--run-id", help="name of the run subfolder (default: timestamp + seed)")

    parser = argparse.ArgumentParser(prog="emm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-single", parents=[common], help="train the single-task pool")
    p.set_defaults(func=cmd_train_single)

    p = sub.add_parser("deconstruct", parents=[common], help="cut a pool into components")
    p.add_argument("--pool", nargs="+", required=True, metavar="FILE")
    p.set_defaults(func=cmd_deconstruct)

    for name, func, help_ in (("fuse", cmd_fuse, "fuse a pool and train the result"),
                              ("ablate", cmd_ablate, "fuse under every ablation variant")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--pool", nargs="+", metavar="FILE",
                       help="pooled model files (trained from the config when omitted)")
        p.add_argument("--ablate", metavar="{none|all|VARIANT}")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="test-split AUC of a model file")
    p.add_argument("--model", required=True, metavar="FILE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", parents=[common], help="fuse with 1..4 synthetic tasks")
    p.set_defaults(func=cmd_adapt)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
