import json

import pytest
import yaml

from emm.cli import main
from emm.config import DatasetConfig, RunConfig
from emm.exceptions import ConfigError
from emm.store import save_model

from .helpers import mlp_model

TINY = {
    "dataset": {"kind": "synthetic", "n_rows": 400, "n_tasks": 2, "rho": 0.8},
    "train": {"epochs": 2, "batch_size": 128},
    "pool_train": {"epochs": 2, "batch_size": 128},
    "seed": 0,
}


def write_config(tmp_path, overrides=None, name="run.yaml"):
    cfg = json.loads(json.dumps(TINY))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg["out"] = str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(args):
    return main([str(a) for a in args])


def run_dir(tmp_path, kind, run_id="r"):
    return tmp_path / "out" / kind / run_id


def test_config_defaults_and_roundtrip():
    cfg = RunConfig()
    assert cfg.train.batch_size == 1024 and cfg.architectures == [[8, 8], [16, 8, 16, 8]]
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.train_config(pool=True).seed == cfg.seed


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(ConfigError, match="nrows"):
        RunConfig.from_dict({"dataset": {"nrows": 5}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"tail": "sideways"})
    with pytest.raises(ConfigError):
        DatasetConfig(kind="csv")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"architectures": [[8, 0]]})


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, {"learning_speed": 3})
    assert run(["train-single", "--config", path, "--run-id", "r"]) == 2
    assert "learning_speed" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_single_writes_four_models_and_is_reproducible(tmp_path):
    path = write_config(tmp_path)
    assert run(["train-single", "--config", path, "--run-id", "a"]) == 0
    assert run(["train-single", "--config", path, "--run-id", "b"]) == 0
    a = sorted(run_dir(tmp_path, "models", "a").glob("*.emm"))
    b = sorted(run_dir(tmp_path, "models", "b").glob("*.emm"))
    assert [p.name for p in a] == ["task1-tm1.emm", "task1-tm2.emm", "task2-tm1.emm",
                                   "task2-tm2.emm"]
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    report = json.loads((run_dir(tmp_path, "reports", "a") / "pool.json").read_text())
    assert len(report["models"]) == 4
    assert all(0 <= m["test_auc"] <= 1 for m in report["models"])
    logs = (run_dir(tmp_path, "logs", "a") / "pool.jsonl").read_text().splitlines()
    assert {json.loads(line)["model"] for line in logs} == {p.stem for p in a}


def test_single_task_single_architecture(tmp_path):
    path = write_config(tmp_path, {"dataset": {"n_tasks": 1}, "architectures": [[8]]})
    assert run(["train-single", "--config", path, "--run-id", "r"]) == 0
    models = list(run_dir(tmp_path, "models").glob("*.emm"))
    assert [p.name for p in models] == ["task1-tm1.emm"]
    assert run(["fuse", "--config", path, "--run-id", "f", "--pool", models[0]]) == 0


def test_data_error_exits_3(tmp_path):
    csv = tmp_path / "d.csv"
    csv.write_text("a,y\n1,0\n2,5\n" + "3,1\n" * 20)
    spec = {"columns": [{"name": "a", "role": "dense"}, {"name": "y", "role": "label"}]}
    path = write_config(tmp_path, {"dataset": {"kind": "csv", "path": str(csv), "spec": spec}})
    assert run(["train-single", "--config", path, "--run-id", "r"]) == 3


def test_no_common_structure_exits_4(tmp_path, capsys):
    a = save_model(mlp_model("a", "x", 4, [8]), tmp_path / "a.emm")
    b = save_model(mlp_model("b", "y", 4, [6]), tmp_path / "b.emm")
    path = write_config(tmp_path)
    assert run(["deconstruct", "--config", path, "--run-id", "r", "--pool", a, b]) == 4
    err = capsys.readouterr().err
    assert "a" in err and "b" in err


def test_deconstruct_manifest(tmp_path):
    path = write_config(tmp_path)
    run(["train-single", "--config", path, "--run-id", "r"])
    models = sorted(run_dir(tmp_path, "models").glob("*.emm"))
    assert run(["deconstruct", "--config", path, "--run-id", "r", "--pool", *models]) == 0
    manifest = json.loads((run_dir(tmp_path, "manifests") / "manifest.json").read_text())
    assert manifest["levels"] == 2 and len(manifest["models"]) == 4


def test_eval_dimension_mismatch_exits_5(tmp_path):
    model = save_model(mlp_model("m", "task1", 7, [8]), tmp_path / "m.emm")
    path = write_config(tmp_path)
    assert run(["eval", "--config", path, "--run-id", "r", "--model", model]) == 5


def test_eval_corrupted_file_exits_6(tmp_path):
    model = save_model(mlp_model("m", "task1", 20, [8]), tmp_path / "m.emm")
    raw = bytearray(model.read_bytes())
    raw[-10] ^= 0xFF
    model.write_bytes(bytes(raw))
    path = write_config(tmp_path)
    assert run(["eval", "--config", path, "--run-id", "r", "--model", model]) == 6


def test_eval_missing_file_exits_2(tmp_path):
    path = write_config(tmp_path)
    assert run(["eval", "--config", path, "--run-id", "r", "--model", tmp_path / "x.emm"]) == 2


def test_eval_single_task_model_is_one_row(tmp_path):
    path = write_config(tmp_path)
    run(["train-single", "--config", path, "--run-id", "r"])
    model = run_dir(tmp_path, "models") / "task2-tm1.emm"
    assert run(["eval", "--config", path, "--run-id", "r", "--model", model]) == 0
    report = json.loads((run_dir(tmp_path, "reports") / "eval-task2-tm1.json").read_text())
    pool = json.loads((run_dir(tmp_path, "reports") / "pool.json").read_text())
    assert [t["name"] for t in report["tasks"]] == ["task2"]
    expected = next(m["test_auc"] for m in pool["models"] if m["id"] == "task2-tm1")
    assert report["tasks"][0]["auc"] == expected


def test_fuse_then_eval_reproduces_report(tmp_path):
    path = write_config(tmp_path)
    assert run(["fuse", "--config", path, "--run-id", "r"]) == 0
    fused = run_dir(tmp_path, "models") / "fused-full.emmf"
    fuse_report = json.loads((run_dir(tmp_path, "reports") / "full.json").read_text())
    assert {t["name"] for t in fuse_report["tasks"]} == {"task1", "task2"}
    assert all(t["gain"] == t["auc"] - t["reference_auc"] for t in fuse_report["tasks"])
    assert run(["eval", "--config", path, "--run-id", "r", "--model", fused]) == 0
    eval_report = json.loads((run_dir(tmp_path, "reports") / "eval-fused-full.json").read_text())
    assert ([t["auc"] for t in eval_report["tasks"]] == [t["auc"] for t in fuse_report["tasks"]])
    assert (run_dir(tmp_path, "manifests") / "manifest.json").exists()
    log = (run_dir(tmp_path, "logs") / "full.jsonl").read_text().splitlines()
    assert {json.loads(line)["epoch"] for line in log} == {0, 1}


def test_fuse_is_reproducible(tmp_path):
    path = write_config(tmp_path)
    for rid in ("a", "b"):
        assert run(["fuse", "--config", path, "--run-id", rid, "--seed", 3]) == 0
    a = (run_dir(tmp_path, "models", "a") / "fused-full.emmf").read_bytes()
    b = (run_dir(tmp_path, "models", "b") / "fused-full.emmf").read_bytes()
    assert a == b
    ra = json.loads((run_dir(tmp_path, "reports", "a") / "full.json").read_text())
    rb = json.loads((run_dir(tmp_path, "reports", "b") / "full.json").read_text())
    assert ra == rb and ra["seed"] == 3


def test_ablate_all_runs_four_variants(tmp_path):
    path = write_config(tmp_path)
    assert run(["ablate", "--config", path, "--run-id", "r"]) == 0
    table = json.loads((run_dir(tmp_path, "reports") / "ablation.json").read_text())
    assert list(table["variants"]) == ["baseline", "baseline+MTM", "baseline+p", "full"]
    text = (run_dir(tmp_path, "reports") / "ablation.txt").read_text()
    assert text.splitlines()[0].split()[0] == "variant"


def test_fuse_single_variant_flag(tmp_path):
    path = write_config(tmp_path)
    assert run(["fuse", "--config", path, "--run-id", "r", "--ablate", "baseline+p"]) == 0
    assert (run_dir(tmp_path, "models") / "fused-baseline+p.emmf").exists()
    assert run(["fuse", "--config", path, "--run-id", "r", "--ablate", "bogus"]) == 2


@pytest.mark.parametrize("n_tasks", [1, 3])
def test_adapt(tmp_path, n_tasks):
    path = write_config(tmp_path)
    assert run(["adapt", "--config", path, "--run-id", "r", "--tasks", n_tasks]) == 0
    report = json.loads((run_dir(tmp_path, "reports") / "adapt.json").read_text())
    (entry,) = report["runs"]
    assert entry["n_tasks"] == n_tasks and len(entry["tasks"]) == n_tasks


def test_adapt_needs_synthetic(tmp_path):
    path = write_config(tmp_path, {"dataset": {"kind": "census_like", "n_rows": 200}})
    assert run(["adapt", "--config", path, "--run-id", "r"]) == 2


def test_default_run_id_contains_seed(tmp_path):
    path = write_config(tmp_path, {"architectures": [[8]], "dataset": {"n_tasks": 1}})
    assert run(["train-single", "--config", path, "--seed", 7]) == 0
    (d,) = (tmp_path / "out" / "models").iterdir()
    assert d.name.endswith("-seed7")
