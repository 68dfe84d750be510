import json

import pytest

from conftest import small_cfg_dict, small_registry_dict
from transagent.agents import save_registry
from transagent.cli import main
from transagent.config import config_hash, load_config, save_config
from transagent.data import SyntheticBenchmark


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full extract -> train -> eval -> export -> gating-report run."""
    ws = tmp_path_factory.mktemp("cli")
    cfg = small_cfg_dict()
    cfg_path = ws / "config.yaml"
    save_config(cfg, cfg_path)
    reg_path = ws / "registry.yaml"
    save_registry(small_registry_dict(), reg_path)

    dataset = SyntheticBenchmark.from_config(cfg)
    cache = ws / "caches" / f"{dataset.dataset_id}.takc"
    assert main(["extract", "--config", str(cfg_path), "--registry", str(reg_path),
                 "--cache-dir", str(ws / "caches")]) == 0

    runs = ws / "runs"
    assert main(["train", "--config", str(cfg_path), "--cache", str(cache),
                 "--out", str(runs)]) == 0
    run = runs / config_hash(cfg)[:12]

    assert main(["eval", "--config", str(cfg_path), "--student", str(run / "student.takc"),
                 "--out", str(runs)]) == 0
    assert main(["export", "--state", str(run / "state.takc"),
                 "--out", str(ws / "exported.takc")]) == 0
    assert main(["gating-report", "--config", str(cfg_path), "--state", str(run / "state.takc"),
                 "--cache", str(cache), "--samples", "8", "--out", str(runs)]) == 0
    return {"ws": ws, "cfg": cfg, "cfg_path": cfg_path, "reg_path": reg_path,
            "cache": cache, "run": run}


def test_help_shows_commands_and_schema(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for command in ("extract", "train", "export", "eval", "ablate", "gating-report"):
        assert command in out
    for key in ("train.epochs", "fusion.mode", "loss.lambda2"):
        assert key in out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "transagent" in capsys.readouterr().out


def test_no_command_prints_help(capsys):
    assert main([]) == 0
    assert "usage:" in capsys.readouterr().out


def test_extract_is_reproducible(workspace):
    first = workspace["cache"].read_bytes()
    again = workspace["ws"] / "caches2"
    assert main(["extract", "--config", str(workspace["cfg_path"]),
                 "--registry", str(workspace["reg_path"]), "--cache-dir", str(again)]) == 0
    assert (again / workspace["cache"].name).read_bytes() == first


def test_train_run_directory_contents(workspace):
    run = workspace["run"]
    for name in ("config.yaml", "train_log.jsonl", "state.takc", "student.takc"):
        assert (run / name).exists(), name
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == workspace["cfg"]["train.epochs"]
    for i, line in enumerate(lines):
        row = json.loads(line)
        assert row["epoch"] == i
        assert set(row) == {"epoch", "ce", "vac", "lac", "mac", "total"}


def test_eval_writes_report(workspace):
    payload = json.loads((workspace["run"] / "eval.json").read_text())
    assert set(payload) == {"base", "novel", "hm", "base_classes", "novel_classes"}
    assert 0.0 <= payload["base"] <= 100.0
    assert 0.0 <= payload["novel"] <= 100.0
    assert set(payload["base_classes"]).isdisjoint(payload["novel_classes"])


def test_export_command_matches_trained_student(workspace):
    trained = (workspace["run"] / "student.takc").read_bytes()
    exported = (workspace["ws"] / "exported.takc").read_bytes()
    assert exported == trained


def test_gating_report_outputs(workspace):
    report = json.loads((workspace["run"] / "gating.json").read_text())
    assert set(report) == {"vision", "language", "scores"}
    for group in report.values():
        assert abs(sum(group.values()) - 1.0) < 1e-9
    text = (workspace["run"] / "gating.txt").read_text()
    assert "vis-a" in text


def test_set_override_changes_run(workspace):
    runs = workspace["ws"] / "runs_override"
    assert main(["train", "--config", str(workspace["cfg_path"]), "--set", "train.epochs=1",
                 "--cache", str(workspace["cache"]), "--out", str(runs)]) == 0
    dirs = [p for p in runs.iterdir() if p.is_dir()]
    assert len(dirs) == 1
    assert dirs[0].name != workspace["run"].name
    cfg = load_config(dirs[0] / "config.yaml")
    assert cfg["train.epochs"] == 1
    assert len((dirs[0] / "train_log.jsonl").read_text().splitlines()) == 1


def test_unknown_key_exits_2(workspace, capsys):
    rc = main(["train", "--config", str(workspace["cfg_path"]), "--set", "no.such_key=1",
               "--out", str(workspace["ws"] / "x")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error: config:")


def test_missing_files_exit_3(workspace, capsys):
    ws = workspace["ws"]
    rc = main(["train", "--config", str(workspace["cfg_path"]), "--cache",
               str(ws / "nope.takc"), "--out", str(ws / "x")])
    assert rc == 3
    rc = main(["eval", "--config", str(workspace["cfg_path"]), "--student",
               str(ws / "nope-student.takc"), "--out", str(ws / "x")])
    assert rc == 3
    rc = main(["train", "--config", str(ws / "nope.yaml"), "--out", str(ws / "x")])
    assert rc == 3
    assert capsys.readouterr().err.count("error: missing-input:") == 3


def test_cache_dataset_mismatch_exits_1(workspace, capsys):
    rc = main(["train", "--config", str(workspace["cfg_path"]), "--set", "dataset.noise=0.9",
               "--cache", str(workspace["cache"]), "--out", str(workspace["ws"] / "x")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: runtime:")


def test_cache_dir_env_var(workspace, monkeypatch, tmp_path):
    monkeypatch.setenv("TRANSAGENT_CACHE_DIR", str(tmp_path / "env_caches"))
    assert main(["extract", "--config", str(workspace["cfg_path"]),
                 "--registry", str(workspace["reg_path"])]) == 0
    assert (tmp_path / "env_caches" / workspace["cache"].name).exists()


def test_ablate_micro_sweep(tmp_path, capsys):
    cfg = small_cfg_dict(**{"dataset.n_classes": 4, "dataset.train_per_class": 4,
                            "dataset.test_per_class": 2, "train.shots": 2,
                            "train.epochs": 1, "eval.n_seeds": 1})
    cfg_path = tmp_path / "config.yaml"
    save_config(cfg, cfg_path)
    reg_path = tmp_path / "registry.yaml"
    save_registry(small_registry_dict(), reg_path)
    rc = main(["ablate", "--config", str(cfg_path), "--axis", "pooling",
               "--registry", str(reg_path), "--out", str(tmp_path / "runs")])
    assert rc == 0
    run = tmp_path / "runs" / config_hash(cfg)[:12]
    payload = json.loads((run / "ablation_pooling.json").read_text())
    assert [r["setting"] for r in payload["rows"]] == ["average", "max", "logsumexp"]
    out = capsys.readouterr().out
    assert "logsumexp" in out
