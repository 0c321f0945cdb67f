import json

import pytest

from polyadapt.cli import main
from polyadapt.config import write_paper_scale
from conftest import TINY_PLAN


def status(capsys):
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY_PLAN))
    return p


def test_bad_usage_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert status(capsys)["status"] == "error"
    assert main(["recipe", "run", "no_such_recipe", "--quiet"]) == 2
    assert status(capsys)["status"] == "error"


def test_config_error_reports_pointer(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"adapter": {"variant": "lora"}}))
    assert main(["train-adapter", "--config", str(p), "--out", str(tmp_path / "r")]) == 2
    captured = capsys.readouterr()
    assert json.loads(captured.out)["pointer"] == "/adapter/variant"
    assert "config error at /adapter/variant" in captured.err


def test_documentation_plan_exits_2(tmp_path, capsys):
    p = tmp_path / "paper_scale.json"
    write_paper_scale(p)
    assert main(["train-adapter", "--config", str(p), "--out", str(tmp_path / "r")]) == 2
    assert status(capsys)["pointer"] == "/runnable"


def test_missing_checkpoint_exits_1(tmp_path, capsys):
    assert main(["evaluate", "--run", str(tmp_path / "nothing")]) == 1
    s = status(capsys)
    assert s["status"] == "error" and s["kind"] == "CheckpointError"


def test_dataset_build(tmp_path, tiny_config, capsys):
    out = tmp_path / "ds"
    assert main(["dataset", "build", "--config", str(tiny_config), "--out", str(out)]) == 0
    s = status(capsys)
    assert s["command"] == "dataset build" and s["scenes"] == 96 and s["languages"] == 4
    assert any(out.iterdir())


def test_train_sample_evaluate_and_diff(tmp_path, tiny_config, capsys):
    run = tmp_path / "run"
    args = ["--config", str(tiny_config), "--out", str(run), "--quiet"]
    assert main(["train-adapter", *args]) == 0
    s = status(capsys)
    assert s["status"] == "ok" and s["budget_ratio"] < 0.05
    assert (run / "curves" / "losses.png").exists()

    assert main(["sample", "--run", str(run), "--n", "2", "--lang", "L1", "--quiet"]) == 0
    assert status(capsys)["n"] == 2
    assert (run / "samples" / "samples_L1.png").exists()
    assert main(["sample", "--run", str(run), "--lang", "Q7", "--quiet"]) == 2
    status(capsys)

    assert main(["evaluate", "--run", str(run), "--quiet"]) == 0
    assert len(status(capsys)["aggregates"]) == 3
    report = run / "report.json"
    assert main(["report", "diff", str(report), str(run)]) == 0
    assert status(capsys)["differences"] == 0

    doc = json.loads(report.read_text())
    doc["rows"][0]["sim_mean"] += 1.0
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    assert main(["report", "diff", str(report), str(other)]) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["differences"] == 1
    assert "/rows/0/sim_mean" in captured.err

    assert main(["report", "diff", str(report), str(tmp_path / "missing.json")]) == 1
    status(capsys)


@pytest.mark.parametrize("cmd,keys", [("align", {"teacher", "encoder"}),
                                      ("pretrain-diffusion", {"teacher", "denoiser"})])
def test_stage_commands(cmd, keys, tmp_path, tiny_config, capsys):
    out = tmp_path / "r"
    assert main([cmd, "--config", str(tiny_config), "--out", str(out), "--quiet"]) == 0
    assert set(status(capsys)["checksums"]) == keys
    for k in keys:
        assert (out / "ckpt" / f"{k}.mlck").exists()


def test_recipe_bad_seeds(capsys):
    assert main(["recipe", "run", "parity_check", "--seeds", "a,b", "--quiet"]) == 2
    status(capsys)
