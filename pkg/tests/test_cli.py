import os

import pytest
import yaml

from egomotion.cli import RunConfig, main
from egomotion.gradcore import checkpoint

TINY = {
    "data": {"identities": [2, 1, 1], "seqs": 1, "frames": 60},
    "denoiser": {"d_model": 16, "frame_blocks": 1, "temporal_layers": 1, "heads": 2, "ws": 4, "identity": False},
    "train": {"steps": 3, "log_every": 1},
    "identity": {"poses": 3, "iterations": 5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    data = root / "data"
    assert main(["--config", str(cfg), "gen-data", "--out", str(data)]) == 0
    assert main(["--config", str(cfg), "train", "--data", str(data), "--out", str(root / "teacher")]) == 0
    return root, cfg, data


def test_no_arguments_prints_usage(capsys):
    assert main([]) != 0
    assert "usage" in capsys.readouterr().err


def test_unknown_command_and_flag():
    assert main(["dance"]) != 0
    assert main(["selftest", "--bogus"]) != 0


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"seeed": 1})
    with pytest.raises(ValueError, match="unknown train config keys"):
        RunConfig.from_dict({"train": {"stepz": 1}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("denoiser: {width: 3}\n")
    assert main(["--config", str(bad), "selftest"]) == 2


def test_resolved_config_logged_and_written(workspace, caplog):
    root, cfg, data = workspace
    written = yaml.safe_load((root / "teacher" / "run_config.yaml").read_text())
    assert written["train"]["steps"] == 3 and written["command"] == "train"
    assert written["paths"]["data"] == str(data)
    assert (root / "teacher" / "body_curve.txt").read_text().splitlines()[0].split()[0] == "step"


def test_data_dir_from_environment(workspace, monkeypatch, tmp_path):
    root, cfg, data = workspace
    monkeypatch.setenv("EGOMOTION_DATA", str(data))
    out = tmp_path / "reg"
    assert main(["--config", str(cfg), "--seed", "0", "train", "--part", "body",
                 "--mode", "regression", "--out", str(out)]) == 0
    assert os.path.isdir(out / "body")


def test_end_to_end_eval_infer_bench(workspace, tmp_path, capsys):
    root, cfg, data = workspace
    report = tmp_path / "report.txt"
    assert main(["--config", str(cfg), "eval", "--model", str(root / "teacher"), "--data", str(data),
                 "--evals", "1", "--report", str(report)]) == 0
    assert "mpjpe" in report.read_text() and (tmp_path / "report.yaml").exists()

    pred = tmp_path / "pred.gck"
    assert main(["--config", str(cfg), "infer", "--model", str(root / "teacher"), "--input", str(data),
                 "--steps", "2", "--out", str(pred)]) == 0
    assert checkpoint.load(pred)["motion"].shape == (60, 47, 3)
    gt = data / "test" / "seq_00000.gck"
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--report", str(tmp_path / "r2.txt")]) == 0

    student = tmp_path / "student"
    assert main(["--config", str(cfg), "distill", "--teacher", str(root / "teacher"), "--data", str(data),
                 "--out", str(student)]) == 0
    live = tmp_path / "live.gck"
    assert main(["--config", str(cfg), "infer", "--model", str(student), "--input", "live", "--frames", "30",
                 "--out", str(live)]) == 0
    assert "p50" in (tmp_path / "live_latency.txt").read_text()
    capsys.readouterr()
    assert main(["bench", "--model", str(student), "--teacher", str(root / "teacher"), "--frames", "30",
                 "--warmup", "5"]) == 0
    assert "ratio" in capsys.readouterr().out


def test_register_identity(workspace, tmp_path):
    root, cfg, data = workspace
    out = tmp_path / "id.gck"
    assert main(["--config", str(cfg), "register-identity", "--identity", "id003", "--data", str(data),
                 "--out", str(out)]) == 0
    assert checkpoint.load(out)["exemplars"].shape == (3, 47, 3)
    assert main(["--config", str(cfg), "register-identity", "--identity", "nobody", "--data", str(data),
                 "--out", str(out)]) == 2


def test_identical_config_identical_artifacts(workspace, tmp_path):
    root, cfg, data = workspace
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--config", str(cfg), "--precision", "64", "train", "--part", "body", "--data", str(data),
                     "--out", str(out)]) == 0
        outs.append(sorted((p.name, p.read_bytes()) for p in (out / "body").iterdir()))
    assert outs[0] == outs[1]
