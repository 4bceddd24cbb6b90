import numpy as np
import pytest
import yaml
from scipy.spatial.transform import Rotation

from egomotion.cascade import WholeBodyEstimator
from egomotion.denoiser import Denoiser, DenoiserConfig
from egomotion.eval import (EvalReport, bench_latency, bench_offline, bone_err, foot_skate, mpjpe, pa_mpjpe,
                            part_metrics, run_ablation)
from egomotion.observe import make_identity, make_record
from egomotion.skeleton import MotionSequence, default_skeleton

SKEL = default_skeleton()


def rand_motion(rng, T=4):
    return rng.standard_normal((T, 47, 3)) * 0.3


def test_mpjpe_closed_forms():
    rng = np.random.default_rng(0)
    gt = rand_motion(rng)
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + [0.03, 0.0, 0.04], gt) == pytest.approx(50.0, abs=1e-9)
    one = gt[:1].copy()
    one[0, 5] += [0.047, 0, 0]
    assert mpjpe(one, gt[:1]) == pytest.approx(1.0, abs=1e-9)
    assert mpjpe(MotionSequence(gt), MotionSequence(gt)) == 0.0
    with pytest.raises(ValueError, match="shape"):
        mpjpe(gt[:2], gt)


def test_pa_mpjpe_removes_similarity():
    rng = np.random.default_rng(1)
    gt = rand_motion(rng, T=6)
    assert pa_mpjpe(gt, gt) < 1e-9
    for trial in range(20):
        R = Rotation.random(random_state=trial).as_matrix()
        s = rng.uniform(0.5, 2.0)
        t = rng.standard_normal(3)
        assert pa_mpjpe(s * gt @ R.T + t, gt) < 1e-6
    centre = gt.mean(axis=1, keepdims=True)
    assert pa_mpjpe(1.3 * (gt - centre) + centre, gt) < 1e-6


def test_pa_mpjpe_flags_degenerate_frames():
    rng = np.random.default_rng(2)
    gt = rand_motion(rng, T=3)
    pred = gt.copy()
    pred[1] = 0.5
    err, flags = pa_mpjpe(pred, gt, return_flags=True)
    assert flags == [1]
    assert np.isfinite(err)


def test_pa_never_exceeds_mpjpe_fuzzed():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(3, 20))
        gt = rng.standard_normal((2, n, 3))
        pred = gt + rng.standard_normal(gt.shape) * rng.uniform(0.01, 2.0)
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_metrics_invariant_to_joint_permutation():
    rng = np.random.default_rng(4)
    gt = rand_motion(rng)
    pred = gt + 0.02 * rng.standard_normal(gt.shape)
    perm = rng.permutation(47)
    assert mpjpe(pred[:, perm], gt[:, perm]) == pytest.approx(mpjpe(pred, gt), rel=1e-12)
    assert pa_mpjpe(pred[:, perm], gt[:, perm]) == pytest.approx(pa_mpjpe(pred, gt), rel=1e-9)


def test_foot_skate_closed_forms():
    T = 10
    feet = SKEL.subset("feet")
    still = np.zeros((T, 47, 3))
    assert foot_skate(still) == 0.0
    high = still.copy()
    high[:, :, 2] = 0.2
    assert foot_skate(high) == 0.0
    slide = still.copy()
    slide[:, feet, 0] = 0.002 * np.arange(T)[:, None]
    assert foot_skate(slide) == pytest.approx(2.0, abs=1e-9)
    # only contact frames count: the lifted foot's motion is ignored
    mixed = slide.copy()
    mixed[:, feet[1], 2] = 0.3
    mixed[:, feet[1], 0] = 0.05 * np.arange(T)
    assert foot_skate(mixed) == pytest.approx(2.0, abs=1e-9)


def test_bone_err_closed_forms():
    rng = np.random.default_rng(5)
    gt = rand_motion(rng)
    assert bone_err(gt, gt) == 0.0
    R = Rotation.random(random_state=1).as_matrix()
    assert bone_err(gt @ R.T + 1.0, gt) < 1e-9
    rest = SKEL.rest_pose()[None]
    mean_len = SKEL.bone_lengths.mean()
    assert bone_err(1.1 * rest, rest) == pytest.approx(0.1 * mean_len * 1000, rel=1e-9)


def test_part_metrics_and_report(tmp_path):
    rng = np.random.default_rng(6)
    gt = rand_motion(rng)
    pred = gt.copy()
    pred[:, SKEL.hands] += [0.0, 0.0, 0.01]
    m = part_metrics(pred, gt)
    assert m["body"]["mpjpe"] == 0.0
    assert m["hand"]["mpjpe"] == pytest.approx(10.0)
    report = EvalReport()
    report.add("cascaded", "test", m)
    assert report.value("cascaded", "hand") == pytest.approx(10.0)
    with pytest.raises(ValueError, match="invalid"):
        report.add("bad", "test", {"body": {"mpjpe": np.nan, "pa_mpjpe": 0, "foot_skate": 0, "bone_err": 0}})
    report.latency["student"] = {"p50": 1.0, "p95": 2.0, "max": 3.0}
    report.save(tmp_path / "r.txt")
    text = (tmp_path / "r.txt").read_text()
    assert "cascaded" in text and "p50" in text
    lines = text.splitlines()
    assert len(lines[0]) == len(lines[2])
    back = yaml.safe_load((tmp_path / "r.yaml").read_text())
    assert back["rows"][1]["mpjpe"] == pytest.approx(10.0)


TINY = dict(d_model=16, frame_blocks=1, temporal_layers=1, heads=2, ws=4, precision=64)


def tiny_estimator(steps=2, seed=0):
    body = Denoiser(DenoiserConfig("body", "student", **TINY, seed=seed), SKEL)
    hand = Denoiser(DenoiserConfig("hand", "student", **TINY, seed=seed + 1, upper_body=True), SKEL)
    return WholeBodyEstimator(body, hand, body_steps=steps, hand_steps=steps)


@pytest.fixture(scope="module")
def records():
    return [make_record(make_identity("e", 1), s, T=20) for s in (1, 2)]


def test_run_ablation_rows_and_repeatability(records, tmp_path):
    one = run_ablation({"cascaded": tiny_estimator()}, records, seeds=(0,), n_evals=2)
    assert len(one.rows) == 2 and {r["part"] for r in one.rows} == {"body", "hand"}
    again = run_ablation({"cascaded": tiny_estimator()}, records, seeds=(0,), n_evals=2)
    assert one.to_dict() == again.to_dict()
    tiny_estimator().save(tmp_path / "ckpt")
    from_dir = run_ablation({"cascaded": str(tmp_path / "ckpt")}, records, seeds=(0,), n_evals=2)
    assert from_dir.to_dict() == one.to_dict()
    with pytest.raises(FileNotFoundError, match="variant 'teacher'"):
        run_ablation({"teacher": str(tmp_path / "missing")}, records)


def test_bench_latency_student_faster(records):
    obs = make_record(make_identity("e", 1), 3, T=40).observation
    out = bench_latency(tiny_estimator(10), tiny_estimator(1), obs, warmup=5, repeats=2)
    assert out["student_offline"]["p50"] < out["teacher_offline"]["p50"]
    assert out["ratio"]["p50"] > 1.0
    assert set(out["student_stream"]) == {"p50", "p95", "max"}


@pytest.mark.slow
def test_bench_repeatable():
    obs = make_record(make_identity("e", 1), 3, T=60).observation
    est = tiny_estimator(10)
    a = bench_offline(est, obs, repeats=3)["p50"]
    b = bench_offline(est, obs, repeats=3)["p50"]
    assert abs(a - b) / max(a, b) < 0.3
