import dataclasses

import numpy as np
import pytest

from egomotion.observe import (CameraPose, DatasetError, RigConfig, generate_dataset,
                               generate_motion, generate_pose_angles, make_identity, make_record,
                               project_to_camera, read_dataset, render_observation, write_dataset)
from egomotion.skeleton import default_skeleton, measured_bone_lengths


def axis_camera(f=500.0, c=(320.0, 240.0)):
    return CameraPose(np.eye(3), np.zeros(3), np.array([f, f, *c]), (640, 480))


def test_projection_examples():
    cam = axis_camera()
    px, vis = project_to_camera([0.0, 0.0, 1.0], cam)
    np.testing.assert_allclose(px, [320.0, 240.0])
    assert vis
    px, vis = project_to_camera([0.1, 0.0, 1.0], cam)
    np.testing.assert_allclose(px, [370.0, 240.0])
    assert vis
    _, vis = project_to_camera([0.0, 0.0, -1.0], cam)
    assert not vis
    _, vis = project_to_camera([5.0, 0.0, 1.0], cam)
    assert not vis


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(np.eye(3), np.zeros(3), np.array([0.0, 1.0, 0.0, 0.0]))


@pytest.fixture(scope="module")
def identity():
    return make_identity("a", 3)


def test_identity_invariants(identity):
    assert np.all((identity.bone_scale >= 0.7) & (identity.bone_scale <= 1.3))
    assert np.isclose(identity.height, identity.skeleton().height())


def test_motion_deterministic_and_isometric(identity):
    m1, _ = generate_motion(identity, 11, 60)
    m2, _ = generate_motion(identity, 11, 60)
    assert m1.frames.tobytes() == m2.frames.tobytes()
    skel = default_skeleton()
    lengths = measured_bone_lengths(skel, m1.frames)
    assert np.abs(lengths - identity.skeleton().bone_lengths).max() < 1e-9
    feet = [skel.index("l_ankle"), skel.index("r_ankle")]
    assert np.abs(m1.frames[:, feet, 2].min(axis=1)).max() < 1e-9
    with pytest.raises(ValueError):
        generate_motion(identity, 0, 1)


def test_hand_upper_body_correlation(identity):
    eul, pairs = generate_pose_angles(identity, 5, 1000, return_pairs=True)
    for (hj, ha), (sj, sa), sign in pairs:
        r = np.corrcoef(eul[:, hj, ha], eul[:, sj, sa])[0, 1]
        assert sign * r > 0.6, (hj, ha, r)


def _exact_projection(motion, head_rot, rig):
    return render_observation(motion, head_rot, dataclasses.replace(rig, sigma_2d=0.0, p_drop=0.0,
                                                                    p_hand_drop=0.0),
                              np.random.default_rng(0))


def test_render_noiseless_and_full_drop(identity):
    motion, head_rot = generate_motion(identity, 2, 40)
    rig = RigConfig()
    exact = _exact_projection(motion, head_rot, rig)
    vis = exact.conf > 0
    assert vis.any()
    for t in (0, 17):
        for v in (0, 1):
            for j in np.flatnonzero(vis[t, v])[:5]:
                px, ok = project_to_camera(motion.frames[t, j], exact.camera(t, v))
                assert ok
                np.testing.assert_allclose(exact.kp2d[t, v, j], px, atol=1e-9)
    dropped = render_observation(motion, head_rot, dataclasses.replace(rig, p_drop=1.0),
                                 np.random.default_rng(0))
    assert np.all(dropped.conf == 0) and np.all(dropped.kp2d == 0)


def test_render_noise_half_normal_mean(identity):
    rig = RigConfig()
    errs = []
    for seed in range(4):
        motion, head_rot = generate_motion(identity, seed, 200)
        exact = _exact_projection(motion, head_rot, rig)
        noisy = render_observation(motion, head_rot, dataclasses.replace(rig, p_drop=0.0, p_hand_drop=0.0),
                                   np.random.default_rng(seed))
        vis = noisy.conf > 0
        errs.append(np.abs(noisy.kp2d - exact.kp2d)[vis].ravel())
    mean = np.concatenate(errs).mean()
    assert 1.4 <= mean <= 1.9
    assert abs(mean - 2.0 * np.sqrt(2 / np.pi)) < 0.05


def test_confidence_contract(identity):
    rec = make_record(identity, 9, T=80)
    obs = rec.observation
    assert np.all((obs.conf == 0) | ((obs.conf >= 0.7) & (obs.conf <= 1.0)))
    assert np.all(obs.kp2d[obs.conf == 0] == 0)
    hands = default_skeleton().hands
    body = default_skeleton().subset("body")
    assert (obs.conf[:, :, hands] == 0).mean() > (obs.conf[:, :, body] == 0).mean()


def _triangulate(P1, P2, x1, x2):
    A = np.stack([x1[0] * P1[2] - P1[0], x1[1] * P1[2] - P1[1],
                  x2[0] * P2[2] - P2[0], x2[1] * P2[2] - P2[1]])
    X = np.linalg.svd(A)[2][-1]
    return X[:3] / X[3]


def test_stereo_triangulation_oracle(identity):
    motion, head_rot = generate_motion(identity, 4, 20)
    obs = _exact_projection(motion, head_rot, RigConfig())

    def proj(t, v):
        cam = obs.camera(t, v)
        K = np.array([[cam.intrinsics[0], 0, cam.intrinsics[2]], [0, cam.intrinsics[1], cam.intrinsics[3]],
                      [0, 0, 1.0]])
        R = cam.rotation.T
        return K @ np.hstack([R, -R @ cam.translation[:, None]])

    worst, n = 0.0, 0
    for t in range(0, 20, 3):
        P1, P2 = proj(t, 0), proj(t, 1)
        both = (obs.conf[t, 0] > 0) & (obs.conf[t, 1] > 0)
        for j in np.flatnonzero(both):
            X = _triangulate(P1, P2, obs.kp2d[t, 0, j], obs.kp2d[t, 1, j])
            worst = max(worst, np.abs(X - motion.frames[t, j]).max())
            n += 1
    assert n > 50
    assert worst < 1e-6


def test_observation_deterministic(identity):
    a = make_record(identity, 21, T=30).observation
    b = make_record(identity, 21, T=30).observation
    assert a.kp2d.tobytes() == b.kp2d.tobytes() and a.conf.tobytes() == b.conf.tobytes()


def test_dataset_roundtrip(tmp_path):
    write_dataset(tmp_path / "empty", {"train": []})
    assert read_dataset(tmp_path / "empty") == {"train": []}

    splits = generate_dataset((1, 1, 1), seqs=1, frames=12, seed=4)
    root = tmp_path / "ds"
    write_dataset(root, splits)
    back = read_dataset(root)
    assert sum(len(v) for v in back.values()) == 3
    for split, records in splits.items():
        for a, b in zip(records, back[split]):
            assert a.identity.id == b.identity.id and a.seed == b.seed and a.rig == b.rig
            for x, y in ((a.motion.frames, b.motion.frames), (a.observation.kp2d, b.observation.kp2d),
                         (a.observation.conf, b.observation.conf),
                         (a.observation.cam_rot, b.observation.cam_rot),
                         (a.identity.bone_scale, b.identity.bone_scale)):
                assert x.tobytes() == y.tobytes()


def test_dataset_corruption(tmp_path):
    root = tmp_path / "ds"
    write_dataset(root, generate_dataset((2, 0, 0), seqs=1, frames=8))
    (root / "manifest.yaml").write_text("format: something-else\n")
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(root)
    write_dataset(root, generate_dataset((2, 0, 0), seqs=1, frames=8))
    blob = (root / "train" / "seq_00001.gck").read_bytes()
    (root / "train" / "seq_00001.gck").write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(DatasetError, match="record 1"):
        read_dataset(root)
