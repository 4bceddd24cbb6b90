import numpy as np
import pytest

from egomotion import gradcore as gc
from egomotion.attention import StreamState
from egomotion.denoiser import (Conditions, Denoiser, DenoiserConfig, from_rig, part_target, rig_frame,
                                timestep_embedding, to_rig, upper_body_rig)
from egomotion.observe import make_identity, make_record
from egomotion.skeleton import default_skeleton

SKEL = default_skeleton()


def tiny(part="body", precision=64, **kw):
    base = dict(d_model=16, frame_blocks=1, temporal_layers=2, heads=2, ws=3, precision=precision)
    return Denoiser(DenoiserConfig(part, "teacher", **{**base, **kw}), SKEL)


@pytest.fixture(scope="module")
def record():
    return make_record(make_identity("d", 4), 8, T=24)


def conditions(net, rec, obs=None):
    obs = obs or rec.observation
    upper = upper_body_rig(SKEL, rec.motion.frames, obs) if net.config.upper_body else None
    ex = rec.motion.frames[::6] if net.config.identity else None
    return Conditions.from_observation(obs, net.joints, upper, ex)


def noisy_input(net, T, seed=0):
    return np.random.default_rng(seed).normal(size=(1, T, net.config.num_joints, 3)).astype(net.config.dtype)


def test_config_validation():
    with pytest.raises(ValueError, match="upper-body"):
        DenoiserConfig("body", "teacher", upper_body=True)
    with pytest.raises(ValueError):
        DenoiserConfig("torso", "teacher")
    with pytest.raises(ValueError, match="unknown"):
        DenoiserConfig.from_dict({"part": "body", "depth": 3})
    t = DenoiserConfig.preset("body", "teacher")
    assert (t.d_model, t.frame_blocks, t.temporal_layers, t.heads, t.ws) == (512, 3, 3, 4, 20)
    s = DenoiserConfig.preset("hand", "student", upper_body=True)
    assert (s.d_model, s.frame_blocks, s.temporal_layers, s.heads, s.ws) == (256, 1, 1, 2, 8)


def test_output_shapes(record):
    for part, n, kw in (("body", 17, {}), ("hand", 30, {"upper_body": True}), ("whole", 47, {})):
        net = tiny(part, **kw)
        x0, aux = net(noisy_input(net, 24), conditions(net, record), 700)
        assert x0.shape == (1, 24, n, 3) and aux.shape == (1, 24, n, 3)
    net = tiny("body")
    with pytest.raises(gc.ShapeError, match="diffused motion"):
        net(np.zeros((1, 24, 30, 3)), conditions(net, record), 10)


def test_encoders():
    for role, width in (("teacher", 512), ("student", 256)):
        net = Denoiser(DenoiserConfig.preset("body", role, frame_blocks=1, temporal_layers=1), SKEL)
        assert net.encode_camera(np.eye(3), np.zeros(3)).shape == (width,)
        assert net.encode_timestep(3).shape == (width,)
    net = tiny()
    a = net.encode_camera(np.eye(3), np.array([0.1, 0.2, 1.5])).data
    b = net.encode_camera(np.eye(3), np.array([0.1, -0.3, 1.2])).data
    assert np.abs(a - b).max() > 1e-6
    emb = timestep_embedding(0, 16)
    np.testing.assert_array_equal(emb[:8], 0.0)
    np.testing.assert_array_equal(emb[8:], 1.0)
    assert abs(np.linalg.norm(net.encode_timestep(1).data) - np.linalg.norm(net.encode_timestep(999).data)) > 0
    assert net.encode_timestep(5).data.tobytes() == net.encode_timestep(5).data.tobytes()
    with pytest.raises(ValueError, match="upper-body"):
        net.encode_upper_body(np.zeros((7, 3)))
    hand = tiny("hand", upper_body=True)
    assert hand.encode_upper_body(np.zeros((7, 3))).shape == (16,)
    np.testing.assert_array_equal(hand.encode_upper_body(np.zeros((7, 3))).data,
                                  hand.upper_enc(gc.Tensor(np.zeros(21))).data)
    for p in hand.cam_enc.parameters():
        p.data[:] = 0
    np.testing.assert_array_equal(hand.encode_camera(np.eye(3), np.ones(3)).data, 0.0)


@pytest.mark.parametrize("kw", [{}, {"identity": True}, {"part": "hand", "upper_body": True}])
def test_causality_bitwise(record, kw):
    net = tiny(**kw)
    x = noisy_input(net, 24)
    base, _ = net(x, conditions(net, record), 300)
    for t in (0, 9, 22):
        obs = record.observation.perturbed(t + 1, np.random.default_rng(t))
        cond = conditions(net, record, obs)
        if cond.upper is not None:
            cond.upper[:, t + 1:] += 1.0
        x2 = x.copy()
        x2[:, t + 1:] += 3.0
        out, _ = net(x2, cond, 300)
        assert out.data[:, :t + 1].tobytes() == base.data[:, :t + 1].tobytes()
        assert np.abs(out.data[:, t + 1:] - base.data[:, t + 1:]).max() > 0


def test_time_shift_invariance(record):
    net = tiny()
    x = noisy_input(net, 24)
    cond = conditions(net, record)
    full, _ = net(x, cond, 300)
    s = 5
    part, _ = net(x[:, s:], cond.frames(s, 24), 300)
    reach = net.config.temporal_layers * net.config.ws
    np.testing.assert_allclose(part.data[:, reach:], full.data[:, s + reach:], atol=1e-12)


def test_frame_aux_permutes_with_frames(record):
    net = tiny()
    x = noisy_input(net, 24)
    cond = conditions(net, record)
    _, aux = net(x, cond, 300)
    perm = np.random.default_rng(1).permutation(24)
    shuffled = Conditions(cond.kp[:, perm], cond.cam[:, perm])
    _, aux_p = net(x[:, perm], shuffled, 300)
    np.testing.assert_allclose(aux_p.data, aux.data[:, perm], atol=1e-12)


def test_student_is_smaller():
    for part, kw in (("body", {}), ("hand", {"upper_body": True})):
        teacher = Denoiser(DenoiserConfig.preset(part, "teacher", **kw), SKEL).num_parameters()
        student = Denoiser(DenoiserConfig.preset(part, "student", **kw), SKEL).num_parameters()
        assert student < teacher / 4


def _twins():
    nets = {p: tiny(precision=p, d_model=8, temporal_layers=1, ws=2) for p in (32, 64)}
    nets[64].load_state_dict(nets[32].state_dict())
    return nets


def _toy_loss(net, record):
    rng = np.random.default_rng(0)
    rec2 = record.observation.slice(0, 2)
    cond = Conditions.from_observation(rec2, net.joints)
    x = rng.normal(size=(1, 2, 17, 3))
    target = rng.normal(size=(1, 2, 17, 3))

    def f(*_):
        x0, aux = net(x, cond, 500)
        d, e = x0 - target, aux - target
        return (d * d).mean() + (e * e).mean()
    return f


def _leaves(net):
    # key biases of the joint attention have identically zero gradient (softmax shift invariance)
    return [p for name, p in net.named_parameters() if not name.endswith("k.bias")]


@pytest.mark.slow
def test_gradient_check_64bit(record):
    net = _twins()[64]
    err = gc.finite_difference_check(_toy_loss(net, record), _leaves(net), h=1e-3, order=4)
    assert err < 1e-7, err


@pytest.mark.slow
def test_gradient_check_32bit(record):
    nets = _twins()
    err = gc.finite_difference_check(_toy_loss(nets[32], record), _leaves(nets[32]), h=1e-3, order=4,
                                     reference=(_toy_loss(nets[64], record), _leaves(nets[64])))
    assert err < 1e-4, err


@pytest.mark.parametrize("kw", [{"precision": 32}, {"precision": 64, "identity": True}])
def test_streaming_matches_offline(record, kw):
    net = tiny(**kw)
    x = noisy_input(net, 24)
    cond = conditions(net, record)
    with gc.no_grad(), gc.wide_accumulation():
        full, _ = net(x, cond, 1000)
        state = StreamState()
        rows = [net.step(state, x[:, t:t + 1], cond.frames(t, t + 1), 1000)[0].data for t in range(24)]
    assert np.abs(np.concatenate(rows, axis=1) - full.data).max() < 1e-6


def test_save_load_roundtrip(tmp_path, record):
    net = tiny("hand", upper_body=True, identity=True)
    net.set_normalization(np.full((30, 3), 0.1), np.full((30, 3), 0.01))
    assert np.all(net.norm_std == 0.02)
    net.save(tmp_path / "m")
    back = Denoiser.load(tmp_path / "m")
    assert back.config == net.config
    x = noisy_input(net, 24)
    cond = conditions(net, record)
    assert back(x, cond, 50)[0].data.tobytes() == net(x, cond, 50)[0].data.tobytes()
    np.testing.assert_array_equal(back.norm_mean, net.norm_mean)


def test_rig_coordinates_roundtrip(record):
    R, c = rig_frame(record.observation)
    pts = record.motion.frames
    np.testing.assert_allclose(from_rig(to_rig(pts, R, c), R, c), pts, atol=1e-12)
    hand = part_target(SKEL, pts, record.observation, "hand")
    assert hand.shape == (24, 30, 3)
    # first joint of each finger chain is one bone away from the wrist
    assert np.all(np.linalg.norm(hand, axis=-1) < 0.25)
