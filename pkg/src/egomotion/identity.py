"""Identity conditioning from exemplar poses, AdaIN injection, and exemplar registration.

An identity is summarized by a handful of its own 3D poses.  Each root-centred
pose goes through a shared two-layer MLP and the results are max-pooled, so the
feature does not depend on exemplar order or repetition.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import MLP2, Linear, Module, Tensor, checkpoint
from .observe import generate_pose_angles
from .skeleton import WholeBodySkeleton, default_skeleton

log = logging.getLogger(__name__)

D_ID = 64
ADAIN_EPS = 1e-5


# -- exemplar set encoding -------------------------------------------------------------
class ExemplarEncoder(Module):
    """gamma: flattened root-centred pose -> D_ID feature."""

    def __init__(self, num_joints, rng, dtype=np.float32, d_id=D_ID):
        self.num_joints = num_joints
        self.gamma = MLP2(num_joints * 3, d_id, d_id, rng, dtype)


def root_center(poses):
    poses = np.asarray(poses)
    return poses - poses[..., :1, :]


def exemplar_encode(encoder: ExemplarEncoder, exemplars):
    """Max over exemplars of gamma(J_i); exemplars (..., N_O, N, 3) -> (..., D_ID)."""
    ex = root_center(exemplars)
    if ex.ndim < 3 or ex.shape[-3] == 0:
        raise ValueError("exemplar set is empty")
    flat = ex.reshape(ex.shape[:-2] + (-1,)).astype(encoder.gamma.fc1.weight.dtype)
    return gc.tmax(encoder.gamma(Tensor(flat)), axis=-2)


# -- AdaIN -------------------------------------------------------------------------
class AdaIN(Module):
    """Scale and bias maps from the identity feature; identity transform at init."""

    def __init__(self, d_id, d_model, rng, dtype=np.float32):
        self.scale = Linear(d_id, d_model, rng, dtype, init_scale=0.0)
        self.shift = Linear(d_id, d_model, rng, dtype, init_scale=0.0)
        self.scale.bias.data[:] = 1.0

    def maps(self, f_ex):
        """(s, b) each shaped (..., 1, d_model) for broadcasting over frames."""
        s, b = self.scale(f_ex), self.shift(f_ex)
        return s.reshape(s.shape[:-1] + (1, s.shape[-1])), b.reshape(b.shape[:-1] + (1, b.shape[-1]))


def _window_stats(x, window):
    """Trailing-window mean and std over the frame axis (axis -2) of a Tensor."""
    T = x.shape[-2]
    span = min(window - 1, T - 1)
    taxis = x.ndim - 2
    lead = (slice(None),) * taxis
    xp = gc.pad_front(x, span, taxis)
    slices = [xp[lead + (slice(span - d, span - d + T),)] for d in range(span + 1)]
    t = np.arange(T)
    count = np.minimum(t + 1, span + 1).astype(x.dtype)[:, None]
    total = slices[0]
    for s in slices[1:]:
        total = total + s
    mean = total / count
    var = None
    for d, s in enumerate(slices):
        dev = (s - mean) * (s - mean)
        if d:
            dev = dev * (t >= d).astype(x.dtype)[:, None]
        var = dev if var is None else var + dev
    return mean, gc.sqrt(var / count + 1e-12)


def adain_inject(features, s, b, window=None):
    """out = s * (x - mu) / (sigma + 1e-5) + b with per-channel statistics over frames.

    ``window=None`` uses all frames.  A finite window uses only the current and
    the ``window - 1`` preceding frames, which keeps the layer causal.
    """
    x = gc.as_tensor(features)
    if window is None:
        mean = x.mean(axis=-2, keepdims=True)
        dev = x - mean
        std = gc.sqrt((dev * dev).mean(axis=-2, keepdims=True) + 1e-12)
    else:
        mean, std = _window_stats(x, window)
        dev = x - mean
    return s * dev / (std + ADAIN_EPS) + b


def adain_frame(features, s, b):
    """AdaIN with per-frame statistics over the channel axis.

    Each frame is normalized on its own, so the operation is causal with no
    warm-up: the trailing-window form degenerates on the first frames of a
    sequence (a one-frame window maps every channel to ``b``).
    """
    x = gc.as_tensor(features)
    mean = x.mean(axis=-1, keepdims=True)
    dev = x - mean
    std = gc.sqrt((dev * dev).mean(axis=-1, keepdims=True) + 1e-12)
    return s * dev / (std + ADAIN_EPS) + b


def adain_stream_step(state, key, x, s, b, window):
    """Streaming counterpart of the windowed ``adain_inject`` for one frame (..., 1, D)."""
    buf = state.buffer(key, window)
    buf.append(x)
    recent = list(reversed(buf))
    total = recent[0]
    for r in recent[1:]:
        total = total + r
    mean = total / np.asarray(len(recent), dtype=x.dtype)
    var = None
    for r in recent:
        dev = (r - mean) * (r - mean)
        var = dev if var is None else var + dev
    std = gc.sqrt(var / np.asarray(len(recent), dtype=x.dtype) + 1e-12)
    return s * (x - mean) / (std + ADAIN_EPS) + b


# -- priors -------------------------------------------------------------------------
@dataclass
class IdentityPrior:
    exemplars: np.ndarray                 # (N_O, N, 3) root-centred
    f_ex: np.ndarray | None = None        # (D_ID,) when an encoder was supplied
    bone_scale: np.ndarray | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.exemplars = np.asarray(self.exemplars)
        if self.exemplars.ndim != 3 or len(self.exemplars) < 1:
            raise ValueError("an identity prior needs at least one exemplar pose")

    def save(self, path):
        tensors = {"exemplars": self.exemplars}
        if self.f_ex is not None:
            tensors["f_ex"] = self.f_ex
        if self.bone_scale is not None:
            tensors["bone_scale"] = self.bone_scale
        checkpoint.save(path, tensors)

    @classmethod
    def load(cls, path):
        t = checkpoint.load(path)
        return cls(t["exemplars"], t.get("f_ex"), t.get("bone_scale"))


# -- registration by skeleton fitting ---------------------------------------------------
def euler_matrices(euler):
    """Extrinsic xyz Euler angles (Tensor (..., 3)) -> rotation matrices (..., 3, 3)."""
    c, s = gc.cos(euler), gc.sin(euler)
    cx, cy, cz = c[..., 0], c[..., 1], c[..., 2]
    sx, sy, sz = s[..., 0], s[..., 1], s[..., 2]
    # R = Rz @ Ry @ Rx
    rows = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
    return gc.stack([gc.stack(r, axis=-1) for r in rows], axis=-2)


def fk_tensor(skel: WholeBodySkeleton, euler, root, bone_scale):
    """Differentiable FK: euler (M, N, 3), root (M, 3), bone_scale (N-1,) -> (M, N, 3)."""
    R = euler_matrices(euler)
    offsets = Tensor(skel.offsets[1:].astype(euler.dtype)) * bone_scale.reshape((-1, 1))
    glob = [R[:, 0]]
    pos = [root]
    for j in range(1, skel.num_joints):
        p = int(skel.parents[j])
        bone = gc.matmul(glob[p], offsets[j - 1].reshape((3, 1))).reshape((-1, 3))
        pos.append(pos[p] + bone)
        glob.append(gc.matmul(glob[p], R[:, j]))
    return gc.stack(pos, axis=1)


def _path_matrix(skel):
    """P[j, b] = 1 when bone b (ending at joint b + 1) lies on the root->j chain."""
    n = skel.num_joints
    P = np.zeros((n, n - 1))
    for j in range(1, n):
        P[j] = P[skel.parents[j]]
        P[j, j - 1] = 1.0
    return P


def rest_height(skel, bone_scale):
    """Differentiable vertical extent of the scaled rest pose."""
    P = _path_matrix(skel).astype(bone_scale.dtype)
    z = gc.matmul(Tensor(P), bone_scale * Tensor(skel.offsets[1:, 2].astype(bone_scale.dtype)))
    return gc.tmax(z, axis=0) + gc.tmax(-z, axis=0)


def _project(points, cameras):
    """points (M, N, 3) Tensor -> pixels (M, V, N, 2) Tensor."""
    R = np.stack([c.rotation for c in cameras])
    t = np.stack([c.translation for c in cameras])
    K = np.stack([c.intrinsics for c in cameras])
    dt = points.dtype
    rel = points.reshape((points.shape[0], 1) + points.shape[1:]) - Tensor(t[None, :, None, :].astype(dt))
    cam = gc.matmul(rel, Tensor(R[None].astype(dt)))          # (M, V, N, 3): rel @ R
    z = cam[..., 2]
    u = cam[..., 0] / z * Tensor(K[None, :, None, 0].astype(dt)) + Tensor(K[None, :, None, 2].astype(dt))
    v = cam[..., 1] / z * Tensor(K[None, :, None, 1].astype(dt)) + Tensor(K[None, :, None, 3].astype(dt))
    return gc.stack([u, v], axis=-1)


def _triangulate(kp2d, vis, cameras):
    """Linear triangulation of every joint, (M, V, N, 2) -> (M, N, 3); used for initialization."""
    P = []
    for c in cameras:
        K = np.array([[c.intrinsics[0], 0, c.intrinsics[2]], [0, c.intrinsics[1], c.intrinsics[3]], [0, 0, 1]])
        Rt = c.rotation.T
        P.append(K @ np.hstack([Rt, -Rt @ c.translation[:, None]]))
    M, V, N, _ = kp2d.shape
    out = np.zeros((M, N, 3))
    for m in range(M):
        for j in range(N):
            rows = []
            for v in range(V):
                if vis[m, v, j] > 0:
                    x = kp2d[m, v, j]
                    rows += [x[0] * P[v][2] - P[v][0], x[1] * P[v][2] - P[v][1]]
            if len(rows) >= 4:
                X = np.linalg.svd(np.stack(rows))[2][-1]
                out[m, j] = X[:3] / X[3]
            else:
                out[m, j] = np.nan
    return out


def _initial_root(skel, tri):
    """Root position and heading (yaw) per pose from triangulated hips."""
    M = len(tri)
    root = np.where(np.isfinite(tri[:, 0]), tri[:, 0], 0.0)
    lh, rh = skel.index("l_hip"), skel.index("r_hip")
    across = tri[:, lh] - tri[:, rh]
    yaw = np.where(np.all(np.isfinite(across), axis=1), np.arctan2(-across[:, 0], across[:, 1]), 0.0)
    euler = np.zeros((M, skel.num_joints, 3))
    euler[:, 0, 2] = yaw
    return root, euler


def register_identity(kp2d, vis, cameras, height, skel: WholeBodySkeleton | None = None,
                      iterations=3000, lr=5e-3, decay=0.99977, lam_reg=300.0, lam_height=1.0,
                      angle_mean=None, encoder: ExemplarEncoder | None = None, log_every=500):
    """Fit per-identity bone scales and per-pose angles to multi-view 2D keypoints.

    kp2d (M, V, N, 2) pixels, vis (M, V, N) weights.  Loss terms:

    * L_2D: squared pixel error summed over keypoints, averaged over images;
    * L_reg: mean squared deviation of all parameters (bone scales from 1,
      non-root angles from ``angle_mean``);
    * L_height: squared difference between fitted rest height and ``height``.

    Returns the fitted poses (root-centred) as an IdentityPrior.
    """
    skel = skel or default_skeleton()
    kp2d = np.asarray(kp2d, dtype=float)
    vis = np.asarray(vis, dtype=float)
    M = kp2d.shape[0]
    if M < 1 or kp2d.shape[1] < 2:
        raise ValueError("registration needs >= 1 pose seen from >= 2 views")
    root0, euler0 = _initial_root(skel, _triangulate(kp2d, vis, cameras))
    mean = np.zeros((skel.num_joints, 3)) if angle_mean is None else np.asarray(angle_mean, dtype=float)
    euler0[:, 1:] = mean[1:]
    scale = Tensor(np.ones(skel.num_joints - 1), requires_grad=True)
    euler = Tensor(euler0, requires_grad=True)
    root = Tensor(root0, requires_grad=True)
    opt = gc.AdamW([scale, euler, root], lr=lr, betas=(0.9, 0.99))
    w = Tensor(vis[..., None] * np.ones(2))
    target = Tensor(kp2d)
    norm = float(M * kp2d.shape[1])
    mean_t = Tensor(mean[1:])
    n_params = float(scale.size + M * (skel.num_joints - 1) * 3)

    def losses():
        pred = _project(fk_tensor(skel, euler, root, scale), cameras)
        err = (pred - target) * w
        l2d = (err * err).sum() / norm
        dev_s = scale - 1.0
        dev_a = euler[:, 1:] - mean_t
        lreg = ((dev_s * dev_s).sum() + (dev_a * dev_a).sum()) / n_params
        dh = rest_height(skel, scale) - float(height)
        lh = dh * dh
        return l2d + lam_reg * lreg + lam_height * lh, (l2d, lreg, lh)

    history = []
    for it in range(iterations):
        opt.lr = lr * decay ** it
        opt.zero_grad()
        total, parts = losses()
        value = float(total.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"registration diverged at iteration {it}")
        total.backward()
        opt.step()
        if it % log_every == 0 or it == iterations - 1:
            history.append((it, value) + tuple(float(p.data) for p in parts))
            log.debug("register it=%d loss=%.4f 2d=%.4f reg=%.5f height=%.6f", it, value,
                      *history[-1][2:])
    with gc.no_grad():
        poses = fk_tensor(skel, euler, root, scale).data
    exemplars = root_center(poses)
    f_ex = None
    if encoder is not None:
        with gc.no_grad():
            f_ex = exemplar_encode(encoder, exemplars).data
    return IdentityPrior(exemplars, f_ex, scale.data.copy(), history)


def angle_prior(records, frames=100):
    """Mean local Euler angles over training sequences (root set to zero)."""
    eul = [generate_pose_angles(r.identity, r.seed, frames, r.motion.fps).mean(axis=0) for r in records]
    mean = np.mean(eul, axis=0)
    mean[0] = 0.0
    return mean
