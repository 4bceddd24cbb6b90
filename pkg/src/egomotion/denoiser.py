"""Conditional denoising network for one body part.

Coordinates: every pose handled by the network lives in a per-frame rig frame
whose origin is the midpoint of the two head cameras and whose axes are the
left camera's axes.  Hand joints are expressed relative to their wrist (rig
axes).  Targets are standardized per joint coordinate with statistics fitted on
training data.

Per frame, each joint token is a projection of [diffused xyz, left 2D + conf,
right 2D + conf] plus a projection of the frame conditioning [left camera,
right camera, timestep, (upper body)] plus a learned joint embedding.  Tokens
run through graph-transformer blocks; an auxiliary head reads a pose from them.
Tokens are flattened into one frame feature which passes through the causal
temporal blocks and a linear head.  With identity conditioning, each temporal
attention output is modulated by per-frame AdaIN before its residual add.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import yaml

from . import gradcore as gc
from .attention import GraphTransformerBlock, StreamState, TemporalBlock
from .gradcore import MLP2, Linear, Module, Tensor, checkpoint, parameter
from .identity import D_ID, AdaIN, ExemplarEncoder, adain_frame, exemplar_encode
from .observe import Observation
from .skeleton import WholeBodySkeleton, default_skeleton, rotation_to_6d

PART_SIZES = {"body": 17, "hand": 30, "whole": 47}
FULL_DIMS = {
    "teacher": dict(d_model=512, frame_blocks=3, temporal_layers=3, heads=4, ws=20),
    "student": dict(d_model=256, frame_blocks=1, temporal_layers=1, heads=2, ws=8),
}
# same depths, heads and windows at a width that trains in minutes on one core
DESK_DIMS = {
    "teacher": dict(FULL_DIMS["teacher"], d_model=128),
    "student": dict(FULL_DIMS["student"], d_model=64),
}
DTYPES = {32: np.float32, 64: np.float64}


@dataclass
class DenoiserConfig:
    part: str = "body"
    role: str = "teacher"
    d_model: int = 512
    frame_blocks: int = 3
    temporal_layers: int = 3
    heads: int = 4
    ws: int = 20
    upper_body: bool = False
    identity: bool = False
    d_id: int = D_ID
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.part not in PART_SIZES:
            raise ValueError(f"part must be one of {sorted(PART_SIZES)}, got {self.part!r}")
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {self.role!r}")
        if self.upper_body and self.part != "hand":
            raise ValueError("upper-body conditioning applies to the hand model only")
        if self.precision not in DTYPES:
            raise ValueError("precision must be 32 or 64")
        if self.d_model % self.heads or (self.d_model // self.heads) % 2:
            raise ValueError("d_model / heads must be an even integer")

    @classmethod
    def preset(cls, part, role, scale="full", **overrides):
        dims = (FULL_DIMS if scale == "full" else DESK_DIMS)[role]
        return cls(part=part, role=role, **{**dims, **overrides})

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def num_joints(self):
        return PART_SIZES[self.part]

    @property
    def dtype(self):
        return DTYPES[self.precision]


# -- geometry helpers ---------------------------------------------------------------------
def part_joints(skel: WholeBodySkeleton, part):
    if part == "body":
        return skel.subset("body")
    if part == "hand":
        return skel.hands
    return np.arange(skel.num_joints)


def hand_wrists(skel: WholeBodySkeleton):
    """Wrist index for each of the 30 hand joints (left block then right block)."""
    n = len(skel.subset("left_hand"))
    return np.repeat([skel.index("l_wrist"), skel.index("r_wrist")], n)


def rig_frame(obs: Observation):
    """Per-frame rig rotation (T, 3, 3) and origin (T, 3)."""
    return obs.cam_rot[:, 0], obs.cam_trans.mean(axis=1)


def to_rig(points, R, c):
    """World (T, N, 3) -> rig coordinates."""
    return np.einsum("tji,tnj->tni", R, points - c[:, None, :])


def from_rig(points, R, c):
    return np.einsum("tij,tnj->tni", R, points) + c[:, None, :]


def part_target(skel, frames, obs, part):
    """Ground-truth positions of ``part`` in the network's coordinates (metres)."""
    R, c = rig_frame(obs)
    if part == "hand":
        rel = frames[:, skel.hands] - frames[:, hand_wrists(skel)]
        return np.einsum("tji,tnj->tni", R, rel)
    return to_rig(frames[:, part_joints(skel, part)], R, c)


def upper_body_rig(skel, frames, obs):
    """Upper-body keypoints (T, 7, 3) in rig coordinates."""
    R, c = rig_frame(obs)
    return to_rig(frames[:, skel.subset("upper_body")], R, c)


# -- conditioning inputs --------------------------------------------------------------------
@dataclass
class Conditions:
    """Network inputs besides the diffused motion, batched as (B, T, ...)."""
    kp: np.ndarray                  # (B, T, N, 6): per view normalized u, v, conf
    cam: np.ndarray                 # (B, T, 2, 9): per view 6D rotation + centre
    upper: np.ndarray | None = None         # (B, T, 7, 3) rig coordinates
    exemplars: np.ndarray | None = None     # (B, N_O, 47, 3) root-centred

    @classmethod
    def from_observation(cls, obs: Observation, joints, upper=None, exemplars=None):
        nk = obs.normalized_kp()[:, :, joints]                      # (T, 2, N, 2)
        conf = obs.conf[:, :, joints, None]
        per_view = np.concatenate([nk, conf], axis=-1)              # (T, 2, N, 3)
        kp = np.concatenate([per_view[:, 0], per_view[:, 1]], axis=-1)
        cam = np.concatenate([rotation_to_6d(obs.cam_rot), obs.cam_trans], axis=-1)
        return cls(kp[None], cam[None], None if upper is None else np.asarray(upper)[None],
                   None if exemplars is None else np.asarray(exemplars)[None])

    @classmethod
    def stack(cls, items):
        def cat(name):
            vals = [getattr(c, name) for c in items]
            return None if vals[0] is None else np.concatenate(vals, axis=0)
        return cls(cat("kp"), cat("cam"), cat("upper"), cat("exemplars"))

    @property
    def shape(self):
        return self.kp.shape[:2]

    def frames(self, start, stop):
        sl = slice(start, stop)
        return Conditions(self.kp[:, sl], self.cam[:, sl],
                          None if self.upper is None else self.upper[:, sl], self.exemplars)

    def with_upper(self, upper):
        return Conditions(self.kp, self.cam, upper, self.exemplars)


def timestep_embedding(k, dim):
    """Sinusoidal embedding: first half sin, second half cos over geometric frequencies."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(k, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# -- the network ---------------------------------------------------------------------------
class Denoiser(Module):
    def __init__(self, config: DenoiserConfig, skel: WholeBodySkeleton | None = None):
        self.config = cfg = config
        skel = skel or default_skeleton()
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        N, D = cfg.num_joints, cfg.d_model
        self.joints = part_joints(skel, cfg.part)
        self.in_proj = Linear(9, D, rng, dt)
        self.joint_emb = parameter(rng.normal(0.0, 0.02, (N, D)), dt)
        self.cam_enc = MLP2(9, D, D, rng, dt)
        self.time_enc = MLP2(D, D, D, rng, dt)
        self.upper_enc = MLP2(21, D, D, rng, dt) if cfg.upper_body else None
        self.cond_proj = Linear((4 if cfg.upper_body else 3) * D, D, rng, dt)
        adjacency = skel.adjacency(self.joints)
        self.graph = [GraphTransformerBlock(D, cfg.heads, adjacency, rng, dt) for _ in range(cfg.frame_blocks)]
        self.aux_head = Linear(D, 3, rng, dt)
        self.frame_proj = Linear(N * D, D, rng, dt)
        self.temporal = [TemporalBlock(D, cfg.heads, cfg.ws, rng, dt) for _ in range(cfg.temporal_layers)]
        if cfg.identity:
            self.exemplar_enc = ExemplarEncoder(skel.num_joints, rng, dt, cfg.d_id)
            self.adain = [AdaIN(cfg.d_id, D, rng, dt) for _ in range(cfg.temporal_layers)]
        else:
            self.exemplar_enc, self.adain = None, []
        self.head = Linear(D, N * 3, rng, dt)
        self.norm_mean = np.zeros((N, 3), dt)
        self.norm_std = np.ones((N, 3), dt)

    # -- normalization ----------------------------------------------------------------
    def set_normalization(self, mean, std, min_std=0.02):
        self.norm_mean = np.asarray(mean, dtype=self.config.dtype)
        self.norm_std = np.maximum(np.asarray(std), min_std).astype(self.config.dtype)

    def normalize(self, x):
        return ((np.asarray(x) - self.norm_mean) / self.norm_std).astype(self.config.dtype)

    def denormalize(self, x):
        """Works on arrays and Tensors."""
        if isinstance(x, Tensor):
            return x * self.norm_std + self.norm_mean
        return np.asarray(x) * self.norm_std + self.norm_mean

    # -- encoders -----------------------------------------------------------------------
    def encode_camera(self, cam, translation=None):
        """CameraPose (or rotation array (..., 3, 3) with ``translation``) -> (..., D)."""
        if translation is None:
            rot, translation = cam.rotation, cam.translation
        else:
            rot = cam
        feat = np.concatenate([rotation_to_6d(rot), np.asarray(translation, dtype=float)], axis=-1)
        return self.cam_enc(Tensor(feat.astype(self.config.dtype)))

    def _encode_camera_features(self, cam9):
        return self.cam_enc(Tensor(np.asarray(cam9, dtype=self.config.dtype)))

    def encode_timestep(self, k):
        emb = timestep_embedding(k, self.config.d_model).astype(self.config.dtype)
        return self.time_enc(Tensor(emb))

    def encode_upper_body(self, kp):
        if self.upper_enc is None:
            raise ValueError(f"{self.config.part} model has no upper-body conditioning")
        kp = np.asarray(kp, dtype=self.config.dtype)
        return self.upper_enc(Tensor(kp.reshape(kp.shape[:-2] + (-1,))))

    def identity_feature(self, exemplars):
        if self.exemplar_enc is None:
            raise ValueError("model was built without identity conditioning")
        return exemplar_encode(self.exemplar_enc, exemplars)

    # -- forward ------------------------------------------------------------------------
    def _check(self, x_k, cond):
        cfg = self.config
        B, T = cond.shape
        if x_k.shape != (B, T, cfg.num_joints, 3):
            raise gc.ShapeError(f"diffused motion: expected {(B, T, cfg.num_joints, 3)}, got {x_k.shape}")
        if cond.kp.shape[2] != cfg.num_joints:
            raise gc.ShapeError(f"keypoints: expected {cfg.num_joints} joints, got {cond.kp.shape[2]}")
        if cfg.upper_body and cond.upper is None:
            raise ValueError("hand model with upper-body conditioning needs cond.upper")
        if cfg.identity and cond.exemplars is None:
            raise ValueError("identity-conditioned model needs exemplars")

    def frame_features(self, x_k, cond: Conditions, k):
        """Per-frame path: (frame feature (B, T, D), frame_aux (B, T, N, 3))."""
        cfg = self.config
        dt = cfg.dtype
        B, T = cond.shape
        tok_in = np.concatenate([np.asarray(x_k, dtype=dt), cond.kp.astype(dt, copy=False)], axis=-1)
        tokens = self.in_proj(Tensor(tok_in)) + self.joint_emb
        cam = self._encode_camera_features(cond.cam)                    # (B, T, 2, D)
        k = np.broadcast_to(np.asarray(k), (B,))
        tfeat = self.encode_timestep(k).reshape((B, 1, cfg.d_model))
        parts = [cam[:, :, 0], cam[:, :, 1], gc.broadcast_to(tfeat, (B, T, cfg.d_model))]
        if cfg.upper_body:
            parts.append(self.encode_upper_body(cond.upper))
        cvec = self.cond_proj(gc.concat(parts, axis=-1))
        tokens = tokens + cvec.reshape((B, T, 1, cfg.d_model))
        for blk in self.graph:
            tokens = blk(tokens)
        aux = self.aux_head(tokens)
        feat = self.frame_proj(tokens.reshape((B, T, cfg.num_joints * cfg.d_model)))
        return feat, aux

    def _adain_maps(self, cond):
        if not self.adain:
            return []
        f_ex = self.identity_feature(cond.exemplars)                   # (B, D_id)
        return [a.maps(f_ex) for a in self.adain]

    @staticmethod
    def _modulation(maps, i):
        if not maps:
            return None
        s, b = maps[i]
        return lambda a: adain_frame(a, s, b)

    def forward(self, x_k, cond: Conditions, k):
        """Normalized diffused motion (B, T, N, 3) -> (x0_hat, frame_aux), both normalized."""
        self._check(x_k, cond)
        feat, aux = self.frame_features(x_k, cond, k)
        maps = self._adain_maps(cond)
        for i, blk in enumerate(self.temporal):
            # AdaIN modulates the attention output, leaving the residual stream intact
            feat = blk(feat, self._modulation(maps, i))
        B, T = cond.shape
        return self.head(feat).reshape((B, T, self.config.num_joints, 3)), aux

    __call__ = forward

    def step(self, state: StreamState, x_k, cond: Conditions, k):
        """Streaming forward for one new frame (B, 1, N, 3); same outputs as ``forward`` rows."""
        self._check(x_k, cond)
        feat, aux = self.frame_features(x_k, cond, k)
        maps = self._adain_maps(cond)
        for i, blk in enumerate(self.temporal):
            feat = blk.step(feat, state, f"t{i}", self._modulation(maps, i))
        B = cond.shape[0]
        return self.head(feat).reshape((B, 1, self.config.num_joints, 3)), aux

    # -- persistence -------------------------------------------------------------------
    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        tensors = dict(self.state_dict())
        tensors["norm.mean"] = self.norm_mean
        tensors["norm.std"] = self.norm_std
        checkpoint.save(os.path.join(directory, "weights.gck"), tensors)
        with open(os.path.join(directory, "config.yaml"), "w") as fh:
            yaml.safe_dump(asdict(self.config), fh, sort_keys=True)

    @classmethod
    def load(cls, directory, skel=None):
        with open(os.path.join(directory, "config.yaml")) as fh:
            cfg = DenoiserConfig.from_dict(yaml.safe_load(fh))
        net = cls(cfg, skel)
        tensors = checkpoint.load(os.path.join(directory, "weights.gck"))
        net.norm_mean = tensors.pop("norm.mean").astype(cfg.dtype)
        net.norm_std = tensors.pop("norm.std").astype(cfg.dtype)
        net.load_state_dict(tensors)
        return net
