"""Synthetic egocentric observations: identities, procedural motion, stereo head rig.

Raw images are never produced.  Each view yields the noisy 2D keypoints and
confidences a keypoint detector would emit, together with the camera pose.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .gradcore import checkpoint
from .skeleton import (MotionSequence, PoseAngles, WholeBodySkeleton, default_skeleton,
                       forward_kinematics)

VIEWS = ("L", "R")


# -- cameras --------------------------------------------------------------------------
@dataclass
class CameraPose:
    rotation: np.ndarray            # world-from-camera, columns = camera axes in world
    translation: np.ndarray         # camera centre in world (m)
    intrinsics: np.ndarray = field(default_factory=lambda: np.array([200.0, 200.0, 320.0, 320.0]))
    image_size: tuple = (640, 640)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        self.intrinsics = np.asarray(self.intrinsics, dtype=float)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if np.any(self.intrinsics[:2] <= 0):
            raise ValueError("focal lengths must be positive")


def project_points(points, rotation, translation, intrinsics, image_size, min_depth=0.05):
    """Vectorized pinhole projection.

    points (..., N, 3); rotation (..., 3, 3); translation (..., 3); intrinsics (..., 4).
    Returns pixels (..., N, 2) and visibility (..., N).
    """
    rel = points - translation[..., None, :]
    cam = np.einsum("...ji,...nj->...ni", rotation, rel)
    z = cam[..., 2]
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    fx, fy, cx, cy = (intrinsics[..., i, None] for i in range(4))
    u = fx * cam[..., 0] / safe + cx
    v = fy * cam[..., 1] / safe + cy
    w, h = image_size
    visible = (z > min_depth) & (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
    return np.stack([u, v], axis=-1), visible


def project_to_camera(p3d, cam: CameraPose):
    """Project one world point; returns (pixel 2-vector, visible flag)."""
    px, vis = project_points(np.asarray(p3d, dtype=float)[None], cam.rotation, cam.translation,
                             cam.intrinsics, cam.image_size)
    return px[0], bool(vis[0])


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation for an OpenCV camera at ``eye`` facing ``target``."""
    z = np.asarray(target, float) - np.asarray(eye, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


@dataclass
class RigConfig:
    """Head-mounted, down-facing stereo pair fixed to the head joint."""
    baseline: float = 0.10
    forward: float = 0.10
    tilt_deg: float = 10.0
    focal: float = 200.0
    image_size: tuple = (640, 640)
    sigma_2d: float = 2.0
    p_drop: float = 0.05
    p_hand_drop: float = 0.3

    def intrinsics(self):
        w, h = self.image_size
        return np.array([self.focal, self.focal, w / 2.0, h / 2.0])

    def head_from_camera(self):
        """Fixed (rotation, translation) of each view in the head frame, views L then R."""
        t = np.radians(self.tilt_deg)
        z = np.array([np.sin(t), 0.0, -np.cos(t)])
        x = np.array([0.0, -1.0, 0.0])
        R = np.stack([x, np.cross(z, x), z], axis=1)
        trans = [np.array([self.forward, s * self.baseline / 2.0, 0.0]) for s in (1.0, -1.0)]
        return [R, R], trans


# -- observations ---------------------------------------------------------------
@dataclass
class Observation:
    """Per-frame stereo observations; view axis ordered (L, R)."""
    cam_rot: np.ndarray       # (T, 2, 3, 3)
    cam_trans: np.ndarray     # (T, 2, 3)
    intrinsics: np.ndarray    # (2, 4) fx, fy, cx, cy
    kp2d: np.ndarray          # (T, 2, N, 2) pixels; zeros where conf == 0
    conf: np.ndarray          # (T, 2, N) in [0, 1]
    image_size: tuple = (640, 640)

    def __len__(self):
        return len(self.kp2d)

    def camera(self, t, view) -> CameraPose:
        return CameraPose(self.cam_rot[t, view], self.cam_trans[t, view], self.intrinsics[view],
                          self.image_size)

    def slice(self, start, stop) -> "Observation":
        return Observation(self.cam_rot[start:stop], self.cam_trans[start:stop], self.intrinsics,
                           self.kp2d[start:stop], self.conf[start:stop], self.image_size)

    def joints(self, idx) -> "Observation":
        return Observation(self.cam_rot, self.cam_trans, self.intrinsics, self.kp2d[:, :, idx],
                           self.conf[:, :, idx], self.image_size)

    def normalized_kp(self):
        """(pix - principal) / focal, zeroed where confidence is zero."""
        f = self.intrinsics[:, None, :2]
        c = self.intrinsics[:, None, 2:]
        out = (self.kp2d - c) / f
        return np.where(self.conf[..., None] > 0, out, 0.0)

    def perturbed(self, start, rng, scale=50.0) -> "Observation":
        """Copy with every array changed at frames >= start (for causality probes)."""
        obs = Observation(self.cam_rot.copy(), self.cam_trans.copy(), self.intrinsics,
                          self.kp2d.copy(), self.conf.copy(), self.image_size)
        n = len(self) - start
        if n <= 0:
            return obs
        obs.kp2d[start:] += rng.normal(0, scale, obs.kp2d[start:].shape)
        obs.conf[start:] = rng.uniform(0, 1, obs.conf[start:].shape)
        obs.cam_trans[start:] += rng.normal(0, 0.3, obs.cam_trans[start:].shape)
        rot = Rotation.random(n * 2, random_state=int(rng.integers(1 << 31))).as_matrix()
        obs.cam_rot[start:] = rot.reshape(n, 2, 3, 3)
        return obs


def rig_cameras(head_pos, head_rot, rig: RigConfig):
    """Camera rotations (T, 2, 3, 3) and centres (T, 2, 3) following the head joint."""
    rots, trans = rig.head_from_camera()
    cam_rot = np.stack([head_rot @ r for r in rots], axis=1)
    cam_trans = np.stack([head_pos + head_rot @ t for t in trans], axis=1)
    return cam_rot, cam_trans


def render_observation(motion: MotionSequence, head_rot, rig: RigConfig, rng,
                       skel: WholeBodySkeleton | None = None) -> Observation:
    """Noisy stereo 2D keypoints of ``motion`` seen from the head rig.

    ``head_rot`` (T, 3, 3) is the global head-joint rotation (from FK).
    """
    skel = skel or default_skeleton()
    head = skel.index("head")
    frames = motion.frames
    T, N, _ = frames.shape
    cam_rot, cam_trans = rig_cameras(frames[:, head], head_rot, rig)
    K = np.stack([rig.intrinsics()] * 2)
    exact, visible = project_points(frames[:, None], cam_rot, cam_trans, K[None], rig.image_size)
    kp = exact + rng.normal(0.0, rig.sigma_2d, exact.shape)
    keep = visible & (rng.uniform(size=visible.shape) >= rig.p_drop)
    hand_sets = [skel.subset("left_hand"), skel.subset("right_hand")]
    hand_drop = rng.uniform(size=(T, 2, 2)) < rig.p_hand_drop
    for h, idx in enumerate(hand_sets):
        keep[:, :, idx] &= ~hand_drop[:, :, h, None]
    conf = np.where(keep, rng.uniform(0.7, 1.0, size=keep.shape), 0.0)
    kp = np.where(keep[..., None], kp, 0.0)
    return Observation(cam_rot, cam_trans, K, kp, conf, tuple(rig.image_size))


# -- identities and motion --------------------------------------------------------
@dataclass
class Identity:
    id: str
    bone_scale: np.ndarray          # (N-1,) in [0.7, 1.3]
    posture_offset: np.ndarray      # (N, 3) radians
    height: float
    motion_style: dict

    def skeleton(self, base: WholeBodySkeleton | None = None) -> WholeBodySkeleton:
        return (base or default_skeleton()).scaled(self.bone_scale)


def make_identity(label, seed, skel: WholeBodySkeleton | None = None) -> Identity:
    skel = skel or default_skeleton()
    rng = np.random.default_rng([7919, seed])
    n = skel.num_joints
    global_scale = rng.uniform(0.85, 1.15)
    scale = np.clip(global_scale * rng.uniform(0.93, 1.07, size=n - 1), 0.7, 1.3)
    offset = np.zeros((n, 3))
    ix = skel.index
    offset[ix("spine"), 1] = rng.normal(0.0, 0.08)       # forward lean
    offset[ix("thorax"), 1] = rng.normal(0.0, 0.06)
    offset[ix("neck"), 1] = rng.normal(0.1, 0.08)        # head forward carriage
    for side, sign in (("l", 1.0), ("r", -1.0)):
        offset[ix(f"{side}_shoulder"), 0] = sign * abs(rng.normal(0.12, 0.06))   # arms out
        offset[ix(f"{side}_elbow"), 1] = -abs(rng.normal(0.3, 0.15))            # resting bend
        offset[ix(f"{side}_hip"), 0] = sign * rng.normal(0.04, 0.02)             # stance width
        offset[ix(f"{side}_knee"), 1] = abs(rng.normal(0.08, 0.05))
    for j in skel.hands:
        offset[j, 0] = rng.normal(0.0, 0.05)
    style = {
        "amplitude": float(rng.uniform(0.7, 1.3)),
        "gait_freq": float(rng.uniform(0.5, 1.0)),
        "arm_activity": float(rng.uniform(0.8, 1.3)),
        "head_activity": float(rng.uniform(0.5, 1.5)),
    }
    height = skel.scaled(scale).height()
    return Identity(str(label), scale, offset, height, style)


def _bandlimited(rng, t, n_terms, f_lo, f_hi, amp):
    freqs = rng.uniform(f_lo, f_hi, n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    weights = rng.uniform(0.5, 1.0, n_terms)
    weights = weights / weights.sum()
    return amp * (weights[None] * np.sin(2 * np.pi * freqs[None] * t[:, None] + phases[None])).sum(1)


# hand coupling: (flex gain, flex bias, splay gain) per finger segment, shared by all identities
_FLEX_GAIN = np.array([0.7, 0.8, 0.7])
_FLEX_BIAS = np.array([0.15, 0.2, 0.1])
HAND_NOISE = 0.1


def hand_coupling(skel, euler, rng, noise=HAND_NOISE):
    """Fill hand and wrist channels of ``euler`` (T, N, 3) from upper-body channels.

    Returns (hand channel, source channel, sign) triples; channels are (joint,
    axis) tuples and ``sign`` is the sign of the coupling gain.
    """
    ix = skel.index
    pairs = []
    fingers = ("thumb", "index", "middle", "ring", "pinky")
    T = euler.shape[0]
    for side, sign in (("l", -1.0), ("r", 1.0)):
        elbow = (ix(f"{side}_elbow"), 1)
        shoulder = (ix(f"{side}_shoulder"), 1)
        e = -euler[:, elbow[0], elbow[1]]
        s = euler[:, shoulder[0], shoulder[1]]
        wrist = ix(f"{side}_wrist")
        euler[:, wrist, 1] += 0.8 * s + rng.normal(0, noise, T)
        euler[:, wrist, 0] += sign * 0.7 * e + rng.normal(0, noise, T)
        pairs += [((wrist, 1), shoulder, 1.0), ((wrist, 0), elbow, -sign)]
        for f, finger in enumerate(fingers):
            spread = (f - 2) * 0.1
            for seg in range(3):
                j = ix(f"{side}_{finger}{seg + 1}")
                euler[:, j, 0] += sign * (_FLEX_BIAS[seg] + _FLEX_GAIN[seg] * e) + rng.normal(0, noise, T)
                pairs.append(((j, 0), elbow, -sign))
                if seg == 0:
                    euler[:, j, 2] += spread + 0.8 * s + rng.normal(0, noise, T)
                    pairs.append(((j, 2), shoulder, 1.0))
    return pairs


def generate_pose_angles(identity: Identity, seed, T, fps=30.0, skel=None, return_pairs=False):
    """Euler (extrinsic xyz) local angles (T, N, 3) for one sequence."""
    if T < 2:
        raise ValueError("generate_motion needs T >= 2")
    skel = skel or default_skeleton()
    rng = np.random.default_rng([104729, int(seed)])
    st = identity.motion_style
    amp = st["amplitude"]
    t = np.arange(T) / fps
    ix = skel.index
    eul = np.broadcast_to(identity.posture_offset, (T, skel.num_joints, 3)).copy()

    gf = st["gait_freq"] * rng.uniform(0.85, 1.15)
    phase = rng.uniform(0, 2 * np.pi)
    swing = amp * rng.uniform(0.15, 0.4)
    for side, ph in (("l", 0.0), ("r", np.pi)):
        g = np.sin(2 * np.pi * gf * t + phase + ph)
        eul[:, ix(f"{side}_hip"), 1] += -swing * g + _bandlimited(rng, t, 2, 0.1, 0.4, 0.1 * amp)
        eul[:, ix(f"{side}_hip"), 0] += _bandlimited(rng, t, 2, 0.1, 0.5, 0.05 * amp)
        eul[:, ix(f"{side}_knee"), 1] += swing * (1.0 + np.sin(2 * np.pi * gf * t + phase + ph + 1.2))
    for name, axis, a in (("spine", 1, 0.12), ("spine", 2, 0.2), ("spine", 0, 0.05),
                          ("thorax", 1, 0.06), ("thorax", 2, 0.1)):
        eul[:, ix(name), axis] += _bandlimited(rng, t, 3, 0.1, 0.8, a * amp)
    ha = st["head_activity"]
    eul[:, ix("neck"), 2] += _bandlimited(rng, t, 3, 0.1, 0.7, 0.5 * ha)
    eul[:, ix("neck"), 1] += _bandlimited(rng, t, 3, 0.1, 0.7, 0.25 * ha)
    eul[:, ix("head"), 0] += _bandlimited(rng, t, 2, 0.1, 0.6, 0.1 * ha)
    aa = st["arm_activity"]
    for side, sign in (("l", 1.0), ("r", -1.0)):
        arm_swing = -0.5 * swing * np.sin(2 * np.pi * gf * t + phase + (np.pi if side == "l" else 0.0))
        eul[:, ix(f"{side}_shoulder"), 1] += arm_swing + _bandlimited(rng, t, 3, 0.1, 1.0, 0.8 * aa)
        eul[:, ix(f"{side}_shoulder"), 0] += sign * np.abs(_bandlimited(rng, t, 2, 0.1, 0.6, 0.35 * aa))
        flex = 0.5 + 0.5 * _bandlimited(rng, t, 3, 0.1, 1.2, 1.0)
        eul[:, ix(f"{side}_elbow"), 1] -= 1.4 * aa * np.clip(flex, 0.0, 1.0)
    pairs = hand_coupling(skel, eul, rng)

    root_yaw = rng.uniform(-np.pi, np.pi) + _bandlimited(rng, t, 2, 0.05, 0.2, 0.5)
    eul[:, 0, 2] += root_yaw
    eul[:, 0, :2] += np.stack([_bandlimited(rng, t, 2, 0.1, 0.5, 0.03),
                               _bandlimited(rng, t, 2, 0.1, 0.5, 0.03)], axis=1)
    return (eul, pairs) if return_pairs else eul


def euler_to_axis_angle(euler):
    shape = euler.shape
    return Rotation.from_euler("xyz", euler.reshape(-1, 3)).as_rotvec().reshape(shape)


def plant_feet(pos, feet):
    """Root translation (T, 3) that grounds the lower foot and keeps it from sliding.

    ``pos`` holds joint positions with the root at the origin.  Each frame the
    lower of ``feet`` is the stance foot: it is placed at height zero and the
    root moves horizontally so the stance foot keeps its previous position.
    """
    T = len(pos)
    heights = pos[:, feet, 2]
    stance = np.asarray(feet)[np.argmin(heights, axis=1)]
    shift = np.zeros((T, 3))
    shift[:, 2] = -heights.min(axis=1)
    for t in range(1, T):
        s = stance[t]
        shift[t, :2] = shift[t - 1, :2] + pos[t - 1, s, :2] - pos[t, s, :2]
    return shift


def generate_motion(identity: Identity, seed, T, fps=30.0, skel=None, return_extras=False):
    """Procedural motion of ``identity``: (MotionSequence, head rotations (T,3,3)).

    The lower ankle rests on the ground plane and does not slide.
    """
    base = skel or default_skeleton()
    iskel = identity.skeleton(base)
    eul = generate_pose_angles(identity, seed, T, fps, base)
    pose = PoseAngles(euler_to_axis_angle(eul), np.zeros((T, 3)))
    pos, glob = forward_kinematics(iskel, pose, return_rotations=True)
    shift = plant_feet(pos, [iskel.index("l_ankle"), iskel.index("r_ankle")])
    pos = pos + shift[:, None, :]
    motion = MotionSequence(pos, fps)
    head_rot = glob[:, iskel.index("head")]
    if return_extras:
        return motion, head_rot, PoseAngles(pose.rotations, shift)
    return motion, head_rot


# -- static multi-view captures for identity registration ---------------------------
def static_view_cameras(n_views, radius=3.0, height=1.2, focal=900.0, image_size=(1024, 1024),
                        target=(0.0, 0.0, 0.9)):
    cams = []
    w, h = image_size
    for v in range(n_views):
        a = 2 * np.pi * v / n_views + 0.3
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(CameraPose(look_at(eye, target), eye, np.array([focal, focal, w / 2, h / 2]),
                               image_size))
    return cams


def static_poses(identity: Identity, seed, n_poses=10, spacing=20, skel=None):
    """``n_poses`` poses of one identity taken from its motion, root moved over the origin."""
    motion, _ = generate_motion(identity, seed, n_poses * spacing, skel=skel)
    poses = motion.frames[::spacing].copy()
    poses[..., :2] -= poses[:, :1, :2]
    return poses


def render_static_views(poses, cameras, rng=None, sigma=0.0):
    """2D keypoints (M, V, N, 2) and confidences of M static poses in V cameras."""
    poses = np.asarray(poses, dtype=float)
    R = np.stack([c.rotation for c in cameras])
    t = np.stack([c.translation for c in cameras])
    K = np.stack([c.intrinsics for c in cameras])
    px, vis = project_points(poses[:, None], R[None], t[None], K[None], cameras[0].image_size)
    if sigma > 0:
        px = px + rng.normal(0, sigma, px.shape)
    return px, vis.astype(float)


# -- dataset persistence ----------------------------------------------------------
@dataclass
class SequenceRecord:
    identity: Identity
    motion: MotionSequence
    observation: Observation
    seed: int = 0
    rig: RigConfig = field(default_factory=RigConfig)


class DatasetError(ValueError):
    pass


def make_record(identity, seed, T=200, fps=30.0, rig=None, skel=None):
    rig = rig or RigConfig()
    motion, head_rot = generate_motion(identity, seed, T, fps, skel)
    obs = render_observation(motion, head_rot, rig, np.random.default_rng([15485863, int(seed)]), skel)
    return SequenceRecord(identity, motion, obs, int(seed), rig)


def generate_dataset(n_identities=(40, 5, 5), seqs=20, frames=200, seed=0, fps=30.0, rig=None):
    """Split name -> list of SequenceRecord; identities never cross splits."""
    splits = {}
    counter = 0
    for split, n_id in zip(("train", "val", "test"), n_identities):
        records = []
        for _ in range(n_id):
            ident = make_identity(f"id{counter:03d}", seed * 100003 + counter)
            for s in range(seqs):
                records.append(make_record(ident, (seed * 1000003 + counter) * 1000 + s, frames, fps, rig))
            counter += 1
        splits[split] = records
    return splits


def _record_tensors(rec: SequenceRecord):
    o = rec.observation
    return {
        "motion": rec.motion.frames,
        "cam_rot": o.cam_rot, "cam_trans": o.cam_trans, "intrinsics": o.intrinsics,
        "kp2d": o.kp2d, "conf": o.conf,
        "bone_scale": rec.identity.bone_scale, "posture_offset": rec.identity.posture_offset,
    }


def _record_meta(rec: SequenceRecord):
    return {
        "identity": rec.identity.id, "height": float(rec.identity.height),
        "motion_style": dict(rec.identity.motion_style), "fps": float(rec.motion.fps),
        "seed": int(rec.seed), "image_size": list(rec.observation.image_size),
        "rig": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(rec.rig).items()},
    }


def write_dataset(root, splits: dict):
    os.makedirs(root, exist_ok=True)
    manifest = {"format": "egomotion-dataset/1", "splits": {}}
    for split, records in splits.items():
        d = os.path.join(root, split)
        os.makedirs(d, exist_ok=True)
        for i, rec in enumerate(records):
            checkpoint.save(os.path.join(d, f"seq_{i:05d}.gck"), _record_tensors(rec))
            with open(os.path.join(d, f"seq_{i:05d}.yaml"), "w") as fh:
                yaml.safe_dump(_record_meta(rec), fh, sort_keys=True)
        manifest["splits"][split] = len(records)
    with open(os.path.join(root, "manifest.yaml"), "w") as fh:
        yaml.safe_dump(manifest, fh)


def read_split(root, split, limit=None):
    with open(os.path.join(root, "manifest.yaml")) as fh:
        manifest = yaml.safe_load(fh)
    if not isinstance(manifest, dict) or manifest.get("format") != "egomotion-dataset/1":
        raise DatasetError(f"{root}: not an egomotion dataset (bad manifest)")
    count = manifest["splits"].get(split, 0)
    if limit is not None:
        count = min(count, limit)
    records = []
    d = os.path.join(root, split)
    for i in range(count):
        try:
            t = checkpoint.load(os.path.join(d, f"seq_{i:05d}.gck"))
            with open(os.path.join(d, f"seq_{i:05d}.yaml")) as fh:
                meta = yaml.safe_load(fh)
            rig = meta["rig"]
            rig["image_size"] = tuple(rig["image_size"])
            ident = Identity(meta["identity"], t["bone_scale"], t["posture_offset"], meta["height"],
                             meta["motion_style"])
            obs = Observation(t["cam_rot"], t["cam_trans"], t["intrinsics"], t["kp2d"], t["conf"],
                              tuple(meta["image_size"]))
            records.append(SequenceRecord(ident, MotionSequence(t["motion"], meta["fps"]), obs,
                                          meta["seed"], RigConfig(**rig)))
        except (OSError, KeyError, TypeError, ValueError, yaml.YAMLError) as exc:
            raise DatasetError(f"{split} record {i}: {exc}") from None
    return records


def read_dataset(root, limit=None) -> dict:
    path = os.path.join(root, "manifest.yaml")
    try:
        with open(path) as fh:
            manifest = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise DatasetError(f"{root}: cannot read manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != "egomotion-dataset/1":
        raise DatasetError(f"{root}: not an egomotion dataset (bad manifest)")
    return {split: read_split(root, split, limit) for split in manifest["splits"]}


__all__ = [
    "CameraPose", "DatasetError", "Identity", "Observation", "RigConfig", "SequenceRecord",
    "VIEWS", "euler_to_axis_angle", "generate_dataset", "generate_motion", "generate_pose_angles",
    "look_at", "make_identity", "make_record", "project_points",
    "project_to_camera", "read_dataset", "read_split", "render_observation", "render_static_views",
    "rig_cameras", "static_view_cameras", "write_dataset",
]
