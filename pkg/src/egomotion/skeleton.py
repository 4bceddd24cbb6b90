"""Whole-body kinematic model: joint tree, part subsets, forward kinematics."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

BODY, LEFT_HAND, RIGHT_HAND, UPPER_BODY = "body", "left_hand", "right_hand", "upper_body"


@dataclass(frozen=True, eq=False)
class WholeBodySkeleton:
    names: tuple
    parents: np.ndarray            # (N,), -1 for the root
    offsets: np.ndarray            # (N, 3) rest offset from parent; row 0 is zero
    subsets: dict = field(default_factory=dict)
    extra_edges: tuple = ()

    def __post_init__(self):
        n = len(self.names)
        if self.parents.shape != (n,) or self.offsets.shape != (n, 3):
            raise ValueError("parents/offsets do not match joint count")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"joint {self.names[j]} has parent {self.parents[j]} not before it")
        if np.any(self.bone_lengths <= 0):
            raise ValueError("all bone lengths must be positive")
        body = set(self.subsets.get(BODY, ()))
        hands = set(self.subsets.get(LEFT_HAND, ())) | set(self.subsets.get(RIGHT_HAND, ()))
        if body & hands:
            raise ValueError("body and hand subsets overlap")
        if not set(self.subsets.get(UPPER_BODY, ())) <= body:
            raise ValueError("upper body must be a subset of the body")
        self.offsets.setflags(write=False)
        self.parents.setflags(write=False)

    @property
    def num_joints(self) -> int:
        return len(self.names)

    @property
    def bone_lengths(self) -> np.ndarray:
        """Length of the bone ending at each non-root joint, shape (N-1,)."""
        return np.linalg.norm(self.offsets[1:], axis=1)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, key: str) -> np.ndarray:
        return np.asarray(self.subsets[key], dtype=np.int64)

    @property
    def hands(self) -> np.ndarray:
        return np.concatenate([self.subset(LEFT_HAND), self.subset(RIGHT_HAND)])

    def scaled(self, bone_scale) -> "WholeBodySkeleton":
        """Copy with each bone length multiplied by ``bone_scale`` (scalar or (N-1,))."""
        scale = np.broadcast_to(np.asarray(bone_scale, dtype=float), (self.num_joints - 1,))
        offsets = self.offsets.copy()
        offsets[1:] *= scale[:, None]
        return WholeBodySkeleton(self.names, self.parents.copy(), offsets, self.subsets, self.extra_edges)

    def edges(self, joints=None):
        """Undirected edges (as local index pairs) among ``joints``."""
        joints = list(range(self.num_joints)) if joints is None else [int(j) for j in joints]
        local = {j: i for i, j in enumerate(joints)}
        pairs = [(j, int(self.parents[j])) for j in joints if self.parents[j] >= 0]
        pairs += [tuple(e) for e in self.extra_edges]
        return sorted({(min(local[a], local[b]), max(local[a], local[b]))
                       for a, b in pairs if a in local and b in local})

    def adjacency(self, joints=None) -> np.ndarray:
        """Symmetric adjacency with self loops, normalized as D^-1/2 (A + I) D^-1/2."""
        n = self.num_joints if joints is None else len(joints)
        a = np.eye(n)
        for i, j in self.edges(joints):
            a[i, j] = a[j, i] = 1.0
        d = 1.0 / np.sqrt(a.sum(axis=1))
        return a * d[:, None] * d[None, :]

    def rest_pose(self) -> np.ndarray:
        return forward_kinematics(self, PoseAngles.zeros(self.num_joints))

    def height(self) -> float:
        """Vertical extent of the rest pose (ankle to head joint)."""
        rest = self.rest_pose()
        return float(rest[:, 2].max() - rest[:, 2].min())


def load_skeleton(path=None) -> WholeBodySkeleton:
    if path is None:
        text = resources.files("egomotion.assets").joinpath("skeleton_v1.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    spec = yaml.safe_load(text)
    names = tuple(j[0] for j in spec["joints"])
    parents = np.array([-1 if j[1] is None else names.index(j[1]) for j in spec["joints"]])
    offsets = np.array([j[2] for j in spec["joints"]], dtype=float)
    subsets = {k: tuple(names.index(n) for n in v) for k, v in spec["subsets"].items()}
    extra = tuple((names.index(a), names.index(b)) for a, b in spec.get("extra_edges", []))
    return WholeBodySkeleton(names, parents, offsets, subsets, extra)


@lru_cache(maxsize=1)
def default_skeleton() -> WholeBodySkeleton:
    return load_skeleton()


@dataclass
class PoseAngles:
    """Local joint rotations as axis-angle vectors plus root translation.

    ``rotations`` has shape (..., N, 3); ``translation`` (..., 3).
    """
    rotations: np.ndarray
    translation: np.ndarray

    @classmethod
    def zeros(cls, num_joints, batch=()):
        return cls(np.zeros(tuple(batch) + (num_joints, 3)), np.zeros(tuple(batch) + (3,)))


@dataclass
class MotionSequence:
    frames: np.ndarray   # (T, N, 3) metres, world frame
    fps: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3 or len(self.frames) < 1:
            raise ValueError(f"motion frames must be (T>=1, N, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("motion contains non-finite positions")

    def __len__(self):
        return len(self.frames)


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    flat = rotvec.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(rotvec.shape[:-1] + (3, 3))


def matrix_to_axis_angle(mats) -> np.ndarray:
    mats = np.asarray(mats, dtype=float)
    return Rotation.from_matrix(mats.reshape(-1, 3, 3)).as_rotvec().reshape(mats.shape[:-2] + (3,))


def global_rotations(skel: WholeBodySkeleton, local: np.ndarray) -> np.ndarray:
    """Accumulate local rotation matrices (..., N, 3, 3) down the tree."""
    out = np.empty_like(local)
    out[..., 0, :, :] = local[..., 0, :, :]
    for j in range(1, skel.num_joints):
        out[..., j, :, :] = out[..., skel.parents[j], :, :] @ local[..., j, :, :]
    return out


def forward_kinematics(skel: WholeBodySkeleton, pose: PoseAngles, return_rotations=False):
    """Joint positions (..., N, 3) for the given local rotations.

    child = parent + R_global(parent) @ offset(child).
    """
    rot = np.asarray(pose.rotations, dtype=float)
    if rot.shape[-2:] != (skel.num_joints, 3):
        raise ValueError(f"pose has {rot.shape[-2]} joints, skeleton has {skel.num_joints}")
    glob = global_rotations(skel, axis_angle_to_matrix(rot))
    pos = np.empty(rot.shape[:-2] + (skel.num_joints, 3))
    pos[..., 0, :] = pose.translation
    for j in range(1, skel.num_joints):
        p = skel.parents[j]
        pos[..., j, :] = pos[..., p, :] + glob[..., p, :, :] @ skel.offsets[j]
    return (pos, glob) if return_rotations else pos


def bone_vectors(skel: WholeBodySkeleton, positions: np.ndarray) -> np.ndarray:
    return positions[..., 1:, :] - positions[..., skel.parents[1:], :]


def measured_bone_lengths(skel: WholeBodySkeleton, positions: np.ndarray) -> np.ndarray:
    return np.linalg.norm(bone_vectors(skel, positions), axis=-1)


# -- 6D rotation representation ------------------------------------------------
def rotation_to_6d(R) -> np.ndarray:
    """First two columns of R, flattened column by column."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rotation_from_6d(v, eps=1e-8) -> np.ndarray:
    """Gram-Schmidt reconstruction; raises on zero or parallel columns."""
    v = np.asarray(v, dtype=float)
    a, b = v[..., :3], v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < eps):
        raise ValueError("6D rotation: first column is zero")
    x = a / na
    b = b - (x * b).sum(-1, keepdims=True) * x
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < eps):
        raise ValueError("6D rotation: columns are parallel")
    y = b / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)
