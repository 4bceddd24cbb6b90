"""Diffusion training of the part denoisers, the regression variant, and SDS distillation.

All losses are computed in metres.  Network outputs are de-standardized and
mapped from the rig frame back to world axes first, so velocities are
world-frame velocities and foot height is height above the ground plane.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import gradcore as gc
from .denoiser import (Conditions, Denoiser, DenoiserConfig, part_joints, part_target, rig_frame,
                       upper_body_rig)
from .diffusion import DiffusionSchedule, diffuse_forward
from .observe import SequenceRecord, static_poses
from .skeleton import WholeBodySkeleton, default_skeleton

log = logging.getLogger(__name__)

CONTACT_HEIGHT = 0.05   # m
CONTACT_SPEED = 0.05    # m/s


@dataclass(frozen=True)
class LossWeights:
    vel: float = 300.0
    foot: float = 100.0
    frame: float = 1.0

    def __post_init__(self):
        if min(self.vel, self.foot, self.frame) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 20000
    window: int = 50
    batch: int = 1
    lr: float = 5e-5
    beta2: float = 0.99
    warmup: int = 200           # linear learning-rate warmup steps
    lam_vel: float = 300.0
    lam_foot: float = 100.0
    lam_frame: float = 1.0
    late_vel: float = 4000.0
    late_foot: float = 20000.0
    late_fraction: float = 0.1
    late_lr_scale: float = 0.1  # learning-rate factor during the late phase
    lam_distill: float = 1.0
    k_small_max: int = 50
    n_exemplars: int = 10
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.window < 1 or self.batch < 1:
            raise ValueError("steps, window and batch must be positive")
        if min(self.lr, self.lam_vel, self.lam_foot, self.lam_frame, self.late_vel, self.late_foot,
               self.lam_distill) < 0:
            raise ValueError("learning rate and loss weights must be non-negative")
        if not 0 < self.late_fraction < 1:
            raise ValueError("late_fraction must lie in (0, 1)")
        if not 0 < self.late_lr_scale <= 1:
            raise ValueError("late_lr_scale must lie in (0, 1]")
        if self.k_small_max < 1:
            raise ValueError("k_small_max must be >= 1")
        if not 0 <= self.beta2 < 1 or self.warmup < 0:
            raise ValueError("beta2 must lie in [0, 1) and warmup must be non-negative")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def late(self, step):
        return step >= self.steps - int(round(self.late_fraction * self.steps))

    def lr_at(self, step, late_phase=True):
        """Linear warmup, then constant; scaled by ``late_lr_scale`` in the late phase."""
        lr = self.lr * (step + 1) / self.warmup if step < self.warmup else self.lr
        if late_phase and self.late(step):
            lr *= self.late_lr_scale
        return lr

    def optimizer(self, params):
        return gc.Adam(params, lr=self.lr, betas=(0.9, self.beta2))

    def weights(self, step):
        if self.late(step):
            return LossWeights(self.late_vel, self.late_foot, self.lam_frame)
        return LossWeights(self.lam_vel, self.lam_foot, self.lam_frame)


# -- loss ------------------------------------------------------------------------------
@dataclass
class LossBreakdown:
    simple: float
    vel: float
    foot: float
    frame: float
    total: float
    short_window: bool = False

    def as_dict(self):
        return asdict(self)


def foot_contact(x0_true, feet, fps):
    """(B, T-1, F) mask: ground-truth foot below 5 cm and slower than 0.05 m/s."""
    f = np.asarray(x0_true)[:, :, feet]
    speed = np.linalg.norm(np.diff(f, axis=1), axis=-1) * fps
    return (f[:, :-1, :, 2] < CONTACT_HEIGHT) & (speed < CONTACT_SPEED)


def total_loss(x0_hat, frame_aux, x0_true, fps=30.0, weights=LossWeights(), feet=()):
    """L_simple + w.vel L_vel + w.foot L_foot + w.frame L_frame on (B, T, N, 3) metres.

    Returns (total Tensor, LossBreakdown).  ``feet`` indexes the foot joints in
    the N axis (world z up); with T < 2 the velocity terms are zero and the
    breakdown is flagged ``short_window``.
    """
    x0_hat, frame_aux = gc.as_tensor(x0_hat), gc.as_tensor(frame_aux)
    true = np.asarray(x0_true)
    if x0_hat.shape != true.shape or frame_aux.shape != true.shape:
        raise gc.ShapeError(f"total_loss: x0_hat {x0_hat.shape}, frame_aux {frame_aux.shape}, "
                            f"x0_true {true.shape} must match")
    true = true.astype(x0_hat.dtype, copy=False)
    d = x0_hat - true
    l_simple = (d * d).mean()
    e = frame_aux - true
    l_frame = (e * e).mean()
    zero = gc.Tensor(np.zeros((), x0_hat.dtype))
    T = true.shape[1]
    l_vel = l_foot = zero
    if T >= 2:
        dv = (x0_hat[:, 1:] - x0_hat[:, :-1]) - (true[:, 1:] - true[:, :-1])
        l_vel = (dv * dv).mean()
        feet = list(feet)
        if feet:
            contact = foot_contact(true, feet, fps)
            n = contact.sum()
            if n:
                fh = gc.take(x0_hat, np.asarray(feet), axis=2)
                v = (fh[:, 1:] - fh[:, :-1])[..., :2]
                l_foot = ((v * v).sum(axis=-1) * contact.astype(x0_hat.dtype)).sum() / float(n)
    total = l_simple + weights.vel * l_vel + weights.foot * l_foot + weights.frame * l_frame
    parts = [float(t.data) for t in (l_simple, l_vel, l_foot, l_frame, total)]
    return total, LossBreakdown(*parts, short_window=T < 2)


# -- data preparation -----------------------------------------------------------------------
@dataclass
class PartSample:
    """One sequence prepared for one part model."""
    cond: Conditions         # (1, T, ...)
    target: np.ndarray       # (T, N, 3) network coordinates, metres
    world: np.ndarray        # (T, N, 3) loss coordinates: world frame, or world axes for hands
    rot: np.ndarray          # (T, 3, 3) rig rotation
    origin: np.ndarray       # (T, 3) rig origin; zero for wrist-relative hands
    fps: float

    def __len__(self):
        return len(self.target)


def exemplar_poses(identity, n, seed=7, skel=None):
    """``n`` static poses of ``identity`` from a motion reserved for exemplars."""
    return static_poses(identity, seed, n, skel=skel)


def prepare(records, config: DenoiserConfig, skel: WholeBodySkeleton | None = None, n_exemplars=10,
            exemplars=None):
    """PartSamples for ``config.part``; hands get ground-truth upper body as conditioning.

    ``exemplars`` optionally maps identity id -> (N_O, 47, 3) poses, otherwise
    ``n_exemplars`` static poses of each identity are generated.
    """
    skel = skel or default_skeleton()
    joints = part_joints(skel, config.part)
    cache = dict(exemplars or {})
    out = []
    for rec in records:
        obs, frames = rec.observation, rec.motion.frames
        R, c = rig_frame(obs)
        upper = upper_body_rig(skel, frames, obs) if config.upper_body else None
        ex = None
        if config.identity:
            key = rec.identity.id
            if key not in cache:
                cache[key] = exemplar_poses(rec.identity, n_exemplars, skel=skel)
            ex = cache[key]
        target = part_target(skel, frames, obs, config.part)
        if config.part == "hand":
            world = np.einsum("tij,tnj->tni", R, target)
            origin = np.zeros_like(c)
        else:
            world = frames[:, joints]
            origin = c
        out.append(PartSample(Conditions.from_observation(obs, joints, upper, ex), target, world, R, origin,
                              rec.motion.fps))
    return out


def fit_normalization(samples):
    """Per joint-coordinate mean and std of the targets over all frames."""
    allt = np.concatenate([s.target for s in samples])
    return allt.mean(axis=0), allt.std(axis=0)


def foot_indices(skel, part):
    if part == "hand":
        return []
    joints = list(part_joints(skel, part))
    return [joints.index(j) for j in skel.subset("feet")]


def to_loss_frame(net: Denoiser, x, rot, origin):
    """Normalized network output (B, T, N, 3) -> metres in loss coordinates."""
    m = net.denormalize(x)
    dt = net.config.dtype
    world = gc.matmul(m, gc.Tensor(np.swapaxes(rot, -1, -2).astype(dt)))
    return world + gc.Tensor(origin[:, :, None, :].astype(dt))


@dataclass
class Batch:
    cond: Conditions
    target: np.ndarray   # (B, W, N, 3) normalized targets
    world: np.ndarray    # (B, W, N, 3)
    rot: np.ndarray      # (B, W, 3, 3)
    origin: np.ndarray   # (B, W, 3)
    fps: float


def sample_batch(samples, net, rng, window, batch):
    picks = []
    for _ in range(batch):
        s = samples[int(rng.integers(len(samples)))]
        w = min(window, len(s))
        start = int(rng.integers(len(s) - w + 1))
        picks.append((s, start, start + w))
    w = min(b - a for _, a, b in picks)
    picks = [(s, a, a + w) for s, a, _ in picks]
    return Batch(
        Conditions.stack([s.cond.frames(a, b) for s, a, b in picks]),
        np.stack([net.normalize(s.target[a:b]) for s, a, b in picks]),
        np.stack([s.world[a:b] for s, a, b in picks]),
        np.stack([s.rot[a:b] for s, a, b in picks]),
        np.stack([s.origin[a:b] for s, a, b in picks]),
        picks[0][0].fps,
    )


# -- training loops -------------------------------------------------------------------------
@dataclass
class TrainResult:
    net: Denoiser
    curve: np.ndarray      # (steps, 5): simple, vel, foot, frame, total
    log: list              # (step, LossBreakdown) every log_every steps

    def table(self):
        """Plain-text loss table of the logged steps."""
        lines = [f"{'step':>7} {'simple':>12} {'vel':>12} {'foot':>12} {'frame':>12} {'total':>12}"]
        for step, b in self.log:
            lines.append(f"{step:>7d} {b.simple:12.6g} {b.vel:12.6g} {b.foot:12.6g} {b.frame:12.6g} "
                         f"{b.total:12.6g}")
        return "\n".join(lines) + "\n"


def _check_finite(value, step, what="loss"):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at step {step}")


def _record_step(curve, logged, step, b: LossBreakdown, every, tag):
    curve[step, :5] = (b.simple, b.vel, b.foot, b.frame, b.total)
    if step % every == 0:
        logged.append((step, b))
        log.info("%s step %d simple=%.5g vel=%.5g foot=%.5g frame=%.5g", tag, step, b.simple, b.vel,
                 b.foot, b.frame)


def build_denoiser(dcfg: DenoiserConfig, samples, skel=None):
    net = Denoiser(dcfg, skel)
    net.set_normalization(*fit_normalization(samples))
    return net


def train_teacher(records, dcfg: DenoiserConfig, tcfg: TrainConfig, schedule: DiffusionSchedule | None = None,
                  mode="diffusion", skel=None, samples=None, callback=None):
    """Train one part denoiser.

    ``mode="diffusion"`` samples k uniformly in [1, K] and diffuses the target;
    ``mode="regression"`` fixes k = K and feeds zeros instead of noisy motion.
    """
    if mode not in ("diffusion", "regression"):
        raise ValueError(f"mode must be diffusion or regression, got {mode!r}")
    if not records and not samples:
        raise ValueError("training needs a non-empty dataset")
    skel = skel or default_skeleton()
    schedule = schedule or DiffusionSchedule()
    samples = samples or prepare(records, dcfg, skel, tcfg.n_exemplars)
    net = build_denoiser(dcfg, samples, skel)
    opt = tcfg.optimizer(net.parameters())
    rng = np.random.default_rng(tcfg.seed)
    feet = foot_indices(skel, dcfg.part)
    curve = np.zeros((tcfg.steps, 5))
    logged = []
    for step in range(tcfg.steps):
        b = sample_batch(samples, net, rng, tcfg.window, tcfg.batch)
        B = len(b.target)
        if mode == "diffusion":
            k = rng.integers(1, schedule.K + 1, size=B)
            eps = rng.standard_normal(b.target.shape)
            x_k = diffuse_forward(schedule, b.target, k, eps).astype(dcfg.dtype)
        else:
            k = np.full(B, schedule.K)
            x_k = np.zeros_like(b.target)
        opt.zero_grad()
        x0, aux = net(x_k, b.cond, k)
        total, parts = total_loss(to_loss_frame(net, x0, b.rot, b.origin),
                                  to_loss_frame(net, aux, b.rot, b.origin), b.world, b.fps,
                                  tcfg.weights(step), feet)
        _check_finite(parts.total, step)
        total.backward()
        opt.lr = tcfg.lr_at(step)
        opt.step()
        _record_step(curve, logged, step, parts, tcfg.log_every, dcfg.part)
        if callback is not None:
            callback(step, net, parts)
    return TrainResult(net, curve, logged)


def sds_distill(teacher: Denoiser, student_cfg: DenoiserConfig, records, tcfg: TrainConfig,
                schedule: DiffusionSchedule | None = None, skel=None, samples=None, distill=True):
    """Train a one-step student; with ``distill`` the frozen teacher adds L_distill.

    Student: x0_hat = student(x_K ~ N(0, I), K).  L_distill re-noises x0_hat to
    k_small ~ U[1, k_small_max] and penalizes its squared distance (metres) to
    the teacher's reconstruction, which is held constant.  ``distill=False``
    runs the identical loop without the teacher (the non-distilled baseline).
    """
    if student_cfg.part != teacher.config.part or student_cfg.upper_body != teacher.config.upper_body:
        raise ValueError("student and teacher must model the same part with the same conditioning")
    skel = skel or default_skeleton()
    schedule = schedule or DiffusionSchedule()
    samples = samples or prepare(records, student_cfg, skel, tcfg.n_exemplars)
    if not samples:
        raise ValueError("distillation needs a non-empty dataset")
    student = Denoiser(student_cfg, skel)
    student.set_normalization(teacher.norm_mean, teacher.norm_std)
    opt = tcfg.optimizer(student.parameters())
    rng = np.random.default_rng(tcfg.seed)
    feet = foot_indices(skel, student_cfg.part)
    weights = LossWeights(tcfg.lam_vel, tcfg.lam_foot, tcfg.lam_frame)
    teacher.zero_grad()
    before = {n: p.data.copy() for n, p in teacher.named_parameters()}
    curve = np.zeros((tcfg.steps, 6))
    logged = []
    K = schedule.K
    for step in range(tcfg.steps):
        b = sample_batch(samples, student, rng, tcfg.window, tcfg.batch)
        B = len(b.target)
        x_K = rng.standard_normal(b.target.shape).astype(student_cfg.dtype)
        k_small = rng.integers(1, tcfg.k_small_max + 1, size=B)
        eps = rng.standard_normal(b.target.shape)
        opt.zero_grad()
        x0, aux = student(x_K, b.cond, np.full(B, K))
        x0_m = to_loss_frame(student, x0, b.rot, b.origin)
        total, parts = total_loss(x0_m, to_loss_frame(student, aux, b.rot, b.origin), b.world, b.fps,
                                  weights, feet)
        l_distill = 0.0
        if distill:
            with gc.no_grad():
                noised = diffuse_forward(schedule, x0.data, k_small, eps).astype(teacher.config.dtype)
                target, _ = teacher(noised, b.cond, k_small)
                target_m = to_loss_frame(teacher, target, b.rot, b.origin).data
            d = x0_m - target_m.astype(x0_m.dtype)
            ld = (d * d).mean()
            l_distill = float(ld.data)
            total = total + tcfg.lam_distill * ld
        value = float(total.data)
        _check_finite(value, step)
        total.backward()
        if any(p.grad is not None for p in teacher.parameters()):
            raise RuntimeError(f"teacher received gradients at distillation step {step}")
        opt.lr = tcfg.lr_at(step, late_phase=False)
        opt.step()
        parts = LossBreakdown(parts.simple, parts.vel, parts.foot, parts.frame, value, parts.short_window)
        _record_step(curve, logged, step, parts, tcfg.log_every, "student")
        curve[step, 5] = l_distill
    for n, p in teacher.named_parameters():
        if p.data.tobytes() != before[n].tobytes():
            raise RuntimeError(f"teacher parameter {n} changed during distillation")
    return TrainResult(student, curve, logged)
