"""Pose metrics, ablation tables and latency benchmarks.

All metrics are reported in millimetres.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .skeleton import MotionSequence, WholeBodySkeleton, default_skeleton, measured_bone_lengths

CONTACT_HEIGHT = 0.05   # m, predicted foot height below which a frame counts as contact


def _frames(x):
    return np.asarray(x.frames if isinstance(x, MotionSequence) else x, dtype=float)


def _pair(pred, gt):
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def mpjpe(pred, gt):
    """Mean Euclidean joint error over frames and joints, mm."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p - g, axis=-1).mean() * 1000.0)


def procrustes_align(p, g, eps=1e-12):
    """Similarity transform of point set p (N, 3) onto g (N, 3); None if degenerate."""
    mp, mg = p.mean(axis=0), g.mean(axis=0)
    pc, gc_ = p - mp, g - mg
    var = (pc ** 2).sum()
    if var < eps or (gc_ ** 2).sum() < eps:
        return None
    U, S, Vt = np.linalg.svd(pc.T @ gc_)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ D @ Vt                      # applied as row vectors: pc @ R
    s = (S * np.diag(D)).sum() / var
    return s * pc @ R + mg


def pa_mpjpe(pred, gt, return_flags=False):
    """MPJPE after per-frame similarity Procrustes alignment, mm.

    Frames whose points all coincide are left unaligned and flagged.
    """
    p, g = _pair(pred, gt)
    p = p.reshape((-1,) + p.shape[-2:])
    g = g.reshape((-1,) + g.shape[-2:])
    aligned = np.empty_like(p)
    flags = []
    for t in range(len(p)):
        a = procrustes_align(p[t], g[t])
        if a is None:
            flags.append(t)
            a = p[t]
        aligned[t] = a
    err = float(np.linalg.norm(aligned - g, axis=-1).mean() * 1000.0)
    return (err, flags) if return_flags else err


def foot_skate(pred, feet=None, skel: WholeBodySkeleton | None = None):
    """Mean horizontal per-frame foot displacement (mm) over predicted contact frames.

    A foot is in contact at frame t when its height is below 5 cm; its
    displacement is measured from t to t + 1.  Zero without contact frames.
    """
    p = _frames(pred)
    if feet is None:
        feet = (skel or default_skeleton()).subset("feet")
    f = p[:, feet]
    if len(f) < 2:
        return 0.0
    step = np.linalg.norm(np.diff(f[..., :2], axis=0), axis=-1)
    contact = f[:-1, :, 2] < CONTACT_HEIGHT
    if not contact.any():
        return 0.0
    return float(step[contact].mean() * 1000.0)


def bone_err(pred, gt, skel: WholeBodySkeleton | None = None):
    """Mean absolute per-bone length difference over frames and bones, mm."""
    p, g = _pair(pred, gt)
    skel = skel or default_skeleton()
    diff = np.abs(measured_bone_lengths(skel, p) - measured_bone_lengths(skel, g))
    return float(diff.mean() * 1000.0)


# -- per-part evaluation -------------------------------------------------------------------
PARTS = ("body", "hand")


def part_metrics(pred, gt, skel: WholeBodySkeleton | None = None, parts=PARTS):
    """{part: {metric: mm}} for the body joints and the 30 hand joints."""
    skel = skel or default_skeleton()
    p, g = _pair(pred, gt)
    out = {}
    for part, idx in (("body", skel.subset("body")), ("hand", skel.hands)):
        if part not in parts:
            continue
        pa, flags = pa_mpjpe(p[:, idx], g[:, idx], return_flags=True)
        out[part] = {"mpjpe": mpjpe(p[:, idx], g[:, idx]), "pa_mpjpe": pa,
                     "foot_skate": foot_skate(p, skel=skel) if part == "body" else 0.0}
    bone = np.abs(measured_bone_lengths(skel, p) - measured_bone_lengths(skel, g)).mean(axis=0) * 1000.0
    body_set = set(skel.subset("body").tolist())
    is_body = np.array([j in body_set for j in range(1, skel.num_joints)])
    if "body" in out:
        out["body"]["bone_err"] = float(bone[is_body].mean())
    if "hand" in out:
        out["hand"]["bone_err"] = float(bone[~is_body].mean())
    return out


def mean_metrics(items):
    """Average a list of part_metrics dicts."""
    return {part: {m: float(np.mean([it[part][m] for it in items])) for m in items[0][part]}
            for part in items[0]}


# -- reports -------------------------------------------------------------------------------
METRICS = ("mpjpe", "pa_mpjpe", "foot_skate", "bone_err")


@dataclass
class EvalReport:
    """Rows of (variant, split, part) -> metrics in mm, plus optional latency stats."""
    rows: list = field(default_factory=list)
    latency: dict = field(default_factory=dict)

    def add(self, variant, split, metrics):
        for part, vals in metrics.items():
            row = {"variant": variant, "split": split, "part": part}
            row.update({m: float(vals[m]) for m in METRICS})
            if not all(np.isfinite(row[m]) and row[m] >= 0 for m in METRICS):
                raise ValueError(f"invalid metric values for {variant}/{part}: {row}")
            self.rows.append(row)

    def value(self, variant, part, metric="mpjpe", split=None):
        vals = [r[metric] for r in self.rows
                if r["variant"] == variant and r["part"] == part and (split is None or r["split"] == split)]
        if not vals:
            raise KeyError(f"no row for variant {variant!r}, part {part!r}")
        return float(np.mean(vals))

    def to_text(self):
        head = ["variant", "split", "part", *METRICS]
        body = [[r["variant"], r["split"], r["part"]] + [f"{r[m]:.2f}" for m in METRICS] for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(str(x).ljust(w) if i < 3 else str(x).rjust(w) for i, (x, w) in enumerate(zip(row, widths)))
                 for row in [head] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.latency:
            lines.append("")
            lines.append("latency (ms per frame)")
            for name, stats in self.latency.items():
                lines.append(f"  {name}: " + ", ".join(f"{k} {v:.3f}" for k, v in stats.items()))
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"rows": self.rows, "latency": self.latency}

    def save(self, path):
        """Aligned text table at ``path`` and a YAML copy next to it."""
        with open(path, "w") as fh:
            fh.write(self.to_text())
        with open(os.path.splitext(str(path))[0] + ".yaml", "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


# -- ablations -----------------------------------------------------------------------------
def evaluate_estimator(est, records, seed=0, n_evals=5, priors=None, skel=None, parts=PARTS):
    """Mean part metrics over records; diffusion variants average ``n_evals`` samplings.

    ``priors`` maps identity id -> IdentityPrior for identity-conditioned models.
    """
    runs = 1 if est.mode == "regression" else n_evals
    body_only = "hand" not in parts
    per_record = []
    for i, rec in enumerate(records):
        prior = None if priors is None else priors[rec.identity.id]
        evals = []
        for r in range(runs):
            pred = est.estimate(rec.observation, seed=seed * 1000 + 10 * i + r, identity=prior, body_only=body_only)
            evals.append(part_metrics(pred.frames, rec.motion.frames, skel, parts))
        per_record.append(mean_metrics(evals))
    return mean_metrics(per_record)


def run_ablation(variants, records, seeds=(0,), n_evals=5, split="test", priors=None, skel=None, parts=PARTS):
    """Evaluate each variant over ``seeds``; returns an EvalReport with one row per variant and part.

    ``variants`` maps label -> WholeBodyEstimator, a checkpoint directory, or a
    callable ``seed -> estimator`` (for per-seed trained models).
    """
    from .cascade import WholeBodyEstimator
    report = EvalReport()
    for label, spec in variants.items():
        if isinstance(spec, (str, os.PathLike)) and not os.path.isdir(spec):
            raise FileNotFoundError(f"checkpoint for variant {label!r} not found: {spec}")
    for label, spec in variants.items():
        per_seed = []
        for seed in seeds:
            if isinstance(spec, (str, os.PathLike)):
                est = WholeBodyEstimator.load(spec)
            elif callable(spec):
                est = spec(seed)
            else:
                est = spec
            per_seed.append(evaluate_estimator(est, records, seed, n_evals, priors, skel, parts))
        report.add(label, split, mean_metrics(per_seed))
    return report


# -- latency -------------------------------------------------------------------------------
def latency_stats(ms):
    ms = np.asarray(ms, dtype=float)
    return {"p50": float(np.percentile(ms, 50)), "p95": float(np.percentile(ms, 95)), "max": float(ms.max())}


def bench_stream(est, obs, warmup=20, seed=0, identity=None):
    """Per-frame wall-clock (ms) of a streaming session after ``warmup`` frames."""
    session = est.stream(seed, identity)
    for t in range(len(obs)):
        session.push(obs.slice(t, t + 1))
    return latency_stats(session.latency_ms[warmup:])


def bench_offline(est, obs, repeats=3, seed=0, identity=None):
    """Offline per-frame cost (ms): full-sequence estimate time divided by its length.

    Returns stats over ``repeats`` runs after one warmup run.
    """
    est.estimate(obs.slice(0, min(len(obs), 8)), seed=seed, identity=identity)
    per_frame = []
    for _ in range(repeats):
        start = time.perf_counter()
        est.estimate(obs, seed=seed, identity=identity)
        per_frame.append(1000.0 * (time.perf_counter() - start) / len(obs))
    return latency_stats(per_frame)


def bench_latency(teacher, student, obs, warmup=20, repeats=3, seed=0):
    """Latency of teacher and student on the same sequence and their speed ratio.

    Both are timed offline (same batch setting); the student is also timed
    frame by frame through a streaming session.
    """
    t_off = bench_offline(teacher, obs, repeats, seed)
    s_off = bench_offline(student, obs, repeats, seed)
    out = {"teacher_offline": t_off, "student_offline": s_off,
           "ratio": {"p50": t_off["p50"] / s_off["p50"]}}
    if student.mode == "regression" or (student.body_steps == 1 and student.hand_steps == 1):
        out["student_stream"] = bench_stream(student, obs, warmup, seed)
    return out
