"""Whole-body estimation: body sampling, then hands conditioned on the sampled upper body.

Modes:

* ``cascaded``: body model, then a hand model conditioned on the upper-body
  joints of the body sample;
* ``separate``: body model and a hand model without upper-body conditioning;
* ``parallel-joint``: a single model over all 47 joints;
* ``regression``: body (and hand) models trained without diffusion, run once
  with zero input at k = K.

Hands are predicted wrist-relative and attached to the body wrists.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import gradcore as gc
from .attention import StreamState
from .denoiser import Conditions, Denoiser, from_rig, hand_wrists, part_joints, rig_frame
from .diffusion import DiffusionSchedule, frame_noise, sample
from .identity import IdentityPrior
from .observe import Observation
from .skeleton import MotionSequence, WholeBodySkeleton, default_skeleton

MODES = ("cascaded", "separate", "parallel-joint", "regression")
BODY_STREAM, HAND_STREAM = 0, 1


@dataclass
class WholeBodyEstimator:
    body: Denoiser
    hand: Denoiser | None = None
    mode: str = "cascaded"
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    body_steps: int = 10
    hand_steps: int = 10
    skel: WholeBodySkeleton = field(default_factory=default_skeleton)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "parallel-joint":
            if self.body.config.part != "whole" or self.hand is not None:
                raise ValueError("parallel-joint mode needs one whole-body model and no hand model")
            return
        if self.body.config.part != "body":
            raise ValueError(f"{self.mode} mode needs a body model, got part {self.body.config.part!r}")
        if self.hand is None or self.hand.config.part != "hand":
            raise ValueError(f"{self.mode} mode needs a hand model")
        if self.mode == "cascaded" and not self.hand.config.upper_body:
            raise ValueError("cascaded mode needs a hand model built with upper-body conditioning")
        if self.mode == "separate" and self.hand.config.upper_body:
            raise ValueError("separate mode needs a hand model without upper-body conditioning")
        for s in (self.body_steps, self.hand_steps):
            if not 1 <= s <= self.schedule.K:
                raise ValueError(f"steps must lie in [1, {self.schedule.K}], got {s}")

    @property
    def nets(self):
        return [n for n in (self.body, self.hand) if n is not None]

    @property
    def upper_in_body(self):
        """Positions of the upper-body joints inside the body model's joint list."""
        body = list(part_joints(self.skel, "body"))
        return np.array([body.index(j) for j in self.skel.subset("upper_body")])

    @property
    def wrist_in_body(self):
        body = list(part_joints(self.skel, "body"))
        return np.array([body.index(j) for j in hand_wrists(self.skel)])

    # -- offline ------------------------------------------------------------------------
    def _exemplars(self, net, identity):
        if not net.config.identity:
            return None
        if identity is None:
            raise ValueError(f"{net.config.part} model is identity-conditioned; pass an IdentityPrior")
        return identity.exemplars

    def _run(self, net: Denoiser, cond: Conditions, steps, seed, stream):
        """Normalized x0 (T, N, 3) from the DDIM chain, or one regression pass."""
        T = cond.shape[1]
        shape = (T, net.config.num_joints, 3)
        if self.mode == "regression":
            x0, _ = net(np.zeros((1,) + shape, net.config.dtype), cond, self.schedule.K)
            return x0.data[0]

        def denoise(x, k):
            return net(x[None], cond, k)[0].data[0]
        return sample(denoise, self.schedule, shape, steps, seed, stream, net.config.dtype)

    def estimate(self, obs: Observation, seed=0, identity: IdentityPrior | None = None, return_parts=False,
                 body_only=False):
        """World-frame 47-joint MotionSequence for the observation sequence.

        ``body_only`` skips the hand stage; hand joints are then left at zero.
        """
        if len(obs) < 1:
            raise ValueError("observation sequence is empty")
        R, c = rig_frame(obs)
        out = np.zeros((len(obs), self.skel.num_joints, 3))
        with gc.no_grad(), gc.wide_accumulation():
            body = self.body
            cond = Conditions.from_observation(obs, body.joints, exemplars=self._exemplars(body, identity))
            body_rig = body.denormalize(self._run(body, cond, self.body_steps, seed, BODY_STREAM))
            out[:, body.joints] = from_rig(body_rig, R, c)
            upper = None
            if self.hand is not None and not body_only:
                hand = self.hand
                if hand.config.upper_body:
                    upper = body_rig[:, self.upper_in_body]
                hcond = Conditions.from_observation(obs, hand.joints, upper,
                                                    self._exemplars(hand, identity))
                rel = hand.denormalize(self._run(hand, hcond, self.hand_steps, seed, HAND_STREAM))
                out[:, hand.joints] = out[:, hand_wrists(self.skel)] + np.einsum("tij,tnj->tni", R, rel)
        motion = MotionSequence(out)
        if return_parts:
            return motion, {"upper": upper, "body_rig": body_rig}
        return motion

    # -- streaming ----------------------------------------------------------------------
    def stream(self, seed=0, identity: IdentityPrior | None = None):
        return StreamSession(self, seed, identity)

    # -- persistence --------------------------------------------------------------------
    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        self.body.save(os.path.join(directory, "body"))
        if self.hand is not None:
            self.hand.save(os.path.join(directory, "hand"))
        meta = {"mode": self.mode, "body_steps": self.body_steps, "hand_steps": self.hand_steps,
                "schedule": self.schedule.to_dict()}
        with open(os.path.join(directory, "estimator.yaml"), "w") as fh:
            yaml.safe_dump(meta, fh, sort_keys=True)

    @classmethod
    def load(cls, directory, **overrides):
        with open(os.path.join(directory, "estimator.yaml")) as fh:
            meta = yaml.safe_load(fh)
        body = Denoiser.load(os.path.join(directory, "body"))
        hand_dir = os.path.join(directory, "hand")
        hand = Denoiser.load(hand_dir) if os.path.isdir(hand_dir) else None
        kw = dict(mode=meta["mode"], body_steps=meta["body_steps"], hand_steps=meta["hand_steps"],
                  schedule=DiffusionSchedule(**meta["schedule"]))
        kw.update(overrides)
        return cls(body, hand, **kw)


class StreamSession:
    """Frame-by-frame one-step estimation with O(ws) work per frame.

    Each pushed frame draws its x_K noise from (seed, frame index), so row t
    equals row t of ``estimate`` on the same prefix.
    """

    def __init__(self, est: WholeBodyEstimator, seed=0, identity: IdentityPrior | None = None):
        if est.mode != "regression" and (est.body_steps != 1 or (est.hand is not None and est.hand_steps != 1)):
            raise ValueError("streaming needs a one-step estimator (steps = 1)")
        self.est = est
        self.seed = seed
        self.identity = identity
        self.states = [StreamState() for _ in est.nets]
        self.frame = 0
        self.latency_ms = []

    def _one(self, net: Denoiser, state, cond, stream):
        shape = (1, 1, net.config.num_joints, 3)
        K = self.est.schedule.K
        if self.est.mode == "regression":
            x = np.zeros(shape, net.config.dtype)
        else:
            x = frame_noise(self.seed, [self.frame], shape[2:], stream, net.config.dtype)[None]
        return net.denormalize(net.step(state, x, cond, K)[0].data[0, 0])

    def push(self, obs: Observation):
        """Consume one observation frame (length-1 Observation); return its (47, 3) pose."""
        if len(obs) != 1:
            raise ValueError(f"push takes exactly one frame, got {len(obs)}")
        start = time.perf_counter()
        est = self.est
        R, c = rig_frame(obs)
        pose = np.zeros((est.skel.num_joints, 3))
        with gc.no_grad(), gc.wide_accumulation():
            body = est.body
            cond = Conditions.from_observation(obs, body.joints, exemplars=est._exemplars(body, self.identity))
            body_rig = self._one(body, self.states[0], cond, BODY_STREAM)
            pose[body.joints] = body_rig @ R[0].T + c[0]
            if est.hand is not None:
                hand = est.hand
                upper = body_rig[est.upper_in_body][None, None] if hand.config.upper_body else None
                hcond = Conditions.from_observation(obs, hand.joints, None, est._exemplars(hand, self.identity))
                if upper is not None:
                    hcond = hcond.with_upper(upper)
                rel = self._one(hand, self.states[1], hcond, HAND_STREAM)
                pose[hand.joints] = pose[hand_wrists(est.skel)] + rel @ R[0].T
        self.frame += 1
        self.latency_ms.append(1000.0 * (time.perf_counter() - start))
        return pose
