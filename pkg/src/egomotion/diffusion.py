"""DDPM forward process, noise schedules and deterministic DDIM sampling (x0-parameterized)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    K: int = 1000
    kind: str = "linear"            # "linear" (in beta) or "cosine" (in alpha_bar)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)   # index k = 0..K, alpha_bar[0] = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.kind == "linear":
            beta = np.linspace(self.beta_start, self.beta_end, self.K)
        elif self.kind == "cosine":
            s = 0.008
            f = np.cos((np.arange(self.K + 1) / self.K + s) / (1 + s) * np.pi / 2) ** 2
            beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("betas must lie in (0, 1)")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        beta.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def alpha(self):
        return 1.0 - self.beta

    def timesteps(self, steps):
        """Descending DDIM grid of ``steps`` + 1 integers from K down to 0."""
        if not 1 <= steps <= self.K:
            raise ValueError(f"steps must be in [1, {self.K}], got {steps}")
        return np.round(np.linspace(self.K, 0, steps + 1)).astype(np.int64)

    def to_dict(self):
        return {"K": self.K, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _check_k(schedule, k, lo=0):
    k = np.asarray(k)
    if np.any(k < lo) or np.any(k > schedule.K):
        raise ValueError(f"timestep {k} outside [{lo}, {schedule.K}]")
    return k


def diffuse_forward(schedule: DiffusionSchedule, x0, k, eps):
    """x_k = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps.  ``k`` may be per-sample (broadcast on axis 0)."""
    k = _check_k(schedule, k)
    x0 = np.asarray(x0)
    if np.shape(eps) != x0.shape:
        raise ValueError(f"noise shape {np.shape(eps)} does not match x0 shape {x0.shape}")
    ab = schedule.alpha_bar[k].reshape(k.shape + (1,) * (x0.ndim - k.ndim))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def ddim_step(schedule: DiffusionSchedule, x_k, x0_hat, k, k_prev):
    """Deterministic (eta = 0) DDIM update from k to k_prev."""
    if not 0 <= k_prev < k <= schedule.K:
        raise ValueError(f"need 0 <= k_prev < k <= K, got k={k}, k_prev={k_prev}")
    if k_prev == 0:
        return np.array(x0_hat, copy=True)
    ab, ab_prev = schedule.alpha_bar[k], schedule.alpha_bar[k_prev]
    eps_hat = (x_k - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    return (np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat).astype(np.asarray(x_k).dtype,
                                                                                     copy=False)


def frame_noise(seed, frames, frame_shape, stream=0, dtype=np.float64):
    """Unit Gaussian noise whose row t depends only on (seed, stream, frames[t]).

    Counter-based, so a streamed frame and the same frame inside an offline
    batch receive identical noise.
    """
    frames = np.atleast_1d(frames)
    rows = [np.random.default_rng([int(seed), int(stream), int(t)]).standard_normal(frame_shape)
            for t in frames]
    return np.stack(rows).astype(dtype) if rows else np.zeros((0,) + tuple(frame_shape), dtype)


def sample(denoise, schedule: DiffusionSchedule, shape, steps, seed, stream=0, dtype=np.float64,
           x_init=None):
    """Run the DDIM chain.

    ``denoise(x_k, k)`` returns x0_hat with the shape of x_k.  ``shape`` is
    (T, ...); noise for frame t comes from ``frame_noise``.  Returns x0.
    """
    grid = schedule.timesteps(steps)
    x = frame_noise(seed, np.arange(shape[0]), shape[1:], stream, dtype) if x_init is None else x_init
    for k, k_prev in zip(grid[:-1], grid[1:]):
        x0_hat = np.asarray(denoise(x, int(k)))
        if not np.all(np.isfinite(x0_hat)):
            raise FloatingPointError(f"denoiser output is not finite at step k={int(k)}")
        x = ddim_step(schedule, x, x0_hat, int(k), int(k_prev))
    return x
