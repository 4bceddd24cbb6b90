"""Cross-module oracle checks run by ``egomotion selftest``.

Each check returns ``(name, passed, detail)``; all run at 64-bit in a few seconds.
"""
from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .attention import DENOM_EPS, RelTemporalLayer, rope_matrix, windowed_relative_attention
from .diffusion import DiffusionSchedule, ddim_step, diffuse_forward, sample
from .eval import mpjpe, pa_mpjpe
from .gradcore import Tensor, finite_difference_check


def brute_force_attention(layer: RelTemporalLayer, x, offset=0):
    """Double loop over frame pairs with absolute rotations R_j, R_i (frames counted from offset)."""
    def lin(m, a):
        return a @ m.weight.data + m.bias.data

    def pos(a):
        return np.where(a > 0, a + 1.0, np.exp(a))

    T = len(x)
    H, Dh = layer.heads, layer.head_dim
    q = pos(lin(layer.theta, x)).reshape(T, H, Dh)
    k = pos(lin(layer.rho, x)).reshape(T, H, Dh)
    v = lin(layer.value, x).reshape(T, H, Dh)
    out = np.zeros((T, H, Dh))
    for j in range(T):
        Rj = rope_matrix(j + offset, Dh, layer.base)
        for h in range(H):
            num, den = np.zeros(Dh), 0.0
            for i in range(max(0, j - layer.ws), j + 1):
                Ri = rope_matrix(i + offset, Dh, layer.base)
                num += (Rj @ q[j, h]) @ (Ri @ k[i, h]) * v[i, h]
                den += q[j, h] @ k[i, h]
            out[j, h] = num / (den + DENOM_EPS)
    return lin(layer.out, out.reshape(T, H * Dh))


def _rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def check_attention(n=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = shift = 0.0
    for i in range(n):
        heads = int(rng.integers(1, 3))
        d = heads * 2 * int(rng.integers(1, 8 // (2 * heads) + 1))
        T = int(rng.integers(1, 9))
        layer = RelTemporalLayer(d, heads, int(rng.integers(0, 5)), np.random.default_rng([seed, i]))
        x = rng.standard_normal((T, d))
        fast = windowed_relative_attention(layer, x).data
        worst = max(worst, _rel(fast, brute_force_attention(layer, x)))
        shift = max(shift, _rel(fast, brute_force_attention(layer, x, offset=int(rng.integers(1, 500)))))
    ok = worst < 1e-10 and shift < 1e-10
    return "attention oracle", ok, f"max rel {worst:.1e}, shift {shift:.1e} over {n} instances"


def check_diffusion(seed=0):
    sched = DiffusionSchedule()
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((20, 17, 3))
    rec = _rel(sample(lambda x, k: x0, sched, x0.shape, 10, seed), x0)
    xk = diffuse_forward(sched, x0, 800, rng.standard_normal(x0.shape))
    guess = rng.standard_normal(x0.shape)
    direct = ddim_step(sched, xk, guess, 800, 100)
    via = ddim_step(sched, ddim_step(sched, xk, guess, 800, 450), guess, 450, 100)
    comp = float(np.abs(direct - via).max())
    z = rng.standard_normal(200_000)
    var = diffuse_forward(sched, z, 500, rng.standard_normal(z.shape)).var()
    ok = bool(rec < 1e-5 and comp < 1e-10 and abs(var - 1.0) < 0.02)
    return "ddim oracle", ok, f"recon {rec:.1e}, composition {comp:.1e}, variance {var:.4f}"


PRIMITIVES = {
    "matmul": (lambda a, b: gc.matmul(a, b).sum(), [(3, 4), (4, 2)], False),
    "mul/add": (lambda a, b: (a * b + a).sum(), [(3, 4), (3, 4)], False),
    "div": (lambda a, b: (a / b).sum(), [(5,), (5,)], True),
    "exp/log": (lambda a: gc.log(gc.exp(a) + 1.0).sum(), [(6,)], False),
    "sqrt/power": (lambda a: (gc.sqrt(a) + gc.power(a, 3)).sum(), [(6,)], True),
    "tanh/sigmoid": (lambda a: (gc.tanh(a) * gc.sigmoid(a)).sum(), [(6,)], False),
    "silu/elu": (lambda a: (gc.silu(a) + gc.elu(a)).sum(), [(6,)], False),
    "sin/cos": (lambda a: (gc.sin(a) * gc.cos(a)).sum(), [(6,)], False),
    "softmax": (lambda a: (gc.softmax(a, axis=-1) * np.arange(4.0)).sum(), [(3, 4)], False),
    "layer_norm": (lambda a: (gc.layer_norm(a) * np.arange(5.0)).sum(), [(2, 5)], False),
    "mean/reshape": (lambda a: (gc.reshape(a, (6, 2)).mean(axis=0) ** 2).sum(), [(3, 4)], False),
}


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    worst, name = 0.0, ""
    for label, (f, shapes, positive) in PRIMITIVES.items():
        leaves = []
        for s in shapes:
            x = rng.standard_normal(s)
            leaves.append(Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True))
        err = finite_difference_check(f, leaves, h=1e-4, order=4)
        if err > worst:
            worst, name = err, label
    return "gradient checks", worst < 1e-6, f"max rel {worst:.1e} ({name}) over {len(PRIMITIVES)} primitives"


def check_procrustes(seed=0):
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(seed)
    gt = rng.standard_normal((5, 47, 3)) * 0.3
    worst = 0.0
    for i in range(20):
        R = Rotation.random(random_state=seed * 100 + i).as_matrix()
        pred = rng.uniform(0.5, 2.0) * gt @ R.T + rng.standard_normal(3)
        worst = max(worst, pa_mpjpe(pred, gt))
    noisy = gt + 0.05 * rng.standard_normal(gt.shape)
    ok = worst < 1e-6 and pa_mpjpe(noisy, gt) <= mpjpe(noisy, gt) + 1e-9
    return "procrustes oracle", ok, f"max PA-MPJPE under similarity {worst:.1e} mm"


CHECKS = (check_attention, check_diffusion, check_gradients, check_procrustes)


def run_all(seed=0):
    return [check(seed=seed) for check in CHECKS]
