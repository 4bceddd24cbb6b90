from __future__ import annotations

import numpy as np


def _central(f, leaves, t, i, h, order):
    flat = t.data.reshape(-1)
    orig = flat[i]

    def at(d):
        flat[i] = orig + d
        try:
            return float(np.asarray(f(*leaves).data))
        finally:
            flat[i] = orig

    if order == 2:
        return (at(h) - at(-h)) / (2.0 * h)
    return (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)


def finite_difference_check(f, x, h=1e-5, max_coords=None, rng=None, order=2, reference=None):
    """Compare reverse-mode gradients against central differences.

    ``f`` is called as ``f(*leaves)`` and returns a scalar Tensor; ``x`` is one
    leaf tensor or a list of them (e.g. network parameters closed over by f).
    Returns the max over checked coordinates of
    ``|analytic - central| / (|analytic| + |central| + 1e-12)``.

    ``max_coords`` limits the check to a random subset of coordinates per
    tensor (for large networks).  ``order`` selects the 3-point (2) or
    5-point (4) central stencil.  ``reference=(f_ref, x_ref)`` takes the
    differences on a second evaluation of the same function, typically a
    64-bit copy of a 32-bit network, so the check measures the analytic
    gradient rather than the rounding noise of the differences.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step size must lie in (0, 1e-2], got {h}")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    leaves = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    out = f(*leaves)
    val = float(np.asarray(out.data))
    if not np.isfinite(val):
        raise FloatingPointError(f"f(x) is not finite: {val}")
    if out.requires_grad:
        out.backward()
    if reference is None:
        f_ref, ref_leaves = f, leaves
    else:
        f_ref, ref = reference
        ref_leaves = list(ref) if isinstance(ref, (list, tuple)) else [ref]
        if [t.shape for t in ref_leaves] != [t.shape for t in leaves]:
            raise ValueError("reference leaves must match the checked leaves in shape")
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, tr in zip(leaves, ref_leaves):
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        idx = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            idx = rng.choice(t.size, size=max_coords, replace=False)
        for i in idx:
            central = _central(f_ref, ref_leaves, tr, i, h, order)
            a = float(analytic[i])
            worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-12))
    return worst
