"""Causal windowed relative-temporal attention and the per-frame graph transformer.

Frame j attends to frames j-ws..j.  With theta/rho the positive feature maps
and R_t the rotary rotation for step t::

    out_j = sum_i (R_j theta(q_j))^T (R_i rho(k_i)) v_i  /  (sum_i theta(q_j)^T rho(k_i) + eps)

Only the offset i - j enters, since R_j^T R_i = R_{i-j}.  The implementation
loops over offsets and rotates keys by -delta, so absolute frame indices never
appear; results are exactly shift invariant and a stream step performs the
same arithmetic as the offline pass.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from . import gradcore as gc
from .gradcore import LayerNorm, Linear, MLP2, Module, Tensor

DENOM_EPS = 1e-6


# -- rotary rotation ------------------------------------------------------------
def rope_frequencies(dim, base=10000.0):
    if dim % 2:
        raise ValueError(f"rotary dimension must be even, got {dim}")
    return base ** (-np.arange(0, dim, 2) / dim)


def rope_rotate(x, t, base=10000.0):
    """Rotate consecutive pairs (x_2m, x_2m+1) of the last axis by t * base^(-2m/D).

    Works on numpy arrays and on Tensors (differentiable in x).  ``t`` is a
    scalar or broadcasts against the leading dimensions of x.
    """
    dim = x.shape[-1]
    freqs = rope_frequencies(dim, base)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    dtype = x.dtype
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
    lead = x.shape[:-1]
    if isinstance(x, Tensor):
        pairs = x.reshape(lead + (dim // 2, 2))
        a, b = pairs[..., 0], pairs[..., 1]
        out = gc.stack([a * cos - b * sin, a * sin + b * cos], axis=-1)
        return out.reshape(lead + (dim,))
    pairs = np.asarray(x).reshape(lead + (dim // 2, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    return np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1).reshape(lead + (dim,))


def rope_matrix(t, dim, base=10000.0):
    """Explicit D x D block-diagonal rotation R_t (reference use)."""
    freqs = rope_frequencies(dim, base)
    R = np.zeros((dim, dim))
    for m, w in enumerate(freqs):
        c, s = np.cos(t * w), np.sin(t * w)
        R[2 * m:2 * m + 2, 2 * m:2 * m + 2] = [[c, -s], [s, c]]
    return R


def positive_map(x):
    """elu(x) + 1 > 0."""
    return gc.elu(x) + 1.0


# -- the attention layer ----------------------------------------------------------------
class RelTemporalLayer(Module):
    def __init__(self, d_model, heads, ws, rng, dtype=np.float32, base=10000.0):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        head_dim = d_model // heads
        if head_dim % 2:
            raise ValueError(f"per-head dimension must be even for rotary pairs, got {head_dim}")
        if ws < 0:
            raise ValueError("window size must be >= 0")
        self.heads, self.head_dim, self.ws, self.base = heads, head_dim, int(ws), base
        self.theta = Linear(d_model, d_model, rng, dtype)
        self.rho = Linear(d_model, d_model, rng, dtype)
        self.value = Linear(d_model, d_model, rng, dtype)
        self.out = Linear(d_model, d_model, rng, dtype)

    def _split(self, x):
        return x.reshape(x.shape[:-1] + (self.heads, self.head_dim))

    def project(self, x):
        """theta(q), rho(k), v for frames x (..., T, d_model) -> each (..., T, H, Dh)."""
        return (positive_map(self._split(self.theta(x))),
                positive_map(self._split(self.rho(x))),
                self._split(self.value(x)))

    def combine(self, heads_out):
        return self.out(heads_out.reshape(heads_out.shape[:-2] + (self.heads * self.head_dim,)))


def _attend_offsets(layer, q, keys, values):
    """Shared kernel: keys[delta], values[delta] hold frame j - delta for each query j."""
    num = den = None
    for delta, (k, v) in enumerate(zip(keys, values)):
        kr = rope_rotate(k, -delta, layer.base)
        s = (q * kr).sum(axis=-1, keepdims=True)
        d = (q * k).sum(axis=-1, keepdims=True)
        term = s * v
        num = term if num is None else num + term
        den = d if den is None else den + d
    return num / (den + DENOM_EPS)


def windowed_relative_attention(layer: RelTemporalLayer, x):
    """Offline causal pass over frames; x is (..., T, d_model)."""
    x = gc.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("windowed_relative_attention: non-finite features")
    T = x.shape[-2]
    q, k, v = layer.project(x)
    span = min(layer.ws, T - 1)
    taxis = x.ndim - 2
    kp = gc.pad_front(k, span, taxis)
    vp = gc.pad_front(v, span, taxis)
    lead = (slice(None),) * taxis
    keys = [kp[lead + (slice(span - d, span - d + T),)] for d in range(span + 1)]
    vals = [vp[lead + (slice(span - d, span - d + T),)] for d in range(span + 1)]
    return layer.combine(_attend_offsets(layer, q, keys, vals))


class StreamState:
    """Per-session ring buffers, one named slot per layer.

    Each slot keeps at most ``capacity`` entries (oldest evicted first) and the
    absolute counter of the newest frame.
    """

    def __init__(self):
        self.slots = {}
        self.frame = -1

    def buffer(self, key, capacity):
        buf = self.slots.get(key)
        if buf is None:
            buf = self.slots[key] = deque(maxlen=capacity)
        return buf

    def __len__(self):
        return max((len(b) for b in self.slots.values()), default=0)


def stream_attention_step(layer: RelTemporalLayer, state: StreamState, x, key="attn"):
    """One new frame x (..., 1, d_model) -> output (..., 1, d_model)."""
    x = gc.as_tensor(x)
    q, k, v = layer.project(x)
    buf = state.buffer(key, layer.ws + 1)
    buf.append((k, v))
    keys = [e[0] for e in reversed(buf)]
    vals = [e[1] for e in reversed(buf)]
    return layer.combine(_attend_offsets(layer, q, keys, vals))


# -- blocks -------------------------------------------------------------------------
class TemporalBlock(Module):
    """Relative attention + feed-forward, each wrapped by residual and layer norm."""

    def __init__(self, d_model, heads, ws, rng, dtype=np.float32):
        self.attn = RelTemporalLayer(d_model, heads, ws, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.ffn = MLP2(d_model, 2 * d_model, d_model, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)

    def _finish(self, x, a):
        h = self.norm1(x + a)
        return self.norm2(h + self.ffn(h))

    def __call__(self, x, modulate=None):
        """``modulate(a)`` optionally transforms the attention output before the residual add."""
        a = windowed_relative_attention(self.attn, x)
        return self._finish(x, a if modulate is None else modulate(a))

    def step(self, x, state, key, modulate=None):
        a = stream_attention_step(self.attn, state, x, key)
        return self._finish(x, a if modulate is None else modulate(a))


class GraphTransformerBlock(Module):
    """First-order graph convolution then full self-attention over joint tokens."""

    def __init__(self, d_model, heads, adjacency, rng, dtype=np.float32):
        self.adjacency = np.asarray(adjacency, dtype=dtype)
        self.heads = heads
        self.gconv = Linear(d_model, d_model, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.q = Linear(d_model, d_model, rng, dtype)
        self.k = Linear(d_model, d_model, rng, dtype)
        self.v = Linear(d_model, d_model, rng, dtype)
        self.o = Linear(d_model, d_model, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)

    def __call__(self, x, adjacency=None):
        x = gc.as_tensor(x)
        A = np.asarray(self.adjacency if adjacency is None else adjacency, dtype=x.dtype)
        h = self.norm1(x + gc.silu(self.gconv(gc.matmul(gc.Tensor(A), x))))
        N, D = h.shape[-2:]
        dh = D // self.heads
        lead = h.shape[:-2]
        axes = tuple(range(len(lead)))
        perm = axes + (len(lead) + 1, len(lead), len(lead) + 2)

        def heads(t):
            return t.reshape(lead + (N, self.heads, dh)).transpose(perm)

        q, k, v = heads(self.q(h)), heads(self.k(h)), heads(self.v(h))
        w = gc.softmax(gc.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        a = gc.matmul(w, v).transpose(perm).reshape(lead + (N, D))
        return self.norm2(h + self.o(a))
