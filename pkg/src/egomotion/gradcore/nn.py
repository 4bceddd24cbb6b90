"""Parameter containers and the handful of layers the networks are built from."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, layer_norm, matmul, silu


def parameter(data, dtype):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Collects parameters from attributes (tensors, modules, lists of modules)."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, checkpoint has {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True, init_scale=1.0):
        bound = init_scale / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), dtype)
        self.bias = parameter(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP2(Module):
    """Linear -> swish -> linear."""

    def __init__(self, n_in, n_hidden, n_out, rng, dtype=np.float32):
        self.fc1 = Linear(n_in, n_hidden, rng, dtype)
        self.fc2 = Linear(n_hidden, n_out, rng, dtype)

    def __call__(self, x):
        return self.fc2(silu(self.fc1(x)))
