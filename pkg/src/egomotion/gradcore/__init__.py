"""Minimal numpy-backed tensors with reverse-mode autodiff."""
from . import checkpoint
from .check import finite_difference_check
from .nn import MLP2, LayerNorm, Linear, Module, parameter
from .optim import Adam, AdamW
from .tensor import (ShapeError, Tensor, absolute, add, as_tensor, broadcast_to, concat, cos,
                     div, elu, exp, grad_enabled, layer_norm, log, matmul, mean, mul, neg,
                     no_grad, pad_front, power, relu, reshape, sigmoid, silu, sin, softmax,
                     sqrt, stack, sub, take, tanh, tmax, transpose, tsum, where,
                     wide_accumulation)

__all__ = [
    "Adam", "AdamW", "LayerNorm", "Linear", "MLP2", "Module", "ShapeError", "Tensor",
    "absolute", "add", "as_tensor", "broadcast_to", "checkpoint", "concat", "cos", "div",
    "elu", "exp", "finite_difference_check", "grad_enabled", "layer_norm", "log", "matmul",
    "mean", "mul", "neg", "no_grad", "pad_front", "parameter", "power", "relu", "reshape",
    "sigmoid", "silu", "sin", "softmax", "sqrt", "stack", "sub", "take", "tanh", "tmax",
    "transpose", "tsum", "where", "wide_accumulation",
]
