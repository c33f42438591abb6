"""Reverse-mode automatic differentiation over dense float64 tensors."""

from .gradcheck import grad_check
from .ops import (add, clip, concat, embedding_lookup, getitem, l2_norm, log, lstm, matmul,
                  mul, reshape, scale, sigmoid, softmax, sub, tanh, total, transpose)
from .tensor import GradientMap, Tape, Tensor, as_tensor, backward, current_tape

__all__ = [
    "GradientMap", "Tape", "Tensor", "as_tensor", "backward", "current_tape", "grad_check",
    "add", "clip", "concat", "embedding_lookup", "getitem", "l2_norm", "log", "lstm", "matmul",
    "mul", "reshape", "scale", "sigmoid", "softmax", "sub", "tanh", "total", "transpose",
]
