"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward


# central stencils: offsets (in steps) and weights, divided by step
_STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               order: int = 2) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` maps a tensor to a scalar tensor.  The relative error at each
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``order=4`` uses the five-point central stencil, which allows a larger
    step and so resolves coordinates whose gradient is near round-off.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    offsets, weights = _STENCILS[order]
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite")
    if tape.produced(out):
        analytic = backward(tape, out)[x]
    else:
        analytic = np.zeros(x0.shape)

    numeric = np.zeros(x0.shape)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        total = 0.0
        for k, w in zip(offsets, weights):
            xs = x0.copy().reshape(-1)
            xs[i] += k * step
            f = fn(Tensor(xs.reshape(x0.shape))).item()
            if not np.isfinite(f):
                raise FloatingPointError(f"function value is not finite near coordinate {i}")
            total += w * f
        flat[i] = total / step

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
