"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad as autograd


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d fn() / d target by central differences; ``fn`` must return a scalar Tensor."""
    out = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitude (at least ``floor``)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], targets: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between autograd and finite differences over ``targets``.

    Each tensor is scaled by its own gradient magnitude, floored at 1e-3 of the
    largest magnitude over all targets so exactly-zero gradients (a bias
    feeding a normalization) do not divide finite-difference noise by zero.
    """
    loss = fn()
    analytic = [g.data for g in autograd(loss, targets)]
    numeric = [numeric_grad(fn, t, eps) for t in targets]
    top = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in zip(analytic, numeric))
    floor = max(1e-3 * top, 1e-12)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))
