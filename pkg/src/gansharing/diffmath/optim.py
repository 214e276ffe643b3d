"""SGD with momentum and Adam. Steps never clear gradients; call ``zero_grad``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bias_correction: bool = True
    steps: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd_momentum(lr: float = 1e-3, momentum: float = 0.9) -> OptimizerState:
    return OptimizerState("sgd_momentum", lr, momentum=momentum)


def adam(lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
         bias_correction: bool = True) -> OptimizerState:
    return OptimizerState("adam", lr, beta1=beta1, beta2=beta2, epsilon=eps, bias_correction=bias_correction)


def optimizer_step(state: OptimizerState, params: dict) -> None:
    """Update ``params`` (name -> Tensor) in place from their ``.grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.steps += 1
    t = state.steps
    for name, p in params.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        if state.kind == "sgd_momentum":
            v = state.buffers.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.buffers[name] = v
            p.data = p.data - state.learning_rate * v
        else:
            m, v = state.buffers.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.buffers[name] = (m, v)
            if state.bias_correction:
                mhat = m / (1 - state.beta1 ** t)
                vhat = v / (1 - state.beta2 ** t)
            else:
                mhat, vhat = m, v
            p.data = (p.data - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.data.dtype)


def zero_grad(params: dict) -> None:
    for p in params.values():
        p.grad = None


class Optimizer:
    """Binds an OptimizerState to a parameter dict."""

    def __init__(self, params: dict, state: OptimizerState):
        self.params: dict[str, Tensor] = params
        self.state = state

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    def zero_grad(self) -> None:
        zero_grad(self.params)
