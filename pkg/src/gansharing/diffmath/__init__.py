"""Minimal dense-tensor engine with reverse-mode (and higher-order) differentiation."""

from . import functional
from .gradcheck import check_gradients, numeric_grad, relative_error
from .layers import (
    KINDS,
    Layer,
    LayerSpec,
    Sequential,
    ShapeError,
    build,
    forward,
    infer_shape,
)
from .optim import MissingGradError, Optimizer, OptimizerState, adam, optimizer_step, sgd_momentum
from .tensor import NonFiniteError, Tensor, enable_grad, grad, no_grad


def grad_of_output_wrt_input(net, x: Tensor, mode: str = "train", create_graph: bool = True) -> Tensor:
    """Per-sample gradient of a per-sample scalar network output w.r.t. its input.

    The result keeps its graph (``create_graph=True``) so a penalty built on it
    can be differentiated w.r.t. the network parameters.
    """
    import numpy as np

    if not x.requires_grad:
        x = Tensor(x.data, requires_grad=True)
    out = net(x, mode)
    if not (out.ndim == 1 or (out.ndim == 2 and out.shape[1] == 1)) or out.shape[0] != x.shape[0]:
        raise ShapeError(f"network output {out.shape} is not one scalar per sample for input {x.shape}")
    (g,) = grad(out, [x], grad_output=np.ones_like(out.data), create_graph=create_graph)
    return g


__all__ = [
    "KINDS", "Layer", "LayerSpec", "MissingGradError", "NonFiniteError", "Optimizer", "OptimizerState",
    "Sequential", "ShapeError", "Tensor", "adam", "build", "check_gradients", "enable_grad", "forward",
    "functional", "grad", "grad_of_output_wrt_input", "infer_shape", "no_grad", "numeric_grad",
    "optimizer_step", "relative_error", "sgd_momentum",
]
