"""Recorded-graph reverse-mode differentiation over numpy arrays.

Every primitive's backward rule is itself written with differentiable
primitives, so gradients can be differentiated again when
``create_graph=True`` (needed for the gradient-penalty path).
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Iterable, Optional, Sequence

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Function:
    """A node in the recorded graph.

    Subclasses implement ``forward`` on raw arrays and ``backward`` on
    Tensors, returning one gradient (or None) per input.
    """

    inputs: tuple
    _out: Optional[weakref.ref] = None

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: "Tensor") -> tuple:
        raise NotImplementedError

    @property
    def out(self) -> "Tensor":
        t = self._out() if self._out is not None else None
        if t is None:
            raise RuntimeError(f"{type(self).__name__}: output tensor no longer alive")
        return t

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        fn = cls()
        fn.inputs = inputs
        data = fn.forward(*(t.data for t in inputs), **kwargs)
        if data.dtype.kind == "f" and not np.isfinite(data).all():
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs)
        if needs:
            out._ctx = fn
            fn._out = weakref.ref(out)
        return out


class Tensor:
    """n-dimensional real array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Optional[Function] = None
        self.name = name

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return F.add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return F.add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return F.sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return F.sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return F.mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return F.mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return F.div(self, as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return F.div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return F.neg(self)

    def __pow__(self, exponent: float):
        return F.power(self, exponent)

    def __matmul__(self, other):
        return F.matmul(self, as_tensor(other, self.dtype))

    def __getitem__(self, key):
        return F.getitem(self, key)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return F.transpose(self, None)

    def exp(self):
        return F.exp(self)

    def log(self):
        return F.log(self)

    def sqrt(self):
        return F.sqrt(self)

    def tanh(self):
        return F.tanh(self)

    def sigmoid(self):
        return F.sigmoid(self)

    def relu(self):
        return F.relu(self)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None, create_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Repeated calls accumulate; clear with ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if grad is None:
            grad = np.ones_like(self.data)
        for leaf, g in _backprop(self, grad, create_graph=create_graph):
            gd = g.data
            leaf.grad = gd.copy() if leaf.grad is None else leaf.grad + gd


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order


def _backprop(root: Tensor, root_grad, create_graph: bool,
              targets: Optional[Sequence[Tensor]] = None) -> list:
    """Propagate ``root_grad`` through the graph.

    Returns (tensor, grad) pairs for every reached leaf, or for ``targets``
    (leaf or not) when given.
    """
    if not root.requires_grad:
        raise RuntimeError("tensor does not require grad and has no recorded graph")
    g0 = root_grad if isinstance(root_grad, Tensor) else Tensor(np.asarray(root_grad, dtype=root.dtype))
    if g0.shape != root.shape:
        raise ValueError(f"gradient shape {g0.shape} does not match output shape {root.shape}")
    order = _toposort(root)
    grads: dict = {id(root): g0}
    wanted = {id(t) for t in targets} if targets is not None else None
    result = []
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if wanted is None or id(node) in wanted:
                    result.append((node, g))
                continue
            if wanted is not None and id(node) in wanted:
                result.append((node, g))
            parent_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return result


def grad(output: Tensor, inputs: Iterable[Tensor], grad_output=None,
         create_graph: bool = False) -> list:
    """Return d(output)/d(input) for each input as Tensors without touching ``.grad``.

    With ``create_graph=True`` the returned gradients carry a graph and can be
    differentiated again.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"grad() of non-scalar output {output.shape} needs grad_output")
        grad_output = np.ones_like(output.data)
    found = dict()
    for node, g in _backprop(output, grad_output, create_graph, targets=inputs):
        found[id(node)] = g
    out = []
    for t in inputs:
        g = found.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


from . import functional as F  # noqa: E402  (circular: functional builds on Tensor)
