"""Differentiable primitives.

Backward rules are expressed through these same primitives so that any
gradient can itself be differentiated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, Tensor, as_tensor


def _const(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype))


def _reduced_axes(src_shape: tuple, dst_shape: tuple):
    lead = len(src_shape) - len(dst_shape)
    axes = list(range(lead))
    for i, d in enumerate(dst_shape):
        if d == 1 and src_shape[lead + i] != 1:
            axes.append(lead + i)
    return lead, tuple(axes)


# ---------------------------------------------------------------- shape ops
class BroadcastTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    def backward(self, g):
        return (sum_to(g, self.in_shape),)


class SumTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        if a.shape == tuple(shape):
            return a.copy()
        lead, axes = _reduced_axes(a.shape, tuple(shape))
        out = a.sum(axis=axes, keepdims=True)
        return out.reshape(shape)

    def backward(self, g):
        return (broadcast_to(g, self.in_shape),)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return BroadcastTo.apply(a, shape=shape)


def sum_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return SumTo.apply(a, shape=shape)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (reshape(g, self.in_shape),)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        if self.axes is None:
            return (transpose(g, None),)
        return (transpose(g, tuple(np.argsort(self.axes))),)


def transpose(a: Tensor, axes=None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


class GetItem(Function):
    def forward(self, a, key):
        self.key, self.in_shape = key, a.shape
        return np.array(a[key])

    def backward(self, g):
        return (Embed.apply(g, key=self.key, shape=self.in_shape),)


class Embed(Function):
    """Adjoint of basic indexing: place ``a`` at ``key`` inside zeros of ``shape``."""

    def forward(self, a, key, shape):
        self.key = key
        out = np.zeros(shape, dtype=a.dtype)
        out[key] = a
        return out

    def backward(self, g):
        return (GetItem.apply(g, key=self.key),)


def getitem(a: Tensor, key) -> Tensor:
    return GetItem.apply(a, key=key)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Symmetric zero padding on the last two axes."""
    if pad == 0:
        return a
    shape = a.shape[:-2] + (a.shape[-2] + 2 * pad, a.shape[-1] + 2 * pad)
    key = (Ellipsis, slice(pad, pad + a.shape[-2]), slice(pad, pad + a.shape[-1]))
    return Embed.apply(a, key=key, shape=shape)


class Roll(Function):
    def forward(self, a, shift, axis):
        self.shift, self.axis = shift, axis
        return np.roll(a, shift, axis=axis)

    def backward(self, g):
        return (roll(g, tuple(-s for s in self.shift), self.axis),)


def roll(a: Tensor, shift, axis) -> Tensor:
    return Roll.apply(a, shift=tuple(shift), axis=tuple(axis))


class Take(Function):
    """Gather rows along axis 0 by an integer index array."""

    def forward(self, a, index):
        self.index, self.rows = index, a.shape[0]
        return a[index]

    def backward(self, g):
        return (TakeAdjoint.apply(g, index=self.index, rows=self.rows),)


class TakeAdjoint(Function):
    def forward(self, a, index, rows):
        self.index = index
        out = np.zeros((rows,) + a.shape[index.ndim:], dtype=a.dtype)
        np.add.at(out, index, a)
        return out

    def backward(self, g):
        return (Take.apply(g, index=self.index),)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    return Take.apply(a, index=np.asarray(index, dtype=np.intp))


# ------------------------------------------------------------- arithmetic
class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class Power(Function):
    def forward(self, a, exponent):
        self.exponent = exponent
        return a ** exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.exponent
        if p == 1:
            return (g,)
        if p == 2:
            return (mul(g, mul(a, _const(2.0, a))),)
        return (mul(g, mul(power(a, p - 1), _const(p, a))),)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def power(a, exponent: float):
    return Power.apply(a, exponent=float(exponent))


class MatMul(Function):
    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


# ------------------------------------------------------------- unary maths
class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (mul(g, self.out),)


class Log(Function):
    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):  # the finiteness check reports it
            return np.log(a)

    def backward(self, g):
        return (div(g, self.inputs[0]),)


class Sqrt(Function):
    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g):
        out = self.out
        return (div(g, mul(out, _const(2.0, out))),)


class Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g):
        out = self.out
        return (mul(g, sub(_const(1.0, out), mul(out, out))),)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign keeps exp from overflowing
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def backward(self, g):
        out = self.out
        return (mul(g, mul(out, sub(_const(1.0, out), out))),)


class MaskMul(Function):
    """Multiply by a constant array; used for piecewise-linear activations."""

    def forward(self, a, mask):
        self.mask = mask
        return a * mask

    def backward(self, g):
        return (MaskMul.apply(g, mask=self.mask),)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def tanh(a):
    return Tanh.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    return MaskMul.apply(a, mask=np.asarray(mask, dtype=a.dtype))


def relu(a: Tensor) -> Tensor:
    return mask_mul(a, a.data > 0)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    return mask_mul(a, np.where(a.data > 0, 1.0, slope))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    offset = np.where(a.data < lo, lo, np.where(a.data > hi, hi, 0.0)).astype(a.dtype)
    return add(mask_mul(a, inside), _const(offset, a))


# --------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.in_shape = a.shape
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            shape = list(self.in_shape)
            for ax in self.axis:
                shape[ax] = 1
            g = reshape(g, shape)
        return (broadcast_to(g, self.in_shape),)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), _const(1.0 / n, a))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = sub(a, _const(m, a))
    return add(log(sum(exp(shifted), axis=axis, keepdims=True)), _const(m, a))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = exp(sub(a, _const(m, a)))
    return div(e, sum(e, axis=axis, keepdims=True))


# ------------------------------------------------------------ convolutions
class Unfold(Function):
    """im2col: (N, C, H, W) -> (C*kh*kw, N*Ho*Wo) for stride ``stride``."""

    def forward(self, a, kernel, stride):
        n, c, h, w = a.shape
        kh, kw = kernel
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        self.meta = (a.shape, kernel, stride, ho, wo)
        win = sliding_window_view(a, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
        return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)

    def backward(self, g):
        shape, kernel, stride, ho, wo = self.meta
        return (Fold.apply(g, shape=shape, kernel=kernel, stride=stride, out_hw=(ho, wo)),)


class Fold(Function):
    """col2im, the adjoint of Unfold: overlapping windows are summed."""

    def forward(self, cols, shape, kernel, stride, out_hw):
        n, c, h, w = shape
        kh, kw = kernel
        ho, wo = out_hw
        self.meta = (shape, kernel, stride)
        blocks = cols.reshape(c, kh, kw, n, ho, wo)
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    blocks[:, i, j].transpose(1, 0, 2, 3)
        return out

    def backward(self, g):
        shape, kernel, stride = self.meta
        return (Unfold.apply(g, kernel=kernel, stride=stride),)


def unfold(a: Tensor, kernel, stride: int) -> Tensor:
    return Unfold.apply(a, kernel=tuple(kernel), stride=int(stride))


def fold(cols: Tensor, shape, kernel, stride: int, out_hw) -> Tensor:
    return Fold.apply(cols, shape=tuple(shape), kernel=tuple(kernel), stride=int(stride),
                      out_hw=tuple(out_hw))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (N, Ci, H, W), weight (Co, Ci, kh, kw) -> (N, Co, Ho, Wo)."""
    n = x.shape[0]
    co, ci, kh, kw = weight.shape
    xp = pad2d(x, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cols = unfold(xp, (kh, kw), stride)
    out = matmul(reshape(weight, (co, ci * kh * kw)), cols)
    out = transpose(reshape(out, (co, n, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        out = add(out, reshape(bias, (1, co, 1, 1)))
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """x (N, Ci, H, W), weight (Ci, Co, kh, kw) -> (N, Co, (H-1)s-2p+kh, ...)."""
    n, ci, h, w = x.shape
    _, co, kh, kw = weight.shape
    x2 = reshape(transpose(x, (1, 0, 2, 3)), (ci, n * h * w))
    cols = matmul(swap_last(reshape(weight, (ci, co * kh * kw))), x2)
    full = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    out = fold(cols, (n, co) + full, (kh, kw), stride, (h, w))
    if padding:
        out = getitem(out, (slice(None), slice(None), slice(padding, full[0] - padding),
                            slice(padding, full[1] - padding)))
    if bias is not None:
        out = add(out, reshape(bias, (1, co, 1, 1)))
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d({size}) needs spatial dims divisible by {size}, got {x.shape}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    winner = np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, winner[..., None], 1.0, axis=-1)
    mask = onehot.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
    picked = mask_mul(x, mask)
    return sum(reshape(picked, (n, c, h // size, size, w // size, size)), axis=(3, 5))


def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (N, K) log-probabilities."""
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros(log_probs.shape, dtype=log_probs.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = sum(mask_mul(log_probs, onehot))
    return mul(picked, _const(-1.0 / len(labels), log_probs))

