"""Layer specifications, parameter construction, shape inference and forward passes."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .tensor import Tensor

INIT_STD = 0.02
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5

KINDS = (
    "conv2d", "conv2d_transpose", "linear", "batchnorm2d", "batchnorm1d", "relu",
    "leaky_relu", "tanh", "sigmoid", "log_softmax", "dropout", "window_attention",
    "patch_embed", "layer_norm", "max_pool2d", "flatten", "reshape", "patch_merge",
    "mean_pool",
)


class ShapeError(ValueError):
    pass


@dataclass
class LayerSpec:
    """A layer kind plus its hyperparameters, e.g. ``LayerSpec("conv2d", {"in_ch": 1, ...})``."""

    kind: str
    hp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.hp}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        obj = dict(obj)
        kind = obj.pop("kind")
        return cls(kind, obj)


# -- spec constructors ------------------------------------------------------
def _with_init(hp: dict, init_std) -> dict:
    if init_std is not None:
        hp["init_std"] = float(init_std)
    return hp


def conv2d(in_ch, out_ch, kernel, stride=1, padding=0, bias=True, init_std=None):
    return LayerSpec("conv2d", _with_init(dict(in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride,
                                               padding=padding, bias=bias), init_std))


def conv2d_transpose(in_ch, out_ch, kernel, stride=1, padding=0, bias=True, init_std=None):
    return LayerSpec("conv2d_transpose", _with_init(dict(in_ch=in_ch, out_ch=out_ch, kernel=kernel,
                                                         stride=stride, padding=padding, bias=bias), init_std))


def linear(in_features, out_features, bias=True, init_std=None):
    return LayerSpec("linear", _with_init(dict(in_features=in_features, out_features=out_features, bias=bias),
                                          init_std))


def batchnorm2d(channels):
    return LayerSpec("batchnorm2d", dict(channels=channels))


def batchnorm1d(features):
    return LayerSpec("batchnorm1d", dict(channels=features))


def relu():
    return LayerSpec("relu")


def leaky_relu(slope=0.2):
    return LayerSpec("leaky_relu", dict(slope=slope))


def tanh():
    return LayerSpec("tanh")


def sigmoid():
    return LayerSpec("sigmoid")


def log_softmax():
    return LayerSpec("log_softmax")


def dropout(rate=0.5):
    return LayerSpec("dropout", dict(rate=rate))


def layer_norm(dim):
    return LayerSpec("layer_norm", dict(dim=dim))


def max_pool2d(size=2):
    return LayerSpec("max_pool2d", dict(size=size))


def flatten():
    return LayerSpec("flatten")


def reshape(shape):
    return LayerSpec("reshape", dict(shape=list(shape)))


def patch_embed(size, in_ch, dim):
    return LayerSpec("patch_embed", dict(size=size, in_ch=in_ch, dim=dim))


def window_attention(dim, window, heads, shift, mlp_ratio=2):
    return LayerSpec("window_attention", dict(dim=dim, window=window, heads=heads, shift=shift,
                                              mlp_ratio=mlp_ratio))


def patch_merge(dim):
    return LayerSpec("patch_merge", dict(dim=dim))


def mean_pool():
    return LayerSpec("mean_pool")


# -- shape inference ----------------------------------------------------------
def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def infer_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Output shape (batch axis included) for an input of ``in_shape``."""
    k, hp = spec.kind, spec.hp
    s = tuple(in_shape)

    def need(ndim, what):
        if len(s) != ndim or (what is not None and s[-1 if ndim != 4 else 1] != what):
            raise ShapeError(f"{k}: expected {ndim}-D input with {what} channels/features, got {s}")

    if k == "conv2d":
        need(4, hp["in_ch"])
        if s[2] + 2 * hp["padding"] < hp["kernel"] or s[3] + 2 * hp["padding"] < hp["kernel"]:
            raise ShapeError(f"conv2d: kernel {hp['kernel']} larger than padded input {s}")
        return (s[0], hp["out_ch"], _conv_out(s[2], hp["kernel"], hp["stride"], hp["padding"]),
                _conv_out(s[3], hp["kernel"], hp["stride"], hp["padding"]))
    if k == "conv2d_transpose":
        need(4, hp["in_ch"])
        f = lambda n: (n - 1) * hp["stride"] - 2 * hp["padding"] + hp["kernel"]  # noqa: E731
        return (s[0], hp["out_ch"], f(s[2]), f(s[3]))
    if k == "linear":
        need(2, hp["in_features"])
        return (s[0], hp["out_features"])
    if k == "batchnorm2d":
        need(4, hp["channels"])
        return s
    if k == "batchnorm1d":
        need(2, hp["channels"])
        return s
    if k in ("relu", "leaky_relu", "tanh", "sigmoid", "dropout"):
        return s
    if k == "log_softmax":
        if len(s) != 2:
            raise ShapeError(f"log_softmax: expected (N, K) input, got {s}")
        return s
    if k == "layer_norm":
        if s[-1] != hp["dim"]:
            raise ShapeError(f"layer_norm: last axis {s[-1]} != dim {hp['dim']}")
        return s
    if k == "max_pool2d":
        if len(s) != 4 or s[2] % hp["size"] or s[3] % hp["size"]:
            raise ShapeError(f"max_pool2d: spatial dims of {s} not divisible by {hp['size']}")
        return (s[0], s[1], s[2] // hp["size"], s[3] // hp["size"])
    if k == "flatten":
        return (s[0], int(np.prod(s[1:])))
    if k == "reshape":
        target = tuple(hp["shape"])
        if int(np.prod(s[1:])) != int(np.prod(target)):
            raise ShapeError(f"reshape: cannot view {s} as (N, {target})")
        return (s[0],) + target
    if k == "patch_embed":
        need(4, hp["in_ch"])
        p = hp["size"]
        if s[2] % p or s[3] % p:
            raise ShapeError(f"patch_embed: input {s} not divisible by patch size {p}")
        return (s[0], s[2] // p, s[3] // p, hp["dim"])
    if k == "window_attention":
        w = hp["window"]
        if len(s) != 4 or s[3] != hp["dim"] or s[1] % w or s[2] % w:
            raise ShapeError(f"window_attention: expected (N, H, W, {hp['dim']}) with H, W "
                             f"divisible by {w}, got {s}")
        return s
    if k == "patch_merge":
        if len(s) != 4 or s[3] != hp["dim"] or s[1] % 2 or s[2] % 2:
            raise ShapeError(f"patch_merge: expected (N, even H, even W, {hp['dim']}), got {s}")
        return (s[0], s[1] // 2, s[2] // 2, 2 * hp["dim"])
    if k == "mean_pool":
        if len(s) != 4:
            raise ShapeError(f"mean_pool: expected (N, H, W, C) tokens, got {s}")
        return (s[0], s[3])
    raise ValueError(f"unknown layer kind {k!r}")


# -- parameters ---------------------------------------------------------------
def _normal(rng, shape, dtype, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _relative_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).reshape(-1)


def _shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask (nW, T, T) blocking pairs that were not adjacent before the roll."""
    region = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    win = win.reshape(-1, window * window)
    return np.where(win[:, :, None] != win[:, None, :], -100.0, 0.0)


@dataclass
class Layer:
    spec: LayerSpec
    params: dict
    buffers: dict = field(default_factory=dict)

    def __call__(self, x: Tensor, mode: str = "train", rng=None) -> Tensor:
        return forward(self, x, mode, rng)


def build(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> Layer:
    """Instantiate parameters: normal(0, std) weights, zero biases, unit norm scales.

    ``std`` is the layer's ``init_std`` hyperparameter when given, else 0.02.
    """
    k, hp = spec.kind, spec.hp
    std = hp.get("init_std", INIT_STD)
    p: dict = {}
    b: dict = {}
    if k == "conv2d":
        p["weight"] = _normal(rng, (hp["out_ch"], hp["in_ch"], hp["kernel"], hp["kernel"]), dtype, std)
        if hp.get("bias", True):
            p["bias"] = _zeros((hp["out_ch"],), dtype)
    elif k == "conv2d_transpose":
        p["weight"] = _normal(rng, (hp["in_ch"], hp["out_ch"], hp["kernel"], hp["kernel"]), dtype, std)
        if hp.get("bias", True):
            p["bias"] = _zeros((hp["out_ch"],), dtype)
    elif k == "linear":
        p["weight"] = _normal(rng, (hp["out_features"], hp["in_features"]), dtype, std)
        if hp.get("bias", True):
            p["bias"] = _zeros((hp["out_features"],), dtype)
    elif k in ("batchnorm2d", "batchnorm1d"):
        c = hp["channels"]
        p["gamma"], p["beta"] = _ones((c,), dtype), _zeros((c,), dtype)
        b["running_mean"] = np.zeros(c, dtype=dtype)
        b["running_var"] = np.ones(c, dtype=dtype)
    elif k == "layer_norm":
        p["gamma"], p["beta"] = _ones((hp["dim"],), dtype), _zeros((hp["dim"],), dtype)
    elif k == "patch_embed":
        p["weight"] = _normal(rng, (hp["dim"], hp["in_ch"], hp["size"], hp["size"]), dtype)
        p["bias"] = _zeros((hp["dim"],), dtype)
    elif k == "window_attention":
        c, wnd, heads = hp["dim"], hp["window"], hp["heads"]
        if c % heads:
            raise ValueError(f"window_attention: dim {c} not divisible by heads {heads}")
        hidden = int(c * hp.get("mlp_ratio", 2))
        p["norm1_gamma"], p["norm1_beta"] = _ones((c,), dtype), _zeros((c,), dtype)
        p["qkv_weight"], p["qkv_bias"] = _normal(rng, (3 * c, c), dtype), _zeros((3 * c,), dtype)
        p["rel_bias"] = _normal(rng, ((2 * wnd - 1) ** 2, heads), dtype)
        p["proj_weight"], p["proj_bias"] = _normal(rng, (c, c), dtype), _zeros((c,), dtype)
        p["norm2_gamma"], p["norm2_beta"] = _ones((c,), dtype), _zeros((c,), dtype)
        p["fc1_weight"], p["fc1_bias"] = _normal(rng, (hidden, c), dtype), _zeros((hidden,), dtype)
        p["fc2_weight"], p["fc2_bias"] = _normal(rng, (c, hidden), dtype), _zeros((c,), dtype)
    elif k == "patch_merge":
        c = hp["dim"]
        p["norm_gamma"], p["norm_beta"] = _ones((4 * c,), dtype), _zeros((4 * c,), dtype)
        p["weight"] = _normal(rng, (2 * c, 4 * c), dtype)
    return Layer(spec, p, b)


# -- forward ------------------------------------------------------------------
def _linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    out = F.matmul(x, F.swap_last(weight))
    return out if bias is None else out + bias


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = F.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = F.mean(xc * xc, axis=-1, keepdims=True)
    return xc / F.sqrt(var + LN_EPS) * gamma + beta


def _batchnorm(layer: Layer, x: Tensor, mode: str) -> Tensor:
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    view = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    gamma = F.reshape(layer.params["gamma"], view)
    beta = F.reshape(layer.params["beta"], view)
    rm, rv = layer.buffers["running_mean"], layer.buffers["running_var"]
    if mode == "train":
        n = int(np.prod([x.shape[a] for a in axes]))
        if n < 2:
            raise ShapeError(f"batchnorm in train mode needs >1 value per channel, got {x.shape}")
        mu = F.mean(x, axis=axes, keepdims=True)
        xc = x - mu
        var = F.mean(xc * xc, axis=axes, keepdims=True)
        xhat = xc / F.sqrt(var + BN_EPS)
        m = BN_MOMENTUM
        rm *= 1 - m
        rm += m * mu.data.reshape(-1).astype(rm.dtype)
        rv *= 1 - m
        rv += m * (var.data.reshape(-1) * n / (n - 1)).astype(rv.dtype)
    else:
        scale = 1.0 / np.sqrt(rv + BN_EPS)
        xhat = (x - Tensor(rm.reshape(view).astype(x.dtype))) * Tensor(scale.reshape(view).astype(x.dtype))
    return xhat * gamma + beta


def _window_attention(layer: Layer, x: Tensor) -> Tensor:
    hp, p = layer.spec.hp, layer.params
    n, h, w, c = x.shape
    wnd, heads, shift = hp["window"], hp["heads"], hp["shift"]
    if shift >= wnd and not (h == wnd and w == wnd):
        raise ShapeError(f"window_attention: shift {shift} must be smaller than window {wnd}")
    # a single window covering the map makes shifting meaningless
    if h == wnd and w == wnd:
        shift = 0
    t, d = wnd * wnd, c // heads

    shortcut = x
    y = _layer_norm(x, p["norm1_gamma"], p["norm1_beta"])
    if shift:
        y = F.roll(y, (-shift, -shift), (1, 2))
    nh, nw = h // wnd, w // wnd
    y = F.reshape(y, (n, nh, wnd, nw, wnd, c))
    y = F.transpose(y, (0, 1, 3, 2, 4, 5))
    y = F.reshape(y, (n * nh * nw, t, c))

    qkv = _linear(y, p["qkv_weight"], p["qkv_bias"])
    qkv = F.transpose(F.reshape(qkv, (n * nh * nw, t, 3, heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = F.matmul(q, F.swap_last(k)) * (d ** -0.5)
    bias = F.take(p["rel_bias"], _relative_index(wnd))
    bias = F.transpose(F.reshape(bias, (t, t, heads)), (2, 0, 1))
    logits = logits + F.reshape(bias, (1, heads, t, t))
    if shift:
        mask = _shift_mask(h, w, wnd, shift).astype(x.dtype)
        mask = np.broadcast_to(mask[None, :, None], (n, nh * nw, heads, t, t)).reshape(-1, heads, t, t)
        logits = logits + Tensor(mask)
    attn = F.softmax(logits, axis=-1)
    out = F.matmul(attn, v)
    out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (n * nh * nw, t, c))
    out = _linear(out, p["proj_weight"], p["proj_bias"])

    out = F.reshape(out, (n, nh, nw, wnd, wnd, c))
    out = F.reshape(F.transpose(out, (0, 1, 3, 2, 4, 5)), (n, h, w, c))
    if shift:
        out = F.roll(out, (shift, shift), (1, 2))
    x = shortcut + out

    y = _layer_norm(x, p["norm2_gamma"], p["norm2_beta"])
    y = F.relu(_linear(y, p["fc1_weight"], p["fc1_bias"]))
    y = _linear(y, p["fc2_weight"], p["fc2_bias"])
    return x + y


def forward(layer: Layer, x: Tensor, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Apply ``layer`` to ``x``. ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = layer.spec
    expected = infer_shape(spec, x.shape)
    out = _dispatch(layer, x, mode, rng)
    if out.shape != expected:
        raise ShapeError(f"{spec.kind}: executed shape {out.shape} != inferred {expected}")
    return out


def _dispatch(layer: Layer, x: Tensor, mode: str, rng) -> Tensor:
    k, hp, p = layer.spec.kind, layer.spec.hp, layer.params
    if k == "conv2d":
        return F.conv2d(x, p["weight"], p.get("bias"), hp["stride"], hp["padding"])
    if k == "conv2d_transpose":
        return F.conv_transpose2d(x, p["weight"], p.get("bias"), hp["stride"], hp["padding"])
    if k == "linear":
        return _linear(x, p["weight"], p.get("bias"))
    if k in ("batchnorm2d", "batchnorm1d"):
        return _batchnorm(layer, x, mode)
    if k == "relu":
        return F.relu(x)
    if k == "leaky_relu":
        return F.leaky_relu(x, hp.get("slope", 0.2))
    if k == "tanh":
        return F.tanh(x)
    if k == "sigmoid":
        return F.sigmoid(x)
    if k == "log_softmax":
        return F.log_softmax(x, axis=-1)
    if k == "dropout":
        rate = hp.get("rate", 0.5)
        if mode == "eval" or rate == 0:
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return F.mask_mul(x, keep)
    if k == "layer_norm":
        return _layer_norm(x, p["gamma"], p["beta"])
    if k == "max_pool2d":
        return F.max_pool2d(x, hp["size"])
    if k == "flatten":
        return F.reshape(x, (x.shape[0], -1))
    if k == "reshape":
        return F.reshape(x, (x.shape[0],) + tuple(hp["shape"]))
    if k == "patch_embed":
        y = F.conv2d(x, p["weight"], p["bias"], stride=hp["size"], padding=0)
        return F.transpose(y, (0, 2, 3, 1))
    if k == "window_attention":
        return _window_attention(layer, x)
    if k == "patch_merge":
        n, h, w, c = x.shape
        y = F.reshape(x, (n, h // 2, 2, w // 2, 2, c))
        y = F.reshape(F.transpose(y, (0, 1, 3, 4, 2, 5)), (n, h // 2, w // 2, 4 * c))
        y = _layer_norm(y, p["norm_gamma"], p["norm_beta"])
        return _linear(y, p["weight"], None)
    if k == "mean_pool":
        return F.mean(x, axis=(1, 2))
    raise ValueError(f"unknown layer kind {k!r}")


class Sequential:
    """Ordered list of built layers with named parameters and buffers."""

    def __init__(self, specs, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_json(s) for s in specs]
        self.layers = [build(s, rng, dtype) for s in self.specs]
        self.dtype = np.dtype(dtype)

    def __call__(self, x: Tensor, mode: str = "train", rng=None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        for layer in self.layers:
            x = forward(layer, x, mode, rng)
        return x

    def __len__(self):
        return len(self.layers)

    def infer_shape(self, in_shape) -> tuple:
        s = tuple(in_shape)
        for spec in self.specs:
            s = infer_shape(spec, s)
        return s

    def parameters(self) -> dict:
        return {f"{i}.{name}": t for i, layer in enumerate(self.layers) for name, t in layer.params.items()}

    def buffers(self) -> dict:
        return {f"{i}.{name}": a for i, layer in enumerate(self.layers) for name, a in layer.buffers.items()}

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def state_dict(self) -> dict:
        state = {k: t.data.copy() for k, t in self.parameters().items()}
        state.update({k: a.copy() for k, a in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params, bufs = self.parameters(), self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: stored shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=self.dtype)
        for i, layer in enumerate(self.layers):
            for name in layer.buffers:
                layer.buffers[name] = np.array(state[f"{i}.{name}"], dtype=self.dtype)

    def astype(self, dtype) -> "Sequential":
        clone = copy.deepcopy(self)
        clone.dtype = np.dtype(dtype)
        for layer in clone.layers:
            for t in layer.params.values():
                t.data = t.data.astype(dtype)
            for name in layer.buffers:
                layer.buffers[name] = layer.buffers[name].astype(dtype)
        return clone

    def kinds(self) -> list:
        return [s.kind for s in self.specs]

