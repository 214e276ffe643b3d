import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gansharing import diffmath as dm
from gansharing.diffmath import functional as F
from gansharing.diffmath import layers as L
from gansharing.diffmath.layers import LayerSpec

TOL = 1e-4


# -- per-layer random configurations ------------------------------------------------------
def _random_case(kind: str, rng: np.random.Generator):
    """(spec, input shape) for a small randomized instance of ``kind``."""
    n = int(rng.integers(1, 4))
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        side = int(rng.integers(k, k + 4))
        return L.conv2d(cin, cout, k, stride, pad, bias=bool(rng.integers(2))), (n, cin, side, side)
    if kind == "conv2d_transpose":
        k = int(rng.integers(1, 5))
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, min(k, 2)))
        side = int(rng.integers(1, 4))
        return L.conv2d_transpose(cin, cout, k, stride, pad), (n, cin, side, side)
    if kind == "linear":
        a, b = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        return L.linear(a, b, bias=bool(rng.integers(2))), (n, a)
    if kind == "batchnorm2d":
        c = int(rng.integers(1, 3))
        return L.batchnorm2d(c), (n + 1, c, 3, 2)
    if kind == "batchnorm1d":
        c = int(rng.integers(1, 4))
        return L.batchnorm1d(c), (n + 2, c)
    if kind == "layer_norm":
        d = int(rng.integers(2, 6))
        return L.layer_norm(d), (n, 2, d)
    if kind == "leaky_relu":
        return L.leaky_relu(float(rng.uniform(0.01, 0.5))), (n, 5)
    if kind == "dropout":
        return L.dropout(float(rng.uniform(0.1, 0.7))), (n, 6)
    if kind == "max_pool2d":
        return L.max_pool2d(2), (n, 2, 4, 4)
    if kind == "flatten":
        return L.flatten(), (n, 2, 3, 2)
    if kind == "reshape":
        return L.reshape((3, 4)), (n, 12)
    if kind == "patch_embed":
        size = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 3))
        return L.patch_embed(size, cin, int(rng.integers(2, 5))), (n, cin, 2 * size, 2 * size)
    if kind == "window_attention":
        heads = int(rng.integers(1, 3))
        dim = 2 * heads
        window = 2
        shift = int(rng.integers(0, 2))
        return L.window_attention(dim, window, heads, shift), (1, 4, 4, dim)
    if kind == "patch_merge":
        d = int(rng.integers(1, 3))
        return L.patch_merge(d), (n, 2, 4, d)
    if kind == "mean_pool":
        return L.mean_pool(), (n, 2, 3, 2)
    factory = getattr(L, kind)
    return factory(), (n, 4)


def _layer_check(kind: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    spec, shape = _random_case(kind, rng)
    layer = L.build(spec, rng, np.float64)
    for p in layer.params.values():
        # move away from the identity-ish init so every path carries signal
        p.data = p.data + rng.normal(0, 0.5, p.data.shape)
        p.requires_grad = True
    x = dm.Tensor(rng.normal(0, 1, shape), requires_grad=True)
    out_shape = L.infer_shape(spec, shape)
    w = dm.Tensor(rng.normal(0, 1, out_shape))

    def loss():
        return F.sum(L.forward(layer, x, "train", rng=np.random.default_rng(seed)) * w)

    return dm.check_gradients(loss, [x, *layer.params.values()])


GRAD_KINDS = [k for k in L.KINDS]


@pytest.mark.parametrize("kind", GRAD_KINDS)
def test_layer_gradients_match_finite_differences(kind):
    worst = max(_layer_check(kind, seed) for seed in range(20))
    assert worst < TOL, f"{kind}: relative error {worst:.2e}"


def test_conv_identity_kernel():
    x = dm.Tensor(np.random.default_rng(0).normal(size=(2, 1, 5, 7)))
    w = dm.Tensor(np.ones((1, 1, 1, 1)))
    assert np.array_equal(F.conv2d(x, w, None).data, x.data)


def test_conv_all_ones_kernel_sums_windows():
    out = F.conv2d(dm.Tensor(np.ones((1, 1, 4, 4))), dm.Tensor(np.ones((1, 1, 3, 3))), None)
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 9.0))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    stride, pad = 2, 1
    got = F.conv2d(dm.Tensor(x), dm.Tensor(w), dm.Tensor(b), stride, pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, oh, ow))
    for i in range(oh):
        for j in range(ow):
            win = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", win, w) + b
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(3, 2, 4, 4))  # conv weight (out=3, in=2)
    x = rng.normal(size=(1, 2, 8, 8))
    y = rng.normal(size=(1, 3, 4, 4))
    conv = F.conv2d(dm.Tensor(x), dm.Tensor(w), None, 2, 1).data
    # transpose weight layout is (in_ch, out_ch, k, k) = conv's (out, in, k, k)
    back = F.conv_transpose2d(dm.Tensor(y), dm.Tensor(w), None, 2, 1).data
    assert back.shape == x.shape
    assert abs(np.sum(conv * y) - np.sum(x * back)) < 1e-10


def test_batchnorm_train_mode_normalizes():
    rng = np.random.default_rng(2)
    layer = L.build(L.batchnorm2d(3), rng, np.float64)
    x = dm.Tensor(rng.normal(4.0, 3.0, (5, 3, 4, 4)))
    out = L.forward(layer, x, "train").data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4  # eps 1e-5 in the denominator


def test_batchnorm_eval_uses_running_statistics():
    rng = np.random.default_rng(3)
    layer = L.build(L.batchnorm1d(2), rng, np.float64)
    x = rng.normal(2.0, 1.5, (8, 2))
    L.forward(layer, dm.Tensor(x), "train")
    rm = 0.9 * 0 + 0.1 * x.mean(0)
    rv = 0.9 * 1 + 0.1 * x.var(0, ddof=1)
    np.testing.assert_allclose(layer.buffers["running_mean"], rm, rtol=1e-12)
    np.testing.assert_allclose(layer.buffers["running_var"], rv, rtol=1e-12)
    probe = rng.normal(size=(3, 2))
    out = L.forward(layer, dm.Tensor(probe), "eval").data
    np.testing.assert_allclose(out, (probe - rm) / np.sqrt(rv + L.BN_EPS), rtol=1e-10)


def test_sum_of_squares_gradient():
    x = dm.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    F.sum(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_until_zeroed():
    x = dm.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    F.sum(x * 3.0).backward()
    F.sum(x * 3.0).backward()
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    F.sum(x).backward()
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar():
    x = dm.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_non_finite_forward_is_an_error():
    with pytest.raises(dm.NonFiniteError):
        F.log(dm.Tensor(np.array([0.0, 1.0])))


def test_single_conv_mean_loss_gradcheck():
    rng = np.random.default_rng(11)
    x = dm.Tensor(rng.normal(size=(1, 1, 5, 5)), requires_grad=True)
    w = dm.Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
    b = dm.Tensor(rng.normal(size=2), requires_grad=True)
    assert dm.check_gradients(lambda: F.mean(F.conv2d(x, w, b, 1, 1) ** 2), [x, w, b]) < TOL


def test_linear_relu_log_softmax_nll_gradcheck():
    rng = np.random.default_rng(12)
    net = dm.Sequential([L.linear(4, 3), L.relu(), L.linear(3, 3), L.log_softmax()], rng, np.float64)
    for p in net.parameters().values():
        p.data = rng.normal(0, 1, p.data.shape)
    x = dm.Tensor(rng.normal(size=(6, 4)))
    y = np.array([0, 1, 2, 2, 1, 0])
    params = list(net.parameters().values())
    assert dm.check_gradients(lambda: F.nll_loss(net(x), y), params) < TOL


def _critic(kind: str, n_in: int, rng) -> dm.Sequential:
    if kind == "sum":
        net = dm.Sequential([L.flatten(), L.linear(n_in, 1, bias=False)], rng, np.float64)
        net.layers[1].params["weight"].data = np.ones((1, n_in))
        return net
    if kind == "half_square":
        return None
    net = dm.Sequential([L.flatten(), L.linear(n_in, 5), L.tanh(), L.linear(5, 1)], rng, np.float64)
    for p in net.parameters().values():
        p.data = rng.normal(0, 0.7, p.data.shape)
    return net


def test_input_gradient_of_sum_is_ones():
    rng = np.random.default_rng(0)
    net = _critic("sum", 6, rng)
    x = dm.Tensor(rng.normal(size=(3, 1, 2, 3)))
    assert np.array_equal(dm.grad_of_output_wrt_input(net, x).data, np.ones((3, 1, 2, 3)))


def test_input_gradient_of_half_square_is_identity():
    x = dm.Tensor(np.random.default_rng(1).normal(size=(4, 5)), requires_grad=True)
    g = dm.grad_of_output_wrt_input(lambda t, mode: F.sum(t * t, axis=1) * 0.5, x)
    np.testing.assert_allclose(g.data, x.data, rtol=0, atol=1e-15)


def test_input_gradient_rejects_non_scalar_output():
    net = dm.Sequential([L.linear(3, 2)], np.random.default_rng(0), np.float64)
    with pytest.raises(dm.ShapeError):
        dm.grad_of_output_wrt_input(net, dm.Tensor(np.ones((2, 3))))


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    net = _critic("mlp", 4, rng)
    x0 = rng.normal(size=(3, 4))
    g = dm.grad_of_output_wrt_input(net, dm.Tensor(x0)).data
    for i in range(3):
        xi = dm.Tensor(x0[i:i + 1].copy())
        num = dm.numeric_grad(lambda: F.sum(net(xi)), xi)
        assert dm.relative_error(g[i:i + 1], num) < TOL


def test_penalty_is_differentiable_in_parameters():
    rng = np.random.default_rng(8)
    net = _critic("mlp", 4, rng)
    x = dm.Tensor(rng.normal(size=(3, 4)))

    def penalty():
        g = dm.grad_of_output_wrt_input(net, x)
        return F.mean((F.sqrt(F.sum(g * g, axis=1)) - 1.0) ** 2)

    assert dm.check_gradients(penalty, list(net.parameters().values())) < TOL


# -- optimizers -----------------------------------------------------------------------------
def _param(value):
    p = dm.Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    return p


def test_sgd_first_step_is_plain_sgd():
    p = _param([1.0, -2.0])
    p.grad = np.array([0.5, 4.0])
    dm.optimizer_step(dm.sgd_momentum(0.001, 0.9), {"p": p})
    np.testing.assert_allclose(p.data, [1.0 - 0.0005, -2.0 - 0.004], rtol=0, atol=1e-15)


def test_sgd_momentum_second_delta():
    p = _param([0.0])
    p.grad = np.array([2.0])
    state = dm.sgd_momentum(0.001, 0.9)
    dm.optimizer_step(state, {"p": p})
    before = p.data.copy()
    dm.optimizer_step(state, {"p": p})
    np.testing.assert_allclose(before - p.data, [0.001 * 1.9 * 2.0], rtol=1e-12)


def test_adam_first_step_without_bias_correction():
    g = np.array([0.3, -2.0])
    p = _param([0.0, 0.0])
    p.grad = g.copy()
    lr, eps = 0.01, 1e-8
    dm.optimizer_step(dm.adam(lr, 0.0, 0.9, eps, bias_correction=False), {"p": p})
    np.testing.assert_allclose(p.data, -lr * g / (np.sqrt(0.1 * g * g) + eps), rtol=1e-12)


def test_adam_first_step_with_bias_correction_is_sign_step():
    g = np.array([0.3, -2.0])
    p = _param([0.0, 0.0])
    p.grad = g.copy()
    dm.optimizer_step(dm.adam(0.01, 0.5, 0.999, 0.0), {"p": p})
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-12)


def test_optimizer_leaves_grads_and_names_missing_ones():
    p, q = _param([1.0]), _param([2.0])
    p.grad = np.array([1.0])
    with pytest.raises(dm.MissingGradError, match="'q'"):
        dm.optimizer_step(dm.sgd_momentum(), {"p": p, "q": q})
    q.grad = np.array([1.0])
    state = dm.adam()
    dm.optimizer_step(state, {"p": p, "q": q})
    assert np.array_equal(p.grad, [1.0])
    for name, (m, v) in state.buffers.items():
        assert m.shape == v.shape == {"p": p, "q": q}[name].data.shape


# -- properties ---------------------------------------------------------------------------
@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=6), min_size=1, max_size=5)
       .filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_log_softmax_rows_normalize(rows):
    out = F.log_softmax(dm.Tensor(np.array(rows, dtype=np.float64))).data
    lse = np.log(np.exp(out).sum(axis=1))
    assert np.abs(lse).max() < 1e-6


def test_dropout_rate_and_eval_identity():
    rate, n = 0.5, 10_000
    layer = L.build(L.dropout(rate), np.random.default_rng(0), np.float64)
    x = dm.Tensor(np.ones((1, n)))
    out = L.forward(layer, x, "train", rng=np.random.default_rng(4)).data
    zeroed = np.mean(out == 0)
    sigma = np.sqrt(rate * (1 - rate) / n)
    assert abs(zeroed - rate) <= 3 * sigma
    assert np.array_equal(out[out != 0], np.full(np.count_nonzero(out), 2.0))
    assert np.array_equal(L.forward(layer, x, "eval").data, x.data)


@settings(max_examples=80, deadline=None)
@given(kind=st.sampled_from(GRAD_KINDS), seed=st.integers(0, 10_000))
def test_shape_inference_matches_execution(kind, seed):
    rng = np.random.default_rng(seed)
    spec, shape = _random_case(kind, rng)
    layer = L.build(spec, rng, np.float64)
    out = L._dispatch(layer, dm.Tensor(rng.normal(size=shape)), "train", np.random.default_rng(0))
    assert out.shape == L.infer_shape(spec, shape)


def test_shape_mismatch_names_layer_and_shapes():
    with pytest.raises(dm.ShapeError, match=r"conv2d.*\(2, 3, 8, 8\)"):
        L.infer_shape(L.conv2d(1, 4, 3), (2, 3, 8, 8))


def test_spec_json_round_trip():
    spec = L.window_attention(8, 4, 2, 2)
    assert LayerSpec.from_json(spec.to_json()) == spec


def _train(seed: int, steps: int) -> dict:
    rng = np.random.default_rng(seed)
    net = dm.Sequential([L.linear(3, 4), L.batchnorm1d(4), L.relu(), L.dropout(0.3), L.linear(4, 2),
                         L.log_softmax()], rng)
    opt = dm.adam(0.01)
    data = rng.normal(size=(16, 3)).astype(np.float32)
    y = (data[:, 0] > 0).astype(int)
    for _ in range(steps):
        net.zero_grad()
        F.nll_loss(net(dm.Tensor(data), "train", rng), y).backward()
        dm.optimizer_step(opt, net.parameters())
    return net.state_dict()


def test_training_is_bit_deterministic():
    a, b = _train(3, 6), _train(3, 6)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = _train(4, 6)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
