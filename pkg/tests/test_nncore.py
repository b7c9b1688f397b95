from __future__ import annotations

import numpy as np
import pytest

from gaitmtl import nncore as nn
from gaitmtl.errors import InvalidBatch, InvalidLabel, NumericalError


def conv_oracle(x, w, b):
    """Valid cross-correlation by explicit loops; x (C, L), w (O, C, k)."""
    O, C, k = w.shape
    L = x.shape[1] - k + 1
    out = np.zeros((O, L))
    for o in range(O):
        for i in range(L):
            out[o, i] = np.sum(w[o] * x[:, i:i + k]) + b[o]
    return out


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_conv_forward_matches_loops(rng):
    x = rng.normal(size=(3, 12))
    w = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=4)
    out, _ = nn.conv_forward(x, w, b)
    assert out.shape == (4, 8)
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-12)
    batched, _ = nn.conv_forward(np.stack([x, 2 * x]), w, b)
    np.testing.assert_allclose(batched[1], conv_oracle(2 * x, w, b), atol=1e-12)


def test_conv_valid_length():
    out, _ = nn.conv_forward(np.ones((6, 200)), np.ones((10, 6, 5)), np.zeros(10))
    assert out.shape == (10, 196)


def test_conv_backward_numeric(rng):
    x = rng.normal(size=(2, 3, 10))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    R = rng.normal(size=(2, 4, 8))
    out, cache = nn.conv_forward(x, w, b)
    gx, gw, gb = nn.conv_backward(R, cache)

    def f():
        return float(np.sum(nn.conv_forward(x, w, b)[0] * R))

    np.testing.assert_allclose(gx, numeric_grad(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gw, numeric_grad(f, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(f, b), rtol=1e-6, atol=1e-8)


def test_batchnorm_train_forward(rng):
    x = rng.normal(3.0, 2.0, size=(8, 4, 5))
    st = nn.BatchNormState.fresh(4)
    st.gamma = rng.uniform(0.5, 2, 4)
    st.beta = rng.normal(size=4)
    out, _ = nn.batchnorm_forward(x, st)
    mu = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2))
    want = (x - mu[None, :, None]) / np.sqrt(var[None, :, None] + 1e-5) * st.gamma[None, :, None] + st.beta[None, :, None]
    np.testing.assert_allclose(out, want, atol=1e-12)
    n = 8 * 5
    np.testing.assert_allclose(st.running_mean, 0.1 * mu)
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * var * n / (n - 1))


def test_batchnorm_eval_uses_running(rng):
    st = nn.BatchNormState.fresh(3)
    st.running_mean = np.array([1.0, 2.0, 3.0])
    st.running_var = np.array([4.0, 1.0, 0.25])
    st.mode = "eval"
    x = rng.normal(size=(1, 3, 6))
    out, _ = nn.batchnorm_forward(x, st)
    want = (x - st.running_mean[None, :, None]) / np.sqrt(st.running_var[None, :, None] + 1e-5)
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_batchnorm_train_needs_two():
    with pytest.raises(InvalidBatch):
        nn.batchnorm_forward(np.ones((1, 2, 5)), nn.BatchNormState.fresh(2))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_backward_numeric(rng, mode):
    x = rng.normal(size=(4, 3, 5))
    st = nn.BatchNormState.fresh(3)
    st.gamma = rng.uniform(0.5, 2, 3)
    st.beta = rng.normal(size=3)
    st.running_mean = rng.normal(size=3)
    st.running_var = rng.uniform(0.5, 2, 3)
    st.mode = mode
    R = rng.normal(size=x.shape)
    _, cache = nn.batchnorm_forward(x, st, update_stats=False)
    gx, gg, gb = nn.batchnorm_backward(R, cache)

    def f():
        return float(np.sum(nn.batchnorm_forward(x, st, update_stats=False)[0] * R))

    np.testing.assert_allclose(gx, numeric_grad(f, x), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gg, numeric_grad(f, st.gamma), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(f, st.beta), rtol=1e-5, atol=1e-8)


def test_relu_and_backward():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nn.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_backward(np.ones(3), x), [0, 0, 1])


def test_maxpool_ties_and_odd_length():
    x = np.array([[1.0, 1.0, 3.0, 2.0, 9.0]])
    out, cache = nn.maxpool_forward(x)
    np.testing.assert_array_equal(out, [[1.0, 3.0]])
    g = nn.maxpool_backward(np.array([[5.0, 7.0]]), cache)
    np.testing.assert_array_equal(g, [[5.0, 0.0, 7.0, 0.0, 0.0]])


def test_fc_backward_numeric(rng):
    x = rng.normal(size=(3, 5))
    W = rng.normal(size=(5, 2))
    b = rng.normal(size=2)
    R = rng.normal(size=(3, 2))
    gx, gw, gb = nn.fc_backward(R, x, W)

    def f():
        return float(np.sum(nn.fc_forward(x, W, b) * R))

    np.testing.assert_allclose(gx, numeric_grad(f, x), rtol=1e-6)
    np.testing.assert_allclose(gw, numeric_grad(f, W), rtol=1e-6)
    np.testing.assert_allclose(gb, R.sum(axis=0))


def test_softmax_xent(rng):
    z = rng.normal(size=(4, 3)) * 5
    y = np.array([0, 2, 1, 2])
    loss, g = nn.softmax_xent(z, y)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-np.mean(logp[np.arange(4), y]), abs=1e-12)
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)

    def f():
        return nn.softmax_xent(z, y)[0]

    np.testing.assert_allclose(g, numeric_grad(f, z), rtol=1e-6, atol=1e-9)


def test_softmax_stable_and_bad_label():
    p = nn.softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)
    with pytest.raises(InvalidLabel):
        nn.softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


def test_mse(rng):
    a = rng.normal(size=(5, 2))
    t = rng.normal(size=(5, 2))
    loss, g = nn.mse_loss(a, t)
    assert loss == pytest.approx(np.mean((a - t) ** 2))
    np.testing.assert_allclose(g, 2 * (a - t) / a.size)


def test_adam_matches_hand_formula():
    p = nn.Param(np.array([1.0, -2.0]))
    opt = nn.Adam([p], lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 3.0])]
    m = v = np.zeros(2)
    want = np.array([1.0, -2.0])
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want = want - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.value, want, rtol=1e-14)


def test_adam_skips_frozen():
    a = nn.Param(np.ones(3))
    b = nn.Param(np.ones(3), trainable=False)
    opt = nn.Adam([a, b], lr=0.1)
    opt.zero_grad()
    a.grad += 1.0
    b.grad += 1.0
    opt.step()
    np.testing.assert_array_equal(b.value, np.ones(3))
    assert not np.any(opt.m[id(b)]) and not np.any(opt.v[id(b)])
    assert np.all(a.value < 1.0)


def test_adam_nan_grad_raises():
    p = nn.Param(np.ones(2))
    opt = nn.Adam([p])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError):
        opt.step()


def small_net(rng):
    return nn.Sequential([
        nn.Conv1d(3, 4, 3, rng), nn.BatchNorm1d(4), nn.ReLU(), nn.MaxPool1d(),
        nn.Flatten(), nn.Linear(16, 2, rng),
    ])


def test_grad_check_passes(rng):
    net = small_net(rng)
    x = rng.random((4, 10, 3))
    t = rng.normal(size=(4, 2))
    res = nn.grad_check(net, x, lambda o: nn.mse_loss(o, t))
    assert res.passed(1e-6), res
    assert res.n_checked == sum(p.value.size for p in net.params()) - res.n_kink_skipped


def test_grad_check_detects_wrong_gradient(rng):
    net = small_net(rng)
    lin = net.layers[-1]
    orig = lin.backward

    def broken(grad):
        gx = orig(grad)
        lin.weight.grad *= 1.01
        return gx

    lin.backward = broken
    x = rng.random((4, 10, 3))
    t = rng.normal(size=(4, 2))
    res = nn.grad_check(net, x, lambda o: nn.mse_loss(o, t))
    assert not res.passed(1e-6)
    assert res.max_rel_error > 1e-3


def test_frozen_batchnorm_uses_running_stats(rng):
    bn = nn.BatchNorm1d(3)
    bn.frozen = True
    x = rng.normal(size=(4, 5, 3))
    before = {k: v.copy() for k, v in bn.buffers().items()}
    out = bn.forward(x, train=True)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))
    for k, v in bn.buffers().items():
        np.testing.assert_array_equal(v, before[k])
