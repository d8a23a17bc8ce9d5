import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference, relative_error

from trajdet import autodiff as ad
from trajdet.autodiff import ShapeError, Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def check_grads(build, tensors, tol=1e-3):
    """Compare backward() against central differences for every tensor in ``tensors``."""
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward()
    for t in tensors:
        numeric = central_difference(lambda: build().item(), t.data)
        err = relative_error(t.grad, numeric)
        assert err.max() <= tol, f"max relative error {err.max():.2e} for tensor of shape {t.shape}"


def weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(y, w))


def test_conv_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    k = Tensor(rng.normal(size=(3, 4, 5)))
    y = ad.conv1d_causal_dilated(Tensor(np.zeros((2, 10, 4))), k, dilation=2)
    assert y.shape == (2, 10, 5)
    assert np.all(y.data == 0)


def test_softmax_uniform():
    assert np.allclose(ad.softmax(Tensor(np.zeros(4))).data, 0.25, atol=0, rtol=0)


def test_dilated_receptive_field_probe():
    rng = np.random.default_rng(1)
    k = Tensor(rng.normal(size=(3, 1, 1)))
    x = rng.normal(size=(1, 30, 1))
    t = 20
    base = ad.conv1d_causal_dilated(Tensor(x), k, dilation=4).data[0, t, 0]

    def probe(lag):
        x2 = x.copy()
        x2[0, t - lag, 0] += 1.0
        return ad.conv1d_causal_dilated(Tensor(x2), k, dilation=4).data[0, t, 0]

    assert probe(8) != base
    assert probe(9) == base
    assert [lag for lag in range(0, 15) if probe(lag) != base] == [0, 4, 8]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), t=st.integers(2, 32), dil=st.sampled_from([1, 2, 4, 8]), taps=st.integers(1, 4))
def test_conv_is_causal(seed, t, dil, taps):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.normal(size=(taps, 3, 2)))
    x = rng.normal(size=(2, t, 3))
    cut = int(rng.integers(0, t))
    x2 = x.copy()
    x2[:, cut + 1 :] = rng.normal(size=x2[:, cut + 1 :].shape)
    y1 = ad.conv1d_causal_dilated(Tensor(x), k, dil).data
    y2 = ad.conv1d_causal_dilated(Tensor(x2), k, dil).data
    assert np.array_equal(y1[:, : cut + 1], y2[:, : cut + 1])


def test_linear_case_gradient():
    x = np.array([[1.0, -2.0, 3.0]])
    W = Tensor(np.ones((3, 2)), requires_grad=True)
    ad.sum_(ad.matmul(Tensor(x), W)).backward()
    assert np.array_equal(W.grad, np.tile(x.T, (1, 2)))


def test_softmax_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(2)
    logits = leaf(rng, 5, 4)
    targets = np.array([0, 3, 1, 1, 2])
    p = ad.softmax(logits, axis=-1)
    ad.cross_entropy(p, targets).backward()
    expected = p.data.copy()
    expected[np.arange(5), targets] -= 1.0
    assert np.allclose(logits.grad, expected / 5, atol=1e-12)


def test_cross_entropy_values():
    assert ad.cross_entropy(Tensor([[0.0, 1.0, 0.0, 0.0]]), [1]).item() == 0.0
    assert math.isclose(ad.cross_entropy(Tensor(np.full((1, 4), 0.25)), [2]).item(), math.log(4), rel_tol=1e-15)
    assert math.isclose(ad.cross_entropy(Tensor([[1.0, 0.0, 0.0, 0.0]]), [1]).item(), -math.log(1e-12))
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4), size=6)
    y = rng.integers(0, 4, 6)
    per = [ad.cross_entropy(Tensor(p[i : i + 1]), y[i : i + 1]).item() for i in range(6)]
    assert math.isclose(ad.cross_entropy(Tensor(p), y).item(), np.mean(per), rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rows=st.integers(1, 32), cols=st.integers(1, 32))
def test_softmax_rows(seed, rows, cols):
    x = np.random.default_rng(seed).normal(scale=20, size=(rows, cols))
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(y > 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-9, rtol=0)


dims = st.integers(1, 6)


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 10_000), b=dims, n=dims, m=dims, k=dims)
def test_gradcheck_matmul_add_mul(seed, b, n, m, k):
    rng = np.random.default_rng(seed)
    A, B, C = leaf(rng, b, n, m), leaf(rng, m, k), leaf(rng, k)
    w = rng.normal(size=(b, n, k))
    check_grads(lambda: weighted_sum(ad.mul(ad.add(ad.matmul(A, B), C), ad.tanh(ad.matmul(A, B))), w), [A, B, C])


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000), b=dims, h=st.integers(1, 3), t=dims, d=dims)
def test_gradcheck_batched_matmul(seed, b, h, t, d):
    rng = np.random.default_rng(seed)
    A, B = leaf(rng, b, h, t, d), leaf(rng, b, h, d, t)
    w = rng.normal(size=(b, h, t, t))
    check_grads(lambda: weighted_sum(ad.matmul(A, B), w), [A, B])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 32), cin=st.integers(1, 5), cout=st.integers(1, 5), taps=st.integers(1, 3), dil=st.sampled_from([1, 2, 4, 8, 16]))
def test_gradcheck_conv(seed, t, cin, cout, taps, dil):
    rng = np.random.default_rng(seed)
    x, k, bias = leaf(rng, 2, t, cin), leaf(rng, taps, cin, cout), leaf(rng, cout)
    w = rng.normal(size=(2, t, cout))
    check_grads(lambda: weighted_sum(ad.conv1d_causal_dilated(x, k, dil, bias), w), [x, k, bias])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), b=dims, half=st.integers(1, 8))
def test_gradcheck_gated_relu_sigmoid(seed, b, half):
    rng = np.random.default_rng(seed)
    x = leaf(rng, b, 2 * half)
    w = rng.normal(size=(b, half))
    w2 = rng.normal(size=(b, 2 * half))
    check_grads(lambda: weighted_sum(ad.gated_activation(x), w) + weighted_sum(ad.relu(x), w2) + weighted_sum(ad.sigmoid(x), w2), [x])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), b=dims, t=dims, d=st.integers(2, 32))
def test_gradcheck_layer_norm(seed, b, t, d):
    rng = np.random.default_rng(seed)
    x, g, beta = leaf(rng, b, t, d), leaf(rng, d), leaf(rng, d)
    w = rng.normal(size=(b, t, d))
    check_grads(lambda: weighted_sum(ad.layer_norm(x, g, beta), w), [x, g, beta])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), b=dims, t=dims, d=dims, axis=st.sampled_from([0, 1, -1]))
def test_gradcheck_softmax_mean_concat(seed, b, t, d, axis):
    rng = np.random.default_rng(seed)
    x, y = leaf(rng, b, t, d), leaf(rng, b, t, d)
    w = rng.normal(size=(b, t, d))
    wm = rng.normal(size=np.delete(np.array([b, t, d]), axis % 3))
    wc = rng.normal(size=(b, t, 2 * d))

    def build():
        return (
            weighted_sum(ad.softmax(x, axis=axis), w)
            + weighted_sum(ad.mean(y, axis=axis), wm)
            + weighted_sum(ad.concat([x, y], axis=-1), wc)
        )

    check_grads(build, [x, y])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), b=dims, c=st.integers(2, 6))
def test_gradcheck_cross_entropy(seed, b, c):
    rng = np.random.default_rng(seed)
    logits = leaf(rng, b, c)
    y = rng.integers(0, c, b)
    check_grads(lambda: ad.cross_entropy(ad.softmax(logits), y), [logits])


def test_gradcheck_reshape_transpose_linear():
    rng = np.random.default_rng(5)
    x, W, bias = leaf(rng, 2, 3, 4), leaf(rng, 4, 6), leaf(rng, 6)
    w = rng.normal(size=(3, 2, 2, 3))

    def build():
        y = ad.linear(x, W, bias)
        return weighted_sum(ad.transpose(ad.reshape(y, (2, 3, 2, 3)), (1, 0, 2, 3)), w)

    check_grads(build, [x, W, bias])


def test_shared_node_gradient_accumulates():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.sum_(ad.add(y, y)).backward()
    assert np.array_equal(x.grad, 4 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        ad.mul(x, 2.0).backward()


def test_shape_errors_name_both_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.add(a, b)
    with pytest.raises(ShapeError, match=r"\(1, 4, 2\).*\(3, 3, 2\)"):
        ad.conv1d_causal_dilated(Tensor(np.ones((1, 4, 2))), Tensor(np.ones((3, 3, 2))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    params = {"a": leaf(rng, 2, 3), "b": leaf(rng, 4)}
    ad.save_params(params, tmp_path / "p.json")
    back = ad.load_params(tmp_path / "p.json")
    assert set(back) == {"a", "b"}
    for k in params:
        assert np.array_equal(back[k], params[k].data)
    (tmp_path / "bad.json").write_text('{"format": "other", "params": {}}')
    with pytest.raises(ValueError, match="format"):
        ad.load_params(tmp_path / "bad.json")
