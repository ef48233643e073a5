import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from gradmark import autodiff as ad

finite = st.floats(-3.0, 3.0, allow_nan=False)


def numeric_grad(f, x, step=1e-6):
    out = np.zeros_like(x)
    flat, of = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + step
        up = f(x)
        flat[i] = v - step
        down = f(x)
        flat[i] = v
        of[i] = (up - down) / (2 * step)
    return out


def test_square_first_and_second_derivative():
    x = ad.Tensor(3.0, requires_grad=True)
    y = x * x
    (g,) = ad.grad(y, [x], create_graph=True)
    assert g.item() == 6.0
    (gg,) = ad.grad(g, [x])
    assert gg.item() == 2.0


def test_cube_third_derivative():
    x = ad.Tensor(2.0, requires_grad=True)
    y = x * x * x
    (g1,) = ad.grad(y, [x], create_graph=True)
    (g2,) = ad.grad(g1, [x], create_graph=True)
    (g3,) = ad.grad(g2, [x])
    assert (g1.item(), g2.item(), g3.item()) == (12.0, 12.0, 6.0)


def test_mixed_partial_of_product():
    x = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    w = ad.Tensor(np.array([0.5, 3.0]), requires_grad=True)
    y = ad.sum(ad.mul(ad.mul(x, x), w))
    (gx,) = ad.grad(y, [x], create_graph=True)
    (gw,) = ad.grad(ad.sum(gx), [w])
    # d/dw sum(2 x w) = 2 x
    np.testing.assert_allclose(gw.data, 2 * x.data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_elementwise_chain_matches_finite_differences(a):
    def f(v):
        with ad.no_record():
            t = ad.Tensor(v)
            return ad.sum(ad.mul(ad.sigmoid(t), ad.exp(ad.mul(t, 0.3)))).item()

    t = ad.Tensor(a.copy(), requires_grad=True)
    y = ad.sum(ad.mul(ad.sigmoid(t), ad.exp(ad.mul(t, 0.3))))
    (g,) = ad.grad(y, [t])
    np.testing.assert_allclose(g.data, numeric_grad(f, a.copy()), rtol=1e-6, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), st.integers(0, 4))
def test_softmax_cross_entropy_gradient_is_p_minus_onehot(logits, label):
    labels = np.full(4, label)
    t = ad.Tensor(logits, requires_grad=True)
    (g,) = ad.grad(ad.softmax_cross_entropy(t, labels, reduction="sum"), [t])
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = p.copy()
    expected[:, label] -= 1.0
    np.testing.assert_allclose(g.data, expected, atol=1e-12)


def test_softmax_cross_entropy_second_order_matches_finite_differences(rng):
    w = rng.standard_normal((5, 3))
    x0 = rng.standard_normal((2, 5))
    labels = np.array([0, 2])

    def input_grad_norm(wv):
        wt = ad.Tensor(wv, requires_grad=True)
        xt = ad.Tensor(x0, requires_grad=True)
        (gx,) = ad.grad(ad.softmax_cross_entropy(ad.matmul(xt, wt), labels), [xt], create_graph=True)
        return ad.sum(ad.mul(gx, gx)), wt

    y, wt = input_grad_norm(w)
    (gw,) = ad.grad(y, [wt])
    err = ad.finite_diff_check(lambda v: input_grad_norm(v)[0].item(), w.copy(), 1e-6, gw.data)
    assert err < 1e-6


def test_relu_and_clip_gradients():
    x = ad.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    (g,) = ad.grad(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 1.0])
    (g,) = ad.grad(ad.sum(ad.clip(x, 0.0, 1.0)), [x])
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 0.0])


def test_broadcast_and_reduction_gradients(rng):
    a = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((4,)), requires_grad=True)
    y = ad.sum(ad.mean(ad.mul(ad.add(a, b), ad.add(a, b)), axis=0))
    ga, gb = ad.grad(y, [a, b])
    s = a.data + b.data
    np.testing.assert_allclose(ga.data, 2 * s / 3)
    np.testing.assert_allclose(gb.data, (2 * s / 3).sum(axis=0))


def test_take_and_scatter_add_are_adjoint(rng):
    a = ad.Tensor(rng.standard_normal(6), requires_grad=True)
    idx = np.array([4, 1, 1])
    (g,) = ad.grad(ad.sum(ad.mul(ad.take(a, idx, axis=0), np.array([1.0, 2.0, 3.0]))), [a])
    np.testing.assert_allclose(g.data, [0, 5.0, 0, 0, 1.0, 0])


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv2d_matches_scipy_correlation(rng, padding):
    x = rng.standard_normal((2, 6, 5, 3))
    k = rng.standard_normal((3, 3, 3, 4))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), padding=padding).data
    mode = "valid" if padding == "valid" else "same"
    for n in range(2):
        for o in range(4):
            ref = sum(correlate(x[n, :, :, c], k[:, :, c, o], mode=mode) for c in range(3))
            np.testing.assert_allclose(out[n, :, :, o], ref, atol=1e-12)


def test_conv2d_gradients_match_finite_differences(rng):
    x0 = rng.standard_normal((1, 5, 5, 2))
    k0 = rng.standard_normal((3, 3, 2, 2))
    b0 = rng.standard_normal(2)

    def loss(xv, kv):
        return ad.sum(ad.sigmoid(ad.conv2d(ad.Tensor(xv), ad.Tensor(kv), ad.Tensor(b0), padding="same"))).item()

    xt, kt = ad.Tensor(x0, requires_grad=True), ad.Tensor(k0, requires_grad=True)
    gx, gk = ad.grad(ad.sum(ad.sigmoid(ad.conv2d(xt, kt, ad.Tensor(b0), padding="same"))), [xt, kt])
    assert ad.finite_diff_check(lambda v: loss(v, k0), x0.copy(), 1e-6, gx.data) < 1e-6
    assert ad.finite_diff_check(lambda v: loss(x0, v), k0.copy(), 1e-6, gk.data) < 1e-6


def test_unused_inputs_get_zero_gradients():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    b = ad.Tensor(np.ones(2), requires_grad=True)
    ga, gb = ad.grad(ad.sum(a), [a, b])
    np.testing.assert_array_equal(gb.data, np.zeros(2))


def test_log_of_zero_raises_non_finite():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Tensor(np.array([0.0, 1.0])))


def test_no_record_builds_no_graph():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_record():
        y = ad.mul(a, a)
    assert y.node is None


def test_traced_graph_replays_with_new_inputs(rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    graph = ad.ComputeGraph.trace(lambda t: ad.sum(ad.relu(ad.mul(t, t))), x)
    new = np.array([1.0, -2.0, 0.5, 3.0])
    (value,) = ad.forward(graph, {x: new})
    assert value == pytest.approx(np.sum(new**2))
    dgraph = ad.grad_graph(graph, [x])
    (g,) = ad.forward(dgraph, {x: new})
    np.testing.assert_allclose(g, 2 * new)


def test_finite_diff_check_reports_wrong_gradient():
    err = ad.finite_diff_check(lambda v: float(np.sum(v**2)), np.array([1.0, 2.0]), 1e-6, np.array([2.0, 3.0]))
    assert err == pytest.approx(0.25, rel=1e-6)
