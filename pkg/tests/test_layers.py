import math

import numpy as np
import pytest

from gramreg.errors import DimensionError, DomainError, StateError
from gramreg.gradcheck import check_layer, rel_error
from gramreg.layers import Conv2D, Dense, LSTMCell, ReLU, ViewMaxPool, ViewMean, softmax_ce


def test_dense_examples():
    d = Dense("fc", 2, 1)
    d.weight[...] = [[1, 2]]
    assert d.forward(np.array([[3.0, 4.0]])).tolist() == [[11.0]]
    e = Dense("fc", 3, 3)
    e.weight[...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(e.forward(x), x)
    e.weight[...] = 0
    e.bias[...] = [1, 2, 3]
    np.testing.assert_array_equal(e.forward(x), [[1, 2, 3], [1, 2, 3]])


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        Dense("fc", 3, 2).forward(np.ones((1, 4)))


def test_conv_examples():
    c = Conv2D("c", 1, 1, 2)
    c.weight[...] = 1
    assert c.forward(np.array([[[[1.0, 2], [3, 4]]]])).tolist() == [[[[10.0]]]]
    ident = Conv2D("c", 1, 1, 1)
    ident.weight[...] = 1
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    np.testing.assert_array_equal(ident.forward(x), x)
    z = Conv2D("c", 1, 2, 3)
    z.bias[...] = [0.5, -1]
    out = z.forward(x)
    np.testing.assert_array_equal(out[:, 0], 0.5)
    np.testing.assert_array_equal(out[:, 1], -1)


def test_conv_matches_direct_loop(rng):
    c = Conv2D("c", 2, 3, 3, stride=2)
    c.init(rng)
    c.bias[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 7, 7))
    y = c.forward(x)
    for b in range(2):
        for n in range(3):
            for oy in range(3):
                for ox in range(3):
                    patch = x[b, :, 2 * oy:2 * oy + 3, 2 * ox:2 * ox + 3]
                    assert y[b, n, oy, ox] == pytest.approx(np.sum(patch * c.weight[n]) + c.bias[n], rel=1e-12)


def test_conv_rejects_non_tiling_extent():
    with pytest.raises(DimensionError):
        Conv2D("c", 1, 8, 5, stride=2).output_size(32, 32)
    assert Conv2D("c", 1, 8, 4, stride=2).output_size(32, 32) == (15, 15)


def test_view_max_pool_examples():
    p = ViewMaxPool("p")
    x = np.array([[1.0, 5], [4, 2]])  # one shape, two views
    assert p.forward(x, 2).tolist() == [[4.0, 5.0]]
    single = np.array([[3.0, -1.0]])
    np.testing.assert_array_equal(p.forward(single, 1), single)


def test_view_max_pool_ties_route_to_first_view():
    p = ViewMaxPool("p")
    assert p.forward(np.array([[2.0, 2], [2, 2]]), 2).tolist() == [[2.0, 2.0]]
    dx = p.backward(np.array([[1.0, 1.0]]))
    assert dx.tolist() == [[1.0, 1.0], [0.0, 0.0]]


def test_view_pool_rejects_zero_views():
    with pytest.raises(DomainError):
        ViewMaxPool("p").forward(np.ones((2, 3)), 0)
    with pytest.raises(DomainError):
        ViewMean("m").forward(np.ones((2, 3)), 0)


def test_view_mean_examples():
    m = ViewMean("m")
    assert m.forward(np.array([[2.0], [4.0]]), 2).tolist() == [[3.0]]
    assert m.forward(np.array([[1.0, 0], [0, 1]]), 2).tolist() == [[0.5, 0.5]]
    same = np.array([[1.5, -2.0]] * 3)
    np.testing.assert_array_equal(m.forward(same, 3), same[:1])


def test_lstm_zero_fixed_point():
    cell = LSTMCell("lstm", 3, 4)
    z = np.zeros((2, 4))
    h, s, gates = cell.step(np.ones((2, 3)), z, z)
    np.testing.assert_array_equal(gates["g"], 0)
    for g in "ifo":
        np.testing.assert_array_equal(gates[g], 0.5)
    np.testing.assert_array_equal(s, 0)
    np.testing.assert_array_equal(h, 0)


def test_lstm_forget_saturation(rng):
    cell = LSTMCell("lstm", 3, 4)
    cell.init(rng)
    cell.p("b_f")[...] = 50
    x, h_prev, s_prev = rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    h, s, gates = cell.step(x, h_prev, s_prev)
    np.testing.assert_allclose(gates["f"], 1.0, atol=1e-15)
    np.testing.assert_allclose(s, s_prev + gates["g"] * gates["i"], atol=1e-15)


def test_lstm_zero_input_zero_recurrence():
    cell = LSTMCell("lstm", 3, 4)
    cell.p("b_g")[...] = 1.0
    cell.p("b_i")[...] = -2.0
    z = np.zeros((1, 4))
    h, s, _ = cell.step(np.zeros((1, 3)), z, z)
    # s = tanh(1) * sigmoid(-2) != 0, h = tanh(s) * sigmoid(0) != 0 unless g or i is zeroed
    cell.p("b_g")[...] = 0.0
    h, s, _ = cell.step(np.zeros((1, 3)), z, z)
    np.testing.assert_array_equal(h, 0)


def test_lstm_step_shape_mismatch():
    cell = LSTMCell("lstm", 3, 4)
    with pytest.raises(DimensionError):
        cell.forward(np.ones((4, 5)), 2)


def test_softmax_examples():
    loss, _ = softmax_ce(np.zeros((1, 3)), np.array([1]))
    assert loss == pytest.approx(math.log(3), rel=1e-15)
    loss, grad = softmax_ce(np.array([[60.0, 0, 0]]), np.array([0]))
    assert loss < 1e-20
    assert np.all(np.isfinite(grad))


def test_softmax_gradient_fd(rng):
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, 4)
    _, grad = softmax_ce(logits, labels)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    fd = np.zeros_like(logits)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        fd[idx] = (softmax_ce(lp, labels)[0] - softmax_ce(lm, labels)[0]) / (2 * h)
    assert rel_error(grad, fd).max() < 1e-6


def test_softmax_label_range():
    with pytest.raises(DomainError):
        softmax_ce(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        softmax_ce(np.zeros((2, 3)), np.array([0]))


@pytest.mark.parametrize("layer", [Dense("fc", 2, 2), Conv2D("c", 1, 1, 1), ReLU("r"), ViewMaxPool("p"), ViewMean("m"), LSTMCell("l", 2, 2)])
def test_backward_before_forward(layer):
    with pytest.raises(StateError):
        layer.backward(np.zeros((1, 2)))


@pytest.mark.parametrize("layout", ["fc", "conv", "lstm"])
def test_layer_backward_matches_fd(layout):
    result = check_layer(layout, trials=3, seed=1)
    assert result.ok, result


def test_regularized_matrices_of_lstm():
    cell = LSTMCell("lstm", 3, 4)
    names = [pname for _, pname in cell.layer_weights()]
    assert len(names) == 8
    lws = [lw for lw, _ in cell.layer_weights()]
    assert all(lw.layout == "lstm_gate" for lw in lws)
    assert all(lw.shape in ((4, 3, 1), (4, 4, 1)) for lw in lws)
