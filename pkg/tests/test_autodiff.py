import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgbev import autodiff as ad
from mgbev.autodiff import Tensor

from gradcheck import check_gradients, numeric_grad, rel_err


def randt(rng, *shape, req=True):
    return Tensor(rng.standard_normal(shape), requires_grad=req)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = Tensor(np.arange(9.0).reshape(3, 3))
    eye = Tensor(np.eye(3))
    out = ad.matmul(eye, a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_forced_arithmetic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    out = ad.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", range(3))
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = randt(rng, 5, 4), randt(rng, 4, 3)
    probe = Tensor(rng.standard_normal((5, 3)))
    check_gradients(lambda: ad.tensor_sum(ad.multiply(ad.matmul(a, b), probe)),
                    [a, b], tol=1e-6)


# ---------------------------------------------------------------- conv2d


def test_conv2d_one_by_one_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5, 5)))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    out = ad.conv2d(x, Tensor(k), Tensor(np.zeros(3)), padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_impulse_plateau():
    x = np.zeros((1, 7, 7))
    x[0, 3, 3] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
    expected = np.zeros((1, 7, 7))
    expected[0, 2:5, 2:5] = 1.0
    np.testing.assert_array_equal(out.data, expected)


def test_conv2d_channel_mismatch():
    with pytest.raises(ad.ShapeError, match="channel mismatch"):
        ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
                  Tensor(np.zeros(1)), padding=1)


def test_conv2d_matches_direct_loops():
    # independent brute-force cross-correlation
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                ref[o, i, j] = (xp[:, i:i + 3, j:j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_conv2d_gradcheck(seed):
    rng = np.random.default_rng(100 + seed)
    x = randt(rng, 2, 8, 8)
    k = randt(rng, 4, 2, 3, 3)
    b = randt(rng, 4)
    probe = Tensor(rng.standard_normal((4, 8, 8)))
    check_gradients(lambda: ad.tensor_sum(ad.multiply(ad.conv2d(x, k, b, padding=1), probe)),
                    [x, k, b], tol=1e-6)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = ad.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] > 1.0 - 1e-12
    assert out.data[1] < 1e-12


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        ad.softmax(Tensor([np.inf, 0.0]))


@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(vals):
    out = ad.softmax(Tensor(vals))
    assert abs(out.data.sum() - 1.0) <= 1e-9
    assert np.all(out.data >= 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_softmax_gradcheck(seed):
    rng = np.random.default_rng(200 + seed)
    x = randt(rng, 7)
    probe = Tensor(rng.standard_normal(7))
    check_gradients(lambda: ad.tensor_sum(ad.multiply(ad.softmax(x), probe)), [x], tol=1e-6)


# ------------------------------------------------------- global_max_pool


def test_gmp_constant_map():
    out = ad.global_max_pool(Tensor(np.full((4, 3, 3), 7.0)))
    np.testing.assert_array_equal(out.data, np.full(4, 7.0))


def test_gmp_hot_cell_gradient():
    x = np.zeros((2, 4, 4))
    x[0, 1, 2] = 5.0
    x[1, 3, 0] = 2.0
    t = Tensor(x, requires_grad=True)
    ad.backward(ad.tensor_sum(ad.global_max_pool(t)))
    expected = np.zeros((2, 4, 4))
    expected[0, 1, 2] = 1.0
    expected[1, 3, 0] = 1.0
    np.testing.assert_array_equal(t.grad, expected)


@pytest.mark.parametrize("seed", range(3))
def test_gmp_gradcheck(seed):
    # random values: ties have probability zero
    rng = np.random.default_rng(300 + seed)
    x = randt(rng, 3, 5, 5)
    probe = Tensor(rng.standard_normal(3))
    check_gradients(lambda: ad.tensor_sum(ad.multiply(ad.global_max_pool(x), probe)), [x], tol=1e-6)


# ---------------------------------------------------------- outer_product


def test_outer_forced():
    out = ad.outer_product(Tensor([1.0, 0.0]), Tensor([2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[2.0, 3.0], [0.0, 0.0]])


def test_outer_rank_one():
    rng = np.random.default_rng(4)
    m = ad.outer_product(Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(5))).data
    for i in range(3):
        for j in range(4):
            minor = m[i, j] * m[i + 1, j + 1] - m[i, j + 1] * m[i + 1, j]
            assert abs(minor) <= 1e-12


def test_outer_rejects_matrices():
    with pytest.raises(ad.ShapeError):
        ad.outer_product(Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(3))
def test_outer_gradcheck(seed):
    rng = np.random.default_rng(400 + seed)
    u, v = randt(rng, 4), randt(rng, 6)
    probe = Tensor(rng.standard_normal((4, 6)))
    check_gradients(lambda: ad.tensor_sum(ad.multiply(ad.outer_product(u, v), probe)), [u, v], tol=1e-6)


# ------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_at_three():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(ad.multiply(x, x))
    assert x.grad == pytest.approx(6.0, abs=1e-15)


def test_backward_rejects_nonscalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(ad.scale(x, 2.0))


def test_backward_accumulates_without_reset():
    x = Tensor(2.0, requires_grad=True)
    ad.backward(ad.multiply(x, x))
    first = x.grad.copy()
    ad.backward(ad.multiply(x, x))
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_diamond_graph_single_sweep():
    # y = x*x + x*x: grad must be 4x exactly once per sweep
    x = Tensor(1.5, requires_grad=True)
    sq = ad.multiply(x, x)
    ad.backward(ad.add(sq, sq))
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_backward_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(99)
        x = randt(rng, 4, 6, 6)
        k = randt(rng, 2, 4, 3, 3)
        y = ad.conv2d(x, k, Tensor(np.zeros(2), requires_grad=True), padding=1)
        ad.backward(ad.tensor_sum(ad.multiply(y, y)))
        return k.grad.copy()

    np.testing.assert_array_equal(run(), run())


# ------------------------------------------- remaining op contract checks


@pytest.mark.parametrize("seed", range(2))
def test_elementwise_and_shape_ops_gradcheck(seed):
    rng = np.random.default_rng(500 + seed)
    a = randt(rng, 3, 4)
    b = randt(rng, 3, 4)
    c = randt(rng, 4)
    probe = Tensor(rng.standard_normal((2, 3, 2)))

    def loss():
        y = ad.add(ad.multiply(a, b), c)              # broadcast add
        y = ad.sub(y, ad.scale(b, 0.25))
        y = ad.relu(ad.add(y, 0.3))
        y = ad.sigmoid(y)
        y = ad.concat([y, y], axis=1)                 # 3x8
        y = ad.transpose(y)                           # 8x3
        y = ad.reshape(y, (2, 3, 4))
        y = y[:, :, 1:3]                              # slice
        return ad.tensor_sum(ad.multiply(y, probe))

    check_gradients(loss, [a, b, c], tol=1e-6)


@pytest.mark.parametrize("seed", range(2))
def test_log_exp_sqrt_power_div_gradcheck(seed):
    rng = np.random.default_rng(600 + seed)
    x = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
    y = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)

    def loss():
        z = ad.add(ad.log(x), ad.exp(ad.scale(y, 0.5)))
        z = ad.add(z, ad.sqrt(ad.multiply(x, y)))
        z = ad.add(z, ad.power(x, 3.0))
        z = ad.divide(z, ad.add(y, 1.0))
        return ad.tensor_sum(z)

    check_gradients(loss, [x, y], tol=1e-6)


@pytest.mark.parametrize("seed", range(2))
def test_layer_norm_and_pool_gradcheck(seed):
    rng = np.random.default_rng(700 + seed)
    x = randt(rng, 5, 6)
    g = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    b = randt(rng, 6)
    xmap = randt(rng, 2, 4, 4)
    probe = Tensor(rng.standard_normal((5, 6)))
    probe2 = Tensor(rng.standard_normal((2, 2, 2)))

    def loss():
        l1 = ad.tensor_sum(ad.multiply(ad.layer_norm(x, g, b), probe))
        l2 = ad.tensor_sum(ad.multiply(ad.avg_pool2d(xmap, 2), probe2))
        return ad.add(l1, l2)

    check_gradients(loss, [x, g, b, xmap], tol=1e-6)


def test_mean_and_stack():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    m = ad.mean(x)
    assert m.item() == pytest.approx(2.5)
    s = ad.stack([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])], axis=0)
    np.testing.assert_array_equal(s.data, [[1.0, 2.0], [3.0, 4.0]])


# ---------------------------------------------------------------- Adam


def test_adam_single_step_matches_hand_arithmetic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam({"p": p}, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad = np.array([0.5])
    opt.step()

    # closed-form oracle, plain Python floats
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    expected = 1.0 - 0.1 * mhat / (vhat**0.5 + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_adam_two_steps_oracle():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = ad.Adam({"p": p}, lr=0.01)
    m = v = 0.0
    x = 2.0
    for t in range(1, 3):
        g = 2.0 * x  # pretend loss x^2 evaluated at oracle state
        p.grad = np.array([2.0 * p.data[0]])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)) ** 0.5 + 1e-8)
        assert p.data[0] == pytest.approx(x, abs=1e-12)


def test_adam_weight_decay_is_decoupled():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    # zero gradient: only the decay term acts
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0, abs=1e-15)


# ------------------------------------------------------------ misc API


def test_item_and_detach():
    t = Tensor([[2.0]], requires_grad=True)
    assert t.item() == 2.0
    d = t.detach()
    assert not d.requires_grad
    with pytest.raises(ad.ShapeError):
        Tensor([1.0, 2.0]).item()
