import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tseg import engine as E
from tseg import gradcheck
from tseg.errors import ContractError, DimensionError, NumericError


def t(a, grad=False):
    return E.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_tensors_are_rank_four():
    with pytest.raises(DimensionError):
        E.Tensor(np.zeros((2, 3)))


def test_default_dtype_and_precision_context():
    assert E.Tensor(np.zeros((1, 1, 1, 1))).data.dtype == np.float32
    with E.precision(np.float64):
        assert E.Tensor(np.zeros((1, 1, 1, 1))).data.dtype == np.float64
    assert E.default_dtype() == np.float32


def test_backward_requires_scalar_loss():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    with E.Tape() as tape:
        y = E.relu(x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_reused_input_accumulates_gradient():
    x = t(np.full((1, 1, 2, 2), 3.0), grad=True)
    with E.Tape() as tape:
        loss = E.sum_all(E.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 6.0)


def test_grad_accumulates_across_backward_calls():
    x = t(np.ones((1, 1, 1, 2)), grad=True)
    for _ in range(2):
        with E.Tape() as tape:
            loss = E.sum_all(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_consumes_tape():
    x = t(np.ones((1, 1, 1, 1)), grad=True)
    with E.Tape() as tape:
        loss = E.sum_all(x)
    tape.backward(loss)
    assert tape.nodes == [] and tape.leaves == {}


def test_nothing_recorded_without_tape_or_under_no_grad():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    y = E.relu(x)
    assert not y.requires_grad
    with E.Tape() as tape:
        with E.no_grad():
            E.relu(x)
    assert tape.nodes == []


def test_constants_get_no_gradient_node():
    with E.Tape() as tape:
        E.relu(t(np.ones((1, 1, 2, 2))))
    assert tape.nodes == []


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        E.mul(t(np.full((1, 1, 1, 1), 1e308)), t(np.full((1, 1, 1, 1), 1e308)))


def test_sigmoid_stays_strictly_inside_unit_interval():
    x = E.Tensor(np.array([-200.0, -30.0, 0.0, 30.0, 200.0], dtype=np.float32).reshape(1, 1, 1, 5))
    y = E.sigmoid(x).data
    assert (y > 0).all() and (y < 1).all()
    assert y[0, 0, 0, 2] == 0.5


def test_conv_shape_errors():
    x = E.Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(DimensionError):
        E.conv2d_same(x, E.Tensor(np.zeros((3, 2, 5, 5))), E.Tensor(np.zeros((1, 3, 1, 1))))
    with pytest.raises(DimensionError):
        E.conv2d_same(x, E.Tensor(np.zeros((3, 1, 3, 3))), E.Tensor(np.zeros((1, 3, 1, 1))))
    with pytest.raises(DimensionError):
        E.conv2d_same(x, E.Tensor(np.zeros((3, 2, 3, 3))), E.Tensor(np.zeros((1, 2, 1, 1))))


def test_maxpool_needs_even_dims():
    with pytest.raises(DimensionError):
        E.maxpool2(E.Tensor(np.zeros((1, 1, 3, 4))))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        E.add(E.Tensor(np.zeros((1, 1, 2, 2))), E.Tensor(np.zeros((1, 1, 2, 3))))


def test_select_channels_range_and_duplicates():
    x = t(np.arange(12.0).reshape(1, 3, 2, 2), grad=True)
    with pytest.raises(DimensionError):
        E.select_channels(x, [3])
    with E.Tape() as tape:
        loss = E.sum_all(E.select_channels(x, [2, 2, 0]))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad[0, :, 0, 0], [1, 0, 2])


def test_batchnorm_training_updates_running_stats():
    x = t(np.arange(16.0).reshape(2, 2, 2, 2))
    gamma, beta = t(np.ones((1, 2, 1, 1))), t(np.zeros((1, 2, 1, 1)))
    rm, rv = t(np.zeros((1, 2, 1, 1))), t(np.ones((1, 2, 1, 1)))
    E.batchnorm(x, gamma, beta, rm, rv, training=True, momentum=0.1)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    batch_var = x.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(rm.data.ravel(), 0.1 * batch_mean)
    np.testing.assert_allclose(rv.data.ravel(), 0.9 + 0.1 * batch_var)


def test_batchnorm_inference_uses_running_stats():
    x = t(np.full((1, 1, 2, 2), 5.0))
    y = E.batchnorm(x, t(np.full((1, 1, 1, 1), 2.0)), t(np.full((1, 1, 1, 1), 1.0)),
                    t(np.full((1, 1, 1, 1), 1.0)), t(np.full((1, 1, 1, 1), 4.0)), training=False, eps=0.0)
    np.testing.assert_allclose(y.data, 2.0 * (5.0 - 1.0) / 2.0 + 1.0)


@pytest.mark.parametrize("name", sorted(set(gradcheck.CHECKS) - {"network"}))
def test_op_gradients_quick(name):
    r = gradcheck.run_check(name, instances=3, seed=7)
    assert r.max_rel_error < gradcheck.TOLERANCE, r


@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-50, 50)))
def test_relu_sigmoid_properties(x):
    r = E.relu(t(x)).data
    assert (r >= 0).all() and np.array_equal(r[x > 0], x[x > 0])
    s = E.sigmoid(t(x)).data
    # sigma(-x) = 1 - sigma(x)
    np.testing.assert_allclose(E.sigmoid(t(-x)).data, 1 - s, atol=1e-12)


@given(arrays(np.float64, (1, 1, 2, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, (1, 1, 2, 3), elements=st.floats(-10, 10)))
def test_add_mul_commute(a, b):
    assert np.array_equal(E.add(t(a), t(b)).data, E.add(t(b), t(a)).data)
    assert np.array_equal(E.mul(t(a), t(b)).data, E.mul(t(b), t(a)).data)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_concat_then_select_roundtrip(c0, c1, c2):
    parts = [np.full((2, c, 2, 2), float(i)) for i, c in enumerate((c0, c1, c2))]
    cat = E.concat([t(p) for p in parts])
    assert cat.shape == (2, c0 + c1 + c2, 2, 2)
    back = E.select_channels(cat, range(c0, c0 + c1)).data
    np.testing.assert_array_equal(back, parts[1])


def test_conv_examples():
    x = t(np.ones((1, 1, 3, 3)))
    centre = np.zeros((1, 1, 3, 3))
    centre[0, 0, 1, 1] = 1
    zero_b = t(np.zeros((1, 1, 1, 1)))
    np.testing.assert_array_equal(E.conv2d_same(x, t(centre), zero_b).data, x.data)
    y = E.conv2d_same(x, t(np.ones((1, 1, 3, 3))), zero_b).data[0, 0]
    np.testing.assert_array_equal(y, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_conv_is_bilinear(a, b, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 2, 2, 5, 4))
    w1, w2 = rng.standard_normal((2, 3, 2, 3, 3))
    zb = t(np.zeros((1, 3, 1, 1)))

    def f(x, w):
        return E.conv2d_same(t(x), t(w), zb).data

    np.testing.assert_allclose(f(a * x1 + b * x2, w1), a * f(x1, w1) + b * f(x2, w1), atol=1e-9)
    np.testing.assert_allclose(f(x1, a * w1 + b * w2), a * f(x1, w1) + b * f(x1, w2), atol=1e-9)


def test_maxpool_examples():
    assert E.maxpool2(t([[[[1, 2], [3, 4]]]])).data.ravel().tolist() == [4.0]
    c = E.maxpool2(t(np.full((1, 2, 4, 6), 7.0))).data
    assert c.shape == (1, 2, 2, 3) and (c == 7).all()


@given(arrays(np.float64, (2, 2, 4, 6), elements=st.floats(-5, 5)))
def test_maxpool_gradient_mass(x):
    leaf = t(x, grad=True)
    gy = np.random.default_rng(0).standard_normal((2, 2, 2, 3))
    with E.Tape() as tape:
        loss = E.sum_all(E.mul(E.maxpool2(leaf), t(gy)))
    tape.backward(loss)
    assert np.count_nonzero(leaf.grad) == np.count_nonzero(gy)
    assert leaf.grad.sum() == pytest.approx(gy.sum(), abs=1e-12)
    win = leaf.grad.reshape(2, 2, 2, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 2, 2, 3, 4)
    assert ((win != 0).sum(axis=-1) <= 1).all()


def test_upsample_row_example():
    y = E.upsample_bilinear2(t([[[[1.0, 2.0]]]])).data
    np.testing.assert_allclose(y[0, 0, 0], [1.0, 1.25, 1.75, 2.0])
    np.testing.assert_allclose(y[0, 0, 1], [1.0, 1.25, 1.75, 2.0])


def test_batchnorm_train_output_is_standardised(rng):
    x = t(rng.standard_normal((4, 3, 5, 5)) * 4 + 2)
    one, zero = t(np.ones((1, 3, 1, 1))), t(np.zeros((1, 3, 1, 1)))
    y = E.batchnorm(x, one, zero, t(np.zeros((1, 3, 1, 1))), t(np.ones((1, 3, 1, 1))),
                    training=True, eps=1e-3).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    y = E.batchnorm(x, one, zero, t(np.zeros((1, 3, 1, 1))), t(np.ones((1, 3, 1, 1))),
                    training=False, eps=0.0).data
    np.testing.assert_array_equal(y, x.data)


def test_backward_examples():
    a = t(np.arange(4.0).reshape(1, 1, 2, 2), grad=True)
    b = t(np.arange(4.0, 8.0).reshape(1, 1, 2, 2), grad=True)
    with E.Tape() as tape:
        loss = E.sum_all(E.mul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, b.data)
    np.testing.assert_array_equal(b.grad, a.data)
    with E.Tape() as tape:
        loss = E.sum_all(a)
    a.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, 1.0)


def test_elementwise_examples():
    assert E.relu(t([[[[-1.0, 2.0]]]])).data.ravel().tolist() == [0.0, 2.0]
    assert E.sigmoid(t(np.zeros((1, 1, 1, 1)))).data.item() == 0.5
    a = t(np.arange(6.0).reshape(1, 2, 1, 3))
    np.testing.assert_array_equal(E.mul(a, t(np.ones((1, 2, 1, 3)))).data, a.data)
