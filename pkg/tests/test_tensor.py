import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import batch_norm_train_loop, bce_loop, conv2d_loop, mse_loop
from tapsed import ops
from tapsed.tensor import Parameter, Tensor, get_default_dtype, no_grad, set_default_dtype

finite = st.floats(-5, 5, allow_nan=False, width=64)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_mul_forward_and_grad(a, b):
    x, y = leaf(a), leaf(b)
    ops.sum_axis(ops.mul(ops.add(x, y), y)).backward()
    np.testing.assert_allclose(x.grad, b)
    np.testing.assert_allclose(y.grad, a + 2 * b)


def test_broadcast_grad_reduces_to_operand_shape():
    x = leaf(np.ones((2, 3)))
    b = leaf(np.arange(3.0))
    ops.sum_axis(ops.add(x, b)).backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, [2, 2, 2])


def test_shared_node_accumulates_gradient():
    x = leaf([2.0])
    y = ops.mul(x, x)
    ops.sum_axis(ops.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_needs_scalar_or_seed():
    x = leaf(np.ones(3))
    with pytest.raises(RuntimeError):
        ops.scale(x, 2.0).backward()


def test_no_grad_records_nothing():
    x = leaf(np.ones(3))
    with no_grad():
        y = ops.scale(x, 2.0)
    assert not y.requires_grad


@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_rows_sum_to_one(a):
    y = ops.softmax_axis(Tensor(a), axis=-1).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        ops.softmax_axis(Tensor(np.zeros((2, 2))), axis=2)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 6), st.integers(2, 5), st.integers(1, 3),
       st.sampled_from([(3, 3), (1, 1), (3, 1)]), st.integers(0, 2**31 - 1))
def test_conv2d_matches_loop(b, c, f, t, d, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, f, t))
    w = rng.normal(size=(2, c) + k)
    bias = rng.normal(size=2)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(bias), freq_dilation=d).data
    np.testing.assert_allclose(got, conv2d_loop(x, w, bias, d), atol=1e-10)


def test_conv2d_fallback_path_matches(monkeypatch):
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3))
    fast = ops.conv2d(Tensor(x), Tensor(w), freq_dilation=2).data
    monkeypatch.setattr(ops, "_IM2COL_BYTES", 0)
    slow = ops.conv2d(Tensor(x), Tensor(w), freq_dilation=2).data
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_batch_norm_matches_loop_and_updates_running_stats():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 3.0, size=(3, 2, 4, 5))
    g, b = rng.normal(size=2), rng.normal(size=2)
    rm, rv = np.zeros(2), np.ones(2)
    y = ops.batch_norm2d(Tensor(x), Tensor(g), Tensor(b), rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(y.data, batch_norm_train_loop(x, g, b), atol=1e-10)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)


def test_avg_pool_floor_mode():
    x = np.arange(2 * 5, dtype=float).reshape(1, 1, 2, 5)
    y = ops.avg_pool2d(Tensor(x), (2, 2)).data
    np.testing.assert_allclose(y[0, 0, 0], [(0 + 1 + 5 + 6) / 4, (2 + 3 + 7 + 8) / 4])
    with pytest.raises(ValueError):
        ops.avg_pool2d(Tensor(x), (3, 1))


def test_time_difference_of_constant_is_zero():
    x = np.broadcast_to(np.arange(4.0)[:, None], (4, 7))
    assert not ops.time_difference(Tensor(x)).data.any()


def test_dropout_is_reproducible_and_scaled():
    x = Tensor(np.ones((50, 50)))
    a = ops.dropout(x, 0.5, True, ops.dropout_rng(3, "layer", 7)).data
    b = ops.dropout(x, 0.5, True, ops.dropout_rng(3, "layer", 7)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert ops.dropout(x, 0.5, False) is x


@given(arrays(np.float64, 6, elements=st.floats(0.01, 0.99)), arrays(np.float64, 6, elements=st.sampled_from([0.0, 1.0])))
def test_bce_and_mse_match_loops(p, y):
    assert ops.binary_cross_entropy(Tensor(p), y).item() == pytest.approx(bce_loop(p, y), rel=1e-12)
    assert ops.mse(Tensor(p), Tensor(y)).item() == pytest.approx(mse_loop(p, y), rel=1e-12)


def test_parameter_freeze_drops_grad():
    p = Parameter(np.ones(2), name="w")
    p.grad = np.ones(2)
    p.set_trainable(False)
    assert p.grad is None and not p.requires_grad


def test_default_dtype_roundtrip():
    prev = get_default_dtype()
    try:
        set_default_dtype("float32")
        assert Tensor([1.0]).dtype == np.float32
        with pytest.raises(ValueError):
            set_default_dtype("int32")
    finally:
        set_default_dtype(prev)
