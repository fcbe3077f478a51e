import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stanet import functional as F
from stanet.tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    concat,
    get_default_dtype,
    matmul,
    no_grad,
)


def test_default_dtype_is_float32():
    assert get_default_dtype() is np.float32
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_f64_fixture_switches_dtype(f64):
    assert Tensor([1.0]).dtype == np.float64


# -- matmul -------------------------------------------------------------------
def test_matmul_identity_left():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_identity_right():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b),
                               rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ------------------------------------------------------------------
@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0, 0.0], [1 / 3] * 3),
    ([5.0], [1.0]),
    ([1000.0, 1000.0, 1000.0], [1 / 3] * 3),
])
def test_softmax_examples(f64, x, expected):
    np.testing.assert_allclose(F.softmax_last_dim(Tensor(np.array(x))).data, expected, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = F.softmax_last_dim(Tensor(x)).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


# -- reshape / permute / concat ---------------------------------------------------
@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-1e6, 1e6)))
def test_reshape_permute_round_trip(x):
    t = Tensor(x)
    back = t.reshape(-1).reshape(*x.shape)
    assert np.array_equal(back.data, x)
    perm = t.permute(2, 0, 1).permute(1, 2, 0)
    assert np.array_equal(perm.data, x)


def test_concat_channels(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    out = concat([Tensor(a), Tensor(b)], axis=1)
    np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))


# -- backward semantics -------------------------------------------------------------
def test_backward_sum_gives_ones(f64, rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square(f64, rng):
    x = Tensor(rng.normal(size=5), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_gradient_accumulates_over_uses(f64, rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    w1, w2 = rng.normal(size=4), rng.normal(size=4)
    ((x * w1).sum() + (x * w2).sum()).backward()
    np.testing.assert_allclose(x.grad, w1 + w2, rtol=1e-14)


def test_backward_twice_accumulates(f64, rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, np.full(3, 6.0))


def test_unused_branch_gets_zero_grad(f64):
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    mask = np.array([True, True, True])
    from stanet.tensor import where
    where(mask, x, y).sum().backward()
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1000.0], dtype=np.float32)).exp()


def test_item_rejects_non_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(2)).item()


def test_advanced_index_gradient_scatter_adds(f64):
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([1, 1, 3])].sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 2, 0, 1])
