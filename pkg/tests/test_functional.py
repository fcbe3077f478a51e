import numpy as np
import pytest

from stanet import functional as F
from stanet.tensor import DimensionError, Tensor


def loop_conv(x, w, b, stride, pad):
    """Direct-loop cross-correlation for (C, *S) input and (O, C, *K) kernel, 2-D or 3-D."""
    nsp = w.ndim - 2
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in pad])
    out_sp = [(xp.shape[1 + d] - w.shape[2 + d]) // stride[d] + 1 for d in range(nsp)]
    out = np.zeros([w.shape[0]] + out_sp)
    for o in range(w.shape[0]):
        for idx in np.ndindex(*out_sp):
            acc = 0.0 if b is None else b[o]
            for c in range(w.shape[1]):
                for k in np.ndindex(*w.shape[2:]):
                    src = tuple(i * s + kk for i, s, kk in zip(idx, stride, k))
                    acc += w[(o, c) + k] * xp[(c,) + src]
            out[(o,) + idx] = acc
    return out


def test_conv2d_identity_kernel(f64):
    x = np.arange(9.0).reshape(1, 3, 3)
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_input(f64, rng):
    out = F.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(rng.normal(size=(3, 2, 3, 3))),
                   Tensor(np.zeros(3)), padding=1)
    assert not out.data.any()


def test_conv2d_matches_six_loop_oracle(f64, rng):
    x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, loop_conv(x, w, b, (2, 2), (1, 1)), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_batched_random(f64, seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=(2, 3, 6, 5)), r.normal(size=(4, 3, 3, 2))
    out = F.conv2d(Tensor(x), Tensor(w), None, stride=(1, 2), padding=(1, 0))
    for n in range(2):
        np.testing.assert_allclose(out.data[n], loop_conv(x[n], w, None, (1, 2), (1, 0)), atol=1e-10)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv3d_temporal_average(f64, rng):
    x = rng.normal(size=(1, 3, 4, 4))
    w = np.zeros((1, 1, 3, 1, 1))
    w[..., 0, 0] = 1 / 3
    out = F.conv3d(Tensor(x), Tensor(w))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data[0, 0], x[0].mean(axis=0), atol=1e-14)


def test_conv3d_identity(f64, rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0], w[1, 1] = 1.0, 1.0
    np.testing.assert_array_equal(F.conv3d(Tensor(x), Tensor(w)).data, x)


def test_conv3d_matches_loop_oracle(f64, rng):
    x, w, b = rng.normal(size=(2, 5, 6, 6)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    out = F.conv3d(Tensor(x), Tensor(w), Tensor(b), padding=(0, 1, 1))
    assert out.shape == (3, 3, 6, 6)
    np.testing.assert_allclose(out.data, loop_conv(x, w, b, (1, 1, 1), (0, 1, 1)), atol=1e-10)


def test_conv3d_kernel_longer_than_clip():
    with pytest.raises(DimensionError):
        F.conv3d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 1, 1))))


# -- pooling ------------------------------------------------------------------------
def test_constant_pool_upsample_round_trip(f64):
    x = Tensor(np.full((32, 32), 7.0))
    pooled = F.avg_pool2d(x, 8)
    np.testing.assert_array_equal(pooled.data, 7.0)
    np.testing.assert_array_equal(F.upsample_nearest(pooled, 32).data, 7.0)


def test_pool_mean(f64):
    assert F.avg_pool2d(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), 1).data.item() == 2.5


def test_pool_matches_block_loop(f64, rng):
    x = rng.normal(size=(16, 16))
    expect = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expect[i, j] = x[4 * i:4 * i + 4, 4 * j:4 * j + 4].sum() / 16
    np.testing.assert_allclose(F.avg_pool2d(Tensor(x), 4).data, expect, rtol=0, atol=1e-15)


def test_upsample_matches_loop(f64, rng):
    x = rng.normal(size=(2, 3, 4))
    out = F.upsample_nearest(Tensor(x), (6, 8)).data
    for i in range(6):
        for j in range(8):
            assert np.array_equal(out[:, i, j], x[:, i // 2, j // 2])


def test_pool_non_divisible():
    with pytest.raises(DimensionError):
        F.avg_pool2d(Tensor(np.ones((6, 6))), 4)
    with pytest.raises(DimensionError):
        F.upsample_nearest(Tensor(np.ones((3, 3))), 4)


# -- batch norm -----------------------------------------------------------------------
def test_batch_norm_train_normalizes_and_updates(f64, rng):
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats(f64, rng):
    x = rng.normal(size=(2, 2, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
    expect = (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect, rtol=1e-14)


# -- losses -----------------------------------------------------------------------------
def test_cross_entropy_matches_loop(f64, rng):
    z = rng.normal(size=(4, 5))
    y = rng.integers(0, 5, size=4)
    out = F.cross_entropy(Tensor(z), y).data
    for i in range(4):
        assert abs(out[i] - (np.log(np.exp(z[i]).sum()) - z[i, y[i]])) < 1e-12


def test_bce_stable_at_extremes(f64):
    out = F.bce_with_logits(Tensor(np.array([-800.0, 800.0, 0.0])), np.array([0.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.data, [0.0, 0.0, np.log(2)], atol=1e-15)


def test_smooth_l1_piecewise(f64):
    out = F.smooth_l1(Tensor(np.array([0.5, -2.0, 1.0])), np.zeros(3)).data
    np.testing.assert_allclose(out, [0.125, 1.5, 0.5])
