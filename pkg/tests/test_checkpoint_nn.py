import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stanet import checkpoint
from stanet.checkpoint import CheckpointError
from stanet.nn import BatchNorm, Conv, Linear, glorot_uniform
from stanet.tensor import Tensor


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_array_round_trip(arr):
    arrays, meta = checkpoint.decode(checkpoint.encode({"a": arr}, {"k": [1, 2]}))
    assert meta == {"k": [1, 2]}
    assert arrays["a"].dtype == arr.dtype and arrays["a"].shape == arr.shape
    assert arrays["a"].tobytes() == arr.tobytes()


def test_file_round_trip_keeps_order(tmp_path, rng):
    arrays = {"z": rng.normal(size=3), "a": np.arange(4), "m": np.ones((2, 2), np.float32)}
    path = str(tmp_path / "c.stck")
    checkpoint.save(path, arrays, {})
    loaded, _ = checkpoint.load(path)
    assert list(loaded) == ["z", "a", "m"]


@pytest.mark.parametrize("offset", [0, 4, 12, -1])
def test_corruption_detected(offset):
    blob = bytearray(checkpoint.encode({"w": np.ones(8)}, {"step": 3}))
    blob[offset] ^= 0x40
    with pytest.raises(CheckpointError):
        checkpoint.decode(bytes(blob))


def test_truncation_detected():
    blob = checkpoint.encode({"w": np.ones(8)}, {})
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-9])


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        checkpoint.encode({"c": np.ones(2, np.complex64)}, {})


# -- layers -------------------------------------------------------------------------
def test_glorot_bounds(rng):
    w = glorot_uniform(rng, (200, 100), 200, 100)
    assert np.abs(w).max() <= np.sqrt(6 / 300)
    assert np.abs(w).max() > 0.9 * np.sqrt(6 / 300)


def test_linear_zero_bias_init(rng):
    lin = Linear(4, 3, rng)
    assert not lin.bias.data.any()
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(lin(Tensor(x)).data, x @ lin.weight.data, rtol=1e-5)


def test_state_dict_round_trip(rng):
    a, b = Conv(2, 3, (3, 3), rng), Conv(2, 3, (3, 3), rng)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_batchnorm_running_stats(f64, rng):
    bn = BatchNorm(2)
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 5, 5))
    bn(Tensor(x))
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * flat.mean(axis=1), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * flat.var(axis=1, ddof=1), rtol=1e-12)
    bn.eval()
    out = bn(Tensor(x)).data
    expect = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect, rtol=1e-10)


def test_train_eval_flags_propagate(rng):
    conv = Conv(1, 1, (1, 1), rng)
    bn = BatchNorm(1)
    conv.add_module("bn", bn)
    conv.eval()
    assert not bn.training
    conv.train()
    assert bn.training
