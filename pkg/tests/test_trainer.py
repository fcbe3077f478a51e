import numpy as np
import pytest

from stanet import checkpoint
from stanet.backbone import NetworkConfig
from stanet.losses import TrainingFault
from stanet.nn import Parameter
from stanet.scenegen import SceneSpec, dataset_to_clips, generate_dataset, write_dataset
from stanet.tensor import no_grad
from stanet.trainer import (
    Adam,
    SGDMomentum,
    TrainConfig,
    batch_indices,
    clip_grad_norm,
    load_clips,
    load_model,
    read_log,
    train,
)
from stanet.voxelizer import GridConfig

TINY_GRID = GridConfig(x_range=(-4.0, 4.0), y_range=(-4.0, 4.0))


def tiny_cfg(**kw):
    base = {"network": NetworkConfig(scale=8), "batch_size": 2, "max_steps": 4}
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def tiny_dataset():
    spec = SceneSpec.from_dict({"points_per_actor": 60, "half_extent": 3.0,
                                "counts": {"vehicle": 1, "pedestrian": 1, "bicycle": 0, "others": 1}})
    return generate_dataset(spec, 3, 0, TINY_GRID)


@pytest.fixture(scope="module")
def tiny_clips(tiny_dataset):
    return list(dataset_to_clips(tiny_dataset))


def params_of(net):
    return {n: p.data.copy() for n, p in net.named_parameters()}


# -- optimizers ---------------------------------------------------------------------
def quadratic_param(value):
    p = Parameter(np.array([value], dtype=np.float64))
    p.grad = 2 * p.data  # d/dw w^2
    return p


def test_sgd_single_step():
    p = quadratic_param(3.0)
    SGDMomentum([("w", p)], lr=0.1).step()
    assert p.data[0] == pytest.approx(3.0 - 0.1 * 6.0, abs=1e-15)


def test_sgd_momentum_accumulates():
    p = quadratic_param(1.0)
    opt = SGDMomentum([("w", p)], lr=0.1, momentum=0.9)
    opt.step()
    w1 = p.data[0]
    p.grad = 2 * p.data
    opt.step()
    v2 = 0.9 * 2.0 + 2 * w1
    assert p.data[0] == pytest.approx(w1 - 0.1 * v2, abs=1e-15)


def test_adam_matches_scalar_oracle():
    w, m, v = 1.5, 0.0, 0.0
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = Parameter(np.array([w]))
    opt = Adam([("w", p)], lr=lr, betas=(b1, b2), eps=eps)
    for t in range(1, 6):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        p.grad = 2 * p.data
        opt.step()
        assert abs(p.data[0] - w) < 1e-10


@pytest.mark.parametrize("make", [
    lambda ps: SGDMomentum(ps, lr=0.0),
    lambda ps: Adam(ps, lr=0.0),
])
def test_zero_learning_rate_leaves_params(make, rng):
    p = Parameter(rng.normal(size=(3, 3)))
    before = p.data.copy()
    opt = make([("w", p)])
    for _ in range(3):
        p.grad = rng.normal(size=(3, 3))
        opt.step()
    assert np.array_equal(p.data, before)


def test_learning_rate_must_be_positive():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([("a", a), ("b", b)], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    a.grad[0] = np.nan
    with pytest.raises(TrainingFault):
        clip_grad_norm([("a", a), ("b", b)], 1.0)


def test_batch_indices_cover_epoch():
    steps = [batch_indices(7, 3, 0, s) for s in range(3)]
    assert sorted(np.concatenate(steps).tolist()) == list(range(7))
    assert np.array_equal(batch_indices(7, 3, 0, 4), batch_indices(7, 3, 0, 4))


def test_config_round_trip_and_unknown_key():
    cfg = tiny_cfg(lr=2e-3)
    assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})


# -- training loop ------------------------------------------------------------------
def test_log_has_one_row_per_step(tmp_path, tiny_clips):
    res = train(tiny_cfg(), str(tmp_path), clips=tiny_clips, grid=TINY_GRID)
    rows = read_log(res.log_path)
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    for r in rows:
        total = sum(r[k] for k in ("motion", "cls", "state", "spatial", "f_temporal", "b_temporal"))
        assert r["total"] == pytest.approx(total, rel=1e-5)


def test_checkpoint_round_trip_is_bit_identical(tmp_path, tiny_clips):
    res = train(tiny_cfg(max_steps=2), str(tmp_path), clips=tiny_clips, grid=TINY_GRID)
    loaded, meta = load_model(res.checkpoint_path)
    assert meta["step"] == 2
    frames = np.stack([c.frames for c in tiny_clips[:2]])
    res.network.eval()
    with no_grad():
        a = res.network(frames)
        b = loaded(frames)
    for name in ("motion_raw", "class_logits", "state_logit"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)


def test_resume_matches_uninterrupted(tmp_path, tiny_clips):
    full = train(tiny_cfg(), str(tmp_path / "full"), clips=tiny_clips, grid=TINY_GRID)
    first = train(tiny_cfg(max_steps=2), str(tmp_path / "split"), clips=tiny_clips, grid=TINY_GRID)
    resumed = train(tiny_cfg(), str(tmp_path / "split"), clips=tiny_clips, grid=TINY_GRID,
                    resume_from=first.checkpoint_path)
    assert resumed.steps == 4
    a, b = params_of(full.network), params_of(resumed.network)
    assert all(np.array_equal(a[n], b[n]) for n in a)
    rows_full, rows_split = read_log(full.log_path), read_log(resumed.log_path)
    assert [r["total"] for r in rows_full] == [r["total"] for r in rows_split]


def test_resume_refuses_other_grid(tmp_path, tiny_clips):
    first = train(tiny_cfg(max_steps=1), str(tmp_path), clips=tiny_clips, grid=TINY_GRID)
    other = GridConfig(x_range=(-3.0, 5.0), y_range=(-4.0, 4.0))  # same shape, other extent
    with pytest.raises(ValueError, match="grid"):
        train(tiny_cfg(max_steps=2), str(tmp_path), clips=tiny_clips, grid=other,
              resume_from=first.checkpoint_path)


def test_same_seed_same_run(tmp_path, tiny_clips):
    a = train(tiny_cfg(max_steps=3), str(tmp_path / "a"), clips=tiny_clips, grid=TINY_GRID)
    b = train(tiny_cfg(max_steps=3), str(tmp_path / "b"), clips=tiny_clips, grid=TINY_GRID)
    assert [r["total"] for r in a.rows] == [r["total"] for r in b.rows]


def test_nan_abort_keeps_last_good_checkpoint(tmp_path, tiny_clips, monkeypatch):
    import stanet.trainer as trainer

    good = train(tiny_cfg(max_steps=2), str(tmp_path / "good"), clips=tiny_clips, grid=TINY_GRID)
    real = trainer.total_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise TrainingFault("motion", float("nan"))
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer, "total_loss", flaky)
    with pytest.raises(TrainingFault):
        train(tiny_cfg(), str(tmp_path / "bad"), clips=tiny_clips, grid=TINY_GRID)
    arrays, meta = checkpoint.load(str(tmp_path / "bad" / "checkpoint.stck"))
    assert meta["step"] == 2
    expect = params_of(good.network)
    assert all(np.array_equal(arrays[n], expect[n]) for n in expect)
    assert len(read_log(str(tmp_path / "bad" / "loss_log.csv"))) == 2


def test_missing_dataset_is_io_error(tmp_path):
    cfg = tiny_cfg(data=str(tmp_path / "nope.vfds"))
    with pytest.raises(FileNotFoundError):
        train(cfg, str(tmp_path / "run"))


def test_load_clips_parallel_matches_serial(tmp_path, tiny_dataset):
    path = str(tmp_path / "d.vfds")
    write_dataset(path, tiny_dataset)
    serial, grid = load_clips(path, workers=1)
    parallel, _ = load_clips(path, workers=3)
    assert grid == TINY_GRID
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(serial, parallel))
