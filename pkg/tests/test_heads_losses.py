import math

import numpy as np
import pytest

from stanet.gradcheck import check_gradients
from stanet.heads import Heads, PredictionBundle, apply_gating, gate_mask
from stanet.losses import (
    TERMS,
    LossWeights,
    TrainingFault,
    class_weights,
    loss_terms,
    total_loss,
)
from stanet.tensor import Tensor


def random_case(r, b=1, t=3, h=4, w=4, k=5):
    cls_t = r.integers(0, k, size=(b, h, w))
    inst = np.where(cls_t > 0, r.integers(1, 3, size=cls_t.shape), 0)
    targets = {
        "class_target": cls_t,
        "state_target": (r.random((b, h, w)) < 0.5).astype(np.float64),
        "motion_target": r.normal(scale=1.5, size=(b, t, h, w, 2)),
        "instance_target": inst,
    }
    bundle = PredictionBundle(
        Tensor(r.normal(scale=1.5, size=(b, t, h, w, 2)), requires_grad=True),
        Tensor(r.normal(size=(b, h, w, k)), requires_grad=True),
        Tensor(r.normal(size=(b, h, w)), requires_grad=True),
    )
    return bundle, targets


def loop_terms(bundle, targets):
    """Scalar-loop reference for the six unweighted terms."""
    m = bundle.motion_raw.data
    logits = bundle.class_logits.data
    z = bundle.state_logit.data
    cls_t, st, mt, inst = (targets[k] for k in
                           ("class_target", "state_target", "motion_target", "instance_target"))
    b, t, h, w, _ = m.shape
    k = logits.shape[-1]
    n = cls_t.size
    counts = [int((cls_t == c).sum()) for c in range(k)]
    present = sum(1 for c in counts if c)
    cw = [min(max(n / (present * c), 0.05), 20.0) if c else 0.0 for c in counts]

    def sl1(d):
        return 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5

    mot_num = mot_den = ce_num = ce_den = st_num = st_den = 0.0
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                c = cls_t[bi, i, j]
                row = logits[bi, i, j]
                lse = max(row) + math.log(sum(math.exp(v - max(row)) for v in row))
                ce_num += cw[c] * (lse - row[c])
                ce_den += cw[c]
                if c == 0:
                    continue
                per_cell = sum(sl1(m[bi, s, i, j, a] - mt[bi, s, i, j, a])
                               for s in range(t) for a in range(2)) / (2 * t)
                mot_num += cw[c] * per_cell
                mot_den += cw[c]
                p = 1 / (1 + math.exp(-z[bi, i, j]))
                y = st[bi, i, j]
                st_num += -(y * math.log(p) + (1 - y) * math.log(1 - p))
                st_den += 1

    sp_num = sp_den = 0.0
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for di, dj in ((1, 0), (0, 1)):
                    i2, j2 = i + di, j + dj
                    if i2 >= h or j2 >= w:
                        continue
                    if inst[bi, i, j] == 0 or inst[bi, i, j] != inst[bi, i2, j2]:
                        continue
                    sp_den += 1
                    for s in range(t):
                        for a in range(2):
                            sp_num += abs(m[bi, s, i, j, a] - m[bi, s, i2, j2, a]) / (2 * t)

    def roughness(fg_wanted):
        num = den = 0.0
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    if (cls_t[bi, i, j] != 0) != fg_wanted:
                        continue
                    prev = [0.0, 0.0]
                    incs = []
                    for s in range(t):
                        incs.append([m[bi, s, i, j, a] - prev[a] for a in range(2)])
                        prev = list(m[bi, s, i, j])
                    for s in range(t - 1):
                        for a in range(2):
                            num += abs(incs[s + 1][a] - incs[s][a])
                            den += 1
        return num / den if den else 0.0

    return {
        "motion": mot_num / mot_den if mot_den else 0.0,
        "cls": ce_num / ce_den,
        "state": st_num / st_den if st_den else 0.0,
        "spatial": sp_num / sp_den if sp_den else 0.0,
        "f_temporal": roughness(True),
        "b_temporal": roughness(False),
    }


# -- heads --------------------------------------------------------------------------
def test_head_shapes(rng):
    heads = Heads(12, 8, 20, 5, rng)
    bundle = heads(Tensor(rng.normal(size=(2, 12, 6, 6))))
    assert bundle.motion_raw.shape == (2, 20, 6, 6, 2)
    assert bundle.class_logits.shape == (2, 6, 6, 5)
    assert bundle.state_logit.shape == (2, 6, 6)


def test_gating_matches_loop(f64, rng):
    bundle, _ = random_case(rng, b=2, t=4, h=5, w=5)
    gated = apply_gating(bundle).motion_gated
    raw = bundle.motion_raw.data
    for bi in range(2):
        for i in range(5):
            for j in range(5):
                bg = int(np.argmax(bundle.class_logits.data[bi, i, j])) == 0
                p_static = 1 / (1 + math.exp(-bundle.state_logit.data[bi, i, j]))
                expect = 0.0 * raw[bi, :, i, j] if bg or p_static >= 0.5 else raw[bi, :, i, j]
                assert np.array_equal(gated[bi, :, i, j], expect)


def test_gating_threshold_boundary():
    logits = np.array([[0.0, 1.0, 0.0, 0.0, 0.0]])
    p49 = math.log(0.49 / 0.51)
    assert not gate_mask(logits, np.array([p49]))[0]
    assert gate_mask(logits, np.array([0.0]))[0]  # exactly 0.5 closes the gate
    assert gate_mask(logits, np.array([p49]), threshold=0.4)[0]


def test_background_argmax_gates():
    logits = np.array([[2.0, 1.0, 0.0, 0.0, 0.0]])
    assert gate_mask(logits, np.array([-10.0]))[0]


# -- losses -------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(5))
def test_terms_match_loop_oracle(f64, seed):
    bundle, targets = random_case(np.random.default_rng([seed, 21]))
    got = {k: v.item() for k, v in loss_terms(bundle, targets).items()}
    want = loop_terms(bundle, targets)
    for name in TERMS:
        assert abs(got[name] - want[name]) < 1e-9, name


def test_terms_non_negative(f64, rng):
    for _ in range(10):
        bundle, targets = random_case(rng, b=2)
        assert all(v.item() >= 0 for v in loss_terms(bundle, targets).values())


def test_total_is_weighted_sum(f64, rng):
    bundle, targets = random_case(rng)
    weights = LossWeights()
    br = total_loss(bundle, targets, weights)
    raw = loss_terms(bundle, targets)
    terms = br.as_dict()
    assert abs(terms["total"] - sum(terms[n] for n in TERMS)) < 1e-12
    for n in TERMS:
        assert abs(terms[n] - getattr(weights, n) * raw[n].item()) < 1e-12


def test_perfect_prediction_floor(f64, rng):
    _, targets = random_case(rng)
    cls_t = targets["class_target"]
    targets["motion_target"][:] = np.array([0.25, 0.5, 0.75])[None, :, None, None, None]
    bundle = PredictionBundle(
        Tensor(targets["motion_target"].copy()),
        Tensor(np.eye(5)[cls_t] * 40.0),
        Tensor(np.where(targets["state_target"] > 0, 40.0, -40.0)),
    )
    terms = {k: v.item() for k, v in loss_terms(bundle, targets).items()}
    for name in ("motion", "spatial", "f_temporal", "b_temporal"):
        assert terms[name] == 0.0, name
    assert terms["cls"] < 1e-15 and terms["state"] < 1e-15


def test_uniform_logits_give_log_k(f64, rng):
    bundle, targets = random_case(rng)
    bundle.class_logits = Tensor(np.zeros((1, 4, 4, 5)))
    assert abs(loss_terms(bundle, targets)["cls"].item() - math.log(5)) < 1e-12


def test_class_weights():
    t = np.array([0] * 90 + [1] * 10)
    np.testing.assert_allclose(class_weights(t), [100 / 180, 100 / 20, 0, 0, 0])
    rare = np.array([0] * 9999 + [2])
    assert class_weights(rare)[2] == 20.0
    assert class_weights(rare)[0] == pytest.approx(10000 / (2 * 9999))


def test_all_background_batch(f64, rng):
    bundle, targets = random_case(rng)
    targets["class_target"][:] = 0
    targets["instance_target"][:] = 0
    terms = loss_terms(bundle, targets)
    assert terms["motion"].item() == terms["state"].item() == terms["spatial"].item() == 0.0
    assert terms["f_temporal"].item() == 0.0 and terms["b_temporal"].item() > 0


def test_loss_gradients(f64):
    for seed in range(5):
        bundle, targets = random_case(np.random.default_rng([seed, 5]))
        inputs = [bundle.motion_raw, bundle.class_logits, bundle.state_logit]
        errors = check_gradients(lambda: total_loss(bundle, targets).total, inputs)
        assert max(errors.values()) < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_head_gradients(f64, seed):
    r = np.random.default_rng([seed, 13])
    heads = Heads(3, 4, 2, 5, r)
    x = Tensor(r.normal(size=(2, 3, 3, 3)), requires_grad=True)
    _, targets = random_case(r, b=2, t=2, h=3, w=3)

    def fn():
        return total_loss(heads(x), targets).total

    params = [p for _, p in heads.named_parameters()]
    errors = check_gradients(fn, [x] + params)
    assert max(errors.values()) < 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_term_raises(f64, rng):
    bundle, targets = random_case(rng)
    bundle.motion_raw = Tensor(np.full((1, 3, 4, 4, 2), np.inf))
    with pytest.raises(TrainingFault) as info:
        total_loss(bundle, targets)
    assert info.value.term in TERMS
