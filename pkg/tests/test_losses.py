import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrdf import losses
from mrdf.checks import autograd_vs_fd, naive_l_cmr, naive_l_wmr_margin, naive_softmax_ce
from mrdf.config import tiny_config
from mrdf.core_types import LossBreakdown
from mrdf.fusion import HeadOutputs


def t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


@pytest.mark.parametrize("u,v,expected", [
    ([1.0, 0.0], [1.0, 0.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, 2.0], [-2.0, -4.0], -1.0),
])
def test_cosine_examples(u, v, expected):
    assert float(losses.cosine(t(u), t(v))) == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_norm_is_zero_with_warning():
    x = t([[0.0, 0.0]]).requires_grad_()
    with pytest.warns(losses.ZeroNormWarning):
        d = losses.cosine(x, t([[1.0, 2.0]]))
    assert float(d.detach()) == 0.0
    d.sum().backward()
    assert torch.isfinite(x.grad).all()


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        losses.cosine(t([1.0, 0.0]), t([1.0, 0.0, 0.0]))


def test_cmr_aligned_positive_pair_is_zero():
    assert float(losses.l_cmr(t([[1.0, 2.0]]), t([[2.0, 4.0]]), t([1]), "sum")) == pytest.approx(0.0, abs=1e-15)


def test_cmr_inactive_hinge():
    # cos([1,0], [-0.3, sqrt(1-0.09)]) = -0.3
    v = [-0.3, math.sqrt(1 - 0.09)]
    assert float(losses.l_cmr(t([[1.0, 0.0]]), t([v]), t([0]), "sum")) == 0.0


def test_cmr_two_sample_hand_value():
    # d = (0.8, 0.6): 1 - 0.8 for the paired row, max(0, 0.6) for the unpaired row
    a = t([[1.0, 0.0], [1.0, 0.0]])
    v = t([[0.8, 0.6], [0.6, 0.8]])
    assert float(losses.l_cmr(a, v, t([1, 0]), "sum")) == pytest.approx(0.8, abs=1e-12)
    assert float(losses.l_cmr(a, v, t([1, 0]), "mean")) == pytest.approx(0.4, abs=1e-12)


def test_cmr_shape_mismatch():
    with pytest.raises(ValueError):
        losses.l_cmr(torch.ones(2, 3), torch.ones(2, 4), t([1, 0]))


def test_margin_aligned_same_class_pair():
    assert float(losses.l_wmr_margin(t([[1.0, 1.0], [2.0, 2.0]]), t([0, 0]), 0.0, "sum")) == pytest.approx(0, abs=1e-15)


def test_margin_inactive_hinge_for_different_labels():
    v = [-0.2, math.sqrt(1 - 0.04)]
    assert float(losses.l_wmr_margin(t([[1.0, 0.0], v]), t([0, 1]), 0.0, "sum")) == 0.0


def test_margin_three_sample_hand_value():
    # these three cosines are not jointly realizable by real vectors, so the
    # pairwise formula is checked directly on the similarity matrix
    sim = t([[1.0, 0.9, 0.5], [0.9, 1.0, -0.2], [0.5, -0.2, 1.0]])
    y = t([0, 0, 1])
    got = float(losses.margin_from_similarity(sim, y, 0.0, "sum"))
    oracle = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            d = float(sim[i, j])
            oracle += (1 - d) if y[i] == y[j] else max(0.0, d)
    assert oracle == pytest.approx(0.6, abs=1e-12)
    assert got == pytest.approx(oracle, abs=1e-12)
    assert float(losses.margin_from_similarity(sim, y, 0.0, "mean")) == pytest.approx(0.2, abs=1e-12)


def test_margin_single_sample_warns():
    with pytest.warns(RuntimeWarning):
        assert float(losses.l_wmr_margin(torch.ones(1, 3), t([0]))) == 0.0


def test_margin_alpha_shifts_hinge():
    a = t([[1.0, 0.0], [0.6, 0.8]])  # d = 0.6
    assert float(losses.l_wmr_margin(a, t([0, 1]), 0.2, "sum")) == pytest.approx(0.4, abs=1e-12)
    assert float(losses.l_wmr_margin(a, t([0, 1]), 0.7, "sum")) == 0.0


def test_ce_uniform_logits_is_ln2():
    for y in (0, 1):
        assert float(losses.l_wmr_ce(t([[0.0, 0.0]]), t([y]))) == pytest.approx(math.log(2), abs=1e-12)
        assert float(losses.l_ce(t([[0.0, 0.0]]), t([y]))) == pytest.approx(0.693147, abs=1e-6)


def test_ce_saturated_correct():
    assert float(losses.l_wmr_ce(t([[30.0, -30.0]]), t([0]))) < 1e-20


def test_ce_two_sample_hand_value():
    got = float(losses.l_wmr_ce(t([[1.0, 0.0], [0.0, 1.0]]), t([0, 1])))
    sigma = math.e / (math.e + 1)
    assert got == pytest.approx(-math.log(sigma), abs=1e-12)
    assert got == pytest.approx(0.313262, abs=1e-6)


def test_ce_and_wmr_ce_share_the_kernel():
    rng = np.random.default_rng(1)
    logits = t(rng.standard_normal((7, 2)))
    y = t(rng.integers(0, 2, 7))
    assert float(losses.l_ce(logits, y)) == float(losses.l_wmr_ce(logits, y))


def test_ce_rejects_non_finite():
    with pytest.raises(ValueError):
        losses.l_ce(t([[float("nan"), 0.0]]), t([0]))


def test_total_loss_examples():
    assert losses.total_loss(0.5, 0.8, 0.2, 0.3, (1, 1, 1)).total == pytest.approx(1.8, abs=1e-12)
    assert losses.total_loss(0.5, 0.8, 0.2, 0.3, (1, 0, 0)).total == 0.5
    with pytest.raises(ValueError):
        losses.total_loss(1, 1, 1, 1, (0, 0, 0))


def _fake_outputs(b=6, d=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    pa, pv = torch.randn(b, d, generator=g), torch.randn(b, d, generator=g)
    heads = HeadOutputs(torch.randn(b, 2, generator=g), torch.randn(b, 2, generator=g), torch.randn(b, 2, generator=g))

    class O:
        pass

    o = O()
    o.pooled_a, o.pooled_v, o.heads = pa, pv, heads
    return o


def test_variants_differ_only_in_wmr_slot():
    o = _fake_outputs()
    y_m, y_a, y_v, y_c = t([1, 1, 1, 0, 1, 1]), t([1, 1, 0, 0, 0, 1]), t([1, 0, 1, 0, 1, 1]), t([0, 0, 0, 1, 0, 0])
    _, ce = losses.objective(o, y_m, y_a, y_v, y_c, tiny_config(**{"loss.variant": "ce"}).loss)
    _, mg = losses.objective(o, y_m, y_a, y_v, y_c, tiny_config(**{"loss.variant": "margin"}).loss)
    _, base = losses.objective(o, y_m, y_a, y_v, y_c, tiny_config(**{"loss.variant": "baseline"}).loss)
    assert (ce.l_ce, ce.l_cmr) == (mg.l_ce, mg.l_cmr)
    assert (ce.l_wmr_a, ce.l_wmr_v) != (mg.l_wmr_a, mg.l_wmr_v)
    assert base.total == base.l_ce == ce.l_ce
    assert (base.l_cmr, base.l_wmr_a, base.l_wmr_v) == (0.0, 0.0, 0.0)


def test_objective_total_matches_breakdown():
    o = _fake_outputs()
    labels = [t(x) for x in ([1, 1, 1, 0, 1, 1], [1, 1, 0, 0, 0, 1], [1, 0, 1, 0, 1, 1], [0, 0, 0, 1, 0, 0])]
    cfg = tiny_config(**{"loss.weights.cmr": 0.3, "loss.weights.wmr": 2.0}).loss
    total, lb = losses.objective(o, *labels, cfg)
    assert float(total) == pytest.approx(lb.total, abs=1e-6)
    assert lb.total == pytest.approx(lb.l_ce + 0.3 * lb.l_cmr + 2.0 * (lb.l_wmr_a + lb.l_wmr_v), abs=1e-12)


def test_multimodal_wmr_target_option():
    o = _fake_outputs()
    labels = [t(x) for x in ([1, 1, 1, 0, 1, 1], [1, 1, 0, 0, 0, 1], [1, 0, 1, 0, 1, 1], [0, 0, 0, 1, 0, 0])]
    _, lit = losses.objective(o, *labels, tiny_config(**{"loss.wmr_ce_target": "multimodal"}).loss)
    assert lit.l_wmr_a == pytest.approx(float(losses.l_wmr_ce(o.heads.logits_a, labels[0])))


def test_non_finite_term_is_named():
    o = _fake_outputs()
    o.pooled_a = o.pooled_a * float("inf")
    labels = [t(x) for x in ([1, 1, 1, 0, 1, 1], [1, 1, 0, 0, 0, 1], [1, 0, 1, 0, 1, 1], [0, 0, 0, 1, 0, 0])]
    with pytest.raises(losses.NonFiniteLossError, match="l_cmr"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        losses.objective(o, *labels, tiny_config().loss)


# -- properties -------------------------------------------------------------

batches = st.integers(2, 8).flatmap(
    lambda b: st.tuples(
        arrays(np.float64, (b, 4), elements=st.floats(-3, 3)),
        arrays(np.float64, (b, 4), elements=st.floats(-3, 3)),
        arrays(np.int64, (b,), elements=st.integers(0, 1)),
        arrays(np.float64, (b,), elements=st.floats(0.1, 10)),
    )
)


@settings(max_examples=60, deadline=None)
@given(batches)
def test_scale_invariance(batch):
    a, v, y, s = batch
    if (np.linalg.norm(a, axis=1) < 1e-3).any() or (np.linalg.norm(v, axis=1) < 1e-3).any():
        return
    ta, tv, ty, ts = t(a), t(v), torch.from_numpy(y), t(s)[:, None]
    assert float(losses.l_cmr(ta * ts, tv, ty)) == pytest.approx(float(losses.l_cmr(ta, tv, ty)), abs=1e-9)
    assert float(losses.l_wmr_margin(ta * ts, ty)) == pytest.approx(float(losses.l_wmr_margin(ta, ty)), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(batches, st.floats(-1, 1))
def test_summand_bounds(batch, alpha):
    a, v, y, _ = batch
    ta, tv, ty = t(a), t(v), torch.from_numpy(y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(len(y)):
            c = float(losses.l_cmr(ta[i:i + 1], tv[i:i + 1], ty[i:i + 1], "sum"))
            assert -1e-12 <= c <= 2 + 1e-12
            for j in range(i + 1, len(y)):
                m = float(losses.l_wmr_margin(ta[[i, j]], ty[[i, j]], alpha, "sum"))
                upper = 2.0 if y[i] == y[j] else 1.0 - alpha
                assert -1e-12 <= m <= max(upper, 0.0) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.99, 0.98), st.floats(0.001, 0.01))
def test_cmr_monotone_in_similarity(d, step):
    def at(dd, y):
        v = t([[dd, math.sqrt(1 - dd * dd)]])
        return float(losses.l_cmr(t([[1.0, 0.0]]), v, t([y]), "sum"))

    assert at(d + step, 1) < at(d, 1)
    if d > 0:
        assert at(d + step, 0) > at(d, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 32), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_vectorized_margin_matches_double_loop(b, d, seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((b, d))
    y = rng.integers(0, 2, b)
    alpha = float(rng.uniform(-1, 1))
    for red in ("mean", "sum"):
        got = float(losses.l_wmr_margin(t(emb), torch.from_numpy(y), alpha, red))
        assert abs(got - naive_l_wmr_margin(emb.tolist(), y.tolist(), alpha, red)) <= 1e-9


def test_cmr_and_ce_match_loops():
    rng = np.random.default_rng(5)
    a, v = rng.standard_normal((9, 6)), rng.standard_normal((9, 6))
    y = rng.integers(0, 2, 9)
    logits = rng.standard_normal((9, 2))
    assert float(losses.l_cmr(t(a), t(v), torch.from_numpy(y))) == pytest.approx(
        naive_l_cmr(a.tolist(), v.tolist(), y.tolist()), abs=1e-12)
    assert float(losses.l_ce(t(logits), torch.from_numpy(y), "sum")) == pytest.approx(
        naive_softmax_ce(logits.tolist(), y.tolist(), "sum"), abs=1e-12)


@pytest.mark.parametrize("name", ["cosine", "l_cmr", "l_wmr_margin", "l_wmr_ce", "l_ce"])
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(11)
    y = torch.from_numpy(rng.integers(0, 2, 6))
    other = t(rng.standard_normal((6, 5)))
    fns = {
        "cosine": (lambda x: losses.cosine(x[0], other[0]), (6, 5)),
        "l_cmr": (lambda x: losses.l_cmr(x, other, y), (6, 5)),
        "l_wmr_margin": (lambda x: losses.l_wmr_margin(x, y, 0.1), (6, 5)),
        "l_wmr_ce": (lambda x: losses.l_wmr_ce(x, y), (6, 2)),
        "l_ce": (lambda x: losses.l_ce(x, y), (6, 2)),
    }
    fn, shape = fns[name]
    assert autograd_vs_fd(fn, rng.standard_normal(shape)) < 1e-4


def test_non_finite_logits_name_the_term():
    from mrdf.losses import NonFiniteLossError

    bad = torch.tensor([[0.0, float("nan")], [1.0, 2.0]])
    with pytest.raises(NonFiniteLossError, match="l_wmr_ce"):
        losses.l_wmr_ce(bad, torch.tensor([0, 1]))
