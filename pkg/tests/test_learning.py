import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from meme.learning import (
    NORM_FLOOR, PRIORITY_FLOOR, LossBundle, RunningStats, compute_priority, cross_mixture_loss,
    cross_mixture_weights, distillation_loss, epsilon_greedy_probs, kl_divergence, normalize_td,
    sharpen_policy, squared_td, td_divisor, trust_region_mask, value_loss)
from meme.mixture import ConfigError
from meme.verify import trust_region_suite


def t(*x):
    return torch.tensor(x, dtype=torch.float64)


# -- normalisation ------------------------------------------------------------------

def test_divisor_max_rule_example():
    # error 0.5 with sigma_running 0.2 and sigma_batch 0.1 -> 2.5
    # a two-point batch {0.4, 0.6} has population std 0.1
    e = np.array([0.4, 0.6])
    assert td_divisor(e, 0.2) == pytest.approx(0.2)
    assert 0.5 / td_divisor(e, 0.2) == pytest.approx(2.5)


def test_divisor_floor():
    e = np.array([0.001, 0.005])  # batch std 0.002
    assert td_divisor(e, 0.005) == NORM_FLOOR
    out = normalize_td(e, 0.005)
    np.testing.assert_allclose(out, e / 0.01)


def test_zero_errors_stay_zero():
    assert np.all(normalize_td(np.zeros(5), 0.3) == 0.0)


def test_normalize_matches_plain_division():
    rng = np.random.default_rng(0)
    e = rng.normal(size=40)
    np.testing.assert_allclose(normalize_td(e, 0.2), e / td_divisor(e, 0.2), rtol=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-2 ** 20, 2 ** 20), min_size=2, max_size=30),
       st.sampled_from([10.0 ** 3, 2.0 ** -7, 3.0, 2.0 ** 10 * 5]))
def test_scale_equivariance_is_bit_exact(ints, c):
    # errors on a coarse grid so that c * e is exactly representable in float64;
    # with an inexact product each element rounds separately and bit identity is impossible
    e = np.array(ints, dtype=np.float64) * 2.0 ** -12
    assume(min(np.std(e), np.std(c * e)) > NORM_FLOOR)
    np.testing.assert_array_equal(normalize_td(c * e, 0.0), normalize_td(e, 0.0))


def test_scaling_one_mixture_by_1e3_leaves_normed_errors_identical():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(16, 4)).astype(np.float32).astype(np.float64)
    base = normalize_td(e, 0.0)
    scaled = normalize_td(1e3 * e, 0.0)
    assert np.array_equal(base, scaled)


def test_running_stats_is_weighted_and_zero_initialised():
    rs = RunningStats(2, decay=0.5)
    errs = np.zeros((2, 2, 2))
    errs[:, 0, 0] = 1.0
    errs[:, 1, 0] = 3.0
    rs.update(errs, weights=np.array([1.0, 0.0]))
    assert rs.mean[0] == pytest.approx(0.5)   # 0.5 * 0 + 0.5 * 1, the zero-weight item ignored
    assert rs.mean[1] == 0.0
    assert rs.batch_std[0] == pytest.approx(1.0)
    assert np.all(rs.sigma() >= NORM_FLOOR)
    clone = RunningStats(2)
    clone.load_state_dict(rs.state_dict())
    np.testing.assert_array_equal(clone.sigma(), rs.sigma())


# -- trust region -------------------------------------------------------------------

@pytest.mark.parametrize("q,qt,g,kept", [(5, 1, 6, False), (5, 1, 3, True), (2, 2, 9, True),
                                         (2, 2, -9, True), (-5, -1, -6, False), (-5, -1, 0, True)])
def test_trust_region_examples(q, qt, g, kept):
    m = trust_region_mask(t(q), t(qt), t(g), 1.0, 2.0)
    assert bool(m) is kept


def test_trust_region_truth_table():
    res = trust_region_suite()
    assert res.passed, res.detail


def test_trust_region_sign_flip_is_detected():
    def broken(q, qt, g, sigma, alpha):
        gap = q - qt
        return ~((gap.abs() > alpha * sigma) & (torch.sign(gap) == torch.sign(q - g)))
    assert not trust_region_suite(broken).passed


# -- cross-mixture weighting --------------------------------------------------------

def test_cross_mixture_example():
    per = t(2.0, 4.0)[None]
    assert cross_mixture_loss(per, [0], 0.5).item() == pytest.approx(2.5)


def test_eta_one_is_behaviour_only():
    per = t(2.0, 4.0, 7.0)[None]
    assert cross_mixture_loss(per, [2], 1.0).item() == pytest.approx(7.0)


def test_single_mixture_ignores_eta():
    per = t(3.0)[None]
    for eta in (0.0, 0.3, 1.0):
        assert cross_mixture_loss(per, [0], eta).item() == pytest.approx(3.0)


@given(st.floats(0, 1), st.integers(1, 12), st.floats(0.1, 10))
def test_uniform_losses_give_same_total(eta, n, v):
    w = cross_mixture_weights(np.zeros(3, int), n, eta)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, rtol=1e-12)
    per = torch.full((3, n), v, dtype=torch.float64)
    assert cross_mixture_loss(per, [0, 0, 0], eta).item() == pytest.approx(v)


def test_eta_outside_unit_interval_rejected():
    with pytest.raises(ConfigError):
        cross_mixture_weights([0], 2, 1.5)


def test_value_loss_modes():
    normed = torch.ones(3, 1, 2, dtype=torch.float64)
    kept = torch.ones(3, 1, 2, dtype=torch.bool)
    valid = torch.ones(3, 1, dtype=torch.bool)
    loss, per = value_loss(normed, kept, valid, [0], 0.5)
    assert loss.item() == pytest.approx(0.5)
    loss_d, _ = value_loss(normed, kept, valid, [0], 0.5, mode="decomposed",
                           normed_intrinsic=2 * normed, kept_intrinsic=kept, betas=[0.0, 1.0])
    # mixture 0: 0.5, mixture 1: 0.5 + 1 * 2 = 2.5 -> 0.5*0.5 + 0.25*(0.5+2.5)
    assert loss_d.item() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        value_loss(normed, kept, valid, [0], 0.5, mode="bogus")


def test_masked_and_invalid_steps_do_not_count():
    normed = torch.tensor([[[1.0]], [[5.0]], [[9.0]]], dtype=torch.float64)
    kept = torch.tensor([[[True]], [[False]], [[True]]])
    valid = torch.tensor([[True], [True], [False]])
    per = squared_td(normed, kept, valid)
    assert per.item() == pytest.approx(0.5 * 1.0 / 2)


# -- distillation -------------------------------------------------------------------

def test_distillation_uniform_policy_is_ln2():
    q = t(3.0, -1.0)[None]
    logits = torch.zeros(1, 2, dtype=torch.float64)
    loss, kept = distillation_loss(q, logits, logits)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
    assert kept.all()


def test_distillation_minimum_is_target_entropy():
    q = t(0.2, 1.0, -0.5)[None]
    target = epsilon_greedy_probs(q, 1e-4)
    logits = torch.log(target)
    loss, _ = distillation_loss(q, logits, logits)
    ent = -(target * torch.log(target)).sum()
    assert loss.item() == pytest.approx(ent.item(), rel=1e-10)
    worse, _ = distillation_loss(q, logits + t(0.3, 0.0, 0.1), logits)
    assert worse.item() > loss.item()


def test_distillation_kl_mask():
    q = torch.zeros(2, 2, dtype=torch.float64)
    on = torch.zeros(2, 2, dtype=torch.float64)
    tg = t(0.0, 0.0, 8.0, -8.0).reshape(2, 2)
    loss, kept = distillation_loss(q, on, tg, c_kl=0.5)
    assert kept.tolist() == [True, False]
    assert kl_divergence(on, on).abs().max().item() == 0.0


def test_same_parameters_never_mask():
    rng = torch.Generator().manual_seed(0)
    logits = torch.randn(50, 4, generator=rng, dtype=torch.float64) * 5
    _, kept = distillation_loss(torch.randn(50, 4, dtype=torch.float64), logits, logits.clone())
    assert kept.all()


def test_sharpen_examples():
    np.testing.assert_allclose(sharpen_policy(np.array([0.8, 0.2]), 0.25), [0.99611, 0.00389],
                               atol=5e-6)
    p = np.array([0.5, 0.3, 0.2])
    np.testing.assert_allclose(sharpen_policy(p, 1.0), p, rtol=1e-12)
    np.testing.assert_allclose(sharpen_policy(p, 1e-3), [1, 0, 0], atol=1e-12)
    out = sharpen_policy(torch.tensor([[0.8, 0.2]], dtype=torch.float64), 0.25)
    np.testing.assert_allclose(out.numpy()[0], [0.99611, 0.00389], atol=5e-6)
    assert np.isfinite(sharpen_policy(np.array([1.0, 0.0]), 0.25)).all()
    with pytest.raises(ConfigError):
        sharpen_policy(p, 0.0)


# -- priorities ---------------------------------------------------------------------

def test_priority_examples():
    assert compute_priority(np.array([1.0, 0.5]), 0.9) == pytest.approx(0.975)
    assert compute_priority(np.zeros(4)) == PRIORITY_FLOOR
    assert compute_priority(np.array([-2.0, 0.5, 1.0]), 1.0) == pytest.approx(2.0)


def test_priority_respects_valid_mask():
    d = np.array([[1.0, 1.0], [9.0, 0.5]])
    valid = np.array([[True, True], [False, True]])
    p = compute_priority(d, 0.9, valid)
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.9 + 0.1 * 0.75)


def test_loss_bundle_check():
    LossBundle(t(1.0), t(0.5), np.array([0.1])).check()
    with pytest.raises(FloatingPointError):
        LossBundle(t(float("nan")), t(0.5), np.array([0.1])).check()
    with pytest.raises(FloatingPointError):
        LossBundle(t(1.0), t(0.5), np.array([0.0])).check()
