import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from meme import returns as R
from meme import verify as V


def _inputs(rewards, q, pi=None, actions=None, mu=None, dones=None, gamma=0.9):
    t = len(rewards)
    q = np.asarray(q, float)
    pi = np.full(q.shape, 1.0 / q.shape[-1]) if pi is None else pi
    actions = np.zeros(t, int) if actions is None else actions
    mu = np.ones(t) if mu is None else mu
    dones = np.zeros(t, bool) if dones is None else dones
    return R.TraceInputs(rewards, gamma, actions, mu, pi, q, dones)


def test_lambda_zero_is_one_step():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(6, 3))
    r = rng.normal(size=5)
    x = _inputs(r, q, gamma=0.8)
    est = R.general_qlambda(x, lambda inp: R.pengs_lambda(inp, 0.0), R.max_bootstrap)
    assert np.allclose(est.returns, r + 0.8 * q[1:].max(-1), atol=1e-14)


def test_single_terminal_step():
    x = _inputs([1.0], [[5.0, 7.0], [100.0, 100.0]], dones=np.array([True]))
    est = R.general_qlambda(x, lambda inp: R.pengs_lambda(inp, 0.95))
    assert est.returns.tolist() == [1.0]


def test_three_step_chain_pengs_lambda_one():
    # V = max_a Q = [10, 4, 6, 8]; with lambda = 1 the expansion telescopes to
    # discounted rewards plus the discounted final bootstrap:
    # G0 = 1 + .5*2 + .25*3 + .125*8 = 3.75, G1 = 2 + .5*3 + .25*8 = 5.5, G2 = 3 + .5*8 = 7
    q = [[10.0, 0.0], [4.0, 1.0], [6.0, -1.0], [8.0, 2.0]]
    x = _inputs([1.0, 2.0, 3.0], q, gamma=0.5)
    est = R.general_qlambda(x, lambda inp: R.pengs_lambda(inp, 1.0), R.max_bootstrap)
    assert est.returns == pytest.approx([3.75, 5.5, 7.0], abs=1e-14)
    ref, _ = V.oracle_qlambda([1.0, 2.0, 3.0], [0.5] * 3, [False] * 3, np.array(q),
                              np.full((4, 2), 0.5), [0, 0, 0], [1.0] * 3, "pengs", 1.0, 0.0, "max")
    assert np.allclose(ref, [3.75, 5.5, 7.0], atol=1e-14)


def test_soft_watkins_examples():
    q = np.array([[1.0, 3.0, 2.0], [0.0, 0.0, 0.0]])
    pi = np.full((2, 3), 1 / 3)
    x = _inputs([0.0], q, pi=pi, actions=np.array([1]))
    for kappa in (0.0, 0.01, 1.0):
        assert R.soft_watkins_lambda(x, 0.9, kappa)[0] == pytest.approx(0.9)
    greedy = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    x = _inputs([0.0], q, pi=greedy, actions=np.array([2]))
    assert R.soft_watkins_lambda(x, 0.9, 0.0)[0] == 0.0
    # 1 >= 1.005 - 0.01 * 1.005 holds for both actions
    q = np.array([[1.0, 1.005], [0.0, 0.0]])
    x = _inputs([0.0], q, pi=np.full((2, 2), 0.5), actions=np.array([0]))
    assert R.soft_watkins_lambda(x, 0.95, 0.01)[0] == pytest.approx(0.95)


def test_retrace_examples():
    pi = np.array([[0.2, 0.8], [0.5, 0.5]])
    x = _inputs([0.0], np.zeros((2, 2)), pi=pi, actions=np.array([0]), mu=np.array([0.4]))
    assert R.retrace_lambda(x, 0.95)[0] == pytest.approx(0.475)
    x = _inputs([0.0], np.zeros((2, 2)), pi=pi, actions=np.array([0]), mu=np.array([0.2]))
    assert R.retrace_lambda(x, 0.95)[0] == pytest.approx(0.95)
    pi0 = np.array([[0.0, 1.0], [0.5, 0.5]])
    x = _inputs([0.0], np.zeros((2, 2)), pi=pi0, actions=np.array([0]), mu=np.array([0.3]))
    assert R.retrace_lambda(x, 0.95)[0] == 0.0


@pytest.mark.parametrize("lam", [0.95, 0.0, 1.0])
def test_pengs_constant(lam):
    x = _inputs(np.zeros(4), np.zeros((5, 2)))
    assert np.all(R.pengs_lambda(x, lam) == lam)


def test_rescale_examples():
    assert R.rescale(0.0) == 0.0
    assert R.rescale(1.0) == pytest.approx(math.sqrt(2) - 1 + 0.001, abs=1e-15)
    assert R.rescale(1.0) == pytest.approx(0.41521, abs=1e-5)


def test_rescale_roundtrip_log_uniform():
    result = V.rescale_suite()
    assert result.passed, result.detail


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_rescale_strictly_increasing(a, b):
    # strict in exact arithmetic; in floats tiny gaps can round to a tie
    if a < b:
        assert R.rescale(a) <= R.rescale(b)
    if b - a > 1e-6 * max(1.0, abs(a), abs(b)):
        assert R.rescale(a) < R.rescale(b)


@pytest.mark.parametrize("bad", ["nan", "empty", "simplex", "mu"])
def test_input_validation(bad):
    q = np.zeros((3, 2))
    pi = np.full((3, 2), 0.5)
    r = np.zeros(2)
    mu = np.ones(2)
    if bad == "nan":
        r = np.array([np.nan, 0.0])
    elif bad == "empty":
        r, q, pi, mu = np.zeros(0), np.zeros((1, 2)), np.full((1, 2), 0.5), np.ones(0)
    elif bad == "simplex":
        pi = np.full((3, 2), 0.6)
    else:
        mu = np.array([0.0, 1.0])
    x = R.TraceInputs(r, 0.9, np.zeros(len(r), int), mu, pi, q, np.zeros(len(r), bool))
    with pytest.raises(R.ReturnInputError):
        R.general_qlambda(x, lambda inp: R.pengs_lambda(inp, 0.9))


def test_unknown_estimator():
    with pytest.raises(R.ReturnInputError):
        R.estimator("tree_backup", 0.9)


def test_terminal_truncates_trace():
    # reward after a terminal must never leak backwards
    q = np.zeros((4, 2))
    x = _inputs([0.0, 1.0, 100.0], q, dones=np.array([False, True, False]), gamma=0.5)
    est = R.general_qlambda(x, lambda inp: R.pengs_lambda(inp, 1.0))
    assert est.returns[:2] == pytest.approx([0.5, 1.0])


def test_oracle_equivalence_all_rules():
    result = V.returns_oracle_suite(n_instances=1000)
    assert result.passed, result.detail


def test_special_case_recovery():
    result = V.special_case_suite()
    assert result.passed, result.detail


def test_trace_ordering():
    result = V.trace_ordering_suite()
    assert result.passed, result.detail


def test_ordering_depends_on_regime():
    # with a target greedier than behaviour Retrace keeps partial traces on
    # exploratory actions that Watkins cuts, so the first inequality reverses
    rng = np.random.default_rng(7)
    lam, diffs = 0.95, []
    for _ in range(300):
        q = rng.normal(size=(17, 4))
        pi = V.epsilon_greedy(q, 0.01)
        mu_full = V.epsilon_greedy(q[:16], 0.3)
        a = np.array([rng.choice(4, p=m) for m in mu_full])
        x = R.TraceInputs(np.zeros(16), 0.9, a, mu_full[np.arange(16), a], pi, q, np.zeros(16, bool))
        diffs.append(R.retrace_lambda(x, lam).mean() - R.watkins_lambda(x, lam).mean())
    assert np.mean(diffs) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0, 1), st.floats(0, 0.5))
def test_lambdas_bounded_and_returns_finite(seed, lam, kappa):
    rng = np.random.default_rng(seed)
    inst = V.random_mdp_instance(rng)
    x = R.TraceInputs(inst["rewards"], inst["discounts"], inst["actions"], inst["mu"],
                      inst["pi"], inst["q"], inst["dones"])
    for name in R.ESTIMATORS:
        lam_fn, boot = R.estimator(name, lam, kappa)
        est = R.general_qlambda(x, lam_fn, boot)
        assert np.all(est.lambdas >= 0) and np.all(est.lambdas <= lam + 1e-15)
        assert np.all(np.isfinite(est.returns))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-100, 100)),
       st.floats(0, 1))
def test_batched_matches_per_sequence(q_stack, lam):
    # batch dimension after time must not change any per-sequence result
    rng = np.random.default_rng(0)
    q = np.stack([q_stack, q_stack[::-1], -q_stack], axis=1)  # (T+1, B=3, A)
    pi = rng.dirichlet(np.ones(3), size=(5, 3))
    r = rng.normal(size=(4, 3))
    a = rng.integers(3, size=(4, 3))
    mu = rng.uniform(0.1, 1, size=(4, 3))
    d = np.zeros((4, 3), bool)
    d[2, 1] = True
    lam_fn, boot = R.estimator("soft_watkins", lam, 0.01)
    whole = R.general_qlambda(R.TraceInputs(r, 0.9, a, mu, pi, q, d), lam_fn, boot)
    for b in range(3):
        one = R.general_qlambda(R.TraceInputs(r[:, b], 0.9, a[:, b], mu[:, b], pi[:, b], q[:, b],
                                              d[:, b]), lam_fn, boot)
        assert np.allclose(one.returns, whole.returns[:, b], atol=1e-12)
