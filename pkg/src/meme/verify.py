"""Oracle and property suites.

Every suite takes the implementation under test as an argument so that a
deliberately broken variant can be injected; each returns a ``SuiteResult``.
The oracles here are written with explicit loops and share no code with the
vectorised paths they check.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import returns as R
from .mixture import DiscountedUCBTuned


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


# ---------------------------------------------------------------------------
# reference implementations

def oracle_values(q_row, pi_row, mode: str) -> float:
    if mode == "max":
        best = q_row[0]
        for v in q_row:
            best = v if v > best else best
        return float(best)
    total = 0.0
    for qa, pa in zip(q_row, pi_row):
        total += qa * pa
    return float(total)


def oracle_lambda(rule: str, q_row, pi_row, action: int, mu: float, lam: float, kappa: float) -> float:
    n = len(q_row)
    if rule == "pengs":
        return lam
    if rule == "watkins":
        return lam if all(q_row[action] >= q_row[b] for b in range(n)) else 0.0
    if rule == "soft_watkins":
        mass = 0.0
        for b in range(n):
            if q_row[action] >= q_row[b] - kappa * abs(q_row[b]):
                mass += pi_row[b]
        return lam * mass
    if rule == "retrace":
        return lam * min(1.0, pi_row[action] / mu)
    raise ValueError(rule)


def oracle_qlambda(rewards, discounts, dones, q, pi, actions, mu, rule, lam, kappa, mode):
    """Sum the forward-view expansion term by term for every start step."""
    t_len = len(rewards)
    v = [oracle_values(q[s], pi[s], mode) for s in range(t_len + 1)]
    lambdas = [oracle_lambda(rule, q[s], pi[s], actions[s], mu[s], lam, kappa) for s in range(t_len)]
    out = []
    for t in range(t_len):
        g = v[t]
        trace, disc = 1.0, 1.0
        for k in range(t_len - t):
            s = t + k
            if k > 0:
                trace *= lambdas[s]
            nxt = 0.0 if dones[s] else discounts[s] * v[s + 1]
            g += trace * disc * (rewards[s] + nxt - v[s])
            if dones[s]:
                break
            disc *= discounts[s]
        out.append(g)
    return np.array(out), np.array(lambdas)


def random_mdp_instance(rng: np.random.Generator, max_states=4, n_actions=2, max_horizon=5):
    """Sample a small MDP, a Q table, behaviour/target policies and one trajectory."""
    n_states = int(rng.integers(1, max_states + 1))
    horizon = int(rng.integers(1, max_horizon + 1))
    trans = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.normal(size=(n_states, n_actions))
    terminal = rng.random(n_states) < 0.3
    qtab = rng.normal(size=(n_states, n_actions))
    # occasional exact ties exercise the argmax conventions
    if rng.random() < 0.2:
        qtab[:, 1] = qtab[:, 0]
    mu_tab = rng.dirichlet(np.ones(n_actions), size=n_states) * 0.9 + 0.1 / n_actions
    pi_tab = rng.dirichlet(np.ones(n_actions) * 0.5, size=n_states)
    gamma = float(rng.uniform(0.0, 0.999))
    s = int(rng.integers(n_states))
    states, actions, rewards, dones, mus = [], [], [], [], []
    for _ in range(horizon):
        a = int(rng.choice(n_actions, p=mu_tab[s]))
        states.append(s)
        actions.append(a)
        mus.append(mu_tab[s, a])
        rewards.append(reward[s, a])
        s = int(rng.choice(n_states, p=trans[s, a]))
        done = bool(terminal[s])
        dones.append(done)
        if done:
            break
    states.append(s)
    return dict(
        rewards=np.array(rewards), discounts=np.full(len(rewards), gamma),
        dones=np.array(dones), q=qtab[states], pi=pi_tab[states],
        actions=np.array(actions), mu=np.array(mus))


RULES = {"soft_watkins": "expect", "watkins": "max", "pengs": "max", "retrace": "expect"}


# ---------------------------------------------------------------------------
# suites

def returns_oracle_suite(engine: Callable = R.general_qlambda, n_instances: int = 1000,
                         seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        inst = random_mdp_instance(rng)
        lam = float(rng.choice([0.0, 0.5, 0.95, 1.0, rng.random()]))
        kappa = float(rng.choice([0.0, 0.01, 0.5]))
        inputs = R.TraceInputs(inst["rewards"], inst["discounts"], inst["actions"], inst["mu"],
                               inst["pi"], inst["q"], inst["dones"])
        for rule, mode in RULES.items():
            lam_fn, boot = R.estimator(rule, lam, kappa)
            est = engine(inputs, lam_fn, boot)
            ref, _ = oracle_qlambda(inst["rewards"], inst["discounts"], inst["dones"], inst["q"],
                                    inst["pi"], inst["actions"], inst["mu"], rule, lam, kappa, mode)
            worst = max(worst, float(np.max(np.abs(est.returns - ref))))
    dt = time.perf_counter() - t0
    return SuiteResult("returns_oracle", worst <= tol and dt < 10.0,
                       {"max_abs_error": worst, "tolerance": tol, "instances": n_instances,
                        "runtime_s": dt}, dt)


def special_case_suite(soft_watkins=R.soft_watkins_lambda, engine=R.general_qlambda,
                       n_inputs: int = 1000, seed: int = 1) -> SuiteResult:
    """Soft Watkins(kappa=0, greedy pi) == Watkins; constant lambda == Peng; Retrace ratio rule."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = {"watkins": 0, "pengs": 0, "retrace": 0}
    for _ in range(n_inputs):
        t_len, n_act = int(rng.integers(1, 9)), int(rng.integers(2, 5))
        q = rng.normal(size=(t_len + 1, n_act))
        if rng.random() < 0.3:
            q = np.round(q, 1)  # ties
        greedy = np.zeros_like(q)
        greedy[np.arange(t_len + 1), q.argmax(-1)] = 1.0
        actions = rng.integers(n_act, size=t_len)
        mu = rng.uniform(0.05, 1.0, size=t_len)
        rewards = rng.normal(size=t_len)
        dones = np.zeros(t_len, bool)
        dones[-1] = rng.random() < 0.3
        lam = float(rng.random())
        gam = float(rng.uniform(0, 0.99))
        x = R.TraceInputs(rewards, gam, actions, mu, greedy, q, dones)
        # reference Watkins: cut unless the taken action is an argmax, bootstrap with max
        ref_lam = np.array([lam if q[t, actions[t]] >= q[t].max() else 0.0 for t in range(t_len)])
        got = engine(x, lambda inp: soft_watkins(inp, lam, 0.0), R.expected_bootstrap)
        ref = engine(x, lambda inp: ref_lam, R.max_bootstrap)
        if not (np.array_equal(got.lambdas, ref_lam) and np.array_equal(got.returns, ref.returns)):
            bad["watkins"] += 1
        pi = rng.dirichlet(np.ones(n_act), size=t_len + 1)
        x2 = R.TraceInputs(rewards, gam, actions, mu, pi, q, dones)
        p = engine(x2, lambda inp: R.pengs_lambda(inp, lam), R.max_bootstrap)
        const = engine(x2, lambda inp: np.full(t_len, lam), R.max_bootstrap)
        if not (np.all(p.lambdas == lam) and np.array_equal(p.returns, const.returns)):
            bad["pengs"] += 1
        r = R.retrace_lambda(x2, lam)
        ref_r = np.array([lam * min(1.0, pi[t, actions[t]] / mu[t]) for t in range(t_len)])
        if not np.array_equal(r, ref_r):
            bad["retrace"] += 1
    dt = time.perf_counter() - t0
    return SuiteResult("special_case_recovery", not any(bad.values()), {"mismatches": bad}, dt)


def epsilon_greedy(q: np.ndarray, eps: float) -> np.ndarray:
    n = q.shape[-1]
    out = np.full(q.shape, eps / n)
    idx = q.argmax(-1)
    np.put_along_axis(out, idx[..., None], 1.0 - eps + eps / n, axis=-1)
    return out


def one_sided_p(diffs: np.ndarray) -> float:
    """p-value of H0: mean(diffs) <= 0 (large-sample z test)."""
    sd = diffs.std(ddof=1)
    if sd == 0:
        return 0.0 if diffs.mean() > 0 else 1.0
    z = diffs.mean() / (sd / math.sqrt(len(diffs)))
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def trace_ordering_sample(rng: np.random.Generator, n_sequences=1000, t_len=16, n_actions=4,
                          lam=0.95, kappa=0.01):
    """Mean trace coefficient per sequence for Retrace, Watkins and Soft Watkins.

    Target pi is epsilon-greedy in Q with eps_pi ~ U[0.05, 0.5]; behaviour mu
    is epsilon-greedy in the same Q with eps_mu ~ U[0, eps_pi / 2], i.e. the
    acting policy is greedier than the target, the regime in which an
    epsilon-greedy target makes Retrace cut greedy actions.
    """
    out = np.zeros((n_sequences, 3))
    for i in range(n_sequences):
        q = rng.normal(size=(t_len + 1, n_actions))
        eps_pi = rng.uniform(0.05, 0.5)
        eps_mu = rng.uniform(0.0, eps_pi / 2)
        pi = epsilon_greedy(q, eps_pi)
        mu_full = epsilon_greedy(q[:t_len], eps_mu)
        actions = np.array([rng.choice(n_actions, p=m) for m in mu_full])
        mu = mu_full[np.arange(t_len), actions]
        x = R.TraceInputs(np.zeros(t_len), 0.99, actions, mu, pi, q, np.zeros(t_len, bool))
        out[i] = [R.retrace_lambda(x, lam).mean(), R.watkins_lambda(x, lam).mean(),
                  R.soft_watkins_lambda(x, lam, kappa).mean()]
    return out


def trace_ordering_suite(n_sequences: int = 1000, seed: int = 2, alpha: float = 0.01,
                         lam: float = 0.95) -> SuiteResult:
    t0 = time.perf_counter()
    m = trace_ordering_sample(np.random.default_rng(seed), n_sequences, lam=lam)
    p_rw = one_sided_p(m[:, 1] - m[:, 0])
    p_ws = one_sided_p(m[:, 2] - m[:, 1])
    means = m.mean(0)
    ok = (means[0] <= means[1] <= means[2] <= lam) and p_rw < alpha and p_ws < alpha
    return SuiteResult("trace_ordering", bool(ok), {
        "mean_retrace": means[0], "mean_watkins": means[1], "mean_soft_watkins": means[2],
        "p_retrace_le_watkins": p_rw, "p_watkins_le_soft": p_ws}, time.perf_counter() - t0)


def trust_region_suite(mask_fn=None) -> SuiteResult:
    """Exhaustive truth table over (outside region, TD points away)."""
    import torch
    from .learning import trust_region_mask
    mask_fn = mask_fn or trust_region_mask
    t0 = time.perf_counter()
    cases = []
    for gap in (0.5, 5.0):            # |Q - Q_T| vs alpha * sigma = 2
        for sign in (1.0, -1.0):
            for away in (True, False):
                q_t = 0.0
                q = q_t + sign * gap
                g = q + sign if away else q - sign
                outside = gap > 2.0
                expect_masked = outside and away
                kept = mask_fn(torch.tensor([q]), torch.tensor([q_t]), torch.tensor([g]), 1.0, 2.0)
                cases.append({"outside": outside, "away": away, "sign": sign,
                              "masked": bool(~kept[0]), "expected": expect_masked})
    ok = all(c["masked"] == c["expected"] for c in cases)
    return SuiteResult("trust_region", ok, {"cases": cases}, time.perf_counter() - t0)


def bandit_suite(n_seeds: int = 20, pulls: int = 2000, means=(0.1, 0.3, 0.5, 0.7),
                 bandit_cls=DiscountedUCBTuned, required: float = 0.95) -> SuiteResult:
    t0 = time.perf_counter()
    best = int(np.argmax(means))
    hits = 0
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        b = bandit_cls(len(means), gamma=0.999, beta=1.0, epsilon=0.0)
        for _ in range(pulls):
            arm = b.select(rng)
            b.update(arm, float(rng.random() < means[arm]))
        hits += b.greedy() == best
    frac = hits / n_seeds
    return SuiteResult("bandit_convergence", frac >= required,
                       {"fraction_correct": frac, "seeds": n_seeds}, time.perf_counter() - t0)


def rescale_suite(n: int = 200000, seed: int = 3, tol: float = 1e-9) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    x = rng.choice([-1.0, 1.0], size=n) * 10.0 ** rng.uniform(-12, 6, size=n)
    x[:3] = [0.0, 1e6, -1e6]
    err = float(np.max(np.abs(R.unrescale(R.rescale(x)) - x)))
    return SuiteResult("rescale_roundtrip", err <= tol, {"max_abs_error": err},
                       time.perf_counter() - t0)


def gradient_suite(dtype_bits: int = 64, tol: float = 1e-4, seed: int = 0) -> SuiteResult:
    from .gradcheck import composite_gradient_check
    t0 = time.perf_counter()
    rel = composite_gradient_check(seed=seed)
    return SuiteResult("gradient_check", rel < tol, {"max_relative_error": rel, "tolerance": tol},
                       time.perf_counter() - t0)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "returns_oracle": returns_oracle_suite,
    "special_case_recovery": special_case_suite,
    "trace_ordering": trace_ordering_suite,
    "trust_region": trust_region_suite,
    "bandit_convergence": bandit_suite,
    "rescale_roundtrip": rescale_suite,
    "gradient_check": gradient_suite,
}


def run_suites(names=None) -> list[SuiteResult]:
    names = list(SUITES) if not names or names == ["all"] else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {unknown}; choose from {sorted(SUITES)}")
    return [SUITES[n]() for n in names]
