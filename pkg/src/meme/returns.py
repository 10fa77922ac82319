"""Forward-view Q(lambda) returns with pluggable trace-cutting rules.

Arrays are time-major: per-step quantities have shape ``(T, *batch)`` and
per-action quantities ``(T, *batch, A)``. Action values ``q`` carry one extra
row, ``q[T]``, holding the values of the state after the last step; it is
ignored wherever that step is terminal.

Index convention: the coefficient that lets information from step ``s``
flow into the target of step ``s - 1`` is ``lambda_s``, computed from
``(x_s, a_s)``. So

    G_t = V(x_t) + sum_k (prod_{i=1..k} lambda_{t+i}) gamma^k delta_{t+k}
    delta_s = r_s + gamma V(x_{s+1}) - V(x_s)

where ``V`` is either ``max_a Q`` or ``E_pi Q``, and every sum stops at the
first terminal step or at the end of the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None

RESCALE_EPS = 1e-3

ESTIMATORS = ("soft_watkins", "watkins", "pengs", "retrace")


class ReturnInputError(ValueError):
    pass


@dataclass
class TraceInputs:
    rewards: np.ndarray          # (T, ...)
    discounts: np.ndarray        # (T, ...) or broadcastable
    actions: np.ndarray          # (T, ...) int
    behaviour_probs: np.ndarray  # (T, ...) mu(a_t | x_t)
    target_probs: np.ndarray     # (T+1, ..., A) pi(. | x_t)
    q: np.ndarray                # (T+1, ..., A), untransformed
    dones: np.ndarray            # (T, ...) bool
    bootstrap_q: np.ndarray | None = None  # values used for V; defaults to q

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.behaviour_probs = np.asarray(self.behaviour_probs, dtype=np.float64)
        self.target_probs = np.asarray(self.target_probs, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.discounts = np.broadcast_to(
            np.asarray(self.discounts, dtype=np.float64), self.rewards.shape)
        if self.bootstrap_q is not None:
            self.bootstrap_q = np.asarray(self.bootstrap_q, dtype=np.float64)

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    def validate(self) -> None:
        if self.rewards.ndim == 0 or self.length == 0:
            raise ReturnInputError("empty sequence")
        t = self.length
        if self.q.shape[0] != t + 1 or self.target_probs.shape[0] != t + 1:
            raise ReturnInputError("q and target_probs need T+1 rows")
        if self.q.shape != self.target_probs.shape:
            raise ReturnInputError("q and target_probs differ in shape")
        arrays = [self.rewards, self.discounts, self.behaviour_probs, self.target_probs, self.q]
        if self.bootstrap_q is not None:
            arrays.append(self.bootstrap_q)
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise ReturnInputError("non-finite input")
        if np.any(np.abs(self.target_probs.sum(-1) - 1.0) > 1e-9) or np.any(self.target_probs < 0):
            raise ReturnInputError("target probabilities must lie on the simplex")
        if np.any(self.behaviour_probs <= 0) or np.any(self.behaviour_probs > 1):
            raise ReturnInputError("behaviour probabilities must lie in (0, 1]")
        if np.any(self.discounts < 0) or np.any(self.discounts >= 1):
            raise ReturnInputError("discounts must lie in [0, 1)")
        n_actions = self.q.shape[-1]
        if np.any(self.actions < 0) or np.any(self.actions >= n_actions):
            raise ReturnInputError("action index out of range")


@dataclass
class ReturnEstimate:
    returns: np.ndarray  # (T, ...)
    lambdas: np.ndarray  # (T, ...)


def _taken(values: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(values, actions[..., None], axis=-1)[..., 0]


# trace-cutting rules -----------------------------------------------------------

def soft_watkins_lambda(inputs: TraceInputs, lam: float, kappa: float) -> np.ndarray:
    t = inputs.length
    q = inputs.q[:t]
    q_taken = _taken(q, inputs.actions)[..., None]
    ok = q_taken >= q - kappa * np.abs(q)
    return lam * (inputs.target_probs[:t] * ok).sum(-1)


def watkins_lambda(inputs: TraceInputs, lam: float) -> np.ndarray:
    t = inputs.length
    q = inputs.q[:t]
    greedy = _taken(q, inputs.actions) >= q.max(-1)
    return lam * greedy.astype(np.float64)


def pengs_lambda(inputs: TraceInputs, lam: float) -> np.ndarray:
    return np.full(inputs.rewards.shape, float(lam))


def retrace_lambda(inputs: TraceInputs, lam: float) -> np.ndarray:
    mu = inputs.behaviour_probs
    if np.any(mu <= 0):
        raise ReturnInputError("retrace needs mu(a|x) > 0")
    pi_taken = _taken(inputs.target_probs[:inputs.length], inputs.actions)
    return lam * np.minimum(1.0, pi_taken / mu)


def max_bootstrap(q: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return q.max(-1)


def expected_bootstrap(q: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return (q * probs).sum(-1)


def estimator(name: str, lam: float, kappa: float = 0.01):
    """Return ``(lambda_policy, bootstrap_policy)`` for a named estimator."""
    if name == "soft_watkins":
        return (lambda x: soft_watkins_lambda(x, lam, kappa)), expected_bootstrap
    if name == "watkins":
        return (lambda x: watkins_lambda(x, lam)), max_bootstrap
    if name == "pengs":
        return (lambda x: pengs_lambda(x, lam)), max_bootstrap
    if name == "retrace":
        return (lambda x: retrace_lambda(x, lam)), expected_bootstrap
    raise ReturnInputError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")


# engine --------------------------------------------------------------------------

def general_qlambda(inputs: TraceInputs,
                    lambda_policy: Callable[[TraceInputs], np.ndarray],
                    bootstrap_policy: Callable[[np.ndarray, np.ndarray], np.ndarray] = max_bootstrap,
                    validate: bool = True) -> ReturnEstimate:
    if validate:
        inputs.validate()
    t_len = inputs.length
    lambdas = np.asarray(lambda_policy(inputs), dtype=np.float64)
    boot_q = inputs.q if inputs.bootstrap_q is None else inputs.bootstrap_q
    values = bootstrap_policy(boot_q, inputs.target_probs)  # (T+1, ...)
    cont = inputs.discounts * (~inputs.dones)
    returns = np.empty_like(inputs.rewards)
    # G_T is replaced by V_T: the trace is truncated at the sequence end
    carry = np.zeros_like(values[0])
    for t in range(t_len - 1, -1, -1):
        returns[t] = inputs.rewards[t] + cont[t] * (values[t + 1] + carry)
        carry = lambdas[t] * (returns[t] - values[t])
    return ReturnEstimate(returns, lambdas)


# value rescaling -------------------------------------------------------------------

def _ops(x):
    if torch is not None and isinstance(x, torch.Tensor):
        return torch
    return np


def rescale(x, eps: float = RESCALE_EPS):
    xp = _ops(x)
    return xp.sign(x) * (xp.sqrt(x * x + 1.0) - 1.0) + eps * x


def unrescale(y, eps: float = RESCALE_EPS):
    xp = _ops(y)
    a = xp.abs(y)
    # positive root of (1 - eps^2) x^2 + 2 eps (a + 1) x - a (a + 2) = 0, rationalised
    x = xp.sign(y) * a * (a + 2.0) / (xp.sqrt(a * (a + 2.0) + eps * eps) + eps * (a + 1.0))
    # one Newton step removes the cancellation error of the closed form
    dh = xp.abs(x) / xp.sqrt(x * x + 1.0) + eps
    return x - (rescale(x, eps) - y) / dh
