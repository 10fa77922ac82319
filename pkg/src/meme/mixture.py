"""Policy family (intrinsic weight, discount) and the discounted UCB-Tuned meta-controller."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def build_betas(n: int, beta_im: float) -> tuple[float, ...]:
    if n < 2:
        raise ConfigError(f"need at least 2 mixtures, got {n}")
    if beta_im < 0:
        raise ConfigError(f"beta_im must be non-negative, got {beta_im}")
    betas = []
    for i in range(n):
        if i == 0:
            betas.append(0.0)
        elif i == n - 1:
            betas.append(float(beta_im))
        else:
            betas.append(beta_im * _sigmoid(8.0 * (2 * i - (n - 2)) / (n - 2)))
    return tuple(betas)


def build_gammas(n: int, gamma_max: float, gamma_min: float) -> tuple[float, ...]:
    """Log-linear interpolation of the horizon 1 - gamma between the two endpoints."""
    if n < 2:
        raise ConfigError(f"need at least 2 mixtures, got {n}")
    if not 0.0 < gamma_min <= gamma_max < 1.0:
        raise ConfigError(
            f"require 0 < gamma_min <= gamma_max < 1, got {gamma_min}, {gamma_max}")
    lo, hi = math.log(1.0 - gamma_max), math.log(1.0 - gamma_min)
    gammas = []
    for i in range(n):
        w = i / (n - 1)
        gammas.append(1.0 - math.exp((1.0 - w) * lo + w * hi))
    # pin the endpoints against exp/log round-off
    gammas[0], gammas[-1] = float(gamma_max), float(gamma_min)
    return tuple(gammas)


@dataclass(frozen=True)
class MixtureFamily:
    betas: tuple[float, ...]
    gammas: tuple[float, ...]

    @classmethod
    def build(cls, n: int, beta_im: float, gamma_max: float, gamma_min: float) -> "MixtureFamily":
        return cls(build_betas(n, beta_im), build_gammas(n, gamma_max, gamma_min))

    def __post_init__(self):
        if len(self.betas) != len(self.gammas):
            raise ConfigError("betas and gammas differ in length")

    @property
    def n(self) -> int:
        return len(self.betas)

    def __getitem__(self, j: int) -> tuple[float, float]:
        return self.betas[j], self.gammas[j]


class DiscountedUCBTuned:
    """Discounted UCB-Tuned over a fixed set of arms.

    Statistics are kept as ``raw * exp(log_scale)`` so that long stretches of
    pure discounting never underflow the per-arm means. The variance term of
    the bonus is measured in units of the observed return range, which keeps
    the bonus dimensionless: scaling all returns by ``c`` and ``beta`` by ``c``
    scales every score by ``c``.
    """

    def __init__(self, n_arms: int, gamma: float = 0.999, beta: float = 1.0,
                 epsilon: float = 0.5):
        if n_arms < 1:
            raise ConfigError("bandit needs at least one arm")
        if not 0.0 < gamma <= 1.0:
            raise ConfigError(f"bandit gamma must be in (0, 1], got {gamma}")
        if not 0.0 <= epsilon <= 1.0:
            raise ConfigError(f"bandit epsilon must be in [0, 1], got {epsilon}")
        self.n_arms = n_arms
        self.gamma = gamma
        self.beta = beta
        self.epsilon = epsilon
        self._raw_count = np.zeros(n_arms)
        self._raw_sum = np.zeros(n_arms)
        self._raw_sq = np.zeros(n_arms)
        self._log_scale = 0.0
        self._visited = np.zeros(n_arms, dtype=bool)
        self._lo = math.inf
        self._hi = -math.inf

    # statistics -----------------------------------------------------------
    @property
    def counts(self) -> np.ndarray:
        return self._raw_count * math.exp(self._log_scale)

    @property
    def total_count(self) -> float:
        return float(self.counts.sum())

    def means(self) -> np.ndarray:
        out = np.zeros(self.n_arms)
        np.divide(self._raw_sum, self._raw_count, out=out, where=self._visited)
        return out

    def variances(self) -> np.ndarray:
        out = np.zeros(self.n_arms)
        np.divide(self._raw_sq, self._raw_count, out=out, where=self._visited)
        return np.maximum(out - self.means() ** 2, 0.0)

    # updates ----------------------------------------------------------------
    def tick(self) -> None:
        """Apply one discount step without an observation."""
        self._log_scale += math.log(self.gamma)

    def update(self, arm: int, episode_return: float) -> "DiscountedUCBTuned":
        if not 0 <= arm < self.n_arms:
            raise IndexError(f"arm {arm} out of range for {self.n_arms} arms")
        r = float(episode_return)
        self.tick()
        inc = math.exp(-self._log_scale)
        if inc > 1e100:
            self._renormalize()
            inc = 1.0
        self._raw_count[arm] += inc
        self._raw_sum[arm] += inc * r
        self._raw_sq[arm] += inc * r * r
        self._visited[arm] = True
        self._lo, self._hi = min(self._lo, r), max(self._hi, r)
        return self

    def _renormalize(self) -> None:
        s = math.exp(self._log_scale)
        self._raw_count *= s
        self._raw_sum *= s
        self._raw_sq *= s
        self._log_scale = 0.0

    # queries ----------------------------------------------------------------
    def bonus(self) -> np.ndarray:
        counts = self.counts
        n = counts.sum()
        log_n = max(math.log(n), 0.0) if n > 0 else 0.0
        spread = self._hi - self._lo
        # zero spread means zero variance, so any positive unit works
        spread = spread if spread > 0 else 1.0
        var = self.variances()
        out = np.zeros(self.n_arms)
        for i in np.flatnonzero(self._visited):
            ni = counts[i]
            if ni <= 0:
                continue
            v = var[i] / spread ** 2 + math.sqrt(2.0 * log_n / ni)
            out[i] = math.sqrt(log_n / ni * min(0.25, v))
        return out

    def scores(self) -> np.ndarray:
        return self.means() + self.beta * self.bonus()

    def select(self, rng: np.random.Generator) -> int:
        if self.n_arms == 1:
            return 0
        if self.epsilon > 0 and rng.random() < self.epsilon:
            return int(rng.integers(self.n_arms))
        unvisited = np.flatnonzero(~self._visited)
        if unvisited.size:
            return int(unvisited[0])
        return int(np.argmax(self.scores()))

    def greedy(self) -> int:
        return int(np.argmax(self.means()))

    # persistence --------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "n_arms": self.n_arms, "gamma": self.gamma, "beta": self.beta,
            "epsilon": self.epsilon, "raw_count": self._raw_count.tolist(),
            "raw_sum": self._raw_sum.tolist(), "raw_sq": self._raw_sq.tolist(),
            "log_scale": self._log_scale, "visited": self._visited.tolist(),
            "lo": self._lo, "hi": self._hi,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "DiscountedUCBTuned":
        b = cls(d["n_arms"], d["gamma"], d["beta"], d["epsilon"])
        b._raw_count = np.asarray(d["raw_count"], dtype=float)
        b._raw_sum = np.asarray(d["raw_sum"], dtype=float)
        b._raw_sq = np.asarray(d["raw_sq"], dtype=float)
        b._log_scale = d["log_scale"]
        b._visited = np.asarray(d["visited"], dtype=bool)
        b._lo, b._hi = d["lo"], d["hi"]
        return b


BanditState = DiscountedUCBTuned


def bandit_select(state: DiscountedUCBTuned, rng: np.random.Generator) -> int:
    return state.select(rng)


def bandit_greedy(state: DiscountedUCBTuned) -> int:
    return state.greedy()


def bandit_update(state: DiscountedUCBTuned, arm: int, episode_return: float) -> DiscountedUCBTuned:
    return state.update(arm, episode_return)
