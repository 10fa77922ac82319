"""Small flat-observation environments for hard exploration, reward scale and
dense shaping, with a string-keyed registry."""

from __future__ import annotations

import numpy as np


class EnvError(RuntimeError):
    pass


class Environment:
    obs_dim: int
    n_actions: int
    horizon: int

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int):
        """Returns (observation, reward, done)."""
        raise NotImplementedError

    def optimal_return(self) -> float:
        raise NotImplementedError


class DeepSea(Environment):
    """n x n grid descending one row per step.

    Each cell maps the two raw actions to {left, right} through a seeded
    permutation. Moving right costs 0.01/n; taking right at the bottom-right
    cell on the final step pays 1. Observation is the one-hot (row, col) grid,
    all zeros once the episode has ended.
    """

    n_actions = 2

    def __init__(self, n: int = 8, seed: int = 0):
        if n < 1:
            raise EnvError("deep_sea needs n >= 1")
        self.n = n
        self.horizon = n
        self.obs_dim = n * n
        self.right_action = np.random.default_rng(seed).integers(0, 2, size=(n, n))
        self.row = self.col = 0
        self._started = False
        self._done = False

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.obs_dim, dtype=np.float32)
        if not self._done:
            o[self.row * self.n + self.col] = 1.0
        return o

    def reset(self) -> np.ndarray:
        self.row = self.col = 0
        self._started, self._done = True, False
        return self._obs()

    def step(self, action: int):
        if not self._started or self._done:
            raise EnvError("call reset() before step()")
        if action not in (0, 1):
            raise EnvError(f"invalid action {action}")
        right = action == self.right_action[self.row, self.col]
        reward = 0.0
        if right:
            reward -= 0.01 / self.n
            if self.row == self.n - 1 and self.col == self.n - 1:
                reward += 1.0
            self.col = min(self.col + 1, self.n - 1)
        else:
            self.col = max(self.col - 1, 0)
        self.row += 1
        self._done = self.row >= self.n
        return self._obs(), reward, self._done

    def optimal_return(self) -> float:
        return 1.0 - 0.01


class ScaleWorld(Environment):
    """Same dynamics as ``base`` with rewards multiplied by ``scale``."""

    def __init__(self, base: Environment, scale: float):
        self.base, self.scale = base, float(scale)
        self.obs_dim, self.n_actions, self.horizon = base.obs_dim, base.n_actions, base.horizon

    def reset(self):
        return self.base.reset()

    def step(self, action: int):
        o, r, d = self.base.step(action)
        return o, r * self.scale, d

    def optimal_return(self) -> float:
        return self.base.optimal_return() * self.scale


class DenseGrid(Environment):
    """n x n grid with a seeded goal, shaped by negative normalised distance.

    Actions: up, down, left, right (walls clamp). Each non-goal step pays
    -D/(2(n-1)) with D the Manhattan distance after the move; reaching the goal
    pays 1 and ends the episode. Horizon 4n.
    """

    n_actions = 4
    moves = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, n: int = 8, seed: int = 0):
        if n < 2:
            raise EnvError("dense_grid needs n >= 2")
        self.n = n
        self.horizon = 4 * n
        self.obs_dim = 2 * n
        rng = np.random.default_rng(seed)
        cells = [(r, c) for r in range(n) for c in range(n) if r + c >= n]
        self.goal = cells[int(rng.integers(len(cells)))]
        self.pos = (0, 0)
        self.t = 0
        self._started = False
        self._done = False

    def distance(self, pos) -> int:
        return abs(pos[0] - self.goal[0]) + abs(pos[1] - self.goal[1])

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.obs_dim, dtype=np.float32)
        o[self.pos[0]] = 1.0
        o[self.n + self.pos[1]] = 1.0
        return o

    def reset(self, start=(0, 0)) -> np.ndarray:
        self.pos, self.t = tuple(start), 0
        self._started, self._done = True, False
        return self._obs()

    def step(self, action: int):
        if not self._started or self._done:
            raise EnvError("call reset() before step()")
        if not 0 <= action < 4:
            raise EnvError(f"invalid action {action}")
        dr, dc = self.moves[action]
        self.pos = (min(max(self.pos[0] + dr, 0), self.n - 1), min(max(self.pos[1] + dc, 0), self.n - 1))
        self.t += 1
        if self.pos == self.goal:
            self._done = True
            return self._obs(), 1.0, True
        reward = -self.distance(self.pos) / (2.0 * (self.n - 1))
        self._done = self.t >= self.horizon
        return self._obs(), reward, self._done

    def optimal_return(self) -> float:
        # walk straight in: distances D-1, ..., 1 shaped, then the goal bonus
        d = self.distance((0, 0))
        return 1.0 - d * (d - 1) / (4.0 * (self.n - 1))


def make_env(name: str, **params) -> Environment:
    params = dict(params)
    scale = params.pop("scale", None)
    if name == "deep_sea":
        env = DeepSea(**params)
    elif name == "dense_grid":
        env = DenseGrid(**params)
    else:
        raise EnvError(f"unknown environment {name!r}; choose from {sorted(REGISTRY)}")
    if scale is not None and scale != 1.0:
        env = ScaleWorld(env, scale)
    return env


REGISTRY = ("deep_sea", "dense_grid")
