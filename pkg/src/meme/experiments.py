"""Small training experiments shared by the acceptance tests and scripts/.

Every arm of a comparison is built from the same single-CPU profile and
differs only in the overrides under test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from .envbench import make_env
from .runtime import Run, RunResult
from .summary import eval_curve, normalized_auc

# mirrored by configs/desk.yaml
DESK = ["net.torso_width=32", "net.core_hidden=32", "net.head_width=32",
        "intrinsic.rnd_lr=6e-5", "replay.trace_length=9", "replay.period=8",
        "runtime.mode=sync", "runtime.eval_every=2000"]

ABLATION = ["loss.trust_region=false", "loss.bootstrap=target"]


def desk_config(*overrides: str):
    return C.load(overrides=DESK + list(overrides))


@dataclass
class Trial:
    overrides: list
    result: RunResult
    greedy_actions: list
    seconds: float
    curve: tuple = field(default=(np.zeros(0), np.zeros(0)))

    @property
    def solved_at(self):
        return self.result.solved_at


def train(*overrides: str, metrics_path: str | Path | None = None) -> Trial:
    cfg = desk_config(*overrides)
    t0 = time.perf_counter()
    run = Run(cfg, metrics_path)
    res = run.run()
    actions = run.evaluators[0].episode()["actions"] if run.evaluators else []
    return Trial(list(overrides), res, actions, time.perf_counter() - t0, eval_curve(res.metrics))


def exploration(seed: int, beta_im: float | None = None, frames: int = 500_000, size: int = 8,
                **kw) -> Trial:
    ov = ["env.name=deep_sea", f"env.size={size}", f"runtime.frames={frames}",
          f"runtime.seed={seed}", "runtime.stop_on_solve=true"]
    if beta_im is not None:
        ov.append(f"mixtures.beta_im={beta_im}")
    return train(*ov, **kw)


def scale_pair(seed: int, scale: float = 1e-3, frames: int = 200_000, size: int = 6, extra=()):
    """Trials after equal budgets at reward scale 1 and ``scale``."""
    base = ["env.name=deep_sea", f"env.size={size}", f"runtime.frames={frames}",
            f"runtime.seed={seed}", "runtime.stop_on_solve=true", *extra]
    return train(*base), train(*base, f"env.scale={scale}")


def random_return(name: str, size: int, seed: int = 0, episodes: int = 2000) -> float:
    """Monte Carlo mean return of the uniform-random policy."""
    env = make_env(name, n=size, seed=seed)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        env.reset()
        done = False
        while not done:
            _, r, done = env.step(int(rng.integers(env.n_actions)))
            total += r
    return total / episodes


def ablation_seed(seed: int, envs=(("deep_sea", 8), ("dense_grid", 8)), frames: int = 100_000):
    """Per-environment normalised AUC of the full agent and the ablation for one seed.

    Returns ``{"full": score, "ablated": score, "per_env": {...}}`` where each
    score is the mean over environments.
    """
    per_env = {}
    for name, size in envs:
        base = [f"env.name={name}", f"env.size={size}", f"runtime.frames={frames}",
                f"runtime.seed={seed}"]
        full = train(*base)
        abl = train(*base, *ABLATION)
        env_seed = desk_config(*base).env.seed
        lo = random_return(name, size, env_seed)
        hi = make_env(name, n=size, seed=env_seed).optimal_return()
        per_env[name] = normalized_auc({"full": full.curve, "ablated": abl.curve}, lo, hi)
        per_env[name]["solved_at"] = [full.solved_at, abl.solved_at]
    scores = {arm: float(np.mean([v[arm] for v in per_env.values()])) for arm in ("full", "ablated")}
    scores["per_env"] = per_env
    return scores
