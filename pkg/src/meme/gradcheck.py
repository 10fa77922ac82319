"""Finite-difference checks of the learner's composite loss in float64."""

from __future__ import annotations

import numpy as np
import torch

from .intrinsic import IntrinsicConfig
from .learner import Learner, LossConfig, ReturnsConfig, to_tensors
from .mixture import MixtureFamily
from .network import NetConfig

TINY_NET = NetConfig(torso_width=6, torso_blocks=2, core_hidden=5, head_width=6, drop_rate=0.5,
                     action_embed=3, ap_embed=4)
TINY_INTRINSIC = IntrinsicConfig(embed_dim=4, hidden=6, rnd_dim=3)


def tiny_batch(rng: np.random.Generator, obs_dim=3, n_actions=2, t_len=4, batch=2, n_mix=2,
               hidden=5, ap_dim=4, terminal=True) -> dict:
    """Random batch: t_len steps, so t_len - 1 steps carry returns plus a bootstrap."""
    valid = np.ones((t_len, batch), bool)
    done = np.zeros((t_len, batch), bool)
    if terminal and batch > 1:
        valid[-1, 1] = False
        done[-2, 1] = True
    return {
        "obs": rng.normal(size=(t_len, batch, obs_dim)),
        "next_obs": rng.normal(size=(t_len, batch, obs_dim)),
        "prev_action": rng.integers(0, n_actions + 1, size=(t_len, batch)),
        "scalars": rng.normal(size=(t_len, batch, 4)),
        "ap": rng.normal(size=(t_len, batch, ap_dim)),
        "action": rng.integers(0, n_actions, size=(t_len, batch)),
        "mu": rng.uniform(0.3, 1.0, size=(t_len, batch)),
        "r_e": rng.normal(size=(t_len, batch)),
        "r_i": rng.uniform(0, 1, size=(t_len, batch)),
        "done": done,
        "valid": valid,
        "mixture": rng.integers(0, n_mix, size=batch),
        "init_state": rng.normal(size=(batch, hidden)) * 0.5,
    }


def tiny_learner(seed: int, mode: str = "combined", target_noise: float = 0.0, **loss_kw) -> Learner:
    fam = MixtureFamily.build(2, 0.3, 0.99, 0.9)
    lrn = Learner(3, 2, fam, TINY_NET, ReturnsConfig(), LossConfig(mode=mode, **loss_kw),
                  int_cfg=TINY_INTRINSIC, seed=seed, dtype=torch.float64)
    if target_noise:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in lrn.target.parameters():
                p.add_(target_noise * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return lrn


def _params(lrn: Learner):
    return (list(lrn.online.parameters()) + list(lrn.ap.parameters())
            + list(lrn.rnd.predictor.parameters()))


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30))


def composite_gradient_check(seed: int = 0, mode: str = "combined", eps: float = 1e-6,
                             per_term: bool = False):
    """Largest relative error between autograd and central differences.

    Covers value, distillation, AP and RND terms, through the recurrent core
    over a 4-step window (3 return steps plus the bootstrap step).
    """
    rng = np.random.default_rng(seed)
    lrn = tiny_learner(seed, mode, target_noise=0.3)
    tb = to_tensors(tiny_batch(rng), torch.float64)
    tg = lrn.compute_targets(tb, is_weights=rng.uniform(0.5, 1.0, size=2))
    params = _params(lrn)
    terms = ("total", "value", "distill", "ap", "rnd")

    def f():
        total, parts = lrn.composite_loss(tb, tg)
        return dict(parts, total=total)

    analytic = {}
    for term in terms:
        for p in params:
            p.grad = None
        f()[term].backward()
        analytic[term] = np.concatenate([(p.grad if p.grad is not None else torch.zeros_like(p))
                                         .detach().numpy().ravel() for p in params])
    numeric = {term: [] for term in terms}
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = f()
                flat[i] = old - eps
                down = f()
                flat[i] = old
                for term in terms:
                    numeric[term].append((up[term].item() - down[term].item()) / (2 * eps))
    errors = {term: _rel(analytic[term], np.array(numeric[term])) for term in terms}
    return errors if per_term else max(errors.values())


def masked_gradient_check(seed: int = 0, eps: float = 1e-6):
    """Finite-difference slope of the loss with respect to each taken Q output.

    Returns (max |slope| over trust-region-masked steps, min |slope| over kept
    steps, number of masked steps).
    """
    rng = np.random.default_rng(seed)
    lrn = tiny_learner(seed, target_noise=3.0)
    tb = to_tensors(tiny_batch(rng, t_len=6, batch=3), torch.float64)
    tg = lrn.compute_targets(tb)
    a = tb["action"]
    t_len, b = a.shape
    n = lrn.family.n

    def f(ti, bi, j, delta):
        off = torch.zeros(t_len, b, n, lrn.n_actions, dtype=torch.float64)
        off[ti, bi, j, a[ti, bi]] = delta
        total, _ = lrn.composite_loss(tb, tg, q_offset=off)
        return total.item()

    masked, kept = [], []
    lm = tg.loss_mask
    with torch.no_grad():
        for ti in range(t_len):
            for bi in range(b):
                if not lm[ti, bi]:
                    continue
                for j in range(n):
                    slope = (f(ti, bi, j, eps) - f(ti, bi, j, -eps)) / (2 * eps)
                    (kept if tg.kept[ti, bi, j] else masked).append(abs(slope))
    return (max(masked) if masked else 0.0), (min(kept) if kept else float("inf")), len(masked)
