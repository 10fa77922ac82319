"""Learner: turns a replay batch into targets, losses, optimiser steps and priorities.

The work is split in two. ``compute_targets`` runs without gradients and
fixes everything the loss treats as constant: returns, normalisation
divisors, trust-region and distillation masks and the depth mask.
``composite_loss`` is then a smooth function of the trainable parameters,
which is what the finite-difference checks exercise.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import learning as L
from . import returns as R
from .intrinsic import ApEmbedder, IntrinsicConfig, RndPair, ap_loss, rnd_loss
from .mixture import ConfigError, MixtureFamily
from .network import AgentNetwork, NetConfig, clone_frozen, ema_update, make_optimizer, \
    sample_depth_mask, sync_target


@dataclass
class ReturnsConfig:
    estimator: str = "soft_watkins"
    lam: float = field(default=0.95, metadata={"key": "lambda"})
    kappa: float = 0.01
    rescale: bool = True


@dataclass
class LossConfig:
    eta: float = 0.5
    mode: str = "combined"
    alpha_trust: float = 2.0
    c_kl: float = 0.5
    tau: float = 0.25
    w_max: float = 0.9
    norm_decay: float = 0.99
    distill_epsilon: float = 1e-4
    trust_region: bool = True
    normalize: bool = True
    distill: bool = True
    bootstrap: str = "online"


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    wd: float = 0.05
    betas: typing.List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    eta_eval: float = 0.995


@dataclass
class Targets:
    g: torch.Tensor             # (L, B, N) transformed returns of the summed reward
    g_e: torch.Tensor | None    # decomposed mode: transformed extrinsic returns
    g_i: torch.Tensor | None
    sigma: torch.Tensor         # (N,)
    kept: torch.Tensor          # (L, B, N) trust-region verdict
    loss_mask: torch.Tensor     # (L, B) steps that carry a value loss
    distill_target: torch.Tensor  # (L, B, N, A)
    distill_kept: torch.Tensor    # (L, B, N)
    depth_mask: np.ndarray      # (B, n_blocks)
    is_weights: torch.Tensor    # (B,)
    lambdas: np.ndarray         # (L-1, B, N)
    normed: np.ndarray          # (L, B, N) normalised errors before the update
    diagnostics: dict = field(default_factory=dict)


def to_tensors(batch: dict, dtype=torch.float32) -> dict:
    out = {}
    for k, v in batch.items():
        v = np.asarray(v)
        if v.dtype == bool:
            out[k] = torch.as_tensor(v)
        elif np.issubdtype(v.dtype, np.integer):
            out[k] = torch.as_tensor(v, dtype=torch.long)
        else:
            out[k] = torch.as_tensor(v, dtype=dtype)
    return out


def unroll(net: AgentNetwork, tb: dict, depth_mask=None):
    state = tb["init_state"].to(tb["obs"].dtype)[None]
    est, _ = net(tb["obs"], tb["prev_action"], tb["scalars"], tb["ap"], state, depth_mask)
    return est


def _taken(x, actions):
    """x: (L, B, N, A), actions: (L, B) -> (L, B, N)."""
    idx = actions[:, :, None, None].expand(*x.shape[:3], 1)
    return x.gather(-1, idx)[..., 0]


def _np64(x) -> np.ndarray:
    return x.detach().cpu().numpy().astype(np.float64)


def _returns(rewards, discounts, actions, mu, probs, q, dones, lam_fn, boot, lambdas=None):
    """Engine over (T, B, N) with q of shape (T+1, B, N, A). Returns (G, lambdas)."""
    inp = R.TraceInputs(rewards, discounts, actions, mu, probs, q, dones)
    if lambdas is not None:
        est = R.general_qlambda(inp, lambda _: lambdas, boot, validate=False)
    else:
        est = R.general_qlambda(inp, lam_fn, boot, validate=False)
    return est.returns, est.lambdas


class Learner:
    """Owns online/target/eval parameter sets, intrinsic nets, optimisers and stats."""

    def __init__(self, obs_dim: int, n_actions: int, family: MixtureFamily,
                 net_cfg: NetConfig | None = None, ret_cfg: ReturnsConfig | None = None,
                 loss_cfg: LossConfig | None = None, opt_cfg: OptimizerConfig | None = None,
                 int_cfg: IntrinsicConfig | None = None, seed: int = 0, dtype=torch.float32):
        self.net_cfg = net_cfg or NetConfig()
        self.ret_cfg = ret_cfg or ReturnsConfig()
        self.loss_cfg = loss_cfg or LossConfig()
        self.opt_cfg = opt_cfg or OptimizerConfig()
        self.int_cfg = int_cfg or IntrinsicConfig()
        if self.loss_cfg.mode not in L.LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_cfg.mode!r}")
        if self.loss_cfg.bootstrap not in ("online", "target"):
            raise ConfigError("loss.bootstrap must be 'online' or 'target'")
        R.estimator(self.ret_cfg.estimator, self.ret_cfg.lam, self.ret_cfg.kappa)
        self.family = family
        self.dtype = dtype
        self.n_actions = n_actions
        torch.manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.online = AgentNetwork(obs_dim, n_actions, family.betas, self.net_cfg,
                                   single_head=self.loss_cfg.mode == "single_head",
                                   use_rescale=self.ret_cfg.rescale).to(dtype)
        self.target = clone_frozen(self.online)
        self.eval_net = clone_frozen(self.online)
        ic = self.int_cfg
        self.ap = ApEmbedder(obs_dim, n_actions, ic.embed_dim, ic.hidden).to(dtype)
        self.rnd = RndPair(obs_dim, ic.rnd_dim, ic.hidden, ic.rnd_stat_decay).to(dtype)
        oc = self.opt_cfg
        self.opt = make_optimizer(self.online.parameters(), oc.lr, oc.wd, tuple(oc.betas), oc.eps)
        self.ap_opt = make_optimizer(self.ap.parameters(), ic.ap_lr, ic.ap_wd)
        self.rnd_opt = make_optimizer(self.rnd.predictor.parameters(), ic.rnd_lr, ic.rnd_wd)
        self.stats = L.RunningStats(family.n, self.loss_cfg.norm_decay)
        self.steps = 0
        self.gammas = np.array(family.gammas)
        self.betas = np.array(family.betas)

    # -- phase one ------------------------------------------------------------------
    @torch.no_grad()
    def compute_targets(self, tb: dict, is_weights=None, depth_mask=None,
                        update_stats: bool = True, online_est=None) -> Targets:
        """``online_est`` reuses an online unroll made with the same depth mask."""
        lc, rc = self.loss_cfg, self.ret_cfg
        t_len, b = tb["action"].shape
        n = self.family.n
        if depth_mask is None:
            depth_mask = sample_depth_mask(self.rng, self.net_cfg.drop_rate,
                                           self.net_cfg.torso_blocks, batch=b)
        on = unroll(self.online, tb, depth_mask) if online_est is None else \
            type(online_est)(*(x.detach() for x in online_est))
        tg = unroll(self.target, tb, depth_mask)
        boot = on if lc.bootstrap == "online" else tg
        unr = R.unrescale if rc.rescale else (lambda x: x)
        fwd = R.rescale if rc.rescale else (lambda x: x)

        pi = L.sharpen_policy(torch.softmax(on.logits, -1), lc.tau)
        probs = _np64(pi)                                   # (L, B, N, A)
        q_boot = _np64(unr(boot.q))
        actions = np.broadcast_to(_np64(tb["action"]).astype(np.int64)[:, :, None], (t_len, b, n))
        mu = np.broadcast_to(_np64(tb["mu"])[:, :, None], (t_len, b, n))
        dones = np.broadcast_to(_np64(tb["done"]).astype(bool)[:, :, None], (t_len, b, n))
        r_e = _np64(tb["r_e"])[:, :, None]
        r_i = _np64(tb["r_i"])[:, :, None]
        gam = np.broadcast_to(self.gammas, (t_len, b, n))
        lam_fn, bootstrap = R.estimator(rc.estimator, rc.lam, rc.kappa)
        s = slice(0, t_len - 1)

        r_sum = r_e + self.betas * r_i
        g, lambdas = _returns(r_sum[s], gam[s], actions[s], mu[s], probs, q_boot, dones[s],
                              lam_fn, bootstrap)
        g_full = np.concatenate([g, np.broadcast_to(r_sum[-1], (1, b, n))], 0)
        g_t = fwd(torch.as_tensor(g_full, dtype=self.dtype))

        g_e_t = g_i_t = None
        if lc.mode == "decomposed":
            qe = _np64(unr(boot.q_e))
            qi = _np64(unr(boot.q_i))
            re_b = np.broadcast_to(r_e, (t_len, b, n))
            ri_b = np.broadcast_to(r_i, (t_len, b, n))
            ge, _ = _returns(re_b[s], gam[s], actions[s], mu[s], probs, qe, dones[s],
                             None, bootstrap, lambdas)
            gi, _ = _returns(ri_b[s], gam[s], actions[s], mu[s], probs, qi, dones[s],
                             None, bootstrap, lambdas)
            g_e_t = fwd(torch.as_tensor(np.concatenate([ge, re_b[-1:]], 0), dtype=self.dtype))
            g_i_t = fwd(torch.as_tensor(np.concatenate([gi, ri_b[-1:]], 0), dtype=self.dtype))

        valid = tb["valid"].bool()
        loss_mask = valid.clone()
        loss_mask[-1] = valid[-1] & tb["done"][-1].bool()

        q_on = _taken(on.q, tb["action"])
        q_tg = _taken(tg.q, tb["action"])
        delta = g_t - q_on
        w = torch.ones(b, dtype=self.dtype) if is_weights is None else \
            torch.as_tensor(is_weights, dtype=self.dtype)
        if lc.normalize:
            if update_stats:
                self.stats.update(_np64(delta), _np64(loss_mask).astype(bool), _np64(w))
            sigma_np = np.array([L.td_divisor(_np64(delta[..., j])[_np64(loss_mask).astype(bool)],
                                              self.stats.running_std[j], self.stats.floor)
                                 for j in range(n)])
        else:
            sigma_np = np.ones(n)
        sigma = torch.as_tensor(sigma_np, dtype=self.dtype)
        if lc.trust_region:
            kept = L.trust_region_mask(q_on, q_tg, g_t, sigma, lc.alpha_trust)
        else:
            kept = torch.ones_like(q_on, dtype=torch.bool)

        distill_target = L.epsilon_greedy_probs(on.q, lc.distill_epsilon)
        distill_kept = L.kl_divergence(tg.logits, on.logits) <= lc.c_kl

        lm = loss_mask[..., None]
        masked_frac = float(((~kept) & lm).sum() / lm.expand_as(kept).sum().clamp_min(1))
        valid_lam = _np64(loss_mask[:-1]).astype(bool)
        mean_lambda = float(lambdas[valid_lam].mean()) if valid_lam.any() else 0.0
        return Targets(g_t, g_e_t, g_i_t, sigma, kept, loss_mask, distill_target, distill_kept,
                       depth_mask, w, lambdas, _np64(delta / sigma),
                       {"masked_frac": masked_frac, "mean_lambda": mean_lambda,
                        "sigma": sigma_np.tolist()})

    # -- phase two ------------------------------------------------------------------
    def composite_loss(self, tb: dict, tg: Targets, online=None, ap=None, rnd=None, q_offset=None,
                       est=None):
        """Total loss and its parts. ``q_offset`` is added to the combined values
        (a probe for finite-difference checks); ``est`` reuses an online unroll."""
        online = online or self.online
        ap = ap or self.ap
        rnd = rnd or self.rnd
        lc = self.loss_cfg
        if est is None:
            est = unroll(online, tb, tg.depth_mask)
        if q_offset is not None:
            est = est._replace(q=est.q + q_offset)
        sig = tg.sigma
        w = tg.is_weights
        mixture = tb["mixture"]
        lm = tg.loss_mask
        if lc.mode == "decomposed":
            de = (tg.g_e - _taken(est.q_e, tb["action"])) / sig
            di = (tg.g_i - _taken(est.q_i, tb["action"])) / sig
            per = L.squared_td(de, tg.kept, lm) + torch.as_tensor(self.betas, dtype=de.dtype) ** 2 \
                * L.squared_td(di, tg.kept, lm)
        else:
            d = (tg.g - _taken(est.q, tb["action"])) / sig
            per = L.squared_td(d, tg.kept, lm)
        value = L.cross_mixture_loss(per * w[:, None], mixture, lc.eta)

        if lc.distill:
            ce = -(tg.distill_target * F.log_softmax(est.logits, -1)).sum(-1)
            v = tb["valid"].to(ce.dtype)[..., None].expand_as(ce)
            distill = (ce * tg.distill_kept.to(ce.dtype) * v).sum() / v.sum().clamp_min(1.0)
        else:
            distill = torch.zeros((), dtype=value.dtype)

        valid = tb["valid"]
        a_loss = ap_loss(ap, tb["obs"], tb["next_obs"], tb["action"], valid)
        r_loss = rnd_loss(rnd, tb["obs"], valid)
        total = value + distill + a_loss + r_loss
        return total, {"value": value, "distill": distill, "ap": a_loss, "rnd": r_loss}

    def priorities(self, tb: dict, tg: Targets) -> np.ndarray:
        """Per-sequence priority from the behaviour mixture's normalised errors."""
        b = tg.normed.shape[1]
        d_beh = tg.normed[:, np.arange(b), tb["mixture"].numpy()]
        return L.compute_priority(d_beh, self.loss_cfg.w_max, _np64(tg.loss_mask).astype(bool))

    # -- full step --------------------------------------------------------------------
    def step(self, batch: dict, is_weights=None) -> tuple[np.ndarray, dict]:
        tb = to_tensors(batch, self.dtype)
        b = tb["action"].shape[1]
        mask = sample_depth_mask(self.rng, self.net_cfg.drop_rate, self.net_cfg.torso_blocks, batch=b)
        est = unroll(self.online, tb, mask)
        tg = self.compute_targets(tb, is_weights, mask, online_est=est)
        total, parts = self.composite_loss(tb, tg, est=est)
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite loss: { {k: float(v) for k, v in parts.items()} }")
        self.opt.zero_grad()
        self.ap_opt.zero_grad()
        self.rnd_opt.zero_grad()
        total.backward()
        self.opt.step()
        self.ap_opt.step()
        self.rnd_opt.step()
        self.steps += 1
        ema_update(self.eval_net, self.online, self.opt_cfg.eta_eval)
        sync_target(self.online, self.target, self.steps, self.net_cfg.t_target)
        with torch.no_grad():
            errs = self.rnd.error(tb["obs"])[tb["valid"]]
        self.rnd.update_stats(_np64(errs))
        prios = self.priorities(tb, tg)
        diag = dict(tg.diagnostics)
        diag.update({k: float(v.detach()) for k, v in parts.items()})
        return prios, diag
