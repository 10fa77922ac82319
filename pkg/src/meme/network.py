"""Recurrent agent network with per-mixture dueling value heads and a policy head.

Flat observations go through a residual MLP torso built from
weight-standardised linear layers (no normalisation layers). Residual
blocks can be dropped per trajectory with a mask held fixed across time.
A GRU core follows, and three heads read ``concat(core_out, core_in)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .returns import rescale, unrescale


@dataclass
class NetConfig:
    torso_width: int = 64
    torso_blocks: int = 2
    core_hidden: int = 128
    head_width: int = 128
    drop_rate: float = 0.25
    t_target: int = 400
    action_embed: int = 8
    ap_embed: int = 32


class QEstimate(NamedTuple):
    q_e: torch.Tensor      # (T, B, N, A) transformed extrinsic values
    q_i: torch.Tensor      # (T, B, N, A) transformed intrinsic values
    q: torch.Tensor        # (T, B, N, A) transformed combined values
    logits: torch.Tensor   # (T, B, N, A) policy logits


class WSLinear(nn.Linear):
    """Linear layer with per-output weight standardisation."""

    def forward(self, x):
        w = self.weight
        mean = w.mean(1, keepdim=True)
        var = w.var(1, keepdim=True, unbiased=False)
        w = (w - mean) * torch.rsqrt(var * w.shape[1] + 1e-8)
        return F.linear(x, w, self.bias)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = WSLinear(width, width)
        self.fc2 = WSLinear(width, width)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(F.relu(x))))


def sample_depth_mask(rng: np.random.Generator, drop_rate: float, n_blocks: int,
                      batch: int | None = None) -> np.ndarray:
    """Keep flags, one row per trajectory, reused for every timestep."""
    shape = (n_blocks,) if batch is None else (batch, n_blocks)
    if drop_rate <= 0:
        return np.ones(shape, bool)
    return rng.random(shape) >= drop_rate


def depth_scale(mask, drop_rate: float, dtype=torch.float32):
    """Multiplier per block: kept blocks get 1/(1-p), dropped blocks 0."""
    m = torch.as_tensor(np.asarray(mask), dtype=dtype)
    if drop_rate >= 1.0:
        return torch.zeros_like(m)
    return m / (1.0 - drop_rate)


class HeadStack(nn.Module):
    """K independent two-hidden-layer MLPs evaluated with batched matmuls.

    Each head has its own weights; outputs narrower than the widest head are
    read from the leading columns of a padded output layer.
    """

    def __init__(self, inp: int, hidden: int, outs: tuple[int, ...]):
        super().__init__()
        k, width = len(outs), max(outs)
        self.outs = outs
        self.w1 = nn.Parameter(torch.empty(k, inp, hidden))
        self.b1 = nn.Parameter(torch.empty(k, 1, hidden))
        self.w2 = nn.Parameter(torch.empty(k, hidden, hidden))
        self.b2 = nn.Parameter(torch.empty(k, 1, hidden))
        self.w3 = nn.Parameter(torch.empty(k, hidden, width))
        self.b3 = nn.Parameter(torch.empty(k, 1, width))
        for w, b in ((self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3)):
            bound = 1.0 / np.sqrt(w.shape[1])
            nn.init.uniform_(w, -bound, bound)
            nn.init.uniform_(b, -bound, bound)

    def forward(self, x):
        lead = x.shape[:-1]
        h = x.reshape(1, -1, x.shape[-1]).expand(len(self.outs), -1, -1)
        h = F.relu(torch.baddbmm(self.b1, h, self.w1))
        h = F.relu(torch.baddbmm(self.b2, h, self.w2))
        h = torch.baddbmm(self.b3, h, self.w3)
        return [h[k, :, :o].reshape(*lead, o) for k, o in enumerate(self.outs)]


def dueling(v, adv):
    """Q = V + A - mean_a A; v: (..., N), adv: (..., N, A)."""
    return v.unsqueeze(-1) + adv - adv.mean(-1, keepdim=True)


class AgentNetwork(nn.Module):
    """Maps (observations, extra features, state) to per-mixture values and logits.

    Extra features per step: previous action (index ``n_actions`` means none),
    previous extrinsic reward, previous NGU reward, RND multiplier, episodic
    reward and the AP embedding. Rewards arrive already passed through h.
    """

    n_scalar_features = 4

    def __init__(self, obs_dim: int, n_actions: int, betas, cfg: NetConfig | None = None,
                 single_head: bool = False, use_rescale: bool = True):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        self.obs_dim, self.n_actions = obs_dim, n_actions
        self.n_mixtures = len(betas)
        self.single_head = single_head
        self.use_rescale = use_rescale
        self.beta_values = tuple(float(b) for b in betas)
        self.stem = WSLinear(obs_dim, cfg.torso_width)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.torso_width) for _ in range(cfg.torso_blocks))
        self.action_embed = nn.Embedding(n_actions + 1, cfg.action_embed)
        core_in = cfg.torso_width + cfg.action_embed + self.n_scalar_features + cfg.ap_embed
        self.core_in = core_in
        self.core = nn.GRU(core_in, cfg.core_hidden)
        head_in = cfg.core_hidden + core_in
        n, a = self.n_mixtures, n_actions
        # extrinsic value, extrinsic advantage, intrinsic value, intrinsic advantage, policy
        self.heads = HeadStack(head_in, cfg.head_width, (n, n * a, n, n * a, n * a))

    def initial_state(self, batch: int) -> torch.Tensor:
        p = next(self.parameters())
        return torch.zeros(1, batch, self.cfg.core_hidden, dtype=p.dtype)

    def torso(self, obs, scale):
        """obs: (T, B, D); scale: (B, n_blocks) multipliers or None for all-keep."""
        x = self.stem(obs)
        for k, block in enumerate(self.blocks):
            s = 1.0 if scale is None else scale[:, k].to(x.dtype)[None, :, None]
            x = x + s * block(x)
        return F.relu(x)

    def forward(self, obs, prev_action, scalars, ap_embedding, state=None, depth_mask=None):
        """obs (T,B,D), prev_action (T,B) long, scalars (T,B,4), ap_embedding (T,B,E).

        ``depth_mask`` is a (B, n_blocks) boolean keep mask; None means all-keep.
        """
        t, b = obs.shape[:2]
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {self.obs_dim}")
        if scalars.shape[:2] != (t, b) or scalars.shape[-1] != self.n_scalar_features:
            raise ValueError("scalar features must be (T, B, 4)")
        if ap_embedding.shape[:2] != (t, b) or ap_embedding.shape[-1] != self.cfg.ap_embed:
            raise ValueError("AP embedding has the wrong shape")
        state = self.initial_state(b) if state is None else state
        scale = None
        if depth_mask is not None:
            scale = depth_scale(depth_mask, self.cfg.drop_rate, obs.dtype)
        x = torch.cat([self.torso(obs, scale), self.action_embed(prev_action), scalars,
                       ap_embedding], -1)
        out, state = self.core(x, state)
        z = torch.cat([out, x], -1)
        n, a = self.n_mixtures, self.n_actions
        v_e, a_e, v_i, a_i, pi = self.heads(z)
        q_e = dueling(v_e, a_e.unflatten(-1, (n, a)))
        logits = pi.unflatten(-1, (n, a))
        if self.single_head:
            q_i = torch.zeros_like(q_e)
            q = q_e
        else:
            q_i = dueling(v_i, a_i.unflatten(-1, (n, a)))
            betas = torch.tensor(self.beta_values, dtype=q_e.dtype)
            q = combine_values(q_e, q_i, betas, self.use_rescale)
        return QEstimate(q_e, q_i, q, logits), state


def combine_values(q_e, q_i, betas, use_rescale: bool = True):
    """h(h^-1(Q_e) + beta_j h^-1(Q_i)) per mixture; betas broadcast over axis -2."""
    b = betas[:, None]
    if not use_rescale:
        return q_e + b * q_i
    # mixtures with beta = 0 keep Q_e exactly rather than its h(h^-1) roundtrip
    return torch.where(b == 0, q_e, rescale(unrescale(q_e) + b * unrescale(q_i)))


# parameter-set maintenance -------------------------------------------------------------

def sync_target(online: nn.Module, target: nn.Module, step: int, period: int) -> bool:
    """Hard copy every ``period`` learner steps. Returns True when copied."""
    if period > 0 and step % period == 0:
        target.load_state_dict(online.state_dict())
        return True
    return False


@torch.no_grad()
def ema_update(eval_net: nn.Module, online: nn.Module, eta: float) -> None:
    for pe, po in zip(eval_net.parameters(), online.parameters()):
        pe.mul_(eta).add_(po, alpha=1.0 - eta)


def clone_frozen(net: nn.Module) -> nn.Module:
    twin = copy.deepcopy(net)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def adam_step(params, grads, state: AdamState | None, lr: float, wd: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """Adam with decoupled weight decay on plain tensors. Returns (params, state)."""
    if state is None:
        state = AdamState([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])
    b1, b2 = betas
    step = state.step + 1
    new, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        p = p * (1 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps)
        new.append(p)
        ms.append(m)
        vs.append(v)
    return new, AdamState(ms, vs, step)


def make_optimizer(params, lr: float, wd: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """AdamW, the library form of ``adam_step``."""
    return torch.optim.AdamW(params, lr=lr, weight_decay=wd, betas=betas, eps=eps, foreach=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class NumpyPolicy:
    """Single-step, all-keep inference of the policy logits in numpy.

    Actors and evaluators only need pi_dist for one step at a time; this
    skips the value heads and torch's per-call overhead. Built from a module
    snapshot; ``tests`` hold it equal to the torch forward.
    """

    def __init__(self, net: AgentNetwork):
        with torch.no_grad():
            def ws(layer: WSLinear):
                w = layer.weight.double()
                w = (w - w.mean(1, keepdim=True)) * torch.rsqrt(
                    w.var(1, keepdim=True, unbiased=False) * w.shape[1] + 1e-8)
                return w.numpy().T.copy(), layer.bias.double().numpy().copy()

            self.stem = ws(net.stem)
            self.blocks = [(ws(b.fc1), ws(b.fc2)) for b in net.blocks]
            self.embed = net.action_embed.weight.double().numpy().copy()
            g = net.core
            self.w_ih = g.weight_ih_l0.double().numpy().T.copy()
            self.w_hh = g.weight_hh_l0.double().numpy().T.copy()
            self.b_ih = g.bias_ih_l0.double().numpy().copy()
            self.b_hh = g.bias_hh_l0.double().numpy().copy()
            h = net.heads
            k = 4  # policy head
            self.head = [(w[k].double().numpy(), b[k, 0].double().numpy())
                         for w, b in ((h.w1, h.b1), (h.w2, h.b2), (h.w3, h.b3))]
        self.n, self.a = net.n_mixtures, net.n_actions
        self.hidden = net.cfg.core_hidden

    def step(self, obs, prev_action: int, scalars, ap, h):
        """Returns (logits of shape (N, A), next hidden state)."""
        w, b = self.stem
        x = obs @ w + b
        for (w1, b1), (w2, b2) in self.blocks:
            x = x + (np.maximum(np.maximum(x, 0) @ w1 + b1, 0) @ w2 + b2)
        x = np.concatenate([np.maximum(x, 0), self.embed[prev_action], scalars, ap])
        gi = x @ self.w_ih + self.b_ih
        gh = h @ self.w_hh + self.b_hh
        hd = self.hidden
        r = _sigmoid(gi[:hd] + gh[:hd])
        z = _sigmoid(gi[hd:2 * hd] + gh[hd:2 * hd])
        nn_ = np.tanh(gi[2 * hd:] + r * gh[2 * hd:])
        h = (1.0 - z) * nn_ + z * h
        y = np.concatenate([h, x])
        (w1, b1), (w2, b2), (w3, b3) = self.head
        y = np.maximum(y @ w1 + b1, 0)
        y = np.maximum(y @ w2 + b2, 0)
        y = y @ w3 + b3
        return y[:self.n * self.a].reshape(self.n, self.a), h
