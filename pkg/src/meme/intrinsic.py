"""Intrinsic rewards: episodic k-NN pseudo-counts, RND life-long novelty and
the action-prediction embedding that both the memory and the agent consume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class IntrinsicConfig:
    k: int = 10
    c: float = 0.001
    kernel_eps: float = 1e-4
    xi: float = 0.008
    s_max: float = 8.0
    dm_decay: float = 0.99
    embed_dim: int = 32
    hidden: int = 64
    rnd_dim: int = 16
    rnd_scale: float = 0.5
    L_cap: float = 5.0
    rnd_stat_decay: float = 0.99
    ap_lr: float = 6e-4
    ap_wd: float = 0.05
    rnd_lr: float = 6e-4
    rnd_wd: float = 0.0
    memory_capacity: int = 5000


class EpisodicMemory:
    """Per-episode embedding store. The distance running average survives resets."""

    def __init__(self, dim: int, k: int = 10, c: float = 0.001, kernel_eps: float = 1e-4,
                 xi: float = 0.008, s_max: float = 8.0, dm_decay: float = 0.99,
                 capacity: int = 5000):
        self.dim, self.k, self.c = dim, k, c
        self.kernel_eps, self.xi, self.s_max = kernel_eps, xi, s_max
        self.dm_decay = dm_decay
        self.capacity = capacity
        self._buf = np.zeros((capacity, dim))
        self.size = 0
        self._next = 0
        self.dm2: float | None = None

    @classmethod
    def from_config(cls, cfg: IntrinsicConfig) -> "EpisodicMemory":
        return cls(cfg.embed_dim, cfg.k, cfg.c, cfg.kernel_eps, cfg.xi, cfg.s_max, cfg.dm_decay,
                   cfg.memory_capacity)

    def reset(self) -> None:
        self.size = 0
        self._next = 0

    def insert(self, emb: np.ndarray) -> None:
        self._buf[self._next] = emb
        self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def reward(self, emb) -> float:
        emb = np.asarray(emb, dtype=np.float64).ravel()
        if emb.shape[0] != self.dim:
            raise ValueError(f"embedding dim {emb.shape[0]} != {self.dim}")
        if self.size == 0:
            self.insert(emb)
            return 0.0
        d2 = ((self._buf[:self.size] - emb) ** 2).sum(1)
        kk = min(self.k, self.size)
        nn_d2 = np.partition(d2, kk - 1)[:kk]
        m = float(nn_d2.mean())
        self.dm2 = m if self.dm2 is None else self.dm_decay * self.dm2 + (1 - self.dm_decay) * m
        dn = nn_d2 / max(self.dm2, 1e-8)
        dn = np.maximum(dn - self.xi, 0.0)
        kernel = self.kernel_eps / (dn + self.kernel_eps)
        s = float(np.sqrt(kernel.sum())) + self.c
        self.insert(emb)
        return 0.0 if s > self.s_max else 1.0 / s


def rnd_multiplier(alpha, scale: float = 0.5, cap: float = 5.0):
    """min(max(scale * alpha, 1), cap)."""
    return np.minimum(np.maximum(scale * np.asarray(alpha, dtype=np.float64), 1.0), cap)


def ngu_reward(r_episodic, alpha, cap: float = 5.0):
    """r_episodic * min(max(alpha, 1), cap)."""
    return np.asarray(r_episodic) * np.minimum(np.maximum(alpha, 1.0), cap)


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(inp, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, out))


class RndPair(nn.Module):
    """Frozen random target g and trained predictor, plus error statistics."""

    def __init__(self, obs_dim: int, out_dim: int = 16, hidden: int = 64, stat_decay: float = 0.99,
                 sigma_floor: float = 1e-4):
        super().__init__()
        self.target = _mlp(obs_dim, hidden, out_dim)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.predictor = _mlp(obs_dim, hidden, out_dim)
        self.stat_decay = stat_decay
        self.sigma_floor = sigma_floor
        self.err_mean = 0.0
        self.err_sq = 0.0
        self.initialised = False

    def error(self, obs):
        return ((self.predictor(obs) - self.target(obs)) ** 2).sum(-1)

    @property
    def err_std(self) -> float:
        return max(float(np.sqrt(max(self.err_sq - self.err_mean ** 2, 0.0))), self.sigma_floor)

    def update_stats(self, errors) -> None:
        e = np.asarray(errors, dtype=np.float64).ravel()
        if e.size == 0:
            return
        m1, m2 = float(e.mean()), float((e * e).mean())
        if not self.initialised:
            self.err_mean, self.err_sq, self.initialised = m1, m2, True
        else:
            d = self.stat_decay
            self.err_mean = d * self.err_mean + (1 - d) * m1
            self.err_sq = d * self.err_sq + (1 - d) * m2

    def modulator(self, err):
        """Standardised error; 0 before any statistics exist."""
        if not self.initialised:
            return np.zeros_like(np.asarray(err, dtype=np.float64))
        return lifelong_modulator(err, self.err_mean, self.err_std)


def lifelong_modulator(err, mu: float, sigma: float):
    return (np.asarray(err, dtype=np.float64) - mu) / sigma


class ApEmbedder(nn.Module):
    """Embedding f(x) trained through an inverse-dynamics classifier."""

    def __init__(self, obs_dim: int, n_actions: int, embed_dim: int = 32, hidden: int = 64):
        super().__init__()
        self.embed = _mlp(obs_dim, hidden, embed_dim)
        self.classifier = nn.Sequential(nn.Linear(2 * embed_dim, hidden), nn.ReLU(),
                                        nn.Linear(hidden, n_actions))

    def forward(self, obs):
        return self.embed(obs)

    def action_logits(self, obs_t, obs_tp1):
        return self.classifier(torch.cat([self.embed(obs_t), self.embed(obs_tp1)], -1))


def _masked_mean(x, mask):
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    return (x * m).sum() / m.sum().clamp_min(1.0)


def ap_loss(embedder: ApEmbedder, obs_t, obs_tp1, actions, mask=None):
    """Inverse-dynamics cross-entropy over consecutive observation pairs."""
    logits = embedder.action_logits(obs_t, obs_tp1)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), actions.reshape(-1),
                         reduction="none").reshape(actions.shape)
    return _masked_mean(ce, mask)


def rnd_loss(pair: RndPair, obs, mask=None):
    return _masked_mean(pair.error(obs), mask)
