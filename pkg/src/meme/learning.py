"""Loss assembly: TD normalisation, trust region, cross-mixture weighting,
policy distillation and replay priorities.

Tensors are time-major ``(T, B, ...)``. Mixture-indexed quantities put the
mixture axis right after the batch axis: ``(T, B, N)`` or ``(T, B, N, A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .mixture import ConfigError

NORM_FLOOR = 0.01
PRIORITY_FLOOR = 1e-6
LOSS_MODES = ("combined", "decomposed", "single_head")


class RunningStats:
    """Per-mixture exponential moments of TD errors.

    ``update`` takes the current batch, refreshes the running moments with
    importance weights and remembers the batch std, so the divisor used
    afterwards is never stale.
    """

    def __init__(self, n_mixtures: int, decay: float = 0.99, floor: float = NORM_FLOOR):
        self.n = n_mixtures
        self.decay = decay
        self.floor = floor
        self.mean = np.zeros(n_mixtures)
        self.sq = np.zeros(n_mixtures)
        self.batch_std = np.zeros(n_mixtures)

    @property
    def running_std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.sq - self.mean ** 2, 0.0))

    def sigma(self) -> np.ndarray:
        return np.maximum(np.maximum(self.running_std, self.batch_std), self.floor)

    def update(self, errors, valid=None, weights=None) -> np.ndarray:
        """errors: (T, B, N); valid: (T, B); weights: (B,) importance weights."""
        e = _np(errors)
        t, b, n = e.shape
        valid = np.ones((t, b), bool) if valid is None else _np(valid).astype(bool)
        w = np.ones(b) if weights is None else _np(weights)
        ww = (valid * w[None, :])[..., None]
        if ww.sum() > 0:
            m1 = (ww * e).sum((0, 1)) / ww.sum()
            m2 = (ww * e * e).sum((0, 1)) / ww.sum()
            self.mean = self.decay * self.mean + (1 - self.decay) * m1
            self.sq = self.decay * self.sq + (1 - self.decay) * m2
        self.batch_std = np.array([batch_std(e[..., j][valid]) for j in range(n)])
        return self.sigma()

    def state_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sq": self.sq.tolist(),
                "batch_std": self.batch_std.tolist(), "decay": self.decay, "floor": self.floor}

    def load_state_dict(self, d: dict) -> None:
        self.mean = np.array(d["mean"])
        self.sq = np.array(d["sq"])
        self.batch_std = np.array(d["batch_std"])
        self.decay, self.floor = d["decay"], d["floor"]


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def batch_std(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def normalize_td(errors, sigma_running: float, floor: float = NORM_FLOOR):
    """Divide one mixture's errors by max(sigma_running, sigma_batch, floor).

    The division goes through errors scaled by their largest magnitude: when
    the batch std is the active divisor, multiplying the errors by any c > 0
    (exactly representable) gives bit-identical output.
    """
    torch_in = isinstance(errors, torch.Tensor)
    e = _np(errors)
    peak = float(np.max(np.abs(e))) if e.size else 0.0
    if peak == 0.0:
        out = np.zeros_like(e)
    else:
        u = e / peak
        div = max(sigma_running / peak, batch_std(u), floor / peak)
        out = u / div
    return torch.as_tensor(out, dtype=errors.dtype) if torch_in else out


def td_divisor(errors, sigma_running: float, floor: float = NORM_FLOOR) -> float:
    e = _np(errors)
    return max(sigma_running, batch_std(e), floor)


def trust_region_mask(q_online, q_target, g, sigma, alpha):
    """True where a step contributes to the loss.

    A step is dropped iff the online value left the band alpha*sigma around
    the target network and the TD error pushes it further out.
    """
    gap = q_online - q_target
    outside = gap.abs() > alpha * sigma
    away = torch.sign(gap) != torch.sign(q_online - g)
    return ~(outside & away)


def cross_mixture_weights(behaviour, n: int, eta: float):
    """W[b, j] = eta * 1{j = j_mu(b)} + (1 - eta) / N; each row sums to 1."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    behaviour = torch.as_tensor(behaviour, dtype=torch.long)
    w = torch.full((behaviour.shape[0], n), (1.0 - eta) / n, dtype=torch.float64)
    w[torch.arange(behaviour.shape[0]), behaviour] += eta
    return w


def cross_mixture_loss(per_mixture, behaviour, eta: float):
    """per_mixture: (B, N) per-sequence losses -> batch mean of the weighted sum."""
    w = cross_mixture_weights(behaviour, per_mixture.shape[-1], eta).to(per_mixture.dtype)
    return (w * per_mixture).sum(-1).mean()


def squared_td(normed, kept, valid):
    """Per-sequence ½ mean of kept squared errors, counted over valid steps.

    normed, kept: (T, B, N); valid: (T, B). Returns (B, N).
    """
    valid = valid.to(normed.dtype)
    denom = valid.sum(0).clamp_min(1.0)[:, None]
    return 0.5 * (normed ** 2 * kept.to(normed.dtype) * valid[..., None]).sum(0) / denom


def value_loss(normed, kept, valid, behaviour, eta: float, mode: str = "combined",
               normed_intrinsic=None, kept_intrinsic=None, betas=None):
    """Cross-mixture value loss.

    In ``combined`` and ``single_head`` mode ``normed`` holds errors of the
    summed value. In ``decomposed`` mode it holds the extrinsic errors and the
    intrinsic errors enter with weight beta_j^2.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}")
    per = squared_td(normed, kept, valid)
    if mode == "decomposed":
        b2 = torch.as_tensor(betas, dtype=normed.dtype) ** 2
        per = per + b2 * squared_td(normed_intrinsic, kept_intrinsic, valid)
    return cross_mixture_loss(per, behaviour, eta), per


def epsilon_greedy_probs(q, eps: float):
    """Epsilon-greedy distribution over the last axis, ties to the lowest index."""
    a = q.shape[-1]
    greedy = F.one_hot(q.argmax(-1), a).to(q.dtype)
    return eps / a + (1.0 - eps) * greedy


def kl_divergence(p_logits, q_logits):
    """KL(p || q) over the last axis from logits."""
    lp = F.log_softmax(p_logits, -1)
    return (lp.exp() * (lp - F.log_softmax(q_logits, -1))).sum(-1)


def distillation_loss(q_online, logits_online, logits_target, valid=None,
                      c_kl: float = 0.5, epsilon: float = 1e-4):
    """Cross-entropy from eps-greedy(Q) to pi_dist, masked where the target
    head drifted more than c_kl away in KL.

    q_online, logits: (..., A); valid broadcasts against the leading axes.
    Returns (loss, kept mask).
    """
    target = epsilon_greedy_probs(q_online.detach(), epsilon)
    ce = -(target * F.log_softmax(logits_online, -1)).sum(-1)
    with torch.no_grad():
        kept = kl_divergence(logits_target, logits_online) <= c_kl
    v = torch.ones_like(ce) if valid is None else valid.to(ce.dtype).expand_as(ce)
    m = kept.to(ce.dtype) * v
    return (ce * m).sum() / v.sum().clamp_min(1.0), kept


def sharpen_policy(probs, tau: float, floor: float = 1e-12):
    """softmax(log pi / tau): the temperature-sharpened target policy."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if isinstance(probs, torch.Tensor):
        return torch.softmax(torch.log(probs.clamp_min(floor)) / tau, -1)
    logp = np.log(np.maximum(np.asarray(probs, dtype=np.float64), floor)) / tau
    logp -= logp.max(-1, keepdims=True)
    e = np.exp(logp)
    return e / e.sum(-1, keepdims=True)


def compute_priority(normed, w_max: float = 0.9, valid=None, floor: float = PRIORITY_FLOOR):
    """w_max * max|d| + (1 - w_max) * mean|d| over a sequence's valid steps.

    normed: (T,) or (T, B); returns a float or (B,) array.
    """
    d = np.abs(_np(normed))
    if d.ndim == 1:
        d = d[:, None]
        single = True
    else:
        single = False
    v = np.ones(d.shape, bool) if valid is None else _np(valid).astype(bool).reshape(d.shape)
    cnt = v.sum(0)
    mx = np.where(v, d, 0.0).max(0)
    mean = np.where(v, d, 0.0).sum(0) / np.maximum(cnt, 1)
    p = np.maximum(w_max * mx + (1.0 - w_max) * mean, floor)
    return float(p[0]) if single else p


@dataclass
class LossBundle:
    value_loss: torch.Tensor
    distill_loss: torch.Tensor
    priorities: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def check(self) -> None:
        for name in ("value_loss", "distill_loss"):
            v = getattr(self, name)
            if not torch.isfinite(v).all():
                raise FloatingPointError(f"non-finite {name}")
        if np.any(self.priorities <= 0):
            raise FloatingPointError("non-positive priority")
