"""Pitch diffusion predictor: Gaussian diffusion over normalised log-F0 and
multinomial diffusion over the voiced/unvoiced class, sharing one
non-causal WaveNet denoiser with two output heads.

Time indices run 1..T; ``alpha_bar[0]`` is 1 by convention. UV class 1 means
voiced, 0 unvoiced.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .layers import StepEmbedding, WaveNet

N_UV = 2


@dataclass
class DiffusionSchedule:
    """Tables indexed by step t in 1..T (entry 0 is the t=0 convention)."""

    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.beta = np.concatenate([[0.0], b])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        var = np.zeros_like(self.beta)
        var[1:] = (1.0 - self.alpha_bar[:-1]) / (1.0 - self.alpha_bar[1:]) * self.beta[1:]
        self.posterior_var = var
        self.sigma = np.sqrt(var)

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def loss_weight(self) -> np.ndarray:
        """beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t)); sigma_1^2 falls back to beta_1."""
        var = self.posterior_var.copy()
        var[1] = self.beta[1]
        w = np.zeros_like(self.beta)
        w[1:] = self.beta[1:] ** 2 / (2 * var[1:] * self.alpha[1:] * (1 - self.alpha_bar[1:]))
        return w

    def check_t(self, t):
        tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if np.any(tt < 1) or np.any(tt > self.T):
            raise ValueError(f"diffusion step outside [1, {self.T}]")


def linear_schedule(steps: int = 100, beta_min: float = 1e-4, beta_max: float = 0.06) -> DiffusionSchedule:
    return DiffusionSchedule(np.linspace(beta_min, beta_max, steps))


def _take(table, t, like: torch.Tensor):
    """Gather schedule entries for integer step(s) ``t`` and broadcast against ``like``."""
    vals = torch.as_tensor(table, dtype=like.dtype, device=like.device)[torch.as_tensor(t, device=like.device)]
    while vals.dim() < like.dim():
        vals = vals[..., None]
    return vals


# ------------------------------------------------------------------ length regulator


def length_regulate(phoneme_feats: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row i ``durations[i]`` times: [N, C] -> [sum(d), C]."""
    d = torch.as_tensor(durations, dtype=torch.long, device=phoneme_feats.device)
    if (d <= 0).any():
        raise ValueError("length regulator needs positive integer durations")
    return torch.repeat_interleave(phoneme_feats, d, dim=0)


def expansion_matrix(durations: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Batched one-hot frame->phoneme map ``[B, T, N]``; padded phonemes have duration 0."""
    ends = durations.cumsum(-1)
    starts = ends - durations
    t = torch.arange(n_frames, device=durations.device)[None, :, None]
    return ((t >= starts[:, None, :]) & (t < ends[:, None, :])).to(torch.float32)


# ------------------------------------------------------------------- forward processes


def gaussian_forward(x0, t, sched: DiffusionSchedule, noise):
    sched.check_t(t)
    ab = _take(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def gaussian_step(x_prev, t, sched: DiffusionSchedule, noise):
    """One application of q(x_t | x_{t-1})."""
    b = _take(sched.beta, t, x_prev)
    return (1 - b).sqrt() * x_prev + b.sqrt() * noise


def multinomial_forward(y0, t, sched: DiffusionSchedule):
    """Parameters of q(y_t | y_0) = alpha_bar_t y_0 + (1 - alpha_bar_t) / K."""
    if not torch.allclose(y0.sum(-1), torch.ones((), dtype=y0.dtype), atol=1e-6):
        raise ValueError("y0 rows must sum to one")
    sched.check_t(t)
    k = y0.shape[-1]
    ab = _take(sched.alpha_bar, t, y0)
    return ab * y0 + (1 - ab) / k


def multinomial_step(y_prev, t, sched: DiffusionSchedule):
    """Parameters of q(y_t | y_{t-1}) = (1 - beta_t) y_{t-1} + beta_t / K."""
    k = y_prev.shape[-1]
    b = _take(sched.beta, t, y_prev)
    return (1 - b) * y_prev + b / k


def multinomial_posterior(y_t, y0, t, sched: DiffusionSchedule):
    """theta_post(y_t, y_0): normalised [alpha_t y_t + (1-alpha_t)/K] * [alpha_bar_{t-1} y_0 + (1-alpha_bar_{t-1})/K]."""
    sched.check_t(t)
    k = y_t.shape[-1]
    a = _take(sched.alpha, t, y_t)
    ab_prev = _take(sched.alpha_bar, torch.as_tensor(t) - 1, y_t)
    theta = (a * y_t + (1 - a) / k) * (ab_prev * y0 + (1 - ab_prev) / k)
    norm = theta.sum(-1, keepdim=True)
    assert bool((norm > 0).all()), "posterior normaliser vanished"
    return theta / norm


def _log_posterior(y_t, log_y0, t, sched):
    k = y_t.shape[-1]
    a = _take(sched.alpha, t, y_t)
    ab_prev = _take(sched.alpha_bar, torch.as_tensor(t) - 1, y_t)
    log_theta = torch.log(a * y_t + (1 - a) / k) + torch.logaddexp(
        torch.log(ab_prev) + log_y0, torch.log((1 - ab_prev) / k)
    )
    return log_theta - torch.logsumexp(log_theta, dim=-1, keepdim=True)


def pitch_losses(eps_hat, eps, y0_logits, y0, y_t, t, sched: DiffusionSchedule, mask=None):
    """Weighted epsilon regression for F0 and the multinomial KL (cross-entropy at t=1) for UV.

    Shapes: ``eps``/``eps_hat`` [B, T]; ``y0``/``y_t`` one-hot [B, T, K];
    ``y0_logits`` [B, T, K]; ``t`` [B]; ``mask`` [B, T].
    """
    t = torch.as_tensor(t, device=eps.device).reshape(-1)
    sched.check_t(t)
    if mask is None:
        mask = torch.ones(eps.shape, dtype=torch.bool, device=eps.device)
    m = mask.to(eps.dtype)
    count = m.sum(-1).clamp_min(1.0)
    w = torch.as_tensor(sched.loss_weight(), dtype=eps.dtype, device=eps.device)[t]
    gdiff = (w * (((eps - eps_hat) ** 2) * m).sum(-1) / count).mean()

    log_y0_hat = F.log_softmax(y0_logits, dim=-1)
    tt = t[:, None].expand(eps.shape)
    t_safe = tt.clamp_min(2)  # the KL branch is only used for t > 1
    log_q = _log_posterior(y_t, torch.log(y0.clamp_min(1e-30)), t_safe, sched)
    log_p = _log_posterior(y_t, log_y0_hat, t_safe, sched)
    kl = (log_q.exp() * (log_q - log_p)).sum(-1)
    ce = -(y0 * log_y0_hat).sum(-1)
    per_frame = torch.where(tt == 1, ce, kl)
    mdiff = ((per_frame * m).sum(-1) / count).mean()
    return gdiff, mdiff


# ------------------------------------------------------------------------- network


@dataclass
class PitchContour:
    f0_norm: torch.Tensor  # [T]
    uv_onehot: torch.Tensor  # [T, 2]
    f0_hz: np.ndarray

    @property
    def uv(self) -> np.ndarray:
        return self.uv_onehot.argmax(-1).cpu().numpy()


class PitchDenoiser(nn.Module):
    def __init__(self, cfg: Config, cond_channels: int):
        super().__init__()
        ch = cfg.pitch_channels
        self.inp = nn.Linear(1 + N_UV, ch)
        self.step = StepEmbedding(ch, ch)
        self.wavenet = WaveNet(ch, cfg.pitch_layers, cfg.pitch_kernel, cond_channels=cond_channels)
        self.eps_head = nn.Linear(ch, 1)
        self.uv_head = nn.Linear(ch, N_UV)

    def forward(self, x_t, y_t, t, cond, mask):
        """``x_t`` [B, T]; ``y_t`` [B, T, 2]; ``t`` [B] -> eps_hat [B, T], y0 logits [B, T, 2]."""
        h = self.inp(torch.cat([x_t[..., None], y_t], dim=-1)) + self.step(t)[:, None, :]
        h = self.wavenet(h, mask, cond)
        return self.eps_head(h)[..., 0], self.uv_head(h)


def training_inputs(f0_norm, uv, t, sched, generator=None):
    """Noised F0 and a sampled noisy UV one-hot for steps ``t`` [B]."""
    eps = torch.randn(f0_norm.shape, generator=generator, device=f0_norm.device)
    x_t = gaussian_forward(f0_norm, t, sched, eps)
    y0 = F.one_hot(uv, N_UV).to(f0_norm.dtype)
    probs = multinomial_forward(y0, t, sched)
    idx = torch.multinomial(probs.reshape(-1, N_UV), 1, generator=generator).reshape(uv.shape)
    y_t = F.one_hot(idx, N_UV).to(f0_norm.dtype)
    return x_t, y_t, eps, y0


@torch.no_grad()
def sample_pitch(net: PitchDenoiser, cond, mask, sched: DiffusionSchedule, generator: torch.Generator,
                 x0_clip: float = 6.0):
    """Ancestral sampling over both branches. Returns normalised F0 [B, T] and UV one-hot [B, T, 2]."""
    b, n = mask.shape
    dev = cond.device
    x = torch.randn(b, n, generator=generator, device=dev)
    y = F.one_hot(torch.randint(N_UV, (b, n), generator=generator, device=dev), N_UV).float()
    for t in range(sched.T, 0, -1):
        tt = torch.full((b,), t, dtype=torch.long, device=dev)
        eps_hat, logits = net(x, y, tt, cond, mask)
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
        x0_hat = ((x - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)).clamp(-x0_clip, x0_clip)
        coef0 = np.sqrt(ab_prev) * sched.beta[t] / (1 - ab)
        coeft = np.sqrt(sched.alpha[t]) * (1 - ab_prev) / (1 - ab)
        mean = coef0 * x0_hat + coeft * x
        x = mean + sched.sigma[t] * torch.randn(b, n, generator=generator, device=dev) if t > 1 else mean
        theta = multinomial_posterior(y, torch.softmax(logits, -1), t, sched)
        y = F.one_hot(torch.multinomial(theta.reshape(-1, N_UV), 1, generator=generator).reshape(b, n), N_UV).float()
        if not torch.all(torch.isfinite(x)):
            raise FloatingPointError(f"pitch sampling produced non-finite values at step {t}")
    return x * mask, y
