"""Style adaptive mel decoder: few-step generator-based diffusion whose FFT
denoiser re-normalises its hidden frames and modulates them with scale and
bias computed from the frame-level style embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .corpus import N_MELS
from .layers import ConvFeedForward, MultiHeadAttention, StepEmbedding
from .metrics import MEL_RANGE, masked_ssim

NORM_EPS = 1e-5


@dataclass
class DecoderSchedule:
    """``alpha[t]`` is the signal coefficient prod_{i<=t} sqrt(1 - beta_i); index 0 is clean data."""

    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.beta = np.concatenate([[0.0], b])
        self.alpha_bar = np.cumprod(1.0 - self.beta)
        self.alpha = np.sqrt(self.alpha_bar)
        var = np.zeros_like(self.beta)
        var[1:] = (1 - self.alpha_bar[:-1]) / (1 - self.alpha_bar[1:]) * self.beta[1:]
        self.posterior_var = var

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def noised(self, x0, t, noise):
        """alpha_t x0 + sqrt(1 - alpha_t^2) noise for per-item steps ``t`` [B]."""
        a = torch.as_tensor(self.alpha, dtype=x0.dtype, device=x0.device)[t].view(-1, *([1] * (x0.dim() - 1)))
        return a * x0 + (1 - a ** 2).sqrt() * noise

    def posterior(self, x_t, x0_hat, t: int):
        ab, ab_prev, b = self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]
        mean = (np.sqrt(ab_prev) * b / (1 - ab)) * x0_hat + (np.sqrt(1 - b) * (1 - ab_prev) / (1 - ab)) * x_t
        return mean, float(np.sqrt(self.posterior_var[t]))


def decoder_schedule(cfg: Config) -> DecoderSchedule:
    return DecoderSchedule(np.array(cfg.decoder_betas()))


class MelStyleAdaptiveNorm(nn.Module):
    """m_i = phi_gamma(s) * (m - mu(m)) / sigma(m) + phi_beta(s), statistics per frame over channels."""

    def __init__(self, d_hidden: int, d_style: int, adaptive: bool = True):
        super().__init__()
        self.adaptive = adaptive
        self.gamma = nn.Linear(d_style, d_hidden)
        self.beta = nn.Linear(d_style, d_hidden)
        nn.init.normal_(self.gamma.weight, std=0.02)
        nn.init.ones_(self.gamma.bias)
        nn.init.normal_(self.beta.weight, std=0.02)
        nn.init.zeros_(self.beta.bias)

    @staticmethod
    def normalize(m):
        mu = m.mean(-1, keepdim=True)
        sigma = (m.var(-1, keepdim=True, unbiased=False) + NORM_EPS).sqrt()
        return (m - mu) / sigma

    def forward(self, m, s):
        n = self.normalize(m)
        if not self.adaptive:
            return n
        return self.gamma(s) * n + self.beta(s)


class DenoiserLayer(nn.Module):
    def __init__(self, d, heads, d_filter, kernel, d_style, norm_on):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.ffn = ConvFeedForward(d, d_filter, kernel)
        self.norm1 = MelStyleAdaptiveNorm(d, d_style, norm_on[0])
        self.norm2 = MelStyleAdaptiveNorm(d, d_style, norm_on[1])

    def forward(self, x, style, mask):
        attn_mask = mask[:, None, :].expand(-1, x.shape[1], -1)
        x = self.norm1(x + self.attn(x, attn_mask), style)
        x = self.norm2(x + self.ffn(x, mask), style)
        return x * mask[..., None]


class StyleAdaptiveDecoder(nn.Module):
    """Predicts the clean (normalised) mel directly from a noisy one."""

    def __init__(self, cfg: Config, cond_channels: int, d_style: int):
        super().__init__()
        d = cfg.dec_hidden
        n_sites = 2 * cfg.dec_layers
        on = [cfg.dec_adaptive_norm and m for m in cfg.norm_mask(n_sites)]
        self.inp = nn.Linear(N_MELS, d)
        self.cond = nn.Linear(cond_channels, d)
        self.step = StepEmbedding(d, d)
        self.layers = nn.ModuleList(
            DenoiserLayer(d, cfg.dec_heads, cfg.dec_filter, cfg.dec_kernel, d_style, on[2 * i: 2 * i + 2])
            for i in range(cfg.dec_layers)
        )
        self.out = nn.Linear(d, N_MELS)

    def forward(self, x_t, t, cond, style, mask):
        """``x_t`` [B, T, 80]; ``t`` [B]; ``cond`` [B, T, C]; ``style`` [B, T, d_style]."""
        h = self.inp(x_t) + self.cond(cond) + self.step(t)[:, None, :]
        h = h * mask[..., None]
        for layer in self.layers:
            h = layer(h, style, mask)
        x0 = self.out(h) * mask[..., None]
        if not torch.all(torch.isfinite(x0)):
            raise FloatingPointError("decoder produced non-finite values")
        return x0


def decoder_losses(x0_hat, x0, mask=None):
    """(MAE, 1 - SSIM) on normalised mels; SSIM evaluated after mapping [-1, 1] onto [0, 12]."""
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    if x0.dim() == 2:
        x0_hat, x0 = x0_hat[None], x0[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones(x0.shape[:2], dtype=torch.bool, device=x0.device)
    m = mask[..., None].to(x0.dtype)
    mae = ((x0_hat - x0).abs() * m).sum() / (m.sum() * x0.shape[-1]).clamp_min(1.0)
    half = MEL_RANGE / 2
    ssim_val = masked_ssim((x0_hat + 1) * half, (x0 + 1) * half, mask, MEL_RANGE)
    return mae, 1.0 - ssim_val


@torch.no_grad()
def sample_mel(net: StyleAdaptiveDecoder, cond, style, mask, sched: DecoderSchedule, generator: torch.Generator):
    """Ancestral sampling from noise; one denoiser call per step."""
    b, n = mask.shape
    x = torch.randn(b, n, N_MELS, generator=generator, device=cond.device)
    x0_hat = x
    for t in range(sched.T, 0, -1):
        tt = torch.full((b,), t, dtype=torch.long, device=cond.device)
        x0_hat = net(x, tt, cond, style, mask).clamp(-1.0, 1.0)
        if t > 1:
            mean, sd = sched.posterior(x, x0_hat, t)
            x = mean + sd * torch.randn(x.shape, generator=generator, device=x.device)
    return x0_hat * mask[..., None]


def noised_input(x0, t, sched: DecoderSchedule, generator=None):
    noise = torch.randn(x0.shape, generator=generator, device=x0.device)
    return sched.noised(x0, t, noise)

