"""Building blocks shared by the encoders, denoisers and the language model.

Masks are boolean ``[B, T]`` tensors with ``True`` on valid positions.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Fixed sin/cos features of (possibly fractional) positions; returns ``[..., dim]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=positions.device) / half)
    args = positions.to(torch.float32)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def forward(self, x, attn_mask):
        """``attn_mask``: bool ``[B, Tq, Tk]``, True where attention is allowed."""
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        # fully masked rows (padding queries) would give NaN: let them attend anywhere, then zero them
        live = attn_mask.any(-1, keepdim=True)
        safe = attn_mask | ~live
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=safe[:, None],
                                           dropout_p=self.dropout if self.training else 0.0)
        y = y.transpose(1, 2).reshape(b, t, d) * live.to(y.dtype)
        return self.out(y)


class ConvFeedForward(nn.Module):
    def __init__(self, d_model: int, d_filter: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.conv1 = nn.Conv1d(d_model, d_filter, kernel, padding=kernel // 2)
        self.conv2 = nn.Linear(d_filter, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = x * mask[..., None]
        h = F.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2)
        return self.conv2(self.dropout(h))


class FFTBlock(nn.Module):
    """Feed-forward Transformer block: self-attention then a convolutional FFN, post-norm."""

    def __init__(self, d_model, n_heads, d_filter, kernel, dropout=0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = ConvFeedForward(d_model, d_filter, kernel, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        attn_mask = mask[:, None, :].expand(-1, x.shape[1], -1)
        x = self.norm1(x + self.dropout(self.attn(x, attn_mask)))
        x = self.norm2(x + self.dropout(self.ffn(x, mask)))
        return x * mask[..., None]


class WaveNet(nn.Module):
    """Non-causal gated dilated convolutions with global and frame-level conditioning.

    Input/output are channel-last ``[B, T, C]``.
    """

    def __init__(self, channels, n_layers, kernel=3, cond_channels=0, dilation_cycle=4):
        super().__init__()
        self.channels = channels
        self.in_layers = nn.ModuleList()
        self.cond_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        for i in range(n_layers):
            dil = 2 ** (i % dilation_cycle)
            self.in_layers.append(nn.Conv1d(channels, 2 * channels, kernel, dilation=dil, padding=dil * (kernel - 1) // 2))
            if cond_channels:
                self.cond_layers.append(nn.Conv1d(cond_channels, 2 * channels, 1))
            out = 2 * channels if i < n_layers - 1 else channels
            self.res_skip.append(nn.Conv1d(channels, out, 1))

    def forward(self, x, mask, cond=None):
        m = mask[:, None, :].to(x.dtype)
        x = x.transpose(1, 2) * m
        c = cond.transpose(1, 2) if cond is not None else None
        skip = 0.0
        for i, (conv, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            h = conv(x)
            if c is not None:
                h = h + self.cond_layers[i](c)
            a, b = h.chunk(2, dim=1)
            h = torch.tanh(a) * torch.sigmoid(b)
            out = rs(h)
            if i < len(self.res_skip) - 1:
                res, sk = out.chunk(2, dim=1)
                x = (x + res) * m
                skip = skip + sk
            else:
                skip = skip + out
        return (skip * m / math.sqrt(len(self.in_layers))).transpose(1, 2)


class ConvStack(nn.Module):
    """Plain residual conv layers with ReLU and layer norm, channel-last."""

    def __init__(self, channels, n_layers, kernel):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(channels, channels, kernel, padding=kernel // 2) for _ in range(n_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(channels) for _ in range(n_layers))

    def forward(self, x, mask):
        m = mask[..., None].to(x.dtype)
        for conv, norm in zip(self.convs, self.norms):
            h = F.relu(conv((x * m).transpose(1, 2))).transpose(1, 2)
            x = norm(x + h)
        return x * m


class StepEmbedding(nn.Module):
    """Diffusion-step embedding: sinusoid features then a two-layer MLP."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, out_dim))

    def forward(self, t):
        return self.mlp(sinusoidal_embedding(t.float(), self.dim))
