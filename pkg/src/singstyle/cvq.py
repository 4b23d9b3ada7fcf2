"""Clustering style encoder: phoneme-level style tokens via clustering vector quantisation.

Distances are computed between l2-normalised latents and l2-normalised code
vectors. Besides the usual codebook/commitment terms the codebook is trained
with a contrastive term, and rarely used codes are pulled toward recently
encoded latents.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .corpus import FormatError
from .layers import ConvStack, WaveNet

EPS_NORM = 1e-8
CODEBOOK_MAGIC = b"CVQ1"
_CB_HEADER = struct.Struct("<4sII")


class DegenerateVectorError(ValueError):
    pass


def l2_normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = v.norm(dim=dim, keepdim=True)
    if bool((norm < EPS_NORM).any()):
        raise DegenerateVectorError("cannot l2-normalise a vector with norm below 1e-8")
    return v / norm


def pool_to_phoneme(frame_hidden: torch.Tensor, boundaries) -> torch.Tensor:
    """Mean of ``frame_hidden`` [T, C] inside every ``[b_i, b_{i+1})`` span -> [N, C]."""
    b = [int(x) for x in boundaries]
    if b[0] != 0 or b[-1] != frame_hidden.shape[0]:
        raise ValueError("boundaries must start at 0 and end at the frame count")
    spans = np.diff(b)
    if np.any(spans <= 0):
        raise ValueError(f"empty phoneme span at index {int(np.argmin(spans))}")
    return torch.stack([frame_hidden[s:e].mean(0) for s, e in zip(b[:-1], b[1:])])


def pooling_matrix(durations: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Batched averaging operator ``[B, N, T]`` built from padded per-phoneme durations [B, N]."""
    ends = durations.cumsum(-1)
    starts = ends - durations
    t = torch.arange(n_frames, device=durations.device)[None, None, :]
    inside = (t >= starts[..., None]) & (t < ends[..., None])
    w = inside.to(torch.float32)
    return w / w.sum(-1, keepdim=True).clamp_min(1.0)


@dataclass
class QuantizeOutput:
    tokens: torch.Tensor
    quantized: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor
    contrastive_loss: torch.Tensor

    @property
    def total(self):
        return self.codebook_loss + self.commitment_loss + self.contrastive_loss


def nearest_codes(z: torch.Tensor, codes: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Exact squared-distance argmin in float64, ties to the lowest index."""
    z64, c64 = z.detach().to(torch.float64), codes.detach().to(torch.float64)
    out = []
    for s in range(0, z64.shape[0], chunk):
        d = ((z64[s:s + chunk, None, :] - c64[None]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long, device=z.device)


def contrastive_loss(codes: torch.Tensor, latents: torch.Tensor, tokens: torch.Tensor,
                     tau: float, n_neg: int) -> torch.Tensor:
    """For every code with an assigned latent: -log(exp(sim+/tau) / sum_i exp(sim-_i/tau)).

    The positive is the latent with the highest cosine to the code, the
    negatives are the ``n_neg`` latents with the lowest cosine.
    """
    if latents.shape[0] < n_neg + 1:
        raise ValueError(f"contrastive term needs at least {n_neg + 1} latents, got {latents.shape[0]}")
    active = torch.unique(tokens)
    e = l2_normalize(codes[active])
    z = l2_normalize(latents)
    sim = e @ z.T  # [A, M]
    pos = sim.max(dim=1).values
    neg = torch.topk(sim, n_neg, dim=1, largest=False).values
    return (-pos / tau + torch.logsumexp(neg / tau, dim=1)).mean()


class Codebook(nn.Module):
    def __init__(self, n_codes: int, d_code: int, beta: float = 0.25, tau: float = 0.1, n_neg: int = 10,
                 ema_decay: float = 0.99, l2: bool = True, contrastive: bool = True,
                 contrastive_weight: float = 1.0):
        super().__init__()
        if n_codes < 2:
            raise ValueError("codebook needs at least two codes")
        self.embedding = nn.Parameter(torch.randn(n_codes, d_code))
        self.register_buffer("usage", torch.zeros(n_codes))
        self.beta, self.tau, self.n_neg = beta, tau, n_neg
        self.ema_decay = ema_decay
        self.l2 = l2
        self.use_contrastive = contrastive
        self.contrastive_weight = contrastive_weight

    @classmethod
    def from_config(cls, cfg: Config) -> "Codebook":
        return cls(cfg.n_codes, cfg.d_code, cfg.cvq_beta, cfg.cvq_tau, cfg.cvq_n_neg, cfg.cvq_ema_decay,
                   l2=cfg.cvq_l2, contrastive=True, contrastive_weight=cfg.cvq_contrastive_weight)

    @property
    def n_codes(self) -> int:
        return self.embedding.shape[0]

    def normalized(self) -> torch.Tensor:
        return l2_normalize(self.embedding) if self.l2 else self.embedding

    def lookup(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.normalized()[tokens]

    def quantize(self, z: torch.Tensor, update_usage: bool = False) -> QuantizeOutput:
        """``z`` [M, d] pre-quantisation latents."""
        if not torch.all(torch.isfinite(z)):
            raise ValueError("non-finite style latent")
        zn = l2_normalize(z) if self.l2 else z
        en = self.normalized()
        tokens = nearest_codes(zn, en)
        chosen = en[tokens]
        codebook = ((zn.detach() - chosen) ** 2).sum(-1).mean()
        commitment = self.beta * ((zn - chosen.detach()) ** 2).sum(-1).mean()
        contrast = z.new_zeros(())
        if self.use_contrastive and self.l2 and z.shape[0] >= self.n_neg + 1:
            contrast = self.contrastive_weight * contrastive_loss(self.embedding, z, tokens, self.tau, self.n_neg)
        # straight-through: value is the code, gradient passes to z unchanged
        quantized = z + (chosen - z).detach()
        if update_usage and self.training:
            self.update_usage(tokens)
        return QuantizeOutput(tokens, quantized, codebook, commitment, contrast)

    @torch.no_grad()
    def update_usage(self, tokens: torch.Tensor):
        counts = torch.bincount(tokens, minlength=self.n_codes).to(self.usage.dtype)
        freq = counts / max(1, tokens.numel())
        self.usage.mul_(self.ema_decay).add_((1.0 - self.ema_decay) * freq)

    def perplexity(self, tokens: torch.Tensor) -> float:
        p = torch.bincount(tokens, minlength=self.n_codes).double()
        p = p / p.sum()
        nz = p[p > 0]
        return float(torch.exp(-(nz * nz.log()).sum()))


@torch.no_grad()
def reinit_dead_codes(cb: Codebook, recent_latents: torch.Tensor, threshold: float,
                      generator: torch.Generator | None = None) -> int:
    """Pull under-used codes toward randomly chosen recent latents.

    ``e_k <- (1 - lam_k) e_k + lam_k z`` with ``lam_k = exp(-usage_k * K * 10)``,
    applied to codes whose usage EMA is below ``threshold``. Returns the
    number of codes touched.
    """
    if recent_latents is None or recent_latents.shape[0] == 0:
        return 0
    dead = torch.nonzero(cb.usage < threshold).flatten()
    if dead.numel() == 0:
        return 0
    lam = torch.exp(-cb.usage[dead] * cb.n_codes * 10.0).clamp(0.0, 1.0)[:, None]
    pick = torch.randint(recent_latents.shape[0], (dead.numel(),), generator=generator, device=recent_latents.device)
    anchors = recent_latents[pick].to(cb.embedding.dtype)
    if cb.l2:
        anchors = l2_normalize(anchors) * cb.embedding[dead].norm(dim=-1, keepdim=True).clamp_min(1e-3)
    cb.embedding.data[dead] = (1.0 - lam) * cb.embedding.data[dead] + lam * anchors
    return int(dead.numel())


class LatentPool:
    """FIFO of the most recent encoded latents, used as reinitialisation anchors."""

    def __init__(self, size: int):
        self.size = size
        self.buf: torch.Tensor | None = None

    def push(self, z: torch.Tensor):
        z = z.detach()
        self.buf = z if self.buf is None else torch.cat([self.buf, z])[-self.size:]

    def get(self) -> torch.Tensor:
        return self.buf if self.buf is not None else torch.zeros(0)


class StyleEncoder(nn.Module):
    """Mel -> WaveNet refinement -> phoneme pooling -> conv stack -> projection -> CVQ.

    Pooling keeps the mean and, with ``style_pool_std``, the standard deviation
    of every refined channel over the phoneme, so within-phoneme movement such
    as vibrato survives the pooling.
    """

    def __init__(self, cfg: Config, n_mels: int = 80):
        super().__init__()
        self.inp = nn.Linear(n_mels, cfg.style_hidden)
        self.wavenet = WaveNet(cfg.style_hidden, cfg.style_wn_layers, cfg.style_wn_kernel)
        self.pool_std = cfg.style_pool_std
        self.pool_merge = nn.Linear(2 * cfg.style_hidden, cfg.style_hidden) if self.pool_std else None
        self.convs = ConvStack(cfg.style_hidden, cfg.style_conv_layers, cfg.style_conv_kernel)
        self.proj = nn.Linear(cfg.style_hidden, cfg.d_code)
        self.codebook = Codebook.from_config(cfg)

    def latents(self, mel, frame_mask, durations, ph_mask) -> torch.Tensor:
        """``mel`` [B, T, 80], ``durations`` [B, N] (0 on padding) -> z [B, N, d_code]."""
        h = self.wavenet(self.inp(mel), frame_mask)
        pool = pooling_matrix(durations, mel.shape[1])
        pooled = pool @ h
        if self.pool_std:
            var = (pool @ (h * h) - pooled * pooled).clamp_min(0.0)
            pooled = self.pool_merge(torch.cat([pooled, torch.sqrt(var + 1e-6)], dim=-1))
        return self.proj(self.convs(pooled, ph_mask))

    def forward(self, mel, frame_mask, durations, ph_mask, update_usage=False):
        z = self.latents(mel, frame_mask, durations, ph_mask)
        out = self.codebook.quantize(z[ph_mask], update_usage=update_usage)
        tokens = torch.zeros(ph_mask.shape, dtype=torch.long, device=mel.device)
        tokens[ph_mask] = out.tokens
        quantized = torch.zeros_like(z)
        quantized = quantized.masked_scatter(ph_mask[..., None].expand_as(z), out.quantized)
        return tokens, quantized, out, z


# ----------------------------------------------------------------- checkpoint io


def write_codebook(cb: Codebook, path) -> None:
    vecs = np.ascontiguousarray(cb.embedding.detach().cpu().numpy(), dtype="<f4")
    usage = np.ascontiguousarray(cb.usage.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CB_HEADER.pack(CODEBOOK_MAGIC, vecs.shape[0], vecs.shape[1]))
        fh.write(vecs.tobytes())
        fh.write(usage.tobytes())


def read_codebook(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _CB_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, k, d = _CB_HEADER.unpack_from(raw)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _CB_HEADER.size + 4 * (k * d + k)
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    vecs = np.frombuffer(raw, dtype="<f4", count=k * d, offset=_CB_HEADER.size).reshape(k, d)
    usage = np.frombuffer(raw, dtype="<f4", count=k, offset=_CB_HEADER.size + 4 * k * d)
    return vecs.astype(np.float32), usage.astype(np.float32)


def load_codebook(cb: Codebook, path) -> Codebook:
    vecs, usage = read_codebook(path)
    if vecs.shape != tuple(cb.embedding.shape):
        raise FormatError(f"codebook shape {vecs.shape} does not match {tuple(cb.embedding.shape)}")
    with torch.no_grad():
        cb.embedding.copy_(torch.from_numpy(vecs))
        cb.usage.copy_(torch.from_numpy(usage))
    return cb


# ------------------------------------------------------------- codebook health


def cluster_latents(n: int, n_clusters: int, dim: int, spread: float, generator: torch.Generator,
                    centers: torch.Tensor | None = None):
    """Samples around ``n_clusters`` random centres; returns (latents, centres)."""
    if centers is None:
        centers = torch.randn(n_clusters, dim, generator=generator)
    idx = torch.randint(n_clusters, (n,), generator=generator)
    return centers[idx] + spread * torch.randn(n, dim, generator=generator), centers


def used_code_fraction(cb: Codebook, z: torch.Tensor) -> float:
    with torch.no_grad():
        tokens = cb.quantize(z).tokens
    return torch.unique(tokens).numel() / cb.n_codes


def codebook_usage_run(seed: int, clustering: bool, n_codes: int = 16, n_clusters: int = 8, dim: int = 16,
                       steps: int = 200, batch: int = 256, lr: float = 1e-2, reinit_every: int = 10) -> float:
    """Train a linear encoder plus codebook on clustered latents; return the used-code fraction.

    ``clustering=True`` uses l2-normalised distances, the contrastive term and
    dead-code reinitialisation; ``False`` is a plain VQ with the same seed,
    data, encoder and optimiser.
    """
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    enc = nn.Linear(dim, dim)
    cb = Codebook(n_codes, dim, l2=clustering, contrastive=clustering)
    data_gen = torch.Generator().manual_seed(seed + 1)
    _, centers = cluster_latents(1, n_clusters, dim, 0.1, data_gen)
    opt = torch.optim.Adam(list(enc.parameters()) + list(cb.parameters()), lr=lr)
    pool = LatentPool(512)
    for step in range(1, steps + 1):
        x, _ = cluster_latents(batch, n_clusters, dim, 0.1, data_gen, centers)
        z = enc(x)
        out = cb.quantize(z, update_usage=True)
        loss = out.total
        opt.zero_grad()
        loss.backward()
        opt.step()
        pool.push(z)
        if clustering and step % reinit_every == 0:
            reinit_dead_codes(cb, pool.get(), 1.0 / n_codes, gen)
    x, _ = cluster_latents(2048, n_clusters, dim, 0.1, data_gen, centers)
    with torch.no_grad():
        return used_code_fraction(cb, enc(x))
