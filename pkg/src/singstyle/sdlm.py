"""Style and duration language model.

A decoder-only transformer over ``[conditioning | autoregressive]`` where the
conditioning region is either the audio prompt (style tokens with their
durations, prompt content) or the text prompt, followed by target content and
target timbre. Every autoregressive position emits one style token (sampled)
and one duration (regressed).

Conditioning positions attend to each other freely; autoregressive positions
attend to all conditioning positions and to earlier autoregressive ones. The
convolution inside every block is causal and runs separately on each region,
so batch padding never changes a result.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .layers import MultiHeadAttention, sinusoidal_embedding

SEG_PROMPT_STYLE, SEG_PROMPT_CONTENT, SEG_TARGET_CONTENT, SEG_TIMBRE, SEG_TEXT, SEG_AR = range(6)
LOGIT_CLAMP = 30.0


@dataclass
class SDLMInputSequence:
    """Embedded conditioning rows plus what the autoregressive region needs."""

    cond: torch.Tensor  # [Lc, d_model]
    segments: list[tuple[int, int]]  # (segment type, row count) in order
    target_content: torch.Tensor  # [N, d_model], added to AR inputs (content, plus text rows in control)
    mode: str

    @property
    def cond_len(self) -> int:
        return self.cond.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_content.shape[0]

    def total_len(self) -> int:
        """Conditioning rows plus the BOS position."""
        return self.cond_len + 1


class CausalConv(nn.Module):
    def __init__(self, d, kernel):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(d, d, kernel)

    def forward(self, x):
        return self.conv(F.pad(x.transpose(1, 2), (self.kernel - 1, 0))).transpose(1, 2)


class LMBlock(nn.Module):
    """Pre-norm block: attention, causal conv, position-wise MLP."""

    def __init__(self, d, heads, kernel):
        super().__init__()
        self.n1, self.n2, self.n3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.conv = CausalConv(d, kernel)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x, attn_mask, cond_len, valid):
        x = x + self.attn(self.n1(x), attn_mask)
        h = self.n2(x) * valid[..., None]
        conv = torch.cat([self.conv(h[:, :cond_len]), self.conv(h[:, cond_len:])], dim=1)
        x = x + conv
        x = x + self.mlp(self.n3(x))
        return x * valid[..., None]


class StyleDurationLM(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        d = cfg.lm_d_model
        self.cfg = cfg
        self.d = d
        self.n_codes = cfg.n_codes
        self.bos, self.eos = cfg.n_codes, cfg.n_codes + 1
        self.vocab = cfg.lm_vocab
        self.token = nn.Embedding(self.vocab, d)
        self.duration = nn.Linear(1, d)
        self.content = nn.Linear(cfg.d_content, d)
        self.timbre = nn.Linear(cfg.d_timbre, d)
        self.segment = nn.Embedding(6, d)
        self.blocks = nn.ModuleList(LMBlock(d, cfg.lm_heads, cfg.lm_kernel) for _ in range(cfg.lm_layers))
        self.norm = nn.LayerNorm(d)
        self.style_head = nn.Linear(d, self.vocab)
        self.dur_head = nn.Linear(d, 1)
        self.use_segments = True

    # ---------------------------------------------------------------- embedding
    def _seg(self, kind, n, ref):
        if not self.use_segments:
            return ref.new_zeros(n, self.d)
        return self.segment(torch.full((n,), kind, dtype=torch.long, device=ref.device))

    def _pos(self, n, ref):
        return sinusoidal_embedding(torch.arange(n, device=ref.device), self.d)

    def embed_steps(self, tokens, durations):
        """Token embedding plus log1p-duration embedding, per position."""
        return self.token(tokens) + self.duration(torch.log1p(durations.to(torch.float32))[..., None])

    def build_transfer_sequence(self, s, d, c, c_tgt, t_tgt) -> SDLMInputSequence:
        """Prompt styles with durations, prompt content, target content, timbre."""
        if not (len(s) == len(d) == c.shape[0]):
            raise ValueError(f"prompt lengths differ: styles {len(s)}, durations {len(d)}, content {c.shape[0]}")
        if len(s) and (torch.as_tensor(d) <= 0).any():
            raise ValueError("prompt durations must be positive")
        ref = c_tgt
        parts, segs = [], []
        if len(s):
            s = torch.as_tensor(s, dtype=torch.long, device=ref.device)
            d = torch.as_tensor(d, dtype=torch.float32, device=ref.device)
            parts.append(self.embed_steps(s, d) + self._seg(SEG_PROMPT_STYLE, len(s), ref))
            parts.append(self.content(c) + self._seg(SEG_PROMPT_CONTENT, c.shape[0], ref))
            segs += [(SEG_PROMPT_STYLE, len(s)), (SEG_PROMPT_CONTENT, c.shape[0])]
        return self._finish(parts, segs, c_tgt, t_tgt, "transfer")

    def build_control_sequence(self, tp, c, c_tgt, t_tgt) -> SDLMInputSequence:
        """Text-prompt rows replace the prompt style/duration rows."""
        if tp.shape[0] != c_tgt.shape[0]:
            raise ValueError(f"text prompt has {tp.shape[0]} rows, target has {c_tgt.shape[0]} phonemes")
        ref = c_tgt
        parts = [tp + self._seg(SEG_TEXT, tp.shape[0], ref)]
        segs = [(SEG_TEXT, tp.shape[0])]
        if c.shape[0]:
            parts.append(self.content(c) + self._seg(SEG_PROMPT_CONTENT, c.shape[0], ref))
            segs.append((SEG_PROMPT_CONTENT, c.shape[0]))
        return self._finish(parts, segs, c_tgt, t_tgt, "control", step_extra=tp)

    def _finish(self, parts, segs, c_tgt, t_tgt, mode, step_extra=None):
        """``step_extra`` rows are added to the per-target rows fed to the AR steps."""
        ref = c_tgt
        parts.append(self.content(c_tgt) + self._seg(SEG_TARGET_CONTENT, c_tgt.shape[0], ref))
        parts.append(self.timbre(t_tgt.reshape(1, -1)) + self._seg(SEG_TIMBRE, 1, ref))
        segs += [(SEG_TARGET_CONTENT, c_tgt.shape[0]), (SEG_TIMBRE, 1)]
        cond = torch.cat(parts, dim=0)
        cond = cond + self._pos(cond.shape[0], ref)
        target = self.content(c_tgt) if step_extra is None else self.content(c_tgt) + step_extra
        return SDLMInputSequence(cond, segs, target, mode)

    def ar_inputs(self, seq: SDLMInputSequence, tokens, durations):
        """AR region rows for BOS followed by the given (token, duration) history."""
        n_hist = tokens.shape[0]
        bos = self.token(torch.tensor([self.bos], device=seq.cond.device))
        rows = torch.cat([bos, self.embed_steps(tokens, durations)], dim=0) if n_hist else bos
        content = F.pad(seq.target_content, (0, 0, 0, max(0, n_hist + 1 - seq.n_target)))[: n_hist + 1]
        rows = rows + content + self._seg(SEG_AR, n_hist + 1, rows) + self._pos(n_hist + 1, rows)
        return rows

    # ------------------------------------------------------------------ forward
    def forward_batch(self, cond, cond_mask, ar, ar_mask):
        """Padded batch: ``cond`` [B, Lc, d], ``ar`` [B, La, d] -> logits [B, La, V], dur_pred [B, La]."""
        b, lc, _ = cond.shape
        la = ar.shape[1]
        x = torch.cat([cond, ar], dim=1)
        valid = torch.cat([cond_mask, ar_mask], dim=1)
        L = lc + la
        q = torch.arange(L, device=x.device)
        allowed = torch.zeros(L, L, dtype=torch.bool, device=x.device)
        allowed[:, :lc] = True
        allowed[lc:, lc:] = q[lc:, None] >= q[None, lc:]
        attn_mask = allowed[None] & valid[:, None, :]
        for blk in self.blocks:
            x = blk(x, attn_mask, lc, valid)
        h = self.norm(x[:, lc:])
        logits = self.style_head(h).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        dur_pred = torch.expm1(self.dur_head(h)[..., 0].clamp(max=12.0))
        return logits, dur_pred

    def forward(self, seq: SDLMInputSequence, tokens=None, durations=None):
        """Teacher-forced pass; with N history steps returns N+1 rows of (logits, dur_pred)."""
        if tokens is None:
            tokens = torch.zeros(0, dtype=torch.long, device=seq.cond.device)
            durations = torch.zeros(0, device=seq.cond.device)
        ar = self.ar_inputs(seq, tokens, durations)
        ones = lambda n: torch.ones(1, n, dtype=torch.bool, device=ar.device)  # noqa: E731
        logits, dur = self.forward_batch(seq.cond[None], ones(seq.cond_len), ar[None], ones(ar.shape[0]))
        return logits[0], dur[0]

    # --------------------------------------------------------------- generation
    @torch.no_grad()
    def generate(self, seq: SDLMInputSequence, n_target: int, temperature: float = 0.8, top_k: int = 16,
                 generator: torch.Generator | None = None):
        """Emit exactly ``n_target`` (token, duration) pairs; durations clamped to >= 1 frame."""
        if n_target < 1:
            raise ValueError("need at least one target phoneme")
        device = seq.cond.device
        tokens = torch.zeros(0, dtype=torch.long, device=device)
        durs = torch.zeros(0, device=device)
        for _ in range(n_target):
            logits, dur = self.forward(seq, tokens, durs)
            tok = self._pick(logits[-1], temperature, top_k, generator)
            d = dur[-1].clamp_min(1.0)
            tokens = torch.cat([tokens, tok.view(1)])
            durs = torch.cat([durs, d.view(1)])
        return tokens, durs

    def _pick(self, logits, temperature, top_k, generator):
        if temperature <= 1e-6:
            return torch.argmax(logits[: self.n_codes])
        tok = self._sample(logits, temperature, top_k, generator)
        if tok >= self.n_codes:
            tok = self._sample(logits, temperature, top_k, generator)
        if tok >= self.n_codes:
            tok = torch.argmax(logits[: self.n_codes])
        return tok

    @staticmethod
    def _sample(logits, temperature, top_k, generator):
        scaled = logits / temperature
        if top_k and top_k < scaled.numel():
            kth = torch.topk(scaled, top_k).values[-1]
            scaled = scaled.masked_fill(scaled < kth, float("-inf"))
        probs = torch.softmax(scaled, dim=-1)
        return torch.multinomial(probs, 1, generator=generator)[0]


def sdlm_loss(style_logits, dur_pred, s_gt, d_gt, mask=None):
    """Cross-entropy over style tokens and MSE between log(d+1) values.

    ``style_logits`` [..., T, V]; ``dur_pred``/``d_gt`` [..., T'] (T' <= T, the
    duration rows align with the first T' logits rows); ``mask`` marks real
    positions for the style term.
    """
    d_gt = torch.as_tensor(d_gt, dtype=dur_pred.dtype, device=dur_pred.device)
    if (d_gt <= 0).any():
        raise ValueError("ground-truth durations must be positive")
    ce_all = F.cross_entropy(style_logits.reshape(-1, style_logits.shape[-1]), s_gt.reshape(-1), reduction="none")
    if mask is None:
        ce = ce_all.mean()
    else:
        m = mask.reshape(-1).to(ce_all.dtype)
        ce = (ce_all * m).sum() / m.sum().clamp_min(1.0)
    diff = torch.log1p(dur_pred[..., : d_gt.shape[-1]]) - torch.log1p(d_gt)
    return ce, (diff ** 2).mean()


def sdlm_loss_masked(style_logits, dur_pred, s_gt, d_gt, style_mask, dur_mask):
    """Batched variant: duration MSE averaged over ``dur_mask`` positions only."""
    ce_all = F.cross_entropy(style_logits.transpose(1, 2), s_gt, reduction="none")
    sm = style_mask.to(ce_all.dtype)
    ce = (ce_all * sm).sum() / sm.sum().clamp_min(1.0)
    dm = dur_mask.to(dur_pred.dtype)
    safe = torch.where(dur_mask, d_gt, torch.ones_like(d_gt))
    if (safe <= 0).any():
        raise ValueError("ground-truth durations must be positive")
    diff = (torch.log1p(dur_pred) - torch.log1p(safe)) * dm
    return ce, (diff ** 2).sum() / dm.sum().clamp_min(1.0)
