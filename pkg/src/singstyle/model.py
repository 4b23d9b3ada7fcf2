"""The full acoustic model: every sub-network plus the glue that turns
phoneme-level content, style and timbre into frame-level conditioning."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .corpus import FRAME_RATE, NOTE_TYPES
from .cvq import StyleEncoder
from .data import F0Stats
from .decoder import StyleAdaptiveDecoder, decoder_losses, decoder_schedule, noised_input
from .encoders import ContentEncoder, TextPromptEncoder, TimbreEncoder
from .pitch import PitchDenoiser, expansion_matrix, linear_schedule, pitch_losses, training_inputs
from .sdlm import StyleDurationLM, sdlm_loss_masked

# sinusoids of time-since-onset at generic, geometrically spaced frequencies (Hz)
ONSET_FREQS = 0.5 * 2.0 ** (np.arange(12) / 2.0)
N_POS_FEATS = 2 * len(ONSET_FREQS) + 2
LOSS_KEYS = ("cvq", "gdiff", "mdiff", "mae", "ssim", "dur", "style")
REST = NOTE_TYPES.index("rest")


def onset_features(durations: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Within-phoneme position features ``[B, T, N_POS_FEATS]`` from integer durations [B, N]."""
    d = durations.to(torch.float32)
    e = expansion_matrix(durations, n_frames)
    starts = d.cumsum(-1) - d
    onset = e @ starts[..., None]
    length = e @ d[..., None]
    offset = torch.arange(n_frames, dtype=torch.float32, device=d.device)[None, :, None] - onset
    tau = offset / FRAME_RATE
    freqs = torch.as_tensor(ONSET_FREQS, dtype=torch.float32, device=d.device)
    ang = 2 * np.pi * tau * freqs
    rel = offset / length.clamp_min(1.0)
    logd = torch.log1p(length) / 5.0
    inside = (length > 0).to(torch.float32)
    return torch.cat([torch.sin(ang), torch.cos(ang), rel, logd], dim=-1) * inside


def note_f0_features(note_pitch, note_type, stats: F0Stats) -> torch.Tensor:
    """Per-phoneme (standardised log note frequency, rest flag) -> [B, N, 2]."""
    hz = 440.0 * 2.0 ** ((note_pitch.to(torch.float32) - 69.0) / 12.0)
    rest = (note_type == REST) | (note_pitch == 0)
    lf = torch.where(rest, torch.zeros_like(hz), (torch.log(hz) - stats.mean) / stats.note_std)
    return torch.stack([lf, rest.to(torch.float32)], dim=-1)


class SingingModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_content
        self.content = ContentEncoder(cfg)
        self.timbre = TimbreEncoder(cfg)
        self.style = StyleEncoder(cfg)
        self.text = TextPromptEncoder(cfg)
        self.lm = StyleDurationLM(cfg)
        self.content_proj = nn.Linear(d, d)
        self.style_proj = nn.Linear(cfg.d_code, d)
        self.timbre_proj = nn.Linear(cfg.d_timbre, d)
        self.cond_channels = d + N_POS_FEATS + 2
        self.pitch = PitchDenoiser(cfg, self.cond_channels)
        self.decoder = StyleAdaptiveDecoder(cfg, self.cond_channels + 2, cfg.d_code)
        self.register_buffer("f0_stats", torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64))
        self.pitch_sched = linear_schedule(cfg.pitch_steps, cfg.pitch_beta_min, cfg.pitch_beta_max)
        self.dec_sched = decoder_schedule(cfg)

    # ------------------------------------------------------------------ helpers
    @property
    def stats(self) -> F0Stats:
        mean, std, note_std = (float(x) for x in self.f0_stats)
        return F0Stats(mean, std, note_std, self.cfg.pitch_relative)

    def set_stats(self, stats: F0Stats):
        if stats.relative != self.cfg.pitch_relative:
            raise ValueError("F0 statistics and config disagree on relative pitch")
        self.f0_stats.copy_(torch.tensor([stats.mean, stats.std, stats.note_std], dtype=torch.float64))

    def stage1_modules(self) -> list[nn.Module]:
        return [self.content, self.timbre, self.style, self.content_proj, self.style_proj, self.timbre_proj,
                self.pitch, self.decoder]

    def stage2_modules(self) -> list[nn.Module]:
        return [self.text, self.lm]

    def prompt_timbre(self, mel, lengths):
        return self.timbre(mel, lengths)

    def frame_conditioning(self, content, style_q, timbre, durations, note_pitch, note_type, frame_mask):
        """Phoneme-level inputs -> frame conditioning [B, T, C] and frame style [B, T, d_code]."""
        n_frames = frame_mask.shape[1]
        e = expansion_matrix(durations, n_frames)
        ph = self.content_proj(content) + self.style_proj(style_q)
        ph_notes = note_f0_features(note_pitch, note_type, self.stats)
        frames = e @ ph + self.timbre_proj(timbre)[:, None, :]
        cond = torch.cat([frames, onset_features(durations, n_frames), e @ ph_notes], dim=-1)
        m = frame_mask[..., None].to(cond.dtype)
        return cond * m, (e @ style_q) * m

    @staticmethod
    def decoder_cond(cond, f0_norm, uv):
        return torch.cat([cond, f0_norm[..., None], uv[..., None].to(cond.dtype)], dim=-1)

    # ------------------------------------------------------------------ stage 1
    def stage1_losses(self, batch, prompt, generator=None):
        """Component losses for one reconstruction batch. ``prompt`` carries the timbre-prompt mels."""
        fm, pm = batch["frame_mask"], batch["ph_mask"]
        content = self.content(batch)
        timbre = self.prompt_timbre(prompt["mel"], prompt["frame_lengths"])
        _, quant, qout, z = self.style(batch["mel"], fm, batch["durations"], pm, update_usage=True)
        cond, style_frames = self.frame_conditioning(content, quant, timbre, batch["durations"],
                                                     batch["note_pitch"], batch["note_type"], fm)
        b = fm.shape[0]
        t = torch.randint(1, self.pitch_sched.T + 1, (b,), generator=generator)
        x_t, y_t, eps, y0 = training_inputs(batch["f0"], batch["uv"], t, self.pitch_sched, generator)
        eps_hat, logits = self.pitch(x_t, y_t, t, cond, fm)
        gdiff, mdiff = pitch_losses(eps_hat, eps, logits, y0, y_t, t, self.pitch_sched, fm)

        td = torch.randint(1, self.dec_sched.T + 1, (b,), generator=generator)
        x_t = noised_input(batch["mel"], td, self.dec_sched, generator)
        dcond = self.decoder_cond(cond, batch["f0"], batch["uv"])
        x0_hat = self.decoder(x_t, td, dcond, style_frames, fm)
        mae, ssim_loss = decoder_losses(x0_hat, batch["mel"], fm)
        zero = mae.new_zeros(())
        losses = dict(cvq=qout.total, gdiff=gdiff, mdiff=mdiff, mae=mae, ssim=ssim_loss, dur=zero, style=zero)
        return losses, z[pm]

    def weighted_total(self, losses: dict) -> torch.Tensor:
        return sum(getattr(self.cfg, f"w_{k}") * losses[k] for k in LOSS_KEYS)

    # ------------------------------------------------------------------ stage 2
    def lm_sequence(self, mode, target, prompt):
        """Build one conditioning sequence. ``target``/``prompt`` are dicts of per-utterance features."""
        if mode == "transfer":
            return self.lm.build_transfer_sequence(prompt["tokens"], prompt["durations"], prompt["content"],
                                                   target["content"], prompt["timbre"])
        n = target["content"].shape[0]
        tp = self.text(target["method"].view(1), target["emotion"].view(1), target["tech"][None],
                       torch.ones(1, n, dtype=torch.bool))[0]
        return self.lm.build_control_sequence(tp, prompt["content"], target["content"], prompt["timbre"])

    def lm_batch_outputs(self, seqs, targets):
        """Teacher-forced logits for a list of sequences; returns logits, dur_pred and padded targets."""
        conds = [s.cond for s in seqs]
        ars = [self.lm.ar_inputs(s, t["tokens"], t["durations"].to(torch.float32)) for s, t in zip(seqs, targets)]
        lc = max(c.shape[0] for c in conds)
        la = max(a.shape[0] for a in ars)
        d = conds[0].shape[1]
        b = len(seqs)
        cond = conds[0].new_zeros(b, lc, d)
        ar = conds[0].new_zeros(b, la, d)
        cmask = torch.zeros(b, lc, dtype=torch.bool)
        amask = torch.zeros(b, la, dtype=torch.bool)
        s_gt = torch.zeros(b, la, dtype=torch.long)
        d_gt = torch.ones(b, la)
        dmask = torch.zeros(b, la, dtype=torch.bool)
        for i, (c, a, t) in enumerate(zip(conds, ars, targets)):
            n = t["tokens"].shape[0]
            cond[i, : c.shape[0]] = c
            cmask[i, : c.shape[0]] = True
            ar[i, : a.shape[0]] = a
            amask[i, : a.shape[0]] = True
            s_gt[i, :n] = t["tokens"]
            s_gt[i, n] = self.lm.eos
            d_gt[i, :n] = t["durations"].to(torch.float32)
            dmask[i, :n] = True
        logits, dur_pred = self.lm.forward_batch(cond, cmask, ar, amask)
        return logits, dur_pred, s_gt, d_gt, amask, dmask

    def stage2_losses(self, seqs, targets):
        logits, dur_pred, s_gt, d_gt, amask, dmask = self.lm_batch_outputs(seqs, targets)
        style, dur = sdlm_loss_masked(logits, dur_pred, s_gt, d_gt, amask, dmask)
        zero = style.new_zeros(())
        losses = dict(cvq=zero, gdiff=zero, mdiff=zero, mae=zero, ssim=zero, dur=dur, style=style)
        return losses, (logits, s_gt, dmask)
