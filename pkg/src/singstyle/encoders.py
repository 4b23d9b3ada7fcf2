"""Content encoders (phonemes, notes), the multi-level text prompt encoder and the timbre encoder."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .corpus import EMOTIONS, METHODS, NOTE_TYPES, TECHNIQUES
from .layers import FFTBlock, sinusoidal_embedding


class PhonemeEncoder(nn.Module):
    """Phoneme embedding followed by FFT blocks with sinusoidal positions."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.inventory = cfg.phoneme_inventory
        self.embed = nn.Embedding(cfg.phoneme_inventory + 1, cfg.d_content, padding_idx=cfg.phoneme_pad)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.d_content, cfg.phoneme_heads, cfg.phoneme_filter, cfg.phoneme_kernel)
            for _ in range(cfg.phoneme_layers)
        )
        self.d = cfg.d_content

    def forward(self, phonemes: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        ids = phonemes[mask]
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.inventory):
            raise ValueError(f"phoneme id outside vocabulary [0, {self.inventory})")
        pos = torch.arange(phonemes.shape[1], device=phonemes.device)
        x = self.embed(phonemes) * self.d ** 0.5 + sinusoidal_embedding(pos, self.d)[None]
        x = x * mask[..., None]
        for block in self.blocks:
            x = block(x, mask)
        return x


class NoteEncoder(nn.Module):
    """Pitch embedding + note-type embedding + linear projection of duration, summed."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.pitch = nn.Embedding(128, cfg.d_content)
        self.kind = nn.Embedding(len(NOTE_TYPES), cfg.d_content)
        self.duration = nn.Linear(1, cfg.d_content)
        self.scale = cfg.note_duration_scale

    def forward(self, pitch, note_type, duration_sec, mask):
        if pitch[mask].numel() and (pitch[mask].min() < 0 or pitch[mask].max() > 127):
            raise ValueError("note pitch outside the MIDI range [0, 127]")
        x = self.pitch(pitch) + self.kind(note_type) + self.duration((duration_sec / self.scale)[..., None])
        return x * mask[..., None]


class ContentEncoder(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.phonemes = PhonemeEncoder(cfg)
        self.notes = NoteEncoder(cfg)

    def forward(self, batch) -> torch.Tensor:
        m = batch["ph_mask"]
        return self.phonemes(batch["phonemes"], m) + self.notes(batch["note_pitch"], batch["note_type"], batch["note_dur"], m)


class TextPromptEncoder(nn.Module):
    """Global (method, emotion) embedding broadcast to every phoneme, concatenated with
    six separately embedded binary technique channels, then projected to the LM width."""

    def __init__(self, cfg: Config, d_embed: int = 32):
        super().__init__()
        self.method = nn.Embedding(len(METHODS), d_embed)
        self.emotion = nn.Embedding(len(EMOTIONS), d_embed)
        self.techniques = nn.ModuleList(nn.Embedding(2, d_embed) for _ in TECHNIQUES)
        self.proj = nn.Linear(d_embed * (1 + len(TECHNIQUES)), cfg.lm_d_model)

    def forward(self, method, emotion, tech_flags, mask):
        """``method``/``emotion`` [B]; ``tech_flags`` [B, N, 6] in {0, 1}."""
        n = tech_flags.shape[1]
        glob = (self.method(method) + self.emotion(emotion))[:, None, :].expand(-1, n, -1)
        parts = [glob] + [emb(tech_flags[..., k]) for k, emb in enumerate(self.techniques)]
        return self.proj(torch.cat(parts, dim=-1)) * mask[..., None]


def technique_flags(techniques) -> torch.Tensor:
    """Per-phoneme technique sets -> ``[N, 6]`` long tensor of flags."""
    rows = []
    for ts in techniques:
        unknown = set(ts) - set(TECHNIQUES)
        if unknown:
            raise ValueError(f"unknown technique(s) {sorted(unknown)}")
        rows.append([int(name in ts) for name in TECHNIQUES])
    return torch.tensor(rows, dtype=torch.long).reshape(len(rows), len(TECHNIQUES))


class TimbreEncoder(nn.Module):
    """Unpadded 1-D convolutions over time, then the mean over every output frame."""

    def __init__(self, cfg: Config, n_mels: int = 80):
        super().__init__()
        chans = [n_mels] + [cfg.d_timbre] * cfg.timbre_layers
        self.convs = nn.ModuleList(nn.Conv1d(a, b, cfg.timbre_kernel) for a, b in zip(chans[:-1], chans[1:]))
        self.proj = nn.Linear(cfg.d_timbre, cfg.d_timbre)
        self.receptive_field = cfg.timbre_layers * (cfg.timbre_kernel - 1) + 1

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``mel`` [B, T, n_mels] normalised; ``lengths`` [B] valid frames."""
        if int(lengths.min()) < self.receptive_field:
            raise ValueError(f"timbre prompt needs at least {self.receptive_field} frames, got {int(lengths.min())}")
        x = mel.transpose(1, 2)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        x = x.transpose(1, 2)
        out_len = lengths - self.receptive_field + 1
        m = (torch.arange(x.shape[1], device=x.device)[None] < out_len[:, None]).to(x.dtype)
        pooled = (x * m[..., None]).sum(1) / out_len[:, None].to(x.dtype)
        return self.proj(pooled)
