"""Flat ``key = value`` configuration shared by every stage and the CLI.

Every tunable default (including those the method leaves open) lives here so a
saved config file fully describes a run.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


def vpsde_betas(steps: int, beta_min: float, beta_max: float) -> list[float]:
    """Discretised variance-preserving SDE schedule used by few-step generator diffusion."""
    t = np.arange(1, steps + 1)
    return list(1.0 - np.exp(-beta_min / steps - 0.5 * (beta_max - beta_min) * (2 * t - 1) / steps ** 2))


@dataclass
class Config:
    # content encoders
    phoneme_inventory: int = 16
    d_content: int = 64
    phoneme_layers: int = 4
    phoneme_heads: int = 2
    phoneme_kernel: int = 9
    phoneme_filter: int = 128
    note_duration_scale: float = 4.0  # seconds; note durations are divided by this before projection
    # timbre encoder
    d_timbre: int = 64
    timbre_layers: int = 3
    timbre_kernel: int = 5
    # clustering style encoder
    style_hidden: int = 64
    style_wn_layers: int = 4
    style_wn_kernel: int = 3
    style_conv_layers: int = 2
    style_conv_kernel: int = 5
    style_pool_std: bool = False  # pool the per-phoneme std of the refined frames alongside the mean
    n_codes: int = 64
    d_code: int = 16
    cvq_beta: float = 0.25
    cvq_tau: float = 0.1
    cvq_n_neg: int = 10
    cvq_ema_decay: float = 0.99
    cvq_dead_threshold: float = 0.0  # 0 means 1/n_codes
    cvq_reinit_every: int = 10
    cvq_pool_size: int = 512
    cvq_contrastive_weight: float = 1.0
    cvq_l2: bool = True
    cvq_reinit: bool = True
    # style and duration language model
    lm_layers: int = 3
    lm_d_model: int = 128
    lm_heads: int = 4
    lm_kernel: int = 5
    lm_max_positions: int = 1024
    sample_temperature: float = 0.8
    sample_top_k: int = 16
    # pitch diffusion
    pitch_layers: int = 8
    pitch_channels: int = 64
    pitch_kernel: int = 3
    pitch_steps: int = 100
    pitch_beta_min: float = 1e-4
    pitch_beta_max: float = 0.06
    pitch_relative: bool = False  # model log-F0 as the deviation from the score's note pitch
    # style adaptive decoder
    dec_layers: int = 4
    dec_hidden: int = 64
    dec_heads: int = 2
    dec_kernel: int = 3
    dec_filter: int = 128
    dec_steps: int = 8
    dec_beta_min: float = 0.1
    dec_beta_max: float = 40.0
    dec_betas: str = ""  # comma list; empty means derived from the VPSDE bounds
    dec_adaptive_norm: bool = True  # False reproduces the decoder without style-adaptive normalisation
    dec_norm_mask: str = ""  # comma list of 0/1 per norm site; empty means all on
    # evaluation conventions
    ffe_tolerance: float = 0.2
    mfcc_dim: int = 13
    # training
    seed: int = 1234
    batch_size: int = 8
    lr: float = 2e-3
    lr_final_frac: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    grad_clip: float = 1.0
    stage1_steps: int = 3000
    stage2_steps: int = 1000
    task_mix_p: float = 0.5
    w_cvq: float = 1.0
    w_gdiff: float = 1.0
    w_mdiff: float = 1.0
    w_mae: float = 1.0
    w_ssim: float = 1.0
    w_dur: float = 1.0
    w_style: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if not self.dec_betas:
            self.dec_betas = ",".join(f"{b:.10g}" for b in vpsde_betas(self.dec_steps, self.dec_beta_min, self.dec_beta_max))
        self.validate()

    def validate(self):
        if not 0.0 <= self.task_mix_p <= 1.0:
            raise ValueError("task_mix_p must lie in [0, 1]")
        for name in ("w_cvq", "w_gdiff", "w_mdiff", "w_mae", "w_ssim", "w_dur", "w_style"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lm_d_model % self.lm_heads:
            raise ValueError("lm_d_model must be divisible by lm_heads")
        if self.n_codes < 2:
            raise ValueError("codebook needs at least two codes")
        if len(self.decoder_betas()) != self.dec_steps:
            raise ValueError("dec_betas must list exactly dec_steps entries")

    # derived ------------------------------------------------------------------
    @property
    def phoneme_pad(self) -> int:
        return self.phoneme_inventory

    @property
    def lm_vocab(self) -> int:
        return self.n_codes + 2

    @property
    def dead_threshold(self) -> float:
        return self.cvq_dead_threshold or 1.0 / self.n_codes

    def decoder_betas(self) -> list[float]:
        return [float(x) for x in self.dec_betas.split(",")]

    def norm_mask(self, n_sites: int) -> list[bool]:
        if not self.dec_norm_mask:
            return [True] * n_sites
        vals = [bool(int(x)) for x in self.dec_norm_mask.split(",")]
        if len(vals) != n_sites:
            raise ValueError(f"dec_norm_mask lists {len(vals)} sites, decoder has {n_sites}")
        return vals

    # io -----------------------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(types[key], raw)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "Config":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def replace(self, **changes) -> "Config":
        if "dec_betas" not in changes and {"dec_steps", "dec_beta_min", "dec_beta_max"} & changes.keys():
            changes["dec_betas"] = ""  # re-derive from the new bounds
        return dataclasses.replace(self, **changes)

    @classmethod
    def paper_scale(cls, **overrides) -> "Config":
        """Module sizes from the published hyper-parameter table."""
        base = dict(
            d_content=320, phoneme_layers=4, phoneme_heads=2, phoneme_kernel=9, phoneme_filter=1280,
            d_timbre=320, timbre_layers=5, timbre_kernel=31,
            style_hidden=320, style_wn_layers=4, style_wn_kernel=3, style_conv_layers=5, style_conv_kernel=5,
            n_codes=512, d_code=64,
            lm_layers=8, lm_d_model=512, lm_heads=8, lm_kernel=5,
            pitch_layers=12, pitch_channels=192, pitch_kernel=3, pitch_steps=100, pitch_beta_max=0.06,
            dec_layers=20, dec_hidden=320, dec_heads=2, dec_filter=1280, dec_steps=8,
            stage1_steps=300_000, stage2_steps=100_000,
        )
        base.update(overrides)
        return cls(**base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(typ, raw: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw
