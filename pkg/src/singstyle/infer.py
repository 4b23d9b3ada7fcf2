"""Inference in both modes, reconstruction and corpus evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import EMOTIONS, METHODS, NOTE_TYPES, GlobalStyleLabel, MelSpectrogram, Note, denormalize_mel, normalize_mel, write_mel
from .data import collate, score_tensors
from .decoder import sample_mel
from .encoders import technique_flags
from .metrics import MetricReport, utterance_metrics
from .model import SingingModel
from .pitch import sample_pitch
from .train import utterance_features


@dataclass
class SynthesisOutput:
    mel: np.ndarray  # [T, 80] log units
    f0: np.ndarray  # Hz, 0 when unvoiced
    uv: np.ndarray  # 1 voiced
    tokens: np.ndarray
    durations: np.ndarray  # frames per phoneme

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]

    def save(self, out_dir, name: str = "output") -> Path:
        """Writes ``<name>.mel`` and a ``<name>.json`` sidecar; returns the mel path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mel_path = out / f"{name}.mel"
        write_mel(MelSpectrogram(self.mel), mel_path)
        side = {
            "mel": mel_path.name,
            "frames": int(self.n_frames),
            "tokens": [int(x) for x in self.tokens],
            "durations": [int(x) for x in self.durations],
            "f0": [float(x) for x in self.f0],
            "uv": [int(x) for x in self.uv],
        }
        (out / f"{name}.json").write_text(json.dumps(side, indent=1), encoding="utf-8")
        return mel_path


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _frame_pitch(score: dict, durations) -> np.ndarray:
    pitch = torch.where(score["note_type"] == NOTE_TYPES.index("rest"), 0, score["note_pitch"])
    return np.repeat(pitch.numpy().astype(np.float64), durations.numpy())


@torch.no_grad()
def render(model: SingingModel, score: dict, content, tokens, durations, timbre, generator) -> SynthesisOutput:
    """Phoneme-level content + tokens + integer durations -> sampled F0, UV and mel."""
    model.eval()
    durations = torch.as_tensor(durations, dtype=torch.long)
    if (durations <= 0).any():
        raise ValueError("durations must be positive")
    n_frames = int(durations.sum())
    fm = torch.ones(1, n_frames, dtype=torch.bool)
    quant = model.style.codebook.lookup(tokens)[None]
    cond, style_frames = model.frame_conditioning(content[None], quant, timbre[None], durations[None],
                                                  score["note_pitch"][None], score["note_type"][None], fm)
    f0n, y = sample_pitch(model.pitch, cond, fm, model.pitch_sched, generator)
    uv = y.argmax(-1)
    f0n = f0n * uv
    dcond = model.decoder_cond(cond, f0n, uv)
    mel_n = sample_mel(model.decoder, dcond, style_frames, fm, model.dec_sched, generator)
    stats = model.stats
    return SynthesisOutput(
        mel=denormalize_mel(mel_n[0].numpy()).astype(np.float32),
        f0=stats.denormalize(f0n[0].numpy(), uv[0].numpy(), _frame_pitch(score, durations)),
        uv=uv[0].numpy().astype(np.int64),
        tokens=tokens.numpy().astype(np.int64),
        durations=durations.numpy().astype(np.int64),
    )


@torch.no_grad()
def _target_content(model, phonemes, notes):
    score = score_tensors(phonemes, notes)
    content = model.content(collate([score], model.cfg.phoneme_pad))[0]
    return score, content


def _sampling(model, temperature, top_k):
    t = model.cfg.sample_temperature if temperature is None else temperature
    k = model.cfg.sample_top_k if top_k is None else top_k
    return t, k


def _round_durations(d):
    return torch.round(d).clamp_min(1).to(torch.long)


@torch.no_grad()
def infer_transfer(model: SingingModel, prompt_rec, phonemes, notes: list[Note], seed: int = 0,
                   temperature: float | None = None, top_k: int | None = None) -> SynthesisOutput:
    """Timbre and style from an audio prompt applied to a new score."""
    model.eval()
    gen = _generator(seed)
    prompt = utterance_features(model, prompt_rec)
    score, content = _target_content(model, phonemes, notes)
    seq = model.lm_sequence("transfer", {"content": content}, prompt)
    t, k = _sampling(model, temperature, top_k)
    tokens, durs = model.lm.generate(seq, content.shape[0], t, k, gen)
    return render(model, score, content, tokens, _round_durations(durs), prompt["timbre"], gen)


@torch.no_grad()
def infer_control(model: SingingModel, timbre_rec, label: GlobalStyleLabel, techniques, phonemes,
                  notes: list[Note], seed: int = 0, temperature: float | None = None,
                  top_k: int | None = None) -> SynthesisOutput:
    """Timbre from an audio prompt, style from a global label and per-phoneme techniques."""
    if len(techniques) != len(phonemes):
        raise ValueError(f"{len(techniques)} technique sets for {len(phonemes)} phonemes")
    model.eval()
    gen = _generator(seed)
    prompt = utterance_features(model, timbre_rec)
    score, content = _target_content(model, phonemes, notes)
    target = {
        "content": content,
        "method": torch.tensor(METHODS.index(label.method)),
        "emotion": torch.tensor(EMOTIONS.index(label.emotion)),
        "tech": technique_flags(techniques),
    }
    seq = model.lm_sequence("control", target, prompt)
    t, k = _sampling(model, temperature, top_k)
    tokens, durs = model.lm.generate(seq, content.shape[0], t, k, gen)
    return render(model, score, content, tokens, _round_durations(durs), prompt["timbre"], gen)


@torch.no_grad()
def reconstruct(model: SingingModel, rec, seed: int = 0, prompt_rec=None) -> SynthesisOutput:
    """Style tokens and durations taken from the utterance itself; F0 and mel are sampled."""
    model.eval()
    gen = _generator(seed)
    feats = utterance_features(model, rec)
    timbre = feats["timbre"] if prompt_rec is None else utterance_features(model, prompt_rec)["timbre"]
    score = score_tensors(rec.phonemes, rec.notes)
    return render(model, score, feats["content"], feats["tokens"], feats["durations"], timbre, gen)


@torch.no_grad()
def timbre_embedding(model: SingingModel, mel_log: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(normalize_mel(mel_log).astype(np.float32))[None]
    return model.prompt_timbre(x, torch.tensor([x.shape[1]]))[0].numpy().astype(np.float64)


def evaluate(model: SingingModel, records, seed: int = 0) -> MetricReport:
    """Reconstruction of every record against its ground truth."""
    rows = []
    for i, rec in enumerate(records):
        out = reconstruct(model, rec, seed + i)
        rows.append(utterance_metrics(
            rec.utt_id, rec.mel.frames, rec.f0, out.mel, out.f0,
            timbre_embedding(model, rec.mel.frames), timbre_embedding(model, out.mel),
        ))
    return MetricReport(rows)
