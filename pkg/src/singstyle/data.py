"""Tensor views of utterance records and padded batching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import EMOTIONS, METHODS, NOTE_TYPES, Note, UtteranceRecord, normalize_mel
from .encoders import technique_flags


def frame_note_pitch(notes: list[Note], durations) -> np.ndarray:
    """MIDI pitch of the sounding note at every frame; 0 on rests."""
    pitch = [0 if n.note_type == "rest" else n.pitch for n in notes]
    return np.repeat(np.asarray(pitch, dtype=np.float64), np.asarray(durations, dtype=np.int64))


@dataclass
class F0Stats:
    """Standardisation of log-Hz F0.

    Absolute mode subtracts the corpus mean. Relative mode subtracts the log
    frequency of the sounding note (the corpus mean on rests), so the model
    only has to explain deviations from the score. ``std`` is the spread of
    whatever is left; ``note_std`` scales the note-pitch conditioning channel.
    """

    mean: float
    std: float
    note_std: float | None = None
    relative: bool = False

    def __post_init__(self):
        if self.note_std is None:
            self.note_std = self.std

    @classmethod
    def from_records(cls, records, relative: bool = False) -> "F0Stats":
        logs, resid = [], []
        for r in records:
            v = r.f0 > 0
            if not np.any(v):
                continue
            logs.append(np.log(r.f0[v]))
            notes = frame_note_pitch(r.notes, r.phoneme_durations)[v]
            on = notes > 0
            resid.append(np.log(r.f0[v][on]) - _log_hz(notes[on]))
        logs = np.concatenate(logs)
        abs_std = float(max(logs.std(), 1e-3))
        if not relative:
            return cls(float(logs.mean()), abs_std, abs_std, False)
        resid = np.concatenate(resid)
        return cls(float(logs.mean()), float(max(np.sqrt(np.mean(resid ** 2)), 1e-3)), abs_std, True)

    def _reference(self, note_pitch, n: int) -> np.ndarray:
        if not self.relative:
            return np.full(n, self.mean)
        if note_pitch is None:
            raise ValueError("relative F0 needs the per-frame note pitch")
        note_pitch = np.asarray(note_pitch, dtype=np.float64)
        if note_pitch.shape != (n,):
            raise ValueError(f"note pitch has {note_pitch.shape} entries for {n} frames")
        return np.where(note_pitch > 0, _log_hz(np.maximum(note_pitch, 1.0)), self.mean)

    def normalize(self, f0_hz, note_pitch=None) -> np.ndarray:
        f0 = np.asarray(f0_hz, dtype=np.float64)
        ref = self._reference(note_pitch, len(f0))
        out = np.zeros_like(f0)
        v = f0 > 0
        out[v] = (np.log(f0[v]) - ref[v]) / self.std
        return out.astype(np.float32)

    def denormalize(self, f0_norm, uv, note_pitch=None) -> np.ndarray:
        f0_norm = np.asarray(f0_norm, dtype=np.float64)
        f0 = np.exp(f0_norm * self.std + self._reference(note_pitch, len(f0_norm)))
        return np.where(np.asarray(uv) > 0, f0, 0.0).astype(np.float32)


def _log_hz(midi):
    return np.log(440.0) + (np.asarray(midi, dtype=np.float64) - 69.0) / 12.0 * np.log(2.0)


def score_tensors(phonemes, notes: list[Note]) -> dict:
    if len(phonemes) != len(notes):
        raise ValueError(f"{len(notes)} notes for {len(phonemes)} phonemes")
    return {
        "phonemes": torch.as_tensor(np.asarray(phonemes), dtype=torch.long),
        "note_pitch": torch.tensor([n.pitch for n in notes], dtype=torch.long),
        "note_type": torch.tensor([NOTE_TYPES.index(n.note_type) for n in notes], dtype=torch.long),
        "note_dur": torch.tensor([n.duration for n in notes], dtype=torch.float32),
    }


def record_tensors(rec: UtteranceRecord, stats: F0Stats) -> dict:
    item = score_tensors(rec.phonemes, rec.notes)
    item.update(
        durations=torch.as_tensor(rec.phoneme_durations, dtype=torch.long),
        mel=torch.from_numpy(normalize_mel(rec.mel.frames).astype(np.float32)),
        f0=torch.from_numpy(stats.normalize(rec.f0, frame_note_pitch(rec.notes, rec.phoneme_durations))),
        uv=torch.as_tensor(rec.uv, dtype=torch.long),
        method=torch.tensor(METHODS.index(rec.global_style.method)),
        emotion=torch.tensor(EMOTIONS.index(rec.global_style.emotion)),
        tech=technique_flags(rec.techniques),
    )
    return item


def _pad(seqs, value=0):
    n = max(s.shape[0] for s in seqs)
    out = seqs[0].new_full((len(seqs), n, *seqs[0].shape[1:]), value)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out


def collate(items: list[dict], phoneme_pad: int) -> dict:
    """Pad a list of item dicts; adds ``ph_mask`` and ``frame_mask`` when frame data is present."""
    batch = {}
    for key in items[0]:
        vals = [it[key] for it in items]
        if vals[0].dim() == 0:
            batch[key] = torch.stack(vals)
        else:
            batch[key] = _pad(vals, phoneme_pad if key == "phonemes" else 0)
    n_ph = torch.tensor([it["phonemes"].shape[0] for it in items])
    batch["ph_mask"] = torch.arange(batch["phonemes"].shape[1])[None] < n_ph[:, None]
    if "mel" in batch:
        n_fr = torch.tensor([it["mel"].shape[0] for it in items])
        batch["frame_mask"] = torch.arange(batch["mel"].shape[1])[None] < n_fr[:, None]
        batch["frame_lengths"] = n_fr
    return batch
