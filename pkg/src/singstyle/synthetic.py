"""Deterministic synthetic singing corpus.

Every singer owns a fixed log-gain spectral envelope (its timbre). Frames are
harmonic stacks of the sung F0 shaped by that envelope plus a per-phoneme
formant pattern, projected through a mel filterbank. Style labels change the
acoustics in ways that can be measured directly from the output:

* vibrato: 5.5 Hz sinusoidal F0 modulation of +-1 semitone, phase reset at
  each phoneme onset
* breathy: raised noise floor in the upper mel bands
* sad: every phoneme sung 1.3x longer than the score asks
* bel canto: boosted mid-band envelope

Each score is sung ``renditions`` times by the same singer. Consecutive
renditions alternate the emotion and draw techniques independently, so the
score alone never determines how it was sung.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    FRAME_RATE,
    MEL_MAX,
    MEL_MIN,
    N_MELS,
    SAMPLE_RATE,
    GlobalStyleLabel,
    MelSpectrogram,
    Note,
    UtteranceRecord,
    write_corpus,
)

VIBRATO_HZ = 5.5
VIBRATO_SEMITONES = 1.0
SAD_STRETCH = 1.3
GLISS_SEMITONES = 2.0
GLISS_FRACTION = 0.35

BREATHY_FIRST_BIN = 48
_FLOOR = np.exp(-6.5)
_BREATHY_FLOOR = np.exp(-2.5)
_HARMONIC_SPREAD_HZ = 30.0
_PHONETICS_SEED = 20240601
SILENCE = 0


class ConfigError(ValueError):
    pass


@dataclass
class SynthCorpusConfig:
    n_singers: int = 4
    n_utterances: int = 32
    inventory: int = 16
    min_phonemes: int = 4
    max_phonemes: int = 6
    min_frames: int = 24  # per phoneme, happy tempo
    max_frames: int = 44
    rest_prob: float = 0.1
    vibrato_prob: float = 0.35
    breathy_prob: float = 0.25
    other_technique_prob: float = 0.1
    renditions: int = 2  # performances per score

    def check(self):
        if self.n_singers < 1 or self.n_utterances < 1:
            raise ConfigError("need at least one singer and one utterance")
        if self.inventory < 2:
            raise ConfigError("phoneme inventory must hold silence plus one phoneme")
        if not (1 <= self.min_phonemes <= self.max_phonemes):
            raise ConfigError("bad phoneme count range")
        if not (1 <= self.min_frames <= self.max_frames):
            raise ConfigError("bad frame-length range")
        if self.renditions < 1:
            raise ConfigError("need at least one rendition per score")


# ------------------------------------------------------------------ mel machinery


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3.0)
    log = 15.0 + np.log(np.maximum(f, 1e-9) / 1000.0) / (np.log(6.4) / 27.0)
    return np.where(f < 1000.0, lin, log)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * (200.0 / 3.0)
    log = 1000.0 * np.exp((m - 15.0) * (np.log(6.4) / 27.0))
    return np.where(m < 15.0, lin, log)


def mel_filterbank(freqs, n_mels=N_MELS, fmax=SAMPLE_RATE / 2):
    """Peak-one triangular filters evaluated at ``freqs``; shape [n_mels, len(freqs)]."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    f = np.asarray(freqs)[None, :]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


class _HarmonicProjector:
    """Response of each mel filter to a Gaussian-widened sinusoid, tabulated every 5 Hz."""

    step = 5.0

    def __init__(self):
        grid = np.arange(0.0, SAMPLE_RATE / 2 + self.step, self.step)
        fb = mel_filterbank(grid)
        k = np.arange(-6 * _HARMONIC_SPREAD_HZ, 6 * _HARMONIC_SPREAD_HZ + self.step, self.step)
        g = np.exp(-0.5 * (k / _HARMONIC_SPREAD_HZ) ** 2)
        g /= g.sum()
        self.table = np.stack([np.convolve(row, g, mode="same") for row in fb])
        self.nyq = grid[-1]

    def __call__(self, freqs, amps):
        """``freqs``/``amps`` [frames, H] -> linear mel magnitudes [frames, n_mels]."""
        idx = np.clip(np.rint(freqs / self.step).astype(np.int64), 0, self.table.shape[1] - 1)
        amps = np.where(freqs < self.nyq, amps, 0.0)
        resp = self.table[:, idx]  # [n_mels, frames, H]
        return np.einsum("mfh,fh->fm", resp, amps)


_PROJECTOR: _HarmonicProjector | None = None


def _projector():
    global _PROJECTOR
    if _PROJECTOR is None:
        _PROJECTOR = _HarmonicProjector()
    return _PROJECTOR


def _bump(pos, center, width, amp):
    return amp * np.exp(-0.5 * ((pos - center) / width) ** 2)


_MEL_TOP = float(hz_to_mel(SAMPLE_RATE / 2))


@dataclass
class SingerVoice:
    """Fixed timbre: tilt plus three formant bumps on the normalised mel axis."""

    singer_id: str
    tilt: float
    formants: np.ndarray  # [3, 3] center, width, amplitude
    base_pitch: int

    def log_gain(self, freqs):
        pos = hz_to_mel(freqs) / _MEL_TOP
        out = 0.5 - self.tilt * pos
        for c, w, a in self.formants:
            out = out + _bump(pos, c, w, a)
        return out


def make_singer(rng: np.random.Generator, singer_id: str) -> SingerVoice:
    centers = np.sort(rng.uniform(0.08, 0.6, size=3))
    widths = rng.uniform(0.03, 0.08, size=3)
    amps = rng.uniform(0.8, 2.0, size=3)
    return SingerVoice(
        singer_id=singer_id,
        tilt=float(rng.uniform(5.0, 7.5)),
        formants=np.stack([centers, widths, amps], axis=1),
        base_pitch=int(rng.integers(52, 66)),
    )


def phoneme_table(inventory: int) -> np.ndarray:
    """Two formant bumps per phoneme id, shared by every corpus: [inventory, 2, 3]."""
    rng = np.random.default_rng(_PHONETICS_SEED)
    tab = np.zeros((inventory, 2, 3))
    for p in range(inventory):
        tab[p, :, 0] = np.sort(rng.uniform(0.05, 0.45, size=2))
        tab[p, :, 1] = rng.uniform(0.02, 0.05, size=2)
        tab[p, :, 2] = rng.uniform(0.6, 1.6, size=2)
    return tab


# -------------------------------------------------------------------- rendering


@dataclass
class Score:
    phonemes: np.ndarray
    notes: list[Note]


def sung_durations(notes, emotion: str) -> np.ndarray:
    """Frames per phoneme: score timing, stretched 1.3x when sad."""
    stretch = SAD_STRETCH if emotion == "sad" else 1.0
    return np.array([max(1, int(round(n.duration * FRAME_RATE * stretch))) for n in notes], dtype=np.int64)


def f0_contour(notes, durations, techniques) -> np.ndarray:
    """Per-frame F0 in Hz; rests are 0."""
    parts = []
    for note, dur, tech in zip(notes, durations, techniques):
        t = np.arange(dur) / FRAME_RATE
        if note.note_type == "rest" or note.pitch == 0:
            parts.append(np.zeros(dur))
            continue
        semis = np.full(dur, float(note.pitch))
        if "glissando" in tech:
            ramp = np.clip(t / (GLISS_FRACTION * dur / FRAME_RATE), 0.0, 1.0)
            semis = semis - GLISS_SEMITONES * (1.0 - ramp)
        if "vibrato" in tech:
            semis = semis + VIBRATO_SEMITONES * np.sin(2 * np.pi * VIBRATO_HZ * t)
        parts.append(440.0 * 2.0 ** ((semis - 69.0) / 12.0))
    return np.concatenate(parts).astype(np.float32)


def render(
    score: Score,
    voice: SingerVoice,
    style: GlobalStyleLabel,
    techniques,
    rng: np.random.Generator,
    inventory: int,
):
    """Render mel frames, F0 and durations for one performance of ``score``."""
    techniques = [frozenset(t) for t in techniques]
    durations = sung_durations(score.notes, style.emotion)
    f0 = f0_contour(score.notes, durations, techniques)
    n_frames = int(durations.sum())
    ph_tab = phoneme_table(inventory)
    frame_ph = np.repeat(np.arange(len(score.phonemes)), durations)

    n_harm = 160
    h = np.arange(1, n_harm + 1)[None, :]
    freqs = f0[:, None].astype(np.float64) * h
    voiced = f0 > 0
    pos = hz_to_mel(np.maximum(freqs, 1.0)) / _MEL_TOP

    log_amp = voice.log_gain(np.maximum(freqs, 1.0)) - 0.35 * np.log(h)
    for i, p in enumerate(score.phonemes):
        rows = frame_ph == i
        if not rows.any():
            continue
        for c, w, a in ph_tab[p]:
            log_amp[rows] += _bump(pos[rows], c, w, a)
        tech = techniques[i]
        if style.method == "bel_canto":
            log_amp[rows] += _bump(pos[rows], 0.47, 0.08, 1.2)
        if "falsetto" in tech:
            log_amp[rows] -= 0.8 * np.log(h)
        if "mixed_voice" in tech:
            log_amp[rows] += _bump(pos[rows], 0.3, 0.05, 0.5)
        if "pharyngeal" in tech:
            log_amp[rows] += _bump(pos[rows], 0.22, 0.03, 0.7)
    amps = np.where(voiced[:, None], np.exp(log_amp), 0.0)
    lin = _projector()(np.where(voiced[:, None], freqs, 0.0), amps)

    floor = np.full((n_frames, N_MELS), _FLOOR)
    for i, tech in enumerate(techniques):
        if "breathy" in tech:
            floor[frame_ph == i, BREATHY_FIRST_BIN:] = _BREATHY_FLOOR
    floor = floor * rng.uniform(0.85, 1.15, size=floor.shape)
    mel = np.clip(np.log(lin + floor), MEL_MIN, MEL_MAX).astype(np.float32)
    return MelSpectrogram(mel), f0, durations


def random_score(rng: np.random.Generator, cfg: SynthCorpusConfig, base_pitch: int) -> Score:
    n = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
    phonemes, notes = [], []
    for i in range(n):
        frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        dur = frames / FRAME_RATE
        if i > 0 and rng.random() < cfg.rest_prob:
            phonemes.append(SILENCE)
            notes.append(Note(0, "rest", dur))
            continue
        pitch = base_pitch + int(rng.choice([-5, -3, -1, 0, 2, 4, 5, 7]))
        kind = "slur" if (i > 0 and rng.random() < 0.1) else "normal"
        phonemes.append(int(rng.integers(1, cfg.inventory)))
        notes.append(Note(pitch, kind, dur))
    return Score(np.array(phonemes, dtype=np.int64), notes)


def random_techniques(rng: np.random.Generator, cfg: SynthCorpusConfig, score: Score):
    out = []
    for note in score.notes:
        tech = set()
        if note.note_type != "rest":
            if rng.random() < cfg.vibrato_prob:
                tech.add("vibrato")
            if rng.random() < cfg.breathy_prob:
                tech.add("breathy")
            for name in ("mixed_voice", "falsetto", "glissando", "pharyngeal"):
                if rng.random() < cfg.other_technique_prob:
                    tech.add(name)
        out.append(frozenset(tech))
    return out


def make_record(utt_id, score, voice, style, techniques, rng, inventory) -> UtteranceRecord:
    mel, f0, durations = render(score, voice, style, techniques, rng, inventory)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    return UtteranceRecord(
        utt_id=utt_id,
        singer_id=voice.singer_id,
        language="synthetic",
        phonemes=score.phonemes,
        notes=list(score.notes),
        phoneme_boundaries=bounds,
        mel=mel,
        f0=f0,
        global_style=style,
        techniques=techniques,
        phoneme_durations=durations,
    ).validate()


def make_voices(cfg: SynthCorpusConfig, seed: int) -> list[SingerVoice]:
    rng = np.random.default_rng([seed, 0])
    return [make_singer(rng, f"singer{k:02d}") for k in range(cfg.n_singers)]


def generate_records(cfg: SynthCorpusConfig, seed: int) -> list[UtteranceRecord]:
    cfg.check()
    voices = make_voices(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    records = []
    for u in range(cfg.n_utterances):
        k, r = divmod(u, cfg.renditions)
        if r == 0:
            voice = voices[k % cfg.n_singers]
            score = random_score(rng, cfg, voice.base_pitch)
            method = str(rng.choice(["bel_canto", "pop"]))
            emotion = str(rng.choice(["happy", "sad"]))
        else:
            emotion = "sad" if emotion == "happy" else "happy"
        style = GlobalStyleLabel(method=method, emotion=emotion)
        tech = random_techniques(rng, cfg, score)
        noise_rng = np.random.default_rng([seed, 2, u])
        records.append(make_record(f"utt{u:04d}", score, voice, style, tech, noise_rng, cfg.inventory))
    return records


def make_synthetic_corpus(cfg: SynthCorpusConfig, seed: int, out_dir) -> Path:
    """Generate and write a corpus; returns the manifest path."""
    return write_corpus(generate_records(cfg, seed), Path(out_dir))
