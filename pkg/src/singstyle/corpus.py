"""Data model, mel binary format and manifest ingestion.

A corpus on disk is a directory holding ``manifest.jsonl`` (one JSON object
per utterance) and one ``.mel`` binary per utterance.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_MELS = 80
HOP = 256
WINDOW = 1024
SAMPLE_RATE = 48000
FRAME_RATE = SAMPLE_RATE / HOP  # 187.5 frames per second

MEL_MIN = -10.0
MEL_MAX = 2.0

TECHNIQUES = ("mixed_voice", "falsetto", "breathy", "vibrato", "glissando", "pharyngeal")
NOTE_TYPES = ("rest", "slur", "grace", "normal")
LANGUAGES = ("zh", "en", "synthetic")
METHODS = ("bel_canto", "pop")
EMOTIONS = ("happy", "sad")

MEL_MAGIC = b"MELB"
_MEL_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Malformed binary file."""


class ValidationError(ValueError):
    """A record breaks one of the utterance invariants."""


@dataclass(frozen=True)
class Note:
    pitch: int
    note_type: str
    duration: float

    def __post_init__(self):
        if not 0 <= int(self.pitch) <= 127:
            raise ValidationError(f"note pitch {self.pitch} outside MIDI range")
        if self.note_type not in NOTE_TYPES:
            raise ValidationError(f"unknown note type {self.note_type!r}")
        if not self.duration > 0:
            raise ValidationError(f"note duration must be positive, got {self.duration}")


@dataclass(frozen=True)
class GlobalStyleLabel:
    method: str
    emotion: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown singing method {self.method!r}")
        if self.emotion not in EMOTIONS:
            raise ValidationError(f"unknown emotion {self.emotion!r}")


@dataclass
class MelSpectrogram:
    """Log-amplitude mel frames, shape ``[frame_count, 80]``."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FormatError(f"mel must be [frames x {N_MELS}], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise FormatError("mel contains non-finite values")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    hop = HOP
    sample_rate = SAMPLE_RATE
    window = WINDOW


@dataclass
class UtteranceRecord:
    utt_id: str
    singer_id: str
    language: str
    phonemes: np.ndarray
    notes: list[Note]
    phoneme_boundaries: np.ndarray
    mel: MelSpectrogram
    f0: np.ndarray
    global_style: GlobalStyleLabel
    techniques: list[frozenset[str]]
    phoneme_durations: np.ndarray | None = None
    uv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.phoneme_boundaries = np.asarray(self.phoneme_boundaries, dtype=np.int64)
        self.f0 = np.asarray(self.f0, dtype=np.float32)
        self.techniques = [frozenset(t) for t in self.techniques]
        if self.phoneme_durations is None:
            self.phoneme_durations = np.diff(self.phoneme_boundaries)
        self.phoneme_durations = np.asarray(self.phoneme_durations, dtype=np.int64)
        self.uv = (self.f0 > 0).astype(np.int64)

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def frame_count(self) -> int:
        return self.mel.frame_count

    def validate(self) -> "UtteranceRecord":
        """Raise :class:`ValidationError` naming the utterance on any invariant break."""
        n, frames = self.n_phonemes, self.frame_count

        def fail(msg):
            raise ValidationError(f"utterance {self.utt_id}: {msg}")

        if self.language not in LANGUAGES:
            fail(f"unknown language {self.language!r}")
        if n < 1:
            fail("no phonemes")
        b = self.phoneme_boundaries
        if len(b) != n + 1:
            fail(f"{len(b)} boundaries for {n} phonemes")
        if b[0] != 0 or b[-1] != frames:
            fail(f"boundaries must run from 0 to {frames}")
        if np.any(np.diff(b) < 0):
            fail("boundaries are not monotone")
        if len(self.phoneme_durations) != n or int(self.phoneme_durations.sum()) != frames:
            fail(f"durations sum to {int(self.phoneme_durations.sum())}, mel has {frames} frames")
        if len(self.notes) != n:
            fail(f"{len(self.notes)} notes for {n} phonemes")
        if len(self.techniques) != n:
            fail(f"{len(self.techniques)} technique sets for {n} phonemes")
        for ts in self.techniques:
            unknown = set(ts) - set(TECHNIQUES)
            if unknown:
                fail(f"unknown techniques {sorted(unknown)}")
        if len(self.f0) != frames:
            fail(f"f0 has {len(self.f0)} frames, mel has {frames}")
        if np.any(self.f0 < 0) or not np.all(np.isfinite(self.f0)):
            fail("f0 must be finite and non-negative")
        return self


# --------------------------------------------------------------------------- mel io


def write_mel(mel: MelSpectrogram, path) -> None:
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MEL_HEADER.pack(MEL_MAGIC, frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes(order="C"))


def read_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _MEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n_frames, n_mels = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n_mels != N_MELS:
        raise FormatError(f"{path}: n_mels={n_mels}, expected {N_MELS}")
    expected = _MEL_HEADER.size + 4 * n_frames * n_mels
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_MEL_HEADER.size).reshape(n_frames, n_mels)
    return MelSpectrogram(frames.astype(np.float32))


# ---------------------------------------------------------------------- manifests


def record_to_json(rec: UtteranceRecord, mel_path: str) -> dict:
    return {
        "utt_id": rec.utt_id,
        "singer_id": rec.singer_id,
        "language": rec.language,
        "phonemes": [int(p) for p in rec.phonemes],
        "notes": [{"pitch": int(n.pitch), "type": n.note_type, "dur_sec": float(n.duration)} for n in rec.notes],
        "boundaries": [int(b) for b in rec.phoneme_boundaries],
        "mel_path": mel_path,
        "f0": [float(x) for x in rec.f0],
        "global_style": {"method": rec.global_style.method, "emotion": rec.global_style.emotion},
        "techniques": [sorted(t) for t in rec.techniques],
    }


def record_from_json(obj: dict, base_dir: Path) -> UtteranceRecord:
    utt_id = obj.get("utt_id", "<unknown>")
    try:
        notes = [Note(int(n["pitch"]), n["type"], float(n["dur_sec"])) for n in obj["notes"]]
        style = GlobalStyleLabel(**obj["global_style"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise ValidationError(f"utterance {utt_id}: {exc}") from exc
    mel_path = Path(obj["mel_path"])
    if not mel_path.is_absolute():
        mel_path = base_dir / mel_path
    mel = read_mel(mel_path)  # FileNotFoundError propagates as the I/O error
    rec = UtteranceRecord(
        utt_id=utt_id,
        singer_id=obj["singer_id"],
        language=obj["language"],
        phonemes=obj["phonemes"],
        notes=notes,
        phoneme_boundaries=obj["boundaries"],
        mel=mel,
        f0=obj["f0"],
        global_style=style,
        techniques=obj["techniques"],
    )
    return rec.validate()


def load_corpus(manifest_path) -> list[UtteranceRecord]:
    """Read a JSONL manifest; records come back in manifest order, validated."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json(json.loads(line), base))
    return records


def write_corpus(records: Iterable[UtteranceRecord], out_dir) -> Path:
    """Write mels plus ``manifest.jsonl`` into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            rec.validate()
            rel = f"mels/{rec.utt_id}.mel"
            write_mel(rec.mel, out_dir / rel)
            fh.write(json.dumps(record_to_json(rec, rel), sort_keys=True) + "\n")
    return manifest


def resolve_manifest(path) -> Path:
    """Accept either a corpus directory or the manifest file itself."""
    path = Path(path)
    return path / "manifest.jsonl" if path.is_dir() else path


def by_singer(records: Sequence[UtteranceRecord]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.singer_id, []).append(i)
    return groups


def normalize_mel(frames):
    """Map clipped log-mel values onto [-1, 1]."""
    mid = 0.5 * (MEL_MAX + MEL_MIN)
    half = 0.5 * (MEL_MAX - MEL_MIN)
    return (frames - mid) / half


def denormalize_mel(frames):
    mid = 0.5 * (MEL_MAX + MEL_MIN)
    half = 0.5 * (MEL_MAX - MEL_MIN)
    return frames * half + mid
