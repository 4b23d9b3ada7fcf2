"""Numeric kernels shared by training and evaluation: SSIM, MCD, FFE, cosine, MFCC."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft
import torch
import torch.nn.functional as F

from .corpus import MEL_MAX, MEL_MIN, N_MELS

MEL_RANGE = MEL_MAX - MEL_MIN  # 12
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
FFE_TOLERANCE = 0.2
MFCC_DIM = 13


def _gauss_window(size, sigma, dtype, device):
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float = MEL_RANGE,
             window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Local SSIM for every valid 7x7 window. Inputs ``[..., H, W]``; output ``[B, H-6, W-6]``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"inputs smaller than the {window}x{window} window")
    a = a.reshape(-1, 1, *a.shape[-2:])
    b = b.reshape(-1, 1, *b.shape[-2:])
    w = _gauss_window(window, sigma, a.dtype, a.device)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = F.conv2d(a, w)
    mu_b = F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a ** 2
    var_b = F.conv2d(b * b, w) - mu_b ** 2
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den)[:, 0]


def ssim(a, b, data_range: float = MEL_RANGE) -> float:
    """Mean windowed SSIM of two equally shaped 2-D arrays.

    Values lie in [-1, 1]; for inputs that share a non-negative range (for
    example mel values shifted onto [0, 12]) the result is in (0, 1].
    """
    ta = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    tb = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    return float(ssim_map(ta, tb, data_range).mean())


def masked_ssim(a: torch.Tensor, b: torch.Tensor, frame_mask: torch.Tensor,
                data_range: float = MEL_RANGE) -> torch.Tensor:
    """SSIM over ``[B, frames, bins]`` averaged only across windows lying fully inside the mask."""
    smap = ssim_map(a, b, data_range)
    valid = F.max_pool1d((~frame_mask).to(a.dtype)[:, None], SSIM_WINDOW, stride=1)[:, 0] == 0
    valid = valid[:, :, None].expand_as(smap).to(a.dtype)
    return (smap * valid).sum() / valid.sum().clamp_min(1.0)


def mel_to_mfcc(mel, n_coeffs: int = MFCC_DIM) -> np.ndarray:
    """Type-II orthonormal DCT of every log-mel frame, keeping coefficients 1..D."""
    mel = np.asarray(mel, dtype=np.float64)
    if n_coeffs >= mel.shape[-1]:
        raise ValueError(f"D={n_coeffs} must be below the number of mel bins ({mel.shape[-1]})")
    return scipy.fft.dct(mel, type=2, norm="ortho", axis=-1)[..., 1:n_coeffs + 1]


def mcd(mfcc_a, mfcc_b) -> float:
    """Mel cepstral distortion in dB, averaged over frame-aligned MFCC rows."""
    a = np.asarray(mfcc_a, dtype=np.float64)
    b = np.asarray(mfcc_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame mismatch {a.shape} vs {b.shape}; inputs must be frame-aligned")
    if a.shape[0] == 0:
        return 0.0
    per_frame = (10.0 / np.log(10.0)) * np.sqrt(2.0 * np.sum((a - b) ** 2, axis=-1))
    return float(per_frame.mean())


def ffe(f0_ref, uv_ref, f0_hyp, uv_hyp, tolerance: float = FFE_TOLERANCE) -> float:
    """F0 frame error; the first pair is the reference."""
    f0_ref, f0_hyp = np.asarray(f0_ref, float), np.asarray(f0_hyp, float)
    uv_ref, uv_hyp = np.asarray(uv_ref).astype(bool), np.asarray(uv_hyp).astype(bool)
    if not (len(f0_ref) == len(f0_hyp) == len(uv_ref) == len(uv_hyp)):
        raise ValueError("contours must be frame-aligned")
    if len(f0_ref) == 0:
        return 0.0
    voicing = uv_ref != uv_hyp
    both = uv_ref & uv_hyp
    ratio = np.divide(f0_hyp, f0_ref, out=np.ones_like(f0_ref), where=both & (f0_ref > 0))
    pitch = both & (np.abs(ratio - 1.0) > tolerance)
    return float(np.mean(voicing | pitch))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError("vectors differ in length")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(u @ v / (nu * nv))


@dataclass
class UtteranceMetrics:
    utt_id: str
    ffe: float
    mcd: float
    mae: float
    cos: float


@dataclass
class MetricReport:
    utterances: list[UtteranceMetrics] = field(default_factory=list)

    def _mean(self, key):
        vals = [getattr(u, key) for u in self.utterances]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def ffe(self):
        return self._mean("ffe")

    @property
    def mcd(self):
        return self._mean("mcd")

    @property
    def mae(self):
        return self._mean("mae")

    @property
    def cos(self):
        return self._mean("cos")

    def to_json(self) -> str:
        return json.dumps({
            "utterances": [asdict(u) for u in self.utterances],
            "summary": {k: getattr(self, k) for k in ("ffe", "mcd", "mae", "cos")},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls([UtteranceMetrics(**u) for u in obj["utterances"]])


def utterance_metrics(utt_id, mel_ref, f0_ref, mel_hyp, f0_hyp, timbre_ref, timbre_hyp) -> UtteranceMetrics:
    """All per-utterance numbers; mels in log units, F0 in Hz with 0 for unvoiced."""
    from .corpus import normalize_mel

    mel_ref = np.asarray(mel_ref, float)
    mel_hyp = np.asarray(mel_hyp, float)
    if mel_ref.shape != mel_hyp.shape or mel_ref.shape[-1] != N_MELS:
        raise ValueError("reference and hypothesis mels must be frame-aligned")
    f0_ref, f0_hyp = np.asarray(f0_ref, float), np.asarray(f0_hyp, float)
    return UtteranceMetrics(
        utt_id=utt_id,
        ffe=ffe(f0_ref, f0_ref > 0, f0_hyp, f0_hyp > 0),
        mcd=mcd(mel_to_mfcc(mel_ref), mel_to_mfcc(mel_hyp)),
        mae=float(np.mean(np.abs(normalize_mel(mel_ref) - normalize_mel(mel_hyp)))),
        cos=cosine_sim(timbre_ref, timbre_hyp),
    )


def voiced_runs(f0_hz, min_len: int = 8) -> list[np.ndarray]:
    """Contiguous voiced stretches of an F0 contour, in semitones, each of at least ``min_len`` frames."""
    f0 = np.asarray(f0_hz, dtype=np.float64)
    v = f0 > 0
    edges = np.flatnonzero(np.diff(np.concatenate([[0], v.astype(int), [0]])))
    runs = []
    for s, e in zip(edges[::2], edges[1::2]):
        if e - s >= min_len:
            runs.append(12.0 * np.log2(f0[s:e] / 440.0))
    return runs


def vibrato_peak(f0_hz, frame_rate: float = 187.5, boundaries=None, band=(2.0, 12.0), step: float = 0.05):
    """Dominant modulation rate (Hz) and RMS depth (semitones) of an F0 contour.

    Every voiced stretch (split further at ``boundaries`` when given) gets its
    own least-squares fit of offset + sinusoid, so the modulation phase may
    restart per stretch; the rate maximising the summed explained power is
    returned. Depth is the RMS of the mean-centred stretches.
    """
    f0 = np.asarray(f0_hz, dtype=np.float64)
    cuts = [0, len(f0)] if boundaries is None else [int(b) for b in boundaries]
    pieces = [run - run.mean() for s, e in zip(cuts[:-1], cuts[1:]) for run in voiced_runs(f0[s:e])]
    if not pieces:
        return 0.0, 0.0
    depth = float(np.sqrt(np.mean(np.concatenate(pieces) ** 2)))
    grid = np.arange(band[0], band[1] + step / 2, step)
    power = np.zeros_like(grid)
    for x in pieces:
        t = np.arange(len(x)) / frame_rate
        for k, f in enumerate(grid):
            basis = np.stack([np.ones_like(t), np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)], axis=1)
            coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
            power[k] += np.sum((basis @ coef) ** 2)
    return float(grid[np.argmax(power)]), depth


def has_vibrato(f0_hz, frame_rate: float = 187.5, boundaries=None, rate: float = 5.5,
                rate_tol: float = 1.0, min_depth: float = 0.3) -> bool:
    """True when the modulation peak sits within ``rate_tol`` Hz of ``rate`` with at least ``min_depth`` semitones RMS."""
    peak, depth = vibrato_peak(f0_hz, frame_rate, boundaries)
    return abs(peak - rate) <= rate_tol and depth >= min_depth
