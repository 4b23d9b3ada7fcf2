"""
A synthetic singing corpus and its measurable style signatures
===============================================================

The toy corpus renders mel frames from a harmonic source model. Every style
factor leaves a signal that can be measured without listening: sad takes are
1.3 times longer, vibrato adds a 5.5 Hz F0 modulation, breathy phonemes raise
the upper noise floor.

Each score is sung twice by the same singer, once happy and once sad, with
techniques drawn separately. A model that only reads the score cannot tell the
two takes apart, so it has to use the style labels.
"""

import numpy as np

from singstyle.metrics import has_vibrato, vibrato_peak
from singstyle.synthetic import SynthCorpusConfig, generate_records

records = generate_records(SynthCorpusConfig(), seed=7)
print(f"{len(records)} utterances, {len({r.singer_id for r in records})} singers")

# Timing: compare the sung length with the length the score asks for.
FRAME_RATE = 187.5
for emotion in ("happy", "sad"):
    ratios = [r.frame_count / (sum(n.duration for n in r.notes) * FRAME_RATE)
              for r in records if r.global_style.emotion == emotion]
    print(f"{emotion:5s}: sung / written length = {np.mean(ratios):.3f}")

# Pairs: the same score, two takes.
a, b = records[0], records[1]
print(f"{a.utt_id} ({a.global_style.emotion}) and {b.utt_id} ({b.global_style.emotion}) share a score: "
      f"{a.frame_count} vs {b.frame_count} frames")

# Vibrato: the detector fits one sinusoid per phoneme, so it needs the boundaries.
with_vib = [r for r in records if any("vibrato" in t for t in r.techniques)]
rec = with_vib[0]
peak, depth = vibrato_peak(rec.f0, boundaries=rec.phoneme_boundaries)
print(f"{rec.utt_id}: modulation peak {peak:.2f} Hz, depth {depth:.2f} semitones")
hits = sum(has_vibrato(r.f0, boundaries=r.phoneme_boundaries) for r in with_vib)
print(f"detector fires on {hits}/{len(with_vib)} utterances that contain vibrato")

# The mel itself: log magnitudes in a fixed range, 80 bins per frame.
print("mel shape", rec.mel.frames.shape, "range", rec.mel.frames.min().round(2), rec.mel.frames.max().round(2))
