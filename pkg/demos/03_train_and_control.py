"""
Training the toy model and steering it with text
=================================================

Stage 1 learns to reconstruct mels from content, style tokens and a timbre
prompt. Stage 2 freezes all of that and trains a small language model that
predicts style tokens and durations, either from an audio prompt or from a
text label with per-phoneme techniques.

Full training takes about half an hour on one CPU core, so by default this
script runs a short schedule. Pass a step count to train longer, e.g.
``python demos/03_train_and_control.py 3000 1000``.
"""

import sys
import time

import numpy as np

from singstyle import Config
from singstyle.corpus import GlobalStyleLabel
from singstyle.infer import evaluate, infer_control, infer_transfer
from singstyle.metrics import has_vibrato
from singstyle.synthetic import SynthCorpusConfig, generate_records
from singstyle.train import Stage1Trainer, Stage2Trainer, loss_drop, set_deterministic, teacher_forced_accuracy

steps1 = int(sys.argv[1]) if len(sys.argv) > 1 else 300
steps2 = int(sys.argv[2]) if len(sys.argv) > 2 else 100
set_deterministic()
records = generate_records(SynthCorpusConfig(), seed=7)
cfg = Config(stage1_steps=steps1, stage2_steps=steps2)

# Stage 1: reconstruction.
t0 = time.time()
s1 = Stage1Trainer(records, cfg)
s1.run()
print(f"stage 1: {steps1} steps in {time.time() - t0:.0f}s")
if steps1 >= 100:
    print(f"reconstruction losses fell {loss_drop(s1.history, start=50, window=min(50, steps1 - 50)):.1f}x")

report = evaluate(s1.model, records[:8])
print(f"reconstruction on 8 training items: MAE {report.mae:.3f}, FFE {report.ffe:.3f}, MCD {report.mcd:.2f}")

# Stage 2: the style and duration language model, with stage 1 frozen.
s2 = Stage2Trainer(records, s1.model)
s2.run()
model = s2.model
for mode in ("transfer", "control"):
    print(f"teacher-forced token accuracy ({mode}): {teacher_forced_accuracy(model, records, mode, s2.features):.3f}")

# Style transfer: the score of one utterance sung with the style of another.
target, prompt = records[1], records[5]
out = infer_transfer(model, prompt, target.phonemes, target.notes, seed=0)
print(f"transfer: {out.n_frames} frames, durations {out.durations.tolist()}")

# Text control: same score, same voice, different instructions.
ref = records[4]
plain = [frozenset()] * len(target.phonemes)
vib = [frozenset() if n.note_type == "rest" else frozenset({"vibrato"}) for n in target.notes]
for emotion, tech, name in (("happy", plain, "plain"), ("happy", vib, "vibrato"), ("sad", plain, "sad")):
    out = infer_control(model, ref, GlobalStyleLabel("pop", emotion), tech, target.phonemes, target.notes, seed=1)
    bounds = np.concatenate([[0], np.cumsum(out.durations)])
    print(f"{name:8s}: {out.n_frames:4d} frames, vibrato detected: {has_vibrato(out.f0, boundaries=bounds)}")
