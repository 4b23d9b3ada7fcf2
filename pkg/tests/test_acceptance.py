"""Acceptance suite: ten criteria, each reported as one PASS/FAIL line at the end of the run.

Criteria 7 and 8 share one overfit model trained here from scratch (about half
an hour on one CPU core); every other criterion takes seconds.
"""
import itertools
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from singstyle.cli import main as cli_main
from singstyle.config import Config
from singstyle.corpus import GlobalStyleLabel, by_singer, load_corpus, resolve_manifest
from singstyle.cvq import Codebook, codebook_usage_run, contrastive_loss, nearest_codes
from singstyle.decoder import decoder_losses
from singstyle.infer import evaluate, infer_control
from singstyle.metrics import cosine_sim, ffe, has_vibrato, mcd, ssim
from singstyle.pitch import (
    DiffusionSchedule,
    gaussian_forward,
    gaussian_step,
    linear_schedule,
    multinomial_posterior,
    pitch_losses,
)
from singstyle.sdlm import StyleDurationLM, sdlm_loss
from singstyle.synthetic import SAD_STRETCH
from singstyle.train import Stage1Trainer, Stage2Trainer, loss_drop, teacher_forced_accuracy

pytestmark = pytest.mark.acceptance


# ------------------------------------------------------------------ 1. multinomial posterior


def _transition(beta, k):
    """Row-stochastic Q[i, j] = q(y_t = j | y_{t-1} = i)."""
    return (1 - beta) * np.eye(k) + beta / k


def _bayes_posterior(betas, t, k, prior0):
    """q(y_{t-1} = j | y_t = i, y_0 ~ prior0) as a [i, j] table, summing the joint over every path y_0 .. y_t."""
    joint = np.asarray(prior0, dtype=np.float64)  # axes: y_0, y_1, ...
    for s in range(1, t + 1):
        q = _transition(betas[s - 1], k)
        joint = joint[..., None] * q.reshape((1,) * (joint.ndim - 1) + (k, k))
    pair = joint.reshape(-1, k, k).sum(0)  # [y_{t-1}, y_t]
    return (pair / pair.sum(0, keepdims=True)).T


def test_criterion_01_multinomial_posterior_matches_enumeration(record_criterion):
    g = np.random.default_rng(11)
    worst = 0.0
    t0 = time.time()
    for _ in range(10):
        T = int(g.integers(1, 6))
        betas = g.uniform(0.02, 0.9, size=T)
        sched = DiffusionSchedule(betas)
        for k in range(2, 9):
            eye = torch.eye(k, dtype=torch.float64)
            for t in range(1, T + 1):
                for prior in [np.eye(k)[c] for c in range(k)] + [g.dirichlet(np.ones(k))]:
                    ref = _bayes_posterior(betas, t, k, prior)
                    p0 = torch.tensor(prior, dtype=torch.float64)[None].expand(k, k)
                    got = multinomial_posterior(eye, p0, t, sched).numpy()
                    worst = max(worst, float(np.max(np.abs(got - ref))))
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 10
    record_criterion(1, ok, f"max |dev| {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2. CVQ assignment


def test_criterion_02_quantize_matches_brute_force(record_criterion):
    t0 = time.time()
    g = torch.Generator().manual_seed(5)
    cb = Codebook(512, 16)
    z = torch.randn(10_000, 16, generator=g)
    with torch.no_grad():
        cb.embedding.copy_(torch.randn(512, 16, generator=g))
    got = cb.quantize(z).tokens.numpy()
    zn = (z / z.norm(dim=-1, keepdim=True)).double().numpy()
    en = cb.normalized().detach().double().numpy()
    ref = np.empty(len(zn), dtype=np.int64)
    for i, v in enumerate(zn):
        ref[i] = int(np.argmin(((en - v) ** 2).sum(-1)))
    raw = nearest_codes(z, cb.embedding).numpy()
    raw_ref = np.array([int(np.argmin(((cb.embedding.detach().double().numpy() - v) ** 2).sum(-1)))
                        for v in z.double().numpy()])
    elapsed = time.time() - t0
    match = float(np.mean(got == ref))
    ok = match == 1.0 and np.array_equal(raw, raw_ref) and elapsed < 30
    record_criterion(2, ok, f"match {100 * match:.2f}% on 10^4 x 512, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3. gradients


def _fd_rel_error(f, x, n_coords=24, h=1e-6, seed=0):
    """Norm-relative error between autograd and central differences on random coordinates."""
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    g = np.random.default_rng(seed)
    flat = x.detach().reshape(-1)
    idx = g.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    num, ana = [], []
    for i in idx:
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        with torch.no_grad():
            num.append((float(f(xp.view_as(x))) - float(f(xm.view_as(x)))) / (2 * h))
        ana.append(float(grad.reshape(-1)[i]))
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))


def test_criterion_03_gradient_suite(record_criterion):
    t0 = time.time()
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(1)
    d64 = torch.float64
    errors = {}

    cb = Codebook(12, 6).double()
    z = torch.randn(30, 6, generator=g, dtype=d64)
    errors["cvq_commitment"] = _fd_rel_error(lambda v: cb.quantize(v).commitment_loss, z)
    tokens = cb.quantize(z).tokens
    errors["cvq_contrastive"] = _fd_rel_error(
        lambda v: contrastive_loss(cb.embedding.detach(), v, tokens, cb.tau, cb.n_neg), z, seed=1)
    emb = cb.embedding.detach().clone()
    probe = Codebook(12, 6).double()
    del probe.embedding  # plain tensor attribute, so the codes themselves can be differentiated

    def codebook_path(e):
        probe.embedding = e
        return probe.quantize(z).codebook_loss
    errors["cvq_codebook"] = _fd_rel_error(codebook_path, emb, seed=2)

    sched = linear_schedule(100, 1e-4, 0.06)
    b, n = 3, 10
    t = torch.tensor([1, 2, 57])
    eps = torch.randn(b, n, generator=g, dtype=d64)
    y0 = F.one_hot(torch.randint(2, (b, n), generator=g), 2).to(d64)
    yt = F.one_hot(torch.randint(2, (b, n), generator=g), 2).to(d64)
    logits = torch.randn(b, n, 2, generator=g, dtype=d64)
    eps_hat = torch.randn(b, n, generator=g, dtype=d64)
    errors["gdiff"] = _fd_rel_error(lambda v: pitch_losses(v, eps, logits, y0, yt, t, sched)[0], eps_hat)
    errors["mdiff"] = _fd_rel_error(lambda v: pitch_losses(eps_hat, eps, v, y0, yt, t, sched)[1], logits)

    x0 = torch.rand(2, 16, 80, generator=g, dtype=d64) * 2 - 1
    x0_hat = x0 + 0.3 * torch.randn(x0.shape, generator=g, dtype=d64)
    errors["mae"] = _fd_rel_error(lambda v: decoder_losses(v, x0)[0], x0_hat)
    errors["ssim"] = _fd_rel_error(lambda v: decoder_losses(v, x0)[1], x0_hat, seed=3)

    s_logits = torch.randn(7, 10, generator=g, dtype=d64)
    s_gt = torch.randint(10, (7,), generator=g)
    d_gt = torch.randint(1, 40, (7,), generator=g).to(d64)
    d_pred = torch.randn(7, generator=g, dtype=d64) * 3 + 10
    errors["dur"] = _fd_rel_error(lambda v: sdlm_loss(s_logits, v, s_gt, d_gt)[1], d_pred)
    errors["style"] = _fd_rel_error(lambda v: sdlm_loss(v, d_pred, s_gt, d_gt)[0], s_logits)

    elapsed = time.time() - t0
    worst = max(errors.values())
    ok = worst <= 1e-4 and elapsed < 300
    record_criterion(3, ok, "worst rel err %.1e (%s), %.1fs" % (worst, max(errors, key=errors.get), elapsed))
    assert ok, errors


# ------------------------------------------------------------------ 4. Gaussian forward process


def test_criterion_04_gaussian_forward_consistency(record_criterion):
    sched = linear_schedule(100, 1e-4, 0.06)
    g = torch.Generator().manual_seed(4)
    n = 100_000
    x0_val = 3.0
    x0 = torch.full((n,), x0_val, dtype=torch.float64)
    worst = 0.0
    x = x0.clone()
    done = 0
    for t in (10, 50, 100):
        closed = gaussian_forward(x0, t, sched, torch.randn(n, generator=g, dtype=torch.float64))
        for k in range(done + 1, t + 1):
            x = gaussian_step(x, k, sched, torch.randn(n, generator=g, dtype=torch.float64))
        done = t
        mean, var = x0_val * math.sqrt(sched.alpha_bar[t]), 1 - sched.alpha_bar[t]
        for sample in (closed, x):
            worst = max(worst, abs(float(sample.mean()) - mean) / mean, abs(float(sample.var()) - var) / var)
    ab100 = float(sched.alpha_bar[100])
    ok = worst <= 0.02 and ab100 < 0.05
    record_criterion(4, ok, f"worst rel dev {100 * worst:.2f}%, alpha_bar_100 = {ab100:.4f}")
    assert ok


# ------------------------------------------------------------------ 5. causality


def test_criterion_05_ar_logits_ignore_the_future(record_criterion):
    g = torch.Generator().manual_seed(6)
    worst_past = 0.0
    for case in range(50):
        torch.manual_seed(case)
        cfg = Config(lm_layers=2, lm_d_model=32, lm_heads=2, n_codes=12, d_content=16, d_timbre=8)
        lm = StyleDurationLM(cfg).eval()
        n_p, n_t = int(torch.randint(0, 5, (1,), generator=g)), int(torch.randint(2, 8, (1,), generator=g))
        content = torch.randn(n_t, 16, generator=g)
        timbre = torch.randn(8, generator=g)
        if case % 2:
            seq = lm.build_transfer_sequence(
                torch.randint(12, (n_p,), generator=g), torch.randint(1, 30, (n_p,), generator=g).float(),
                torch.randn(n_p, 16, generator=g), content, timbre)
        else:
            tp = torch.randn(n_t, 32, generator=g)
            seq = lm.build_control_sequence(tp, torch.randn(n_p, 16, generator=g), content, timbre)
        toks = torch.randint(12, (n_t,), generator=g)
        durs = torch.randint(1, 40, (n_t,), generator=g).float()
        j = int(torch.randint(n_t, (1,), generator=g))
        with torch.no_grad():
            base, base_d = lm(seq, toks, durs)
            t2, d2 = toks.clone(), durs.clone()
            t2[j:] = torch.randint(12, (n_t - j,), generator=g)
            d2[j:] = d2[j:] * 2 + 3
            out, out_d = lm(seq, t2, d2)
        # history element j enters AR row j + 1; rows 0..j must not move
        worst_past = max(worst_past, float((out[: j + 1] - base[: j + 1]).abs().max()),
                         float((out_d[: j + 1] - base_d[: j + 1]).abs().max()))
    ok = worst_past <= 1e-6
    record_criterion(5, ok, f"max past-row change {worst_past:.1e} over 50 cases")
    assert ok


# ------------------------------------------------------------------ 6. codebook health


def test_criterion_06_clustering_keeps_more_codes_alive(record_criterion):
    pairs = [(codebook_usage_run(s, True), codebook_usage_run(s, False)) for s in range(10)]
    wins = sum(c >= v for c, v in pairs)
    ok = wins >= 9
    record_criterion(6, ok, f"CVQ >= VQ in {wins}/10 runs; mean used {np.mean([c for c, _ in pairs]):.2f} "
                            f"vs {np.mean([v for _, v in pairs]):.2f}")
    assert ok


# ------------------------------------------------------------------ 7/8. overfit model


@pytest.fixture(scope="module")
def overfit(records):
    cfg = Config()
    t0 = time.time()
    s1 = Stage1Trainer(records, cfg)
    s1.run()
    t1 = time.time()
    s2 = Stage2Trainer(records, s1.model)
    s2.run()
    t2 = time.time()
    return {"model": s2.model, "stage1": s1, "stage2": s2, "times": (t1 - t0, t2 - t1)}


def test_criterion_07_overfit_reconstruction(records, overfit, record_criterion):
    model = overfit["model"]
    t0 = time.time()
    report = evaluate(model, records)
    acc = {m: teacher_forced_accuracy(model, records, m, overfit["stage2"].features) for m in ("transfer", "control")}
    t_eval = time.time() - t0
    total_min = (sum(overfit["times"]) + t_eval) / 60
    drop = loss_drop(overfit["stage1"].history)
    ok = (report.mae <= 0.1 and report.ffe <= 0.15 and min(acc.values()) >= 0.95 and total_min <= 45)
    record_criterion(7, ok, f"mel MAE {report.mae:.3f}, FFE {report.ffe:.3f}, token acc transfer "
                            f"{acc['transfer']:.3f} control {acc['control']:.3f}, recon loss drop {drop:.1f}x, "
                            f"{total_min:.1f} min")
    assert report.mae <= 0.1
    assert report.ffe <= 0.15
    assert min(acc.values()) >= 0.95
    assert total_min <= 45


def _control_scores(records, n=20):
    groups = by_singer(records)
    out = []
    for i, rec in enumerate(records[:n]):
        ref = records[next(j for j in groups[rec.singer_id] if j != i)]
        out.append((rec, ref))
    return out


def test_criterion_08_text_control_signatures(records, overfit, record_criterion):
    model = overfit["model"]
    vib_hits = plain_hits = 0
    ratios = []
    cases = _control_scores(records)
    for k, (rec, ref) in enumerate(cases):
        ph, notes = rec.phonemes, rec.notes
        sung = [frozenset({"vibrato"}) if n.note_type != "rest" else frozenset() for n in notes]
        plain = [frozenset()] * len(ph)
        label = GlobalStyleLabel(rec.global_style.method, "happy")
        for tech, is_vib in ((sung, True), (plain, False)):
            out = infer_control(model, ref, label, tech, ph, notes, seed=100 + k)
            bounds = np.concatenate([[0], np.cumsum(out.durations)])
            hit = has_vibrato(out.f0, boundaries=bounds)
            vib_hits += hit if is_vib else 0
            plain_hits += hit if not is_vib else 0
        frames = {}
        for emotion in ("sad", "happy"):
            out = infer_control(model, ref, GlobalStyleLabel(rec.global_style.method, emotion), plain, ph, notes,
                                seed=200 + k)
            frames[emotion] = out.n_frames
        ratios.append(frames["sad"] / frames["happy"])
    n = len(cases)
    ratio = float(np.mean(ratios))
    ok_vib = vib_hits / n >= 0.8 and plain_hits / n <= 0.2
    ok_dur = abs(ratio / SAD_STRETCH - 1) <= 0.15
    record_criterion(8, ok_vib and ok_dur, f"vibrato detected {vib_hits}/{n} prompted, {plain_hits}/{n} plain; "
                                           f"sad/happy length ratio {ratio:.3f}")
    assert ok_vib
    assert ok_dur


# ------------------------------------------------------------------ 9. metrics


def test_criterion_09_metric_exactness(record_criterion):
    g = np.random.default_rng(9)
    x = g.uniform(0, 12, size=(40, 80))
    f0 = g.uniform(100, 300, 60) * (g.random(60) > 0.3)
    u = g.normal(size=32)
    single = mcd([[1.0]], [[0.0]])
    checks = {
        "ssim": ssim(x, x) == 1.0,
        "mcd": mcd(x[:, :13], x[:, :13]) == 0.0,
        "ffe": ffe(f0, f0 > 0, f0, f0 > 0) == 0.0,
        "cos": abs(cosine_sim(u, u) - 1.0) <= 1e-12,
        # (10 / ln 10) * sqrt(2) = 6.14185...
        "mcd_single": abs(single - 10 / math.log(10) * math.sqrt(2)) <= 1e-12 and abs(single - 6.1419) <= 1e-4,
    }
    ok = all(checks.values())
    record_criterion(9, ok, f"single-frame MCD {single:.5f}; " + ", ".join(f"{k} {'ok' if v else 'BAD'}"
                                                                        for k, v in checks.items()))
    assert ok, checks


# ------------------------------------------------------------------ 10. determinism


def _pipeline(root, cfg_path):
    corpus = root / "corpus"
    cli_main(["make-synthetic", "--out", str(corpus), "--seed", "21"])
    cli_main(["train-stage1", "--corpus", str(corpus), "--config", str(cfg_path), "--out", str(root / "s1.ckpt")])
    cli_main(["train-stage2", "--corpus", str(corpus), "--init", str(root / "s1.ckpt"), "--out", str(root / "s2.ckpt")])
    recs = load_corpus(resolve_manifest(corpus))
    score = root / "score.json"
    import json
    score.write_text(json.dumps({
        "phonemes": [int(p) for p in recs[5].phonemes],
        "notes": [{"pitch": n.pitch, "type": n.note_type, "dur_sec": n.duration} for n in recs[5].notes],
    }))
    cli_main(["synth-transfer", "--ckpt", str(root / "s2.ckpt"), "--prompt", recs[1].utt_id,
              "--score", str(score), "--seed", "3", "--out", str(root / "out")])
    return (root / "out" / "output.mel").read_bytes()


def test_criterion_10_pipeline_is_bitwise_deterministic(tmp_path, record_criterion):
    cfg_path = tmp_path / "short.cfg"
    Config(stage1_steps=40, stage2_steps=20).save(cfg_path)
    a = _pipeline(tmp_path / "a", cfg_path)
    b = _pipeline(tmp_path / "b", cfg_path)
    ok = a == b and len(a) > 0
    record_criterion(10, ok, f"two full runs, {len(a)} mel bytes each, identical={a == b}")
    assert ok
