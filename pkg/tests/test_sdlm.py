import math

import pytest
import torch

from singstyle.config import Config
from singstyle.sdlm import SEG_AR, StyleDurationLM, sdlm_loss, sdlm_loss_masked

CFG = Config(lm_layers=2, lm_d_model=32, lm_heads=2, n_codes=12, d_content=16, d_timbre=8)


@pytest.fixture
def lm():
    torch.manual_seed(0)
    return StyleDurationLM(CFG).eval()


def _inputs(n_prompt=3, n_target=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randint(12, (n_prompt,), generator=g),
        torch.randint(1, 30, (n_prompt,), generator=g).float(),
        torch.randn(n_prompt, 16, generator=g),
        torch.randn(n_target, 16, generator=g),
        torch.randn(8, generator=g),
    )


def test_sequence_length_arithmetic(lm):
    s, d, c, ct, t = _inputs(3, 4)
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    assert seq.total_len() == len(s) + c.shape[0] + ct.shape[0] + 1 + 1
    assert [k for k, _ in seq.segments] == [0, 1, 2, 3]


def test_empty_prompt_is_target_timbre_bos(lm):
    _, _, _, ct, t = _inputs()
    seq = lm.build_transfer_sequence([], [], torch.zeros(0, 16), ct, t)
    assert seq.segments == [(2, 4), (3, 1)]
    assert seq.total_len() == 4 + 1 + 1
    logits, dur = lm(seq)
    assert logits.shape == (1, CFG.lm_vocab) and dur.shape == (1,)


def test_prompt_length_mismatch_rejected(lm):
    s, d, c, ct, t = _inputs()
    with pytest.raises(ValueError):
        lm.build_transfer_sequence(s[:2], d, c, ct, t)
    with pytest.raises(ValueError):
        lm.build_control_sequence(torch.zeros(3, 32), c, ct, t)


def test_transfer_and_control_differ_only_in_prompt_region(lm):
    s, d, c, ct, t = _inputs(4, 4)
    tr = lm.build_transfer_sequence(s, d, c, ct, t)
    tp = torch.randn(4, 32)
    co = lm.build_control_sequence(tp, c, ct, t)
    assert tr.cond_len == co.cond_len
    assert torch.equal(tr.cond[4:], co.cond[4:])
    assert not torch.equal(tr.cond[:4], co.cond[:4])


def test_output_rows_and_vocab(lm):
    s, d, c, ct, t = _inputs()
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    toks = torch.tensor([1, 2, 3, 4])
    logits, dur = lm(seq, toks, torch.tensor([5.0, 6, 7, 8]))
    assert logits.shape == (5, CFG.n_codes + 2)
    assert torch.all(logits.abs() <= 30) and torch.all(dur > -1)


def test_future_ar_positions_do_not_leak(lm):
    s, d, c, ct, t = _inputs()
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    toks, durs = torch.tensor([1, 2, 3, 4]), torch.tensor([5.0, 6, 7, 8])
    base, base_d = lm(seq, toks, durs)
    for j in range(4):
        t2, d2 = toks.clone(), durs.clone()
        t2[j] = (t2[j] + 5) % 12
        d2[j] = d2[j] * 3
        out, out_d = lm(seq, t2, d2)
        # history element j feeds AR row j+1
        assert torch.max(torch.abs(out[: j + 1] - base[: j + 1])) <= 1e-6
        assert torch.max(torch.abs(out_d[: j + 1] - base_d[: j + 1])) <= 1e-6
        assert torch.max(torch.abs(out[j + 1:] - base[j + 1:])) > 1e-6


def test_conditioning_is_visible_everywhere(lm):
    s, d, c, ct, t = _inputs()
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    toks, durs = torch.tensor([1, 2, 3]), torch.tensor([5.0, 6, 7])
    base, _ = lm(seq, toks, durs)
    seq.cond = seq.cond.clone()
    seq.cond[0] += torch.randn(32, generator=torch.Generator().manual_seed(9))
    out, _ = lm(seq, toks, durs)
    assert torch.all(torch.abs(out - base).amax(-1) > 1e-6)


def test_segment_embeddings_matter(lm):
    s, d, c, ct, t = _inputs()
    base, _ = lm(lm.build_transfer_sequence(s, d, c, ct, t))
    lm.use_segments = False
    off, _ = lm(lm.build_transfer_sequence(s, d, c, ct, t))
    assert not torch.allclose(base, off)


def test_batched_padding_matches_single(lm):
    outs, conds, ars = [], [], []
    for k, n in enumerate((3, 5)):
        s, d, c, ct, t = _inputs(n, n + 1, seed=k)
        seq = lm.build_transfer_sequence(s, d, c, ct, t)
        toks, durs = torch.arange(n + 1) % 12, torch.arange(1.0, n + 2)
        outs.append(lm(seq, toks, durs))
        conds.append(seq.cond)
        ars.append(lm.ar_inputs(seq, toks, durs))
    lc, la = max(x.shape[0] for x in conds), max(x.shape[0] for x in ars)
    cond = torch.zeros(2, lc, 32)
    ar = torch.zeros(2, la, 32)
    cm = torch.zeros(2, lc, dtype=torch.bool)
    am = torch.zeros(2, la, dtype=torch.bool)
    for i in range(2):
        cond[i, : conds[i].shape[0]], cm[i, : conds[i].shape[0]] = conds[i], True
        ar[i, : ars[i].shape[0]], am[i, : ars[i].shape[0]] = ars[i], True
    logits, dur = lm.forward_batch(cond, cm, ar, am)
    for i in range(2):
        n = ars[i].shape[0]
        assert torch.allclose(logits[i, :n], outs[i][0], atol=1e-5)
        assert torch.allclose(dur[i, :n], outs[i][1], atol=1e-5)


def test_greedy_limit_and_seeded_sampling(lm):
    s, d, c, ct, t = _inputs()
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    greedy, gd = lm.generate(seq, 4, temperature=0.0)
    manual_t, manual_d = torch.zeros(0, dtype=torch.long), torch.zeros(0)
    for _ in range(4):
        logits, dur = lm(seq, manual_t, manual_d)
        manual_t = torch.cat([manual_t, logits[-1, :12].argmax().view(1)])
        manual_d = torch.cat([manual_d, dur[-1].clamp_min(1.0).view(1)])
    assert torch.equal(greedy, manual_t) and torch.allclose(gd, manual_d)
    a = lm.generate(seq, 4, 0.8, 16, torch.Generator().manual_seed(3))
    b = lm.generate(seq, 4, 0.8, 16, torch.Generator().manual_seed(3))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert torch.all(a[0] < 12) and torch.all(a[1] >= 1)


def test_special_tokens_never_emitted(lm):
    with torch.no_grad():
        lm.style_head.bias.zero_()
        lm.style_head.bias[12:] = 25.0  # BOS/EOS dominate
    s, d, c, ct, t = _inputs()
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    toks, _ = lm.generate(seq, 5, 1.0, 0, torch.Generator().manual_seed(0))
    assert torch.all(toks < 12)


def test_loss_closed_forms():
    logits = torch.full((1, 4), -30.0)
    logits[0, 2] = 30.0
    ce, mse = sdlm_loss(logits, torch.tensor([3.0]), torch.tensor([2]), torch.tensor([3.0]))
    assert float(ce) == pytest.approx(0.0, abs=1e-20)
    assert float(mse) == 0.0
    _, mse = sdlm_loss(logits, torch.tensor([7.0], dtype=torch.float64), torch.tensor([2]),
                       torch.tensor([3.0], dtype=torch.float64))
    assert float(mse) == pytest.approx(math.log(2) ** 2, abs=1e-12)
    assert float(mse) == pytest.approx(0.4805, abs=1e-4)
    with pytest.raises(ValueError):
        sdlm_loss(logits, torch.tensor([1.0]), torch.tensor([2]), torch.tensor([0.0]))


def test_masked_loss_ignores_padding():
    logits = torch.randn(2, 3, 5)
    s = torch.tensor([[1, 2, 4], [0, 4, 0]])
    dp = torch.tensor([[2.0, 3.0, 1.0], [4.0, 9.0, 9.0]])
    dg = torch.tensor([[2.0, 5.0, 1.0], [3.0, 1.0, 1.0]])
    sm = torch.tensor([[1, 1, 1], [1, 1, 0]], dtype=torch.bool)
    dm = torch.tensor([[1, 1, 0], [1, 0, 0]], dtype=torch.bool)
    ce, mse = sdlm_loss_masked(logits, dp, s, dg, sm, dm)
    ref_ce = torch.nn.functional.cross_entropy(logits[sm], s[sm])
    ref = torch.stack([torch.log1p(dp[dm]) - torch.log1p(dg[dm])]) ** 2
    assert torch.allclose(ce, ref_ce) and torch.allclose(mse, ref.mean())


def test_ar_rows_carry_segment_type(lm):
    s, d, c, ct, t = _inputs()
    seq = lm.build_transfer_sequence(s, d, c, ct, t)
    rows = lm.ar_inputs(seq, torch.tensor([1]), torch.tensor([2.0]))
    assert rows.shape == (2, 32)
    assert SEG_AR == 5


def test_control_text_rows_reach_their_own_step(lm):
    _, _, c, ct, t = _inputs(4, 4)
    tp = torch.randn(4, 32)
    base = lm.build_control_sequence(tp, c, ct, t)
    assert torch.allclose(base.target_content, lm.content(ct) + tp)
    tp2 = tp.clone()
    tp2[2] += 1.0
    moved = lm.build_control_sequence(tp2, c, ct, t)
    diff = (moved.target_content - base.target_content).abs().sum(-1)
    assert diff[2] > 0 and torch.all(diff[[0, 1, 3]] == 0)
    tr = lm.build_transfer_sequence(torch.tensor([1, 2]), torch.tensor([3.0, 4]), c[:2], ct, t)
    assert torch.equal(tr.target_content, lm.content(ct))
