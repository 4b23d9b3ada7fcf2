import numpy as np
import pytest
import torch
import torch.nn.functional as F

from singstyle.config import Config, vpsde_betas
from singstyle.corpus import N_MELS
from singstyle.decoder import (
    NORM_EPS,
    DecoderSchedule,
    MelStyleAdaptiveNorm,
    StyleAdaptiveDecoder,
    decoder_losses,
    decoder_schedule,
    sample_mel,
)

CFG = Config(dec_layers=2, dec_hidden=16, dec_filter=32, dec_heads=2)
COND, STYLE = 6, 4


def _net(cfg=CFG, seed=0):
    torch.manual_seed(seed)
    return StyleAdaptiveDecoder(cfg, COND, STYLE).eval()


def _inputs(b=2, n=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, n, N_MELS, generator=g)
    cond = torch.randn(b, n, COND, generator=g)
    style = torch.randn(b, n, STYLE, generator=g)
    mask = torch.ones(b, n, dtype=torch.bool)
    mask[1, n - 3:] = False
    return x, cond, style, mask


def test_identity_modulation_is_layer_norm():
    norm = MelStyleAdaptiveNorm(10, 3)
    with torch.no_grad():
        norm.gamma.weight.zero_()
        norm.gamma.bias.fill_(1.0)
        norm.beta.weight.zero_()
        norm.beta.bias.zero_()
    m = torch.randn(4, 7, 10)
    s = torch.randn(4, 7, 3)
    ref = F.layer_norm(m, (10,), eps=NORM_EPS)
    assert torch.allclose(norm(m, s), ref, atol=1e-6)


def test_constant_frame_gives_beta():
    norm = MelStyleAdaptiveNorm(10, 3)
    m = torch.full((1, 5, 10), 0.5)
    s = torch.randn(1, 5, 3)
    assert torch.allclose(norm(m, s), norm.beta(s), atol=1e-6)


def test_normalised_term_has_zero_mean_unit_std():
    m = torch.randn(3, 9, 32) * 5 + 2
    n = MelStyleAdaptiveNorm.normalize(m)
    assert torch.allclose(n.mean(-1), torch.zeros(3, 9), atol=1e-5)
    assert torch.allclose(n.std(-1, unbiased=False), torch.ones(3, 9), atol=1e-3)


def test_modulation_path_is_live():
    net = _net()
    x, cond, style, mask = _inputs()
    t = torch.tensor([3, 5])
    before = net(x, t, cond, style, mask)
    with torch.no_grad():
        net.layers[0].norm1.gamma.weight.add_(torch.randn_like(net.layers[0].norm1.gamma.weight) * 0.5)
    after = net(x, t, cond, style, mask)
    assert (after - before).abs().max() > 1e-3


def test_style_input_reaches_output():
    net = _net()
    x, cond, style, mask = _inputs()
    t = torch.tensor([3, 5])
    a = net(x, t, cond, style, mask)
    b = net(x, t, cond, style + torch.randn_like(style), mask)
    assert (a - b).abs().max() > 1e-4


def test_ablation_flag_removes_style_dependence():
    net = _net(CFG.replace(dec_adaptive_norm=False))
    x, cond, style, mask = _inputs()
    t = torch.tensor([3, 5])
    a = net(x, t, cond, style, mask)
    b = net(x, t, cond, torch.randn_like(style), mask)
    assert torch.equal(a, b)


def test_norm_mask_selects_sites():
    cfg = CFG.replace(dec_norm_mask="1,0,0,1")
    net = _net(cfg)
    flags = [n.adaptive for layer in net.layers for n in (layer.norm1, layer.norm2)]
    assert flags == [True, False, False, True]
    with pytest.raises(ValueError):
        _net(CFG.replace(dec_norm_mask="1,0"))


def test_output_shape_and_determinism():
    net = _net()
    x, cond, style, mask = _inputs()
    t = torch.tensor([1, 8])
    a = net(x, t, cond, style, mask)
    b = net(x, t, cond, style, mask)
    assert a.shape == x.shape
    assert torch.equal(a, b)
    assert torch.all(a[1, ~mask[1]] == 0)


def test_losses_closed_forms():
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(2, 20, N_MELS, generator=g) * 2 - 1
    mae, ssim_loss = decoder_losses(x0, x0)
    assert float(mae) == 0.0
    assert abs(float(ssim_loss)) < 1e-6
    mae, _ = decoder_losses(x0 + 1.0, x0)
    assert abs(float(mae) - 1.0) < 1e-6


def test_losses_ignore_padding():
    x0 = torch.zeros(1, 10, N_MELS)
    x0_hat = x0.clone()
    x0_hat[0, 7:] = 5.0
    mask = torch.ones(1, 10, dtype=torch.bool)
    mask[0, 7:] = False
    mae, _ = decoder_losses(x0_hat, x0, mask)
    assert float(mae) == 0.0


def test_losses_shape_mismatch():
    with pytest.raises(ValueError):
        decoder_losses(torch.zeros(3, 80), torch.zeros(4, 80))


def test_losses_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(2)
    x0 = (torch.rand(1, 12, N_MELS, generator=g, dtype=torch.float64) * 2 - 1)
    x0_hat = (x0 + 0.2 * torch.randn(x0.shape, generator=g, dtype=torch.float64)).requires_grad_(True)
    for k in range(2):
        def f(v):
            return decoder_losses(v, x0)[k]
        assert torch.autograd.gradcheck(f, (x0_hat,), eps=1e-6, atol=1e-7, rtol=1e-4)


def test_schedule_matches_vpsde_formula():
    cfg = Config()
    sched = decoder_schedule(cfg)
    assert sched.T == 8
    t = np.arange(1, 9)
    ref = 1 - np.exp(-0.1 / 8 - 0.5 * (40 - 0.1) * (2 * t - 1) / 64)
    np.testing.assert_allclose(sched.beta[1:], ref, rtol=1e-9)
    np.testing.assert_allclose(sched.alpha_bar[1:], np.cumprod(1 - ref), rtol=1e-6)  # betas are stored to 10 digits
    assert sched.alpha_bar[-1] < 1e-3


def test_schedule_is_written_into_config():
    cfg = Config()
    assert len(cfg.decoder_betas()) == 8
    np.testing.assert_allclose(cfg.decoder_betas(), vpsde_betas(8, 0.1, 40.0), rtol=1e-9)
    with pytest.raises(ValueError):
        DecoderSchedule(np.array([0.5, 1.0]))


def test_posterior_at_clean_prediction():
    sched = decoder_schedule(Config())
    x0 = torch.randn(5)
    x_t = sched.noised(x0[None], torch.tensor([4]), torch.zeros(1, 5))[0]
    mean, sd = sched.posterior(x_t, x0, 4)
    expected = sched.noised(x0[None], torch.tensor([3]), torch.zeros(1, 5))[0]
    assert torch.allclose(mean, expected, atol=1e-5)
    assert sd > 0


def test_sample_mel_seeded_and_bounded():
    net = _net()
    x, cond, style, mask = _inputs()
    sched = decoder_schedule(CFG)
    calls = []
    net.register_forward_hook(lambda *a: calls.append(1))
    a = sample_mel(net, cond, style, mask, sched, torch.Generator().manual_seed(3))
    assert len(calls) == 8
    b = sample_mel(net, cond, style, mask, sched, torch.Generator().manual_seed(3))
    c = sample_mel(net, cond, style, mask, sched, torch.Generator().manual_seed(4))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.abs().max() <= 1.0
