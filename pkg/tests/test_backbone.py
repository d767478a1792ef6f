import numpy as np
import pytest
import torch
import torch.nn.functional as F

from maskdiff.backbone import (DEFAULT_TAPS, GRN, ConvNeXtBlock, Downsample, ModelConfig, SkipFuse,
                               Upsample, block_forward, build_model, count_parameters, preset)

from conftest import randomize_
from gradcheck import central_diff, max_rel_err


def _meta_params(name):
    return count_parameters(build_model(preset(name), device="meta"))


@pytest.mark.parametrize("name,target", [("base", 130.75e6), ("large", 516.71e6)])
def test_preset_parameter_counts(name, target):
    n = _meta_params(name)
    assert abs(n - target) / target < 0.05


def test_block_count_and_tap_width():
    for name in ("tiny", "base", "large"):
        cfg = preset(name)
        assert cfg.total_blocks == 26
        assert cfg.num_decoder_blocks == 10
        m = build_model(cfg, device="meta")
        assert len(m.all_blocks()) == 26
    assert preset("large").tap_width(DEFAULT_TAPS) == 4096
    assert preset("base").tap_width(DEFAULT_TAPS) == 2048


def test_decoder_block_levels():
    cfg = preset("base")
    levels = [cfg.decoder_block_stage(i) for i in range(1, 11)]
    assert levels == [4, 4, 3, 3, 2, 2, 2, 1, 1, 0]
    with pytest.raises(ValueError):
        cfg.decoder_block_stage(11)
    with pytest.raises(ValueError):
        cfg.decoder_block_stage(0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(channels=[1, 2, 3])
    with pytest.raises(ValueError):
        preset("tiny", input_size=48)
    with pytest.raises(ValueError):
        preset("huge")


def test_forward_shapes_and_taps(tiny_model):
    x = torch.rand(2, 3, 64, 64)
    t = torch.tensor([1, 500])
    xhat, taps = tiny_model(x, t, taps=range(1, 11))
    assert xhat.shape == x.shape
    cfg = tiny_model.config
    for b, f in taps.items():
        lvl = cfg.decoder_block_stage(b)
        assert f.shape == (2, cfg.channels[lvl], 64 >> lvl, 64 >> lvl)


def test_truncated_forward_matches_full(tiny_model):
    m = randomize_(build_model(preset("tiny"), seed=1), seed=2, scale=0.05)
    x = torch.rand(1, 3, 64, 64)
    t = torch.tensor([50])
    _, full = m(x, t, taps=[3, 5])
    none, part = m(x, t, taps=[3, 5], reconstruct=False)
    assert none is None
    for b in (3, 5):
        assert torch.equal(full[b], part[b])


def test_forward_rejects_bad_input(tiny_model):
    with pytest.raises(ValueError):
        tiny_model(torch.rand(1, 3, 48, 48), torch.tensor([1]))
    with pytest.raises(ValueError):
        tiny_model(torch.rand(1, 3, 64, 64), torch.tensor([1]), taps=[11])


def test_adaln_zero_identity_every_block(tiny_config):
    m = build_model(tiny_config, seed=0)
    seen = []

    def hook(mod, args, out):
        seen.append(float((out - args[0]).abs().max()))

    handles = [b.register_forward_hook(hook) for b in m.all_blocks()]
    with torch.no_grad():
        m(torch.rand(2, 3, 64, 64), torch.tensor([3, 900]), torch.randn(2, 1024))
    for h in handles:
        h.remove()
    assert len(seen) == 26 and max(seen) == 0.0


def test_build_is_seed_deterministic(tiny_config):
    a = build_model(tiny_config, seed=5).state_dict()
    b = build_model(tiny_config, seed=5).state_dict()
    c = build_model(tiny_config, seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_downsample_upsample_inverse():
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    down, up = Downsample(3, 12).double(), Upsample(12, 3).double()
    with torch.no_grad():
        down.proj.weight.copy_(torch.eye(12).view(12, 12, 1, 1))
        down.proj.bias.zero_()
        up.proj.weight.copy_(torch.eye(12).view(12, 12, 1, 1))
        up.proj.bias.zero_()
    y = down(x)
    assert y.shape == (2, 12, 4, 4)
    assert torch.equal(y, F.pixel_unshuffle(x, 2))
    assert torch.equal(up(y), x)
    with pytest.raises(ValueError):
        down(torch.randn(1, 3, 7, 8, dtype=torch.float64))


def test_skip_fuse_selects_decoder_path():
    fuse = SkipFuse(4).double()
    with torch.no_grad():
        fuse.proj.weight.copy_(torch.cat([torch.eye(4), torch.zeros(4, 4)], 1).view(4, 8, 1, 1))
        fuse.proj.bias.zero_()
    dec, enc = torch.randn(1, 4, 5, 5, dtype=torch.float64), torch.randn(1, 4, 5, 5, dtype=torch.float64)
    assert torch.equal(fuse(dec, enc), dec)
    with pytest.raises(ValueError):
        fuse(dec, enc[..., :4])


def test_grn_reference():
    g = GRN(3).double()
    with torch.no_grad():
        g.weight.copy_(torch.tensor([0.5, -1.0, 2.0]))
        g.bias.copy_(torch.tensor([0.1, 0.0, -0.2]))
    x = torch.randn(2, 4, 4, 3, dtype=torch.float64)
    # reference: per-channel L2 over space, divided by its channel mean
    gx = np.sqrt((x.numpy() ** 2).sum(axis=(1, 2), keepdims=True) + 1e-12)
    nx = gx / (gx.mean(-1, keepdims=True) + 1e-6)
    ref = x.numpy() + g.weight.detach().numpy() * (x.numpy() * nx) + g.bias.detach().numpy()
    assert np.allclose(g(x).detach().numpy(), ref, atol=1e-12)


def test_block_width_check():
    blk = ConvNeXtBlock(4, 8)
    with pytest.raises(ValueError):
        blk(torch.randn(1, 5, 8, 8), torch.randn(1, 8))


def test_block_gradient_finite_differences():
    torch.manual_seed(0)
    blk = randomize_(ConvNeXtBlock(4, 6, mlp_ratio=2).double(), seed=3, scale=0.3)
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    c = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 8, 8, dtype=torch.float64)

    def f():
        return (block_forward(x, c, blk) * w).sum()

    params = [x, c] + list(blk.parameters())
    f().backward()
    analytic = [p.grad.clone() for p in params]
    numeric = central_diff(f, [p.data for p in params], eps=1e-6)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_up_and_fuse_gradients():
    up = randomize_(Upsample(4, 2).double(), seed=1)
    fuse = randomize_(SkipFuse(2).double(), seed=2)
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    e = torch.randn(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)

    def f():
        return (fuse(up(x), e) ** 2).sum()

    f().backward()
    numeric = central_diff(f, [x.data, e.data], eps=1e-6)
    assert max_rel_err([x.grad, e.grad], numeric) < 1e-4
