import math

import numpy as np
import pytest
import torch

from maskdiff.objective import LossWeights, l1_loss, ssim, ssim_loss, ssim_map, total_loss

from gradcheck import central_diff, max_rel_err


def _img(seed, shape=(1, 3, 32, 32), dtype=torch.float64):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_l1_examples():
    x = _img(0)
    assert l1_loss(x, x) == 0
    assert l1_loss(torch.zeros(1, 3, 8, 8), torch.ones(1, 3, 8, 8)) == 1.0
    y = 0.25 + 0.5 * _img(1)
    assert torch.isclose(l1_loss(y, y + 0.5), torch.tensor(0.5, dtype=y.dtype))


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 9))


def _ssim_bruteforce(x, y, win=11, c1=1e-4, c2=9e-4):
    """Explicit double loop over windows, single channel."""
    h, w = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            a = x[i:i + win, j:j + win].ravel()
            b = y[i:i + win, j:j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
            cov = ((a - ma) * (b - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_bruteforce_windows():
    rng = np.random.default_rng(0)
    x = rng.random((16, 16))
    y = np.clip(x + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    got = float(ssim(torch.from_numpy(x)[None, None], torch.from_numpy(y)[None, None]))
    assert got == pytest.approx(_ssim_bruteforce(x, y), abs=1e-12)


def test_ssim_self_and_symmetry():
    for s in range(10):
        x, y = _img(s), _img(s + 100)
        assert ssim(x, x).item() == 1.0
        assert ssim(x, y).item() == pytest.approx(ssim(y, x).item(), abs=1e-15)


def test_ssim_independent_noise_near_zero():
    vals = [ssim(_img(2 * s, (1, 1, 64, 64)), _img(2 * s + 1, (1, 1, 64, 64))).item() for s in range(100)]
    assert max(abs(v) for v in vals) < 0.2


def test_ssim_scale_invariance_approximate():
    # stabilisers make this approximate; holds to 1e-3 for closely matched mid-range pairs
    for s in range(5):
        x = 0.25 + 0.25 * _img(s, (1, 3, 64, 64))
        y = x + 0.01 * torch.randn(x.shape, generator=torch.Generator().manual_seed(s), dtype=x.dtype)
        assert abs(ssim(2 * x, 2 * y).item() - ssim(x, y).item()) < 1e-3


def test_ssim_window_errors():
    with pytest.raises(ValueError):
        ssim(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8))
    # smaller window is allowed
    assert ssim_map(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8), window=7).shape == (1, 1, 2, 2)


def test_ssim_gaussian_option_self_similarity():
    x = _img(3)
    assert ssim(x, x, gaussian=True).item() == pytest.approx(1.0, abs=1e-15)


def test_ssim_loss_bounds_and_monotone():
    x = _img(4)
    assert ssim_loss(x, x).item() == 0.0
    # perfectly anti-correlated zero-mean patterns approach ssim = -1
    a = torch.zeros(1, 1, 22, 22, dtype=torch.float64)
    a[..., ::2, :] = 1.0
    assert ssim_loss(a, 1 - a).item() > 0.99
    assert ssim_loss(a, 1 - a).item() <= 1.0
    y1 = (x + 0.05 * _img(5)).clamp(0, 1)
    y2 = (x + 0.3 * _img(6)).clamp(0, 1)
    assert (ssim(x, y1) > ssim(x, y2)) == (ssim_loss(x, y1) < ssim_loss(x, y2))


def test_total_loss_weight_selection_bitwise():
    x, y = _img(7), _img(8)
    assert torch.equal(total_loss(x, y, LossWeights(1, 0)), l1_loss(x, y))
    assert torch.equal(total_loss(x, y, LossWeights(0, 1)), ssim_loss(x, y))
    both = total_loss(x, y, LossWeights(1, 1))
    assert both.item() == pytest.approx((l1_loss(x, y) + ssim_loss(x, y)).item(), abs=1e-15)


def test_total_loss_linearity_and_nonnegativity():
    x, y = _img(9), _img(10)
    base = total_loss(x, y, LossWeights(0.7, 0.3)).item()
    assert total_loss(x, y, LossWeights(2.1, 0.9)).item() == pytest.approx(3 * base, rel=1e-12)
    assert base >= 0
    assert total_loss(x, x, LossWeights(1, 1)).item() == 0.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1)


def test_total_loss_gradient_finite_differences():
    x0 = _img(11, (1, 1, 8, 8))
    xhat = _img(12, (1, 1, 8, 8)).requires_grad_()
    w = LossWeights(1.0, 1.0)
    kw = dict(window=7)
    total_loss(x0, xhat, w, **kw).backward()
    num = central_diff(lambda: total_loss(x0, xhat, w, **kw), [xhat.data])
    assert max_rel_err([xhat.grad], num) < 1e-4


def test_masked_only_variant_restricts_l1():
    x0 = torch.zeros(1, 1, 16, 16)
    xhat = torch.ones(1, 1, 16, 16)
    hidden = torch.zeros(1, 1, 16, 16)
    hidden[..., :8, :] = 1
    xhat[..., 8:, :] = 0  # error only where hidden
    assert l1_loss(x0, xhat, hidden).item() == 1.0
