"""Reconstruction objective: L1 + SSIM, on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda_1: float = 1.0
    lambda_s: float = 1.0

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_1 == 0 and self.lambda_s == 0:
            raise ValueError("at least one loss weight must be positive")


def _check_pair(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def _as_batch(x):
    # accept (H, W), (C, H, W) or (B, C, H, W)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


def l1_loss(x0, xhat, weight: Optional[torch.Tensor] = None):
    _check_pair(x0, xhat)
    diff = (x0 - xhat).abs()
    if weight is None:
        return diff.mean()
    weight = weight.expand_as(diff)
    return (diff * weight).sum() / weight.sum().clamp_min(1.0)


def _gaussian_kernel(size: int, sigma: float, dtype, device):
    ax = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_map(x, y, window: int = SSIM_WINDOW, data_range: float = 1.0,
             gaussian: bool = False, sigma: float = 1.5):
    """Per-window SSIM over the valid region, shape (B, C, H-w+1, W-w+1)."""
    _check_pair(x, y)
    x, y = _as_batch(x), _as_batch(y)
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than SSIM window {window}")
    ch = x.shape[1]
    if gaussian:
        k = _gaussian_kernel(window, sigma, x.dtype, x.device)
    else:
        k = torch.full((window, window), 1.0 / window ** 2, dtype=x.dtype, device=x.device)
    k = k.expand(ch, 1, window, window)

    def filt(z):
        return F.conv2d(z, k, groups=ch)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y, **kw):
    """Mean windowed SSIM; exactly 1.0 when ``x`` and ``y`` are equal."""
    return ssim_map(x, y, **kw).mean()


def ssim_loss(x0, xhat, **kw):
    return (1.0 - ssim(x0, xhat, **kw)) / 2.0


def total_loss(x0, xhat, w: LossWeights = LossWeights(), masked_only: Optional[torch.Tensor] = None,
               **ssim_kw):
    """lambda_1 * L1 + lambda_s * L_SSIM.

    Terms with zero weight are skipped so that ``(1, 0)`` and ``(0, 1)``
    reproduce the single components exactly. ``masked_only`` is an optional
    pixel weight (1 on masked pixels) restricting the L1 term.
    """
    _check_pair(x0, xhat)
    out = None
    if w.lambda_1:
        out = l1_loss(x0, xhat, masked_only)
        if w.lambda_1 != 1.0:
            out = w.lambda_1 * out
    if w.lambda_s:
        s = ssim_loss(x0, xhat, **ssim_kw)
        if w.lambda_s != 1.0:
            s = w.lambda_s * s
        out = s if out is None else out + s
    return out
