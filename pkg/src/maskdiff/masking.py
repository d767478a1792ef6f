"""Timestep-controlled patch masking.

The timestep ``t`` sets the fraction of non-overlapping ``P x P`` patches that
are zero-filled; larger ``t`` means stronger structural occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class TimestepSpec:
    t: int
    T: int = 1000

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 1 <= self.t <= self.T:
            raise ValueError(f"timestep {self.t} outside [1, {self.T}]")


@dataclass
class MaskGrid:
    """Patch-level visibility grid, 1 = visible, 0 = masked."""

    grid: np.ndarray
    patch_size: int

    @property
    def num_masked(self) -> int:
        return int((self.grid == 0).sum())

    def to_pixels(self) -> np.ndarray:
        """Broadcast to an (Hp*P, Wp*P) pixel mask."""
        p = self.patch_size
        return np.kron(self.grid, np.ones((p, p), dtype=self.grid.dtype))


def mask_ratio(spec: TimestepSpec) -> float:
    return spec.t / (spec.T + 1)


def num_masked_patches(spec: TimestepSpec, n_patches: int) -> int:
    """``floor(r_t * N)`` in integer arithmetic."""
    return (spec.t * n_patches) // (spec.T + 1)


def sample_mask_grid(hp: int, wp: int, ratio: float, rng: np.random.Generator,
                     patch_size: int = 8, num_masked: int | None = None) -> MaskGrid:
    """Mask exactly ``floor(ratio * hp * wp)`` patches chosen uniformly without replacement.

    ``num_masked`` overrides the float floor when the caller has an exact count.
    """
    if hp < 1 or wp < 1:
        raise ValueError("grid dimensions must be >= 1")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must lie in [0, 1), got {ratio}")
    n = hp * wp
    k = int(np.floor(ratio * n)) if num_masked is None else num_masked
    flat = np.ones(n, dtype=np.uint8)
    if k:
        flat[rng.choice(n, size=k, replace=False)] = 0
    return MaskGrid(flat.reshape(hp, wp), patch_size)


def sample_timestep_mask(h: int, w: int, t: int, T: int, patch_size: int,
                         rng: np.random.Generator) -> MaskGrid:
    """Mask grid for an ``h x w`` image at timestep ``t``."""
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    spec = TimestepSpec(t, T)
    hp, wp = h // patch_size, w // patch_size
    return sample_mask_grid(hp, wp, mask_ratio(spec), rng, patch_size,
                            num_masked=num_masked_patches(spec, hp * wp))


def apply_mask(img, grid: MaskGrid):
    """Zero-fill masked patches: ``x_t = m_t * x_0``.

    ``img`` is either an (H, W, C) numpy array or a (..., H, W) torch tensor.
    Visible pixels are returned bit-identical.
    """
    pix = grid.to_pixels()
    if isinstance(img, torch.Tensor):
        h, w = img.shape[-2:]
        if (h, w) != pix.shape:
            raise ValueError(f"mask {pix.shape} does not match image {(h, w)}")
        m = torch.from_numpy(pix.astype(bool)).to(img.device)
        return torch.where(m, img, torch.zeros((), dtype=img.dtype, device=img.device))
    img = np.asarray(img)
    if img.shape[:2] != pix.shape:
        raise ValueError(f"mask {pix.shape} does not match image {img.shape[:2]}")
    m = pix.astype(bool)
    if img.ndim == 3:
        m = m[:, :, None]
    return np.where(m, img, np.zeros((), dtype=img.dtype))
