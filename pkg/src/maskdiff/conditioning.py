"""Conditioning path: timestep embedding, frozen image-feature providers,
additive fusion ``c = phi_t(t) + phi_z(z)`` and adaLN-Zero modulation."""

from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

STUB_SEED = 20240613
STUB_POOL = 16


class ProviderError(RuntimeError):
    pass


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Fixed sin/cos frequency features of integer timesteps, shape (B, dim)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    """phi_t: sinusoidal features followed by a two-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        if dim % 2 or freq_dim % 2:
            raise ValueError("timestep embedding widths must be even")
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < 0):
            raise ValueError("timesteps must be non-negative")
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(w.dtype))


class ConditionFusion(nn.Module):
    """c = phi_t(t) + phi_z(z); the z-term is dropped when z is absent.

    phi_z is zero-initialised so that enabling a provider does not change the
    untrained network.
    """

    def __init__(self, cond_dim: int, z_dim: int = 0, freq_dim: int = 256):
        super().__init__()
        self.cond_dim = cond_dim
        self.z_dim = z_dim
        self.phi_t = TimestepEmbedder(cond_dim, freq_dim)
        self.phi_z = nn.Linear(z_dim, cond_dim) if z_dim > 0 else None

    def forward(self, t: torch.Tensor, z: Optional[torch.Tensor] = None) -> torch.Tensor:
        c = self.phi_t(t)
        if z is not None:
            if self.phi_z is None:
                raise ValueError("model was built without a condition-feature projection")
            if z.shape[-1] != self.z_dim:
                raise ValueError(f"condition feature width {z.shape[-1]} != {self.z_dim}")
            c = c + self.phi_z(z.to(c.dtype))
        return c


def fuse_condition(t_emb: torch.Tensor, z_emb: Optional[torch.Tensor]) -> torch.Tensor:
    """Additive fusion of already-projected embeddings."""
    if z_emb is None:
        return t_emb
    if t_emb.shape != z_emb.shape:
        raise ValueError(f"condition widths differ: {tuple(t_emb.shape)} vs {tuple(z_emb.shape)}")
    return t_emb + z_emb


def channel_layer_norm(u: torch.Tensor, eps: float = 1e-6, channel_dim: int = 1) -> torch.Tensor:
    """LayerNorm over channels at every spatial position (no affine)."""
    if channel_dim in (-1, u.dim() - 1):
        return F.layer_norm(u, u.shape[-1:], eps=eps)
    return F.layer_norm(u.movedim(channel_dim, -1), u.shape[channel_dim:channel_dim + 1], eps=eps).movedim(-1, channel_dim)


def adaln_modulate(u, gamma, beta, gate=None, eps: float = 1e-6, channels_last: bool = False):
    """gate * (gamma * LN(u) + beta) with (B, C) modulation vectors.

    ``u`` is NCHW, or NHWC when ``channels_last``.
    """
    if channels_last:
        shape = (gamma.shape[0], 1, 1, gamma.shape[1])
        normed = F.layer_norm(u, u.shape[-1:], eps=eps)
    else:
        shape = (gamma.shape[0], gamma.shape[1], 1, 1)
        normed = channel_layer_norm(u, eps)
    if u.shape[-1 if channels_last else 1] != gamma.shape[1]:
        raise ValueError(f"modulation width {gamma.shape[1]} does not match feature width")
    out = gamma.view(shape) * normed + beta.view(shape)
    if gate is not None:
        out = gate.view(shape) * out
    return out


class AdaLNZero(nn.Module):
    """Projects c to per-channel (gamma, beta, gate).

    The projection is zero-initialised; gamma is parameterised as ``1 + W c``
    so that a non-zero gate sees a normalised (not annihilated) input.
    """

    def __init__(self, cond_dim: int, width: int):
        super().__init__()
        self.width = width
        self.proj = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 3 * width))
        nn.init.zeros_(self.proj[1].weight)
        nn.init.zeros_(self.proj[1].bias)

    def forward(self, c: torch.Tensor):
        scale, beta, gate = self.proj(c).chunk(3, dim=-1)
        return 1.0 + scale, beta, gate


# --------------------------------------------------------------------------
# frozen image-level feature providers
# --------------------------------------------------------------------------


@dataclass
class ConditionSource:
    provider_id: str = "none"  # none | stub | external
    feature_dim: int = 1024
    feature_dir: Optional[str] = None
    command: Optional[list] = None

    def __post_init__(self):
        if self.provider_id not in ("none", "stub", "external"):
            raise ValueError(f"unknown condition provider {self.provider_id!r}")

    @property
    def enabled(self) -> bool:
        return self.provider_id != "none"


class StubEncoder:
    """Frozen random linear map of 16x16-pooled pixels to ``feature_dim``."""

    def __init__(self, feature_dim: int = 1024, channels: int = 3, seed: int = STUB_SEED):
        rng = np.random.default_rng(seed)
        fan_in = STUB_POOL * STUB_POOL * channels
        self.weight = torch.from_numpy(
            rng.standard_normal((fan_in, feature_dim)) / math.sqrt(fan_in)
        )
        self.feature_dim = feature_dim

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(x.to(torch.float64), STUB_POOL).flatten(1)
        return (pooled @ self.weight).to(x.dtype)


_STUBS: dict = {}


def _stub(feature_dim: int, channels: int) -> StubEncoder:
    key = (feature_dim, channels)
    if key not in _STUBS:
        _STUBS[key] = StubEncoder(feature_dim, channels)
    return _STUBS[key]


def read_feature_file(path, feature_dim: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ProviderError(f"missing condition feature file {path}")
    v = np.fromfile(path, dtype="<f4")
    if v.size != feature_dim:
        raise ProviderError(f"{path}: expected {feature_dim} floats, found {v.size}")
    return v


def write_feature_file(path, vec) -> None:
    np.asarray(vec, dtype="<f4").tofile(path)


def _external_feature(pixels: np.ndarray, source_id: str, source: ConditionSource) -> np.ndarray:
    stem = Path(source_id).stem
    if source.feature_dir is not None:
        return read_feature_file(Path(source.feature_dir) / f"{stem}.feat", source.feature_dim)
    if source.command:
        from PIL import Image

        with tempfile.TemporaryDirectory() as tmp:
            png = Path(tmp) / f"{stem}.png"
            Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)).save(png)
            try:
                res = subprocess.run([*source.command, str(png)], capture_output=True, check=True)
            except (OSError, subprocess.CalledProcessError) as exc:
                raise ProviderError(f"external provider failed: {exc}") from exc
        v = np.frombuffer(res.stdout, dtype="<f4")
        if v.size != source.feature_dim:
            raise ProviderError(f"external provider returned {v.size} floats, expected {source.feature_dim}")
        return v.copy()
    raise ProviderError("external provider needs feature_dir or command")


def encode_condition_batch(x: torch.Tensor, source: ConditionSource,
                           source_ids=None) -> Optional[torch.Tensor]:
    """Image-level condition features for an NCHW batch of clean images."""
    if not source.enabled:
        return None
    if source.provider_id == "stub":
        return _stub(source.feature_dim, x.shape[1])(x)
    if source_ids is None:
        raise ProviderError("external provider needs source ids")
    pix = x.detach().permute(0, 2, 3, 1).cpu().numpy()
    feats = [_external_feature(p, sid, source) for p, sid in zip(pix, source_ids)]
    return torch.from_numpy(np.stack(feats)).to(x.dtype)


def encode_condition_feature(img, source: ConditionSource) -> Optional[np.ndarray]:
    """Feature for a single ImagePatch, or None when conditioning is off."""
    if not source.enabled:
        return None
    x = torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1)))[None]
    out = encode_condition_batch(x.to(torch.float32), source, [img.source_id])
    return out[0].numpy()
