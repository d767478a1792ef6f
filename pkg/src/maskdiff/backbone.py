"""ConvNeXt U-Net used as the masked-diffusion reconstruction network.

Five encoder stages (each followed by pixel-unshuffle downsampling), a
bottleneck at 1/32 resolution, and five mirrored decoder stages that
pixel-shuffle upsample, fuse the same-resolution encoder skip with a 1x1
convolution and run their ConvNeXt blocks. Every block is conditioned with
adaLN-Zero on the fused timestep / image-feature vector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import AdaLNZero, ConditionFusion, adaln_modulate

DEFAULT_TAPS = (1, 3, 5, 6, 8, 9)


@dataclass
class ModelConfig:
    channels: List[int] = field(default_factory=lambda: [256, 256, 256, 512, 512, 1024])
    encoder_depths: List[int] = field(default_factory=lambda: [1, 2, 3, 2, 2])
    bottleneck_depth: int = 6
    decoder_depths: List[int] = field(default_factory=lambda: [2, 2, 3, 2, 1])
    mlp_ratio: int = 3
    input_size: int = 256
    in_channels: int = 3
    cond_dim: int = 1536
    z_dim: int = 1024
    freq_dim: int = 256

    def __post_init__(self):
        self.channels = list(self.channels)
        self.encoder_depths = list(self.encoder_depths)
        self.decoder_depths = list(self.decoder_depths)
        if len(self.channels) != 6:
            raise ValueError(f"need 6 stage widths, got {len(self.channels)}")
        if len(self.encoder_depths) != 5 or len(self.decoder_depths) != 5:
            raise ValueError("encoder and decoder need 5 stages each")
        if self.input_size % 32:
            raise ValueError(f"input_size {self.input_size} not divisible by 32")
        if self.cond_dim % 2:
            raise ValueError("cond_dim must be even")

    @property
    def total_blocks(self) -> int:
        return sum(self.encoder_depths) + self.bottleneck_depth + sum(self.decoder_depths)

    @property
    def num_decoder_blocks(self) -> int:
        return sum(self.decoder_depths)

    def decoder_block_width(self, index: int) -> int:
        """Width of decoder block ``index`` (1-based, execution order)."""
        return self.channels[self.decoder_block_stage(index)]

    def decoder_block_stage(self, index: int) -> int:
        """Resolution level (0 = full) of decoder block ``index``."""
        if not 1 <= index <= self.num_decoder_blocks:
            raise ValueError(f"decoder block index {index} outside [1, {self.num_decoder_blocks}]")
        n = 0
        for i, depth in enumerate(self.decoder_depths):
            n += depth
            if index <= n:
                return 4 - i
        raise AssertionError

    def tap_width(self, blocks: Sequence[int]) -> int:
        return sum(self.decoder_block_width(b) for b in blocks)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "base": dict(channels=[256, 256, 256, 512, 512, 1024], cond_dim=1536, input_size=256),
    "large": dict(channels=[512, 512, 512, 1024, 1024, 2048], cond_dim=3072, input_size=256),
    "tiny": dict(channels=[32, 32, 32, 64, 64, 128], cond_dim=128, input_size=64),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw.update(overrides)
    return ModelConfig(**kw)


class GRN(nn.Module):
    """Global response normalization (ConvNeXt V2) on channels-last maps."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.zeros(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        # eps inside the root keeps the gradient finite for all-zero channels
        gx = torch.sqrt(x.pow(2).sum(dim=(1, 2), keepdim=True) + self.eps ** 2)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return x + self.weight * (x * nx) + self.bias


class ConvNeXtBlock(nn.Module):
    """dwconv7x7 -> adaLN -> expand -> GELU -> GRN -> contract -> gate -> residual.

    The pointwise MLP runs channels-last as Linear layers.
    """

    def __init__(self, dim: int, cond_dim: int, mlp_ratio: int = 3):
        super().__init__()
        hidden = mlp_ratio * dim
        self.dim = dim
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.ada = AdaLNZero(cond_dim, dim)
        self.pw1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.grn = GRN(hidden)
        self.pw2 = nn.Linear(hidden, dim)

    def forward(self, x, c):
        if x.shape[1] != self.dim:
            raise ValueError(f"block width {self.dim} got input with {x.shape[1]} channels")
        gamma, beta, gate = self.ada(c)
        h = self.dwconv(x).permute(0, 2, 3, 1)
        h = adaln_modulate(h, gamma, beta, channels_last=True)
        h = self.pw2(self.grn(self.act(self.pw1(h))))
        h = h.permute(0, 3, 1, 2)
        return x + gate[:, :, None, None] * h


class Downsample(nn.Module):
    """Pixel-unshuffle (2x2 -> 4x channels) then 1x1 projection."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.proj = nn.Conv2d(4 * dim_in, dim_out, 1)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"downsample needs even spatial dims, got {tuple(x.shape[-2:])}")
        return self.proj(F.pixel_unshuffle(x, 2))


class Upsample(nn.Module):
    """1x1 projection to 4x target width then pixel-shuffle."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.proj = nn.Conv2d(dim_in, 4 * dim_out, 1)

    def forward(self, x):
        return F.pixel_shuffle(self.proj(x), 2)


class SkipFuse(nn.Module):
    """Concatenate decoder and encoder maps, compress back with a 1x1 conv."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * dim, dim, 1)

    def forward(self, dec, enc):
        if dec.shape[-2:] != enc.shape[-2:]:
            raise ValueError(f"skip spatial mismatch {tuple(dec.shape[-2:])} vs {tuple(enc.shape[-2:])}")
        return self.proj(torch.cat([dec, enc], dim=1))


class ConvNeXtUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        ch = cfg.channels
        self.cond = ConditionFusion(cfg.cond_dim, cfg.z_dim, cfg.freq_dim)
        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)

        def blocks(n, dim):
            return nn.ModuleList(ConvNeXtBlock(dim, cfg.cond_dim, cfg.mlp_ratio) for _ in range(n))

        self.enc_blocks = nn.ModuleList(blocks(d, ch[i]) for i, d in enumerate(cfg.encoder_depths))
        self.downs = nn.ModuleList(Downsample(ch[i], ch[i + 1]) for i in range(5))
        self.mid_blocks = blocks(cfg.bottleneck_depth, ch[5])
        # decoder stage j works at level 4 - j
        self.ups = nn.ModuleList(Upsample(ch[5 - j], ch[4 - j]) for j in range(5))
        self.skips = nn.ModuleList(SkipFuse(ch[4 - j]) for j in range(5))
        self.dec_blocks = nn.ModuleList(blocks(d, ch[4 - j]) for j, d in enumerate(cfg.decoder_depths))
        self.head = nn.Conv2d(ch[0], cfg.in_channels, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for m in self.modules():
            if isinstance(m, AdaLNZero):
                nn.init.zeros_(m.proj[1].weight)
                nn.init.zeros_(m.proj[1].bias)
        if self.cond.phi_z is not None:
            nn.init.zeros_(self.cond.phi_z.weight)
            nn.init.zeros_(self.cond.phi_z.bias)

    def all_blocks(self) -> List[ConvNeXtBlock]:
        out = [b for stage in self.enc_blocks for b in stage]
        out += list(self.mid_blocks)
        out += [b for stage in self.dec_blocks for b in stage]
        return out

    def decoder_blocks(self) -> List[ConvNeXtBlock]:
        return [b for stage in self.dec_blocks for b in stage]

    def condition(self, t, z=None):
        return self.cond(t, z)

    def forward(self, x, t, z=None, taps: Optional[Sequence[int]] = None,
                reconstruct: bool = True):
        """Returns ``(x0_hat, {block_index: activation})``.

        With ``reconstruct=False`` the decoder stops after the last requested
        tap and ``x0_hat`` is None.
        """
        cfg = self.config
        taps = sorted(set(taps or ()))
        for b in taps:
            cfg.decoder_block_stage(b)
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by 32")
        c = self.cond(t, z)
        h = self.stem(x.contiguous(memory_format=torch.channels_last))
        skips = []
        for stage, down in zip(self.enc_blocks, self.downs):
            for blk in stage:
                h = blk(h, c)
            skips.append(h)
            h = down(h)
        for blk in self.mid_blocks:
            h = blk(h, c)
        collected: Dict[int, torch.Tensor] = {}
        last = taps[-1] if taps else None
        idx = 0
        for j, stage in enumerate(self.dec_blocks):
            h = self.skips[j](self.ups[j](h), skips[4 - j])
            for blk in stage:
                h = blk(h, c)
                idx += 1
                if idx in taps:
                    collected[idx] = h
                if not reconstruct and idx == last:
                    return None, collected
        return self.head(h), collected


def build_model(config: ModelConfig, seed: int = 0, device=None) -> ConvNeXtUNet:
    """Deterministically initialised model; ``device='meta'`` builds shapes only."""
    if device is not None and str(device) == "meta":
        with torch.device("meta"):
            return ConvNeXtUNet(config)
    # channels-last is markedly faster for the depthwise convolutions on CPU
    devices = [torch.device(device)] if device is not None and torch.device(device).type == "cuda" else []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        model = ConvNeXtUNet(config).to(memory_format=torch.channels_last)
    return model.to(device) if device is not None else model


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def block_forward(x, c, block: ConvNeXtBlock):
    """Functional entry point for a single conditioned ConvNeXt block."""
    return block(x, c)
