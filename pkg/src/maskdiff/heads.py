"""Segmentation heads trained on frozen dense features.

Three heads share one training loop:

* ``linear_probe`` - per-pixel 1x1 projection of the fused feature map;
* ``light``        - per-scale 1x1 projection to 256 channels followed by a
  top-down Mix-Conv fusion (coarsest to finest);
* ``sota``         - 3x3 reduction to 512 channels and a four-stage
  double-conv decoder (256, 128, 64, 16) on the fused feature map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import DEFAULT_TAPS
from .data import PatchDataset, stack_masks
from .features import DEFAULT_T_FIX, FeatureExtractor, cached_pyramids, fuse_maps
from .pretrain import Checkpoint

logger = logging.getLogger(__name__)

HEAD_FORMAT = "maskdiff-head/1"
HEAD_KINDS = ("linear_probe", "light", "sota")


@dataclass
class HeadConfig:
    kind: str = "linear_probe"
    num_classes: int = 2
    unified_dim: int = 256
    epochs: int = 150
    lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.01
    schedule: str = "cosine"
    batch_size: int = 8
    seed: int = 0
    t_fix: int = DEFAULT_T_FIX
    blocks: List[int] = field(default_factory=lambda: list(DEFAULT_TAPS))
    use_condition: bool = True

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; choose from {HEAD_KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.blocks = list(self.blocks)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class LinearProbe(nn.Module):
    def __init__(self, in_width: int, num_classes: int):
        super().__init__()
        self.in_width = in_width
        self.proj = nn.Conv2d(in_width, num_classes, 1)

    def forward(self, f):
        if f.shape[1] != self.in_width:
            raise ValueError(f"probe expects {self.in_width} channels, got {f.shape[1]}")
        return self.proj(f)


def conv_bn_relu(cin, cout, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class MixConv(nn.Module):
    """Two 3x3 conv-BN layers with a residual connection.

    Plain BatchNorm stands in for conditional BN; there is no downstream
    conditioning signal to drive it.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(dim)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(x + h)


class LightHead(nn.Module):
    """Top-down multi-scale fusion head.

    ``in_widths`` follow the pyramid's block order; entries are fused from the
    coarsest to the finest resolution (ties keep block order). A single-entry
    pyramid degrades to projection + classifier.
    """

    def __init__(self, in_widths: Sequence[int], num_classes: int, dim: int = 256):
        super().__init__()
        self.in_widths = list(in_widths)
        self.proj = nn.ModuleList(nn.Conv2d(w, dim, 1) for w in self.in_widths)
        n = len(self.in_widths)
        self.reduce = nn.ModuleList(nn.Conv2d(2 * dim, dim, 1) for _ in range(n - 1))
        self.mix = nn.ModuleList(MixConv(dim) for _ in range(n - 1))
        self.classifier = nn.Conv2d(dim, num_classes, 1)

    def forward(self, maps: Sequence[torch.Tensor], out_size: Optional[int] = None):
        if len(maps) != len(self.proj):
            raise ValueError(f"head expects {len(self.proj)} pyramid entries, got {len(maps)}")
        feats = [p(m) for p, m in zip(self.proj, maps)]
        order = sorted(range(len(feats)), key=lambda i: (feats[i].shape[-1], i))
        y = feats[order[0]]
        for step, i in enumerate(order[1:]):
            f = feats[i]
            if y.shape[-2:] != f.shape[-2:]:
                y = F.interpolate(y, size=f.shape[-2:], mode="bilinear", align_corners=False)
            y = self.mix[step](self.reduce[step](torch.cat([y, f], dim=1)))
        logits = self.classifier(y)
        if out_size is not None and logits.shape[-1] != out_size:
            logits = F.interpolate(logits, size=(out_size, out_size), mode="bilinear", align_corners=False)
        return logits


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(conv_bn_relu(cin, cout), conv_bn_relu(cout, cout))


class SotaHead(nn.Module):
    widths = (256, 128, 64, 16)

    def __init__(self, in_width: int, num_classes: int, reduce_to: int = 512):
        super().__init__()
        self.in_width = in_width
        self.stem = conv_bn_relu(in_width, reduce_to)
        chans = (reduce_to,) + self.widths
        self.blocks = nn.Sequential(*(DoubleConv(a, b) for a, b in zip(chans, chans[1:])))
        self.classifier = nn.Conv2d(self.widths[-1], num_classes, 3, padding=1)

    def forward(self, f):
        if f.shape[1] != self.in_width:
            raise ValueError(f"head expects {self.in_width} channels, got {f.shape[1]}")
        return self.classifier(self.blocks(self.stem(f)))


class SegmentationHead(nn.Module):
    """Uniform interface: tapped maps (block order) + label size -> logits."""

    def __init__(self, kind: str, in_widths: Sequence[int], num_classes: int, unified_dim: int = 256):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.in_widths = list(in_widths)
        self.num_classes = num_classes
        self.unified_dim = unified_dim
        if kind == "linear_probe":
            self.net = LinearProbe(sum(in_widths), num_classes)
        elif kind == "light":
            self.net = LightHead(in_widths, num_classes, unified_dim)
        else:
            self.net = SotaHead(sum(in_widths), num_classes)

    def forward(self, maps: Sequence[torch.Tensor], out_size: int):
        if self.kind == "light":
            return self.net(maps, out_size)
        if self.kind == "linear_probe":
            return self._probe_multiscale(maps, out_size)
        return self.net(fuse_maps(maps, out_size))

    def _probe_multiscale(self, maps, out_size):
        # bilinear resizing is channel-wise linear, so projecting each entry at
        # its native resolution and resizing the logits equals probing the
        # fused map, at a fraction of the cost
        conv = self.net.proj
        if sum(m.shape[1] for m in maps) != self.net.in_width:
            raise ValueError(f"probe expects {self.net.in_width} channels")
        weights = torch.split(conv.weight, [m.shape[1] for m in maps], dim=1)
        out = conv.bias.view(1, -1, 1, 1)
        for m, w in zip(maps, weights):
            y = F.conv2d(m, w)
            if y.shape[-1] != out_size:
                y = F.interpolate(y, size=(out_size, out_size), mode="bilinear", align_corners=False)
            out = out + y
        return out


def linear_probe_forward(f, probe: LinearProbe):
    """Logits from a fused (B, C_in, H, W) or (C_in, H, W) feature map."""
    return probe(f if f.dim() == 4 else f[None])


def light_head_forward(pyr, head: LightHead, out_size: Optional[int] = None):
    maps = [m if m.dim() == 4 else m[None] for m in (pyr.maps() if hasattr(pyr, "maps") else pyr)]
    return head(maps, out_size)


def sota_head_forward(f, head: SotaHead):
    return head(f if f.dim() == 4 else f[None])


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def ce_dice_loss(logits, labels, class_weights: Optional[torch.Tensor] = None, smooth: float = 1.0):
    """Mean pixelwise cross-entropy + (1 - mean per-class soft Dice).

    Soft Dice is pooled over the batch and all pixels; ``smooth`` is added to
    numerator and denominator so empty classes score 1.
    """
    n_cls = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"labels outside [0, {n_cls})")
    labels = labels.long()
    ce = F.cross_entropy(logits, labels, weight=class_weights)
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(labels, n_cls).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    return ce + (1.0 - dice.mean())


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------


def cosine_lr(epoch: int, cfg: HeadConfig) -> float:
    """Learning rate for ``epoch`` (0-based): cfg.lr at 0, cfg.min_lr at the last epoch."""
    if cfg.schedule == "constant" or cfg.epochs == 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainedHead:
    head: SegmentationHead
    config: HeadConfig
    log: List[float] = field(default_factory=list)
    checkpoint_digest: str = ""

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": HEAD_FORMAT,
            "kind": self.head.kind,
            "config": self.config.to_dict(),
            "in_widths": self.head.in_widths,
            "state_dict": self.head.state_dict(),
            "log": self.log,
            "checkpoint_digest": self.checkpoint_digest,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path


def load_head(path) -> TrainedHead:
    d = torch.load(path, map_location="cpu", weights_only=False)
    if d.get("format") != HEAD_FORMAT:
        raise ValueError(f"{path}: not a {HEAD_FORMAT} file")
    cfg = HeadConfig(**d["config"])
    head = SegmentationHead(d["kind"], d["in_widths"], cfg.num_classes, cfg.unified_dim)
    head.load_state_dict(d["state_dict"])
    head.eval()
    return TrainedHead(head, cfg, d.get("log", []), d.get("checkpoint_digest", ""))


def _stack_maps(pyrs, idx) -> List[torch.Tensor]:
    n = len(pyrs[0].entries)
    return [torch.stack([pyrs[i].entries[k][1] for i in idx]) for k in range(n)]


def build_head(cfg: HeadConfig, in_widths: Sequence[int]) -> SegmentationHead:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        return SegmentationHead(cfg.kind, in_widths, cfg.num_classes, cfg.unified_dim)
    finally:
        torch.random.set_rng_state(gen_state)


def train_head(ckpt: Checkpoint, train: PatchDataset, cfg: HeadConfig,
               extractor: Optional[FeatureExtractor] = None, cache_dir=None) -> TrainedHead:
    """Optimise only the head on frozen features of ``train``."""
    if len(train) == 0:
        raise ValueError("empty training set")
    if not train.labeled:
        raise ValueError("head training needs a labeled dataset")
    if extractor is None:
        extractor = FeatureExtractor(ckpt, cfg.t_fix, cfg.blocks, use_condition=cfg.use_condition)
    pyrs = cached_pyramids(extractor, train.images(), cache_dir)
    labels = stack_masks(train.items)
    if labels.max() >= cfg.num_classes:
        raise ValueError(f"label {int(labels.max())} outside [0, {cfg.num_classes})")
    size = labels.shape[-1]
    head = build_head(cfg, extractor.widths)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(train)
    bs = min(cfg.batch_size, n)
    log: List[float] = []
    head.train()
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(epoch, cfg)
        perm = torch.randperm(n, generator=gen).tolist()
        total, count = 0.0, 0
        for i in range(0, n, bs):
            idx = perm[i:i + bs]
            if len(idx) == 1 and n > 1 and cfg.kind != "linear_probe":
                continue  # BatchNorm needs more than one sample per batch statistic
            maps = _stack_maps(pyrs, idx)
            logits = head(maps, size)
            loss = ce_dice_loss(logits, labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        log.append(total / max(count, 1))
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            logger.info("head epoch %d loss %.4f lr %.2e", epoch, log[-1], cosine_lr(epoch, cfg))
    head.eval()
    return TrainedHead(head, cfg, log, ckpt.digest())


@torch.no_grad()
def predict_logits(extractor: FeatureExtractor, head: SegmentationHead, images,
                   size: Optional[int] = None, batch_size: int = 16) -> torch.Tensor:
    head.eval()
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        pyrs = extractor.pyramids(chunk, batch_size)
        s = size or chunk[0].pixels.shape[0]
        out.append(head(_stack_maps(pyrs, range(len(chunk))), s))
    return torch.cat(out)


def predict_masks(extractor: FeatureExtractor, head: SegmentationHead, images,
                  size: Optional[int] = None) -> np.ndarray:
    return predict_logits(extractor, head, images, size).argmax(dim=1).numpy().astype(np.int64)
