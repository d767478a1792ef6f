"""Frozen dense-feature extraction from decoder blocks of a pretrained model."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import DEFAULT_TAPS, ConvNeXtUNet
from .conditioning import ConditionSource, encode_condition_batch
from .data import ImagePatch, stack_images
from .pretrain import Checkpoint

DEFAULT_T_FIX = 50
CACHE_ENV = "MASKDIFF_CACHE_DIR"
PYR_MAGIC = b"MDPYR1\n"


@dataclass
class FeaturePyramid:
    """Ordered ``(decoder_block_index, (C, h, w) activation)`` entries."""

    entries: List[Tuple[int, torch.Tensor]]
    extraction_timestep: int = DEFAULT_T_FIX

    def __post_init__(self):
        idx = [b for b, _ in self.entries]
        if any(b2 <= b1 for b1, b2 in zip(idx, idx[1:])):
            raise ValueError(f"pyramid block indices must be strictly increasing, got {idx}")

    @property
    def blocks(self) -> List[int]:
        return [b for b, _ in self.entries]

    @property
    def widths(self) -> List[int]:
        return [f.shape[0] for _, f in self.entries]

    def maps(self) -> List[torch.Tensor]:
        return [f for _, f in self.entries]


@dataclass
class DenseFeatureMap:
    values: torch.Tensor  # (C_in, H, W)
    block_source: List[int] = field(default_factory=list)


def validate_blocks(blocks: Sequence[int], num_decoder_blocks: int = 10) -> List[int]:
    blocks = list(blocks)
    if not blocks:
        raise ValueError("at least one decoder block must be tapped")
    for b in blocks:
        if not 1 <= int(b) <= num_decoder_blocks:
            raise ValueError(f"decoder block index {b} outside [1, {num_decoder_blocks}]")
    if len(set(blocks)) != len(blocks):
        raise ValueError(f"duplicate block indices in {blocks}")
    return sorted(int(b) for b in blocks)


class FeatureExtractor:
    """Frozen backbone wrapper: clean image in, tapped decoder activations out.

    Weights are the checkpoint's EMA weights and never receive gradients.
    """

    def __init__(self, ckpt: Checkpoint, t_fix: int = DEFAULT_T_FIX,
                 blocks: Sequence[int] = DEFAULT_TAPS, condition: Optional[ConditionSource] = None,
                 use_condition: bool = True):
        if ckpt.ema_weights is None:
            raise ValueError("checkpoint has no EMA weights")
        self.ckpt = ckpt
        self.model: ConvNeXtUNet = ckpt.build(use_ema=True)
        self.blocks = validate_blocks(blocks, self.model.config.num_decoder_blocks)
        self.t_fix = int(t_fix)
        if self.t_fix < 0:
            raise ValueError("t_fix must be non-negative")
        cond = condition if condition is not None else ckpt.condition
        self.condition = cond if use_condition else ConditionSource("none")

    @property
    def widths(self) -> List[int]:
        return [self.model.config.decoder_block_width(b) for b in self.blocks]

    @property
    def in_width(self) -> int:
        return sum(self.widths)

    def cache_key(self) -> str:
        tag = f"{self.ckpt.digest()}|{self.t_fix}|{','.join(map(str, self.blocks))}|{self.condition.provider_id}"
        return hashlib.sha256(tag.encode()).hexdigest()[:20]

    @torch.no_grad()
    def batch(self, x: torch.Tensor, source_ids=None) -> Dict[int, torch.Tensor]:
        """Tapped activations for an NCHW batch, keyed by block index."""
        t = torch.full((x.shape[0],), self.t_fix, dtype=torch.long)
        z = encode_condition_batch(x, self.condition, source_ids)
        _, taps = self.model(x, t, z, taps=self.blocks, reconstruct=False)
        return {b: taps[b].contiguous() for b in self.blocks}

    def pyramids(self, images: Sequence[ImagePatch], batch_size: int = 16) -> List[FeaturePyramid]:
        out: List[FeaturePyramid] = []
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            taps = self.batch(stack_images(chunk), [im.source_id for im in chunk])
            for j in range(len(chunk)):
                out.append(FeaturePyramid([(b, taps[b][j].clone()) for b in self.blocks], self.t_fix))
        return out

    def __call__(self, img: ImagePatch) -> FeaturePyramid:
        return self.pyramids([img])[0]


def extract_pyramid(ckpt: Checkpoint, img: ImagePatch, t_fix: int = DEFAULT_T_FIX,
                    blocks: Sequence[int] = DEFAULT_TAPS,
                    condition: Optional[ConditionSource] = None,
                    use_condition: bool = True) -> FeaturePyramid:
    return FeatureExtractor(ckpt, t_fix, blocks, condition, use_condition)(img)


def _resize(f: torch.Tensor, target: int) -> torch.Tensor:
    if f.shape[-2:] == (target, target):
        return f
    squeeze = f.dim() == 3
    if squeeze:
        f = f[None]
    y = F.interpolate(f, size=(target, target), mode="bilinear", align_corners=False)
    return y[0] if squeeze else y


def fuse_maps(maps: Sequence[torch.Tensor], target: int) -> torch.Tensor:
    """Resize (C, h, w) or (B, C, h, w) maps to ``target`` and concatenate channels."""
    if not maps:
        raise ValueError("cannot fuse an empty pyramid")
    dim = 0 if maps[0].dim() == 3 else 1
    return torch.cat([_resize(m, target) for m in maps], dim=dim)


def fuse_pyramid(pyr: FeaturePyramid, target: int) -> DenseFeatureMap:
    if not pyr.entries:
        raise ValueError("cannot fuse an empty pyramid")
    return DenseFeatureMap(fuse_maps(pyr.maps(), target), pyr.blocks)


# ---------------------------------------------------------------------------
# on-disk cache
# ---------------------------------------------------------------------------


def write_pyramid(path, pyr: FeaturePyramid) -> None:
    header = {
        "blocks": pyr.blocks,
        "shapes": [list(f.shape) for _, f in pyr.entries],
        "t_fix": pyr.extraction_timestep,
        "dtype": "<f4",
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(PYR_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for _, t in pyr.entries:
            f.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    os.replace(tmp, path)


def read_pyramid(path) -> FeaturePyramid:
    data = Path(path).read_bytes()
    if not data.startswith(PYR_MAGIC):
        raise ValueError(f"{path}: not a pyramid cache file")
    off = len(PYR_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + n])
    off += n
    entries = []
    for b, shape in zip(header["blocks"], header["shapes"]):
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        entries.append((b, torch.from_numpy(arr.astype(np.float32))))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in pyramid cache")
    return FeaturePyramid(entries, header["t_fix"])


def cache_root(explicit=None) -> Optional[Path]:
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else None


def cached_pyramids(extractor: FeatureExtractor, images: Sequence[ImagePatch],
                    cache_dir=None) -> List[FeaturePyramid]:
    """Pyramids for ``images``, read from / written to ``<cache>/<key>/<stem>.pyr``."""
    root = cache_root(cache_dir)
    if root is None:
        return extractor.pyramids(images)
    d = root / extractor.cache_key()
    d.mkdir(parents=True, exist_ok=True)
    out: List[Optional[FeaturePyramid]] = [None] * len(images)
    todo = []
    for i, im in enumerate(images):
        p = d / f"{Path(im.source_id).stem}.pyr"
        if p.is_file():
            out[i] = read_pyramid(p)
        else:
            todo.append(i)
    if todo:
        fresh = extractor.pyramids([images[i] for i in todo])
        for i, pyr in zip(todo, fresh):
            write_pyramid(d / f"{Path(images[i].source_id).stem}.pyr", pyr)
            out[i] = pyr
    return out  # type: ignore[return-value]
