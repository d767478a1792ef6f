"""Corpus loading, pretraining augmentation, synthetic nuclei corpus and
few-shot sampling.

Images live in memory as float32 (H, W, C) arrays in [0, 1]; masks as
(H, W) integer class-index arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)


class DataError(Exception):
    """Raised for malformed corpora (missing masks, undecodable files, bad sizes)."""


class MissingMaskError(DataError):
    pass


@dataclass
class ImagePatch:
    pixels: np.ndarray
    source_id: str = ""

    @property
    def shape(self):
        return self.pixels.shape

    def to_tensor(self) -> torch.Tensor:
        """(C, H, W) float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))


@dataclass
class LabeledSample:
    image: ImagePatch
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != self.image.pixels.shape[:2]:
            raise DataError(
                f"{self.image.source_id}: mask shape {self.mask.shape} != image {self.image.pixels.shape[:2]}"
            )

    @property
    def source_id(self) -> str:
        return self.image.source_id


Item = Union[ImagePatch, LabeledSample]


@dataclass
class PatchDataset:
    items: List[Item] = field(default_factory=list)
    split_tag: str = "train"

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    @property
    def labeled(self) -> bool:
        return bool(self.items) and isinstance(self.items[0], LabeledSample)

    def images(self) -> List[ImagePatch]:
        return [it.image if isinstance(it, LabeledSample) else it for it in self.items]

    def ids(self) -> List[str]:
        return [it.source_id for it in self.items]


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def read_image(path) -> ImagePatch:
    arr = _decode(Path(path))
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return ImagePatch((arr.astype(np.float32) / scale), Path(path).name)


def read_mask(path) -> np.ndarray:
    arr = _decode(Path(path))
    if arr.ndim != 2:
        raise DataError(f"{path}: mask must be a single-channel index image")
    return arr.astype(np.int64)


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    if mask.max(initial=0) > 255:
        raise DataError("mask class index exceeds 8-bit range")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def _list_images(d: Path) -> List[Path]:
    return sorted((p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.name)


def load_corpus(root, labeled: bool = False, split: Optional[str] = None) -> PatchDataset:
    """Load ``root/images/*.png`` (and ``root/masks/*.png`` when labeled).

    A flat directory of PNGs is accepted for unlabeled corpora. When ``split``
    is given, ``root/<split>`` is read instead.
    """
    root = Path(root)
    if split is not None:
        root = root / split
    tag = split or (root.name if root.name in ("train", "test") else "train")
    img_dir = root / "images"
    if not img_dir.is_dir():
        if labeled:
            raise DataError(f"{root}: expected an images/ subdirectory")
        img_dir = root
    if not img_dir.is_dir():
        raise DataError(f"{root}: not a directory")
    paths = _list_images(img_dir)
    items: List[Item] = []
    if labeled:
        mask_dir = root / "masks"
        for p in paths:
            mp = mask_dir / f"{p.stem}.png"
            if not mp.is_file():
                raise MissingMaskError(f"no mask for {p.name} (expected {mp})")
            items.append(LabeledSample(read_image(p), read_mask(mp)))
    else:
        items = [read_image(p) for p in paths]
    logger.debug("loaded %d items from %s", len(items), root)
    return PatchDataset(items, tag)


def save_corpus(ds: PatchDataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if ds.labeled:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    for it in ds:
        stem = Path(it.source_id).stem
        if isinstance(it, LabeledSample):
            write_image(root / "images" / f"{stem}.png", it.image.pixels)
            write_mask(root / "masks" / f"{stem}.png", it.mask)
        else:
            write_image(root / "images" / f"{stem}.png", it.pixels)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
    y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return y[0].numpy().transpose(1, 2, 0)


def mixed_resize(img: ImagePatch, target: int, rng: np.random.Generator,
                 crop_prob: float = 0.8) -> ImagePatch:
    """Random ``target`` crop with probability ``crop_prob``, else whole-patch resize."""
    h, w = img.pixels.shape[:2]
    if h < target or w < target:
        raise DataError(f"{img.source_id}: {h}x{w} smaller than target {target}")
    if rng.random() < crop_prob:
        top = int(rng.integers(0, h - target + 1))
        left = int(rng.integers(0, w - target + 1))
        out = img.pixels[top:top + target, left:left + target]
    else:
        out = resize_bilinear(img.pixels, target)
    return ImagePatch(np.clip(out, 0.0, 1.0).astype(np.float32, copy=False), img.source_id)


# ---------------------------------------------------------------------------
# subsets
# ---------------------------------------------------------------------------


def sample_fewshot(ds: PatchDataset, k: int, seed: int) -> PatchDataset:
    if k < 1:
        raise ValueError(f"shot count must be >= 1, got {k}")
    if k > len(ds):
        raise ValueError(f"cannot draw {k} shots from {len(ds)} samples")
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=k, replace=False))
    return PatchDataset([ds.items[i] for i in idx], ds.split_tag)


def split_dataset(ds: PatchDataset, n_test: int) -> tuple:
    """Deterministic head/tail split: the last ``n_test`` items form the test split."""
    if not 0 < n_test < len(ds):
        raise ValueError(f"n_test must be in (0, {len(ds)})")
    return (PatchDataset(ds.items[:-n_test], "train"), PatchDataset(ds.items[-n_test:], "test"))


# ---------------------------------------------------------------------------
# synthetic nuclei corpus
# ---------------------------------------------------------------------------

MIN_BLOBS = 3
MAX_BLOBS = 12


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((1, 1, cells, cells))
    t = torch.from_numpy(coarse)
    return F.interpolate(t, size=(size, size), mode="bicubic", align_corners=False)[0, 0].numpy()


def _synthetic_sample(rng: np.random.Generator, size: int, idx: int) -> LabeledSample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    scale = size / 64.0
    n_blobs = int(rng.integers(MIN_BLOBS, MAX_BLOBS + 1))
    mask = np.zeros((size, size), dtype=np.int64)
    interior = np.zeros((size, size))
    placed: list = []
    tries = 0
    while len(placed) < n_blobs and tries < 500:
        tries += 1
        a = rng.uniform(3.0, 6.0) * scale
        b = a * rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(a, size - a, size=2)
        if any((cy - py) ** 2 + (cx - px) ** 2 < (a + pa) ** 2 for py, px, pa in placed):
            continue
        placed.append((cy, cx, a))
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / a
        v = (-dx * np.sin(th) + dy * np.cos(th)) / b
        r2 = u ** 2 + v ** 2
        inside = r2 <= 1.0
        mask[inside] = 1
        interior = np.maximum(interior, np.where(inside, 1.0 - r2, 0.0))

    # eosin-like textured background, hematoxylin-like nuclei with chromatin texture;
    # stain strength and brightness vary per image
    bg_tex = _smooth_noise(rng, size, 8) * 0.5 + _smooth_noise(rng, size, 24) * 0.5
    bg_color = np.array([0.92, 0.62, 0.78]) * rng.uniform(0.7, 1.0)
    nuc_color = np.array([0.45, 0.30, 0.62]) * rng.uniform(0.8, 1.25)
    stroma = rng.uniform(0.15, 0.45)
    img = bg_color[None, None] * (1.0 - stroma * bg_tex[:, :, None])
    chrom = 0.75 + 0.5 * _smooth_noise(rng, size, 16)
    nuc = nuc_color[None, None] * chrom[:, :, None] * (1.0 - 0.25 * interior[:, :, None])
    m = mask[:, :, None].astype(np.float64)
    img = img * (1.0 - m) + nuc * m
    img = img + rng.normal(0.0, 0.03, img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledSample(ImagePatch(pixels, f"syn_{idx:05d}.png"), mask)


def make_synthetic_corpus(n: int, size: int = 64, seed: int = 0) -> PatchDataset:
    """``n`` images of elliptical nuclei on textured stroma with binary masks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n)
    items = [_synthetic_sample(np.random.default_rng(s), size, i) for i, s in enumerate(seeds)]
    return PatchDataset(items, "train")


def stack_images(images: Sequence[ImagePatch]) -> torch.Tensor:
    return torch.stack([im.to_tensor() for im in images])


def stack_masks(samples: Sequence[LabeledSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.mask for s in samples]))
