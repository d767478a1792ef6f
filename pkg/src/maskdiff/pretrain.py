"""Masked-diffusion pretraining: per-sample timestep masking, AdamW, EMA and
resumable checkpoints."""

from __future__ import annotations

import contextlib
import hashlib
import io
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .backbone import ConvNeXtUNet, ModelConfig, build_model, preset
from .conditioning import ConditionSource, encode_condition_batch
from .data import PatchDataset, mixed_resize, stack_images
from .masking import apply_mask, sample_timestep_mask
from .objective import LossWeights, total_loss

logger = logging.getLogger(__name__)

CKPT_FORMAT = "maskdiff-checkpoint/1"
CKPT_FILE = "checkpoint.pt"
LOG_FILE = "train.log"


class NumericError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    model: ModelConfig = field(default_factory=lambda: preset("base"))
    T: int = 1000
    patch_size: int = 8
    lr: float = 3e-5
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    steps: int = 80_000
    batch_size: int = 8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    condition: ConditionSource = field(default_factory=ConditionSource)
    precision: str = "high"
    checkpoint_every: int = 1000
    crop_prob: float = 0.8
    masked_loss_only: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.precision not in ("high", "mixed"):
            raise ValueError(f"precision must be 'high' or 'mixed', got {self.precision!r}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.model.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        m = d.pop("model", None)
        if isinstance(m, str):
            model = preset(m)
        elif isinstance(m, dict):
            m = dict(m)
            name = m.pop("preset", None)
            model = preset(name, **m) if name else ModelConfig(**m)
        elif m is None:
            model = preset("base")
        else:
            raise ValueError("model must be a preset name or a mapping")
        lw = LossWeights(**d.pop("loss_weights", {}))
        cond = ConditionSource(**d.pop("condition", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pretraining config keys: {sorted(unknown)}")
        return cls(model=model, loss_weights=lw, condition=cond, **d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


@torch.no_grad()
def ema_update(ema_weights, weights, decay: float):
    """In-place ``ema <- decay * ema + (1 - decay) * w`` over matching tensors.

    Accepts dicts (matched by key) or sequences (matched by position) and
    returns ``ema_weights``.
    """
    if isinstance(ema_weights, dict):
        pairs = [(ema_weights[k], weights[k]) for k in ema_weights]
    else:
        pairs = list(zip(ema_weights, weights))
    for e, w in pairs:
        if decay == 0.0:
            e.copy_(w)
        elif decay != 1.0:
            e.mul_(decay).add_(w.to(e.dtype), alpha=1.0 - decay)
    return ema_weights


def model_weights(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in model.named_parameters()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    weights: Dict[str, torch.Tensor]
    ema_weights: Optional[Dict[str, torch.Tensor]]
    optimizer_state: Optional[dict]
    config: dict
    path: Optional[Path] = None

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config["model"])

    @property
    def condition(self) -> ConditionSource:
        return ConditionSource(**self.config.get("condition", {}))

    def build(self, use_ema: bool = True) -> ConvNeXtUNet:
        """Rebuild the network from the file alone, frozen and in eval mode."""
        if use_ema and self.ema_weights is None:
            raise ValueError("checkpoint has no EMA weights")
        model = build_model(self.model_config)
        model.load_state_dict(self.ema_weights if use_ema else self.weights)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model

    def digest(self) -> str:
        if self.path is not None and Path(self.path).is_file():
            return file_digest(self.path)
        buf = io.BytesIO()
        torch.save(self._payload(), buf)
        return hashlib.sha256(buf.getvalue()).hexdigest()

    def _payload(self) -> dict:
        return {
            "format": CKPT_FORMAT,
            "step": self.step,
            "config": self.config,
            "weights": self.weights,
            "ema_weights": self.ema_weights,
            "optimizer_state": self.optimizer_state,
        }


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CKPT_FILE
    tmp = directory / (CKPT_FILE + ".tmp")
    torch.save(ckpt._payload(), tmp)
    os.replace(tmp, path)
    ckpt.path = path
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / CKPT_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    d = torch.load(path, map_location="cpu", weights_only=False)
    if d.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} file")
    return Checkpoint(d["step"], d["weights"], d["ema_weights"], d["optimizer_state"], d["config"], path)


def _clone(sd: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in sd.items()}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent generator for one optimisation step; makes resume exact."""
    return np.random.default_rng([seed, step])


def make_optimizer(model: torch.nn.Module, cfg: PretrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def corrupt_batch(x0: torch.Tensor, cfg: PretrainConfig, rng: np.random.Generator):
    """Draw one timestep per sample and zero-fill ``floor(r_t N)`` patches.

    Returns ``(x_t, t, masked_pixels)``.
    """
    b, _, h, w = x0.shape
    ts = rng.integers(1, cfg.T + 1, size=b)
    xt = torch.empty_like(x0)
    hidden = torch.empty(b, 1, h, w, dtype=x0.dtype)
    for i in range(b):
        grid = sample_timestep_mask(h, w, int(ts[i]), cfg.T, cfg.patch_size, rng)
        xt[i] = apply_mask(x0[i], grid)
        hidden[i, 0] = torch.from_numpy(1.0 - grid.to_pixels()).to(x0.dtype)
    return xt, torch.from_numpy(ts).long(), hidden


def _autocast(cfg: PretrainConfig):
    if cfg.precision == "mixed":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def train_step(model: ConvNeXtUNet, batch, cfg: PretrainConfig, rng: np.random.Generator,
               optimizer: torch.optim.Optimizer, source_ids: Optional[Sequence[str]] = None) -> float:
    """One masked-diffusion update on a (B, C, H, W) batch of clean images."""
    x0 = batch if isinstance(batch, torch.Tensor) else stack_images(batch)
    xt, t, hidden = corrupt_batch(x0, cfg, rng)
    # condition on the original, unmasked patch
    z = encode_condition_batch(x0, cfg.condition, source_ids)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    with _autocast(cfg):
        xhat, _ = model(xt, t, z)
    loss = total_loss(x0, xhat.float(), cfg.loss_weights,
                      masked_only=hidden if cfg.masked_loss_only else None)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} (t={t.tolist()})")
    loss.backward()
    optimizer.step()
    return float(loss.item())


def _sample_batch(dataset: PatchDataset, cfg: PretrainConfig, rng: np.random.Generator):
    images = dataset.images()
    idx = rng.integers(0, len(images), size=cfg.batch_size)
    size = cfg.model.input_size
    crops = [mixed_resize(images[i], size, rng, cfg.crop_prob) for i in idx]
    return stack_images(crops), [c.source_id for c in crops]


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        s = line.split("\t", 1)[0]
        if s.isdigit() and int(s) <= step:
            keep.append(line + "\n")
    path.write_text("".join(keep))


def run_pretraining(cfg: PretrainConfig, dataset: PatchDataset, out, resume=None,
                    progress: bool = False) -> Checkpoint:
    """Train for ``cfg.steps`` steps, writing ``out/ckpt_<step>``, ``out/ckpt_final``
    and a ``step<TAB>loss`` log at ``out/train.log``."""
    if len(dataset) == 0:
        raise ValueError("empty pretraining dataset")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model, seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    start = 0
    log_path = out / LOG_FILE
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model.load_state_dict(ck.weights)
        opt.load_state_dict(ck.optimizer_state)
        ema = _clone(ck.ema_weights)
        start = ck.step
        _truncate_log(log_path, start)
        logger.info("resumed from step %d", start)
    else:
        ema = _clone(model_weights(model))
        log_path.write_text("")
    params = model_weights(model)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(step, _clone(model.state_dict()), _clone(ema), opt.state_dict(), cfg.to_dict())

    ckpt = None
    steps = range(start + 1, cfg.steps + 1)
    if progress:
        from tqdm.auto import tqdm

        steps = tqdm(steps, initial=start, total=cfg.steps)
    with open(log_path, "a") as log:
        for step in steps:
            rng = step_rng(cfg.seed, step)
            x0, ids = _sample_batch(dataset, cfg, rng)
            loss = train_step(model, x0, cfg, rng, opt, ids)
            ema_update(ema, params, cfg.ema_decay)
            log.write(f"{step}\t{loss!r}\n")
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                log.flush()
                ckpt = snapshot(step)
                save_checkpoint(ckpt, out / f"ckpt_{step}")
    if ckpt is None or ckpt.step != cfg.steps:
        ckpt = snapshot(cfg.steps)
    final_dir = out / "ckpt_final"
    final_dir.mkdir(exist_ok=True)
    src = out / f"ckpt_{cfg.steps}" / CKPT_FILE
    if src.is_file():
        shutil.copyfile(src, final_dir / CKPT_FILE)
        ckpt.path = final_dir / CKPT_FILE
    else:
        save_checkpoint(ckpt, final_dir)
    return ckpt


def read_loss_log(path) -> List[float]:
    path = Path(path)
    if path.is_dir():
        path = path / LOG_FILE
    return [float(line.split("\t")[1]) for line in path.read_text().splitlines() if line.strip()]
