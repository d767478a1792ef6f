"""Command-line entry point: ``maskdiff <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from . import __version__
from .backbone import DEFAULT_TAPS
from .conditioning import ConditionSource, ProviderError
from .data import (DataError, PatchDataset, load_corpus, make_synthetic_corpus, read_image,
                   sample_fewshot, save_corpus, split_dataset, write_image, write_mask)
from .features import DEFAULT_T_FIX, FeatureExtractor, cached_pyramids, fuse_pyramid, write_pyramid
from .heads import HeadConfig, load_head, predict_masks, train_head
from .metrics import DEFAULT_BF1_TOL, DEFAULT_RESAMPLES, evaluate_masks, write_report
from .pretrain import NumericError, PretrainConfig, load_checkpoint, run_pretraining

logger = logging.getLogger("maskdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, outputs: dict,
                   name: str = MANIFEST) -> Path:
    doc = {
        "command": command,
        "config": config,
        "config_hash": _digest(config),
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "tool_version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    tmp = out_dir / (name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _blocks(text: Optional[str]) -> List[int]:
    if text is None:
        return list(DEFAULT_TAPS)
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise ConfigError(f"bad block list {text!r}") from None


def _load_yaml(path) -> dict:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def _labeled_split(path) -> PatchDataset:
    return load_corpus(path, labeled=True)


def _extractor(args, ckpt, blocks, t_fix) -> FeatureExtractor:
    return FeatureExtractor(ckpt, t_fix, blocks, use_condition=not getattr(args, "no_condition", False))


def _head_config(args) -> HeadConfig:
    base = _load_yaml(args.head_config) if getattr(args, "head_config", None) else {}
    for key in ("kind", "epochs", "lr", "seed", "batch_size", "num_classes", "t_fix"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if getattr(args, "blocks", None) is not None:
        base["blocks"] = _blocks(args.blocks)
    if getattr(args, "no_condition", False):
        base["use_condition"] = False
    try:
        return HeadConfig(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid head config: {exc}") from None


def _setup_determinism(precision: str = "high") -> None:
    if precision == "high":
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    ds = make_synthetic_corpus(args.n, args.size, args.seed)
    if args.test:
        train, test = split_dataset(ds, args.test)
        save_corpus(train, out / "train")
        save_corpus(test, out / "test")
    else:
        save_corpus(ds, out / "train")
    cfg = {"n": args.n, "size": args.size, "seed": args.seed, "test": args.test}
    write_manifest(out, "make-synthetic", cfg, args.seed, {}, {"corpus": out})
    print(f"wrote {args.n} synthetic samples to {out}")
    return EXIT_OK


def pretrain_config_from(args) -> tuple:
    doc = _load_yaml(args.config)
    data = doc.pop("data", None)
    if args.data is not None:
        data = args.data
    for key in ("steps", "seed", "batch_size", "lr", "checkpoint_every"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if args.condition is not None:
        doc.setdefault("condition", {})["provider_id"] = args.condition
    try:
        cfg = PretrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pretraining config: {exc}") from None
    if data is None:
        raise ConfigError("no pretraining data: set `data:` in the config or pass --data")
    return cfg, data


def _pretrain_dataset(data) -> PatchDataset:
    root = Path(data)
    if (root / "train").is_dir():
        root = root / "train"
    return load_corpus(root, labeled=False)


def cmd_pretrain(args) -> int:
    cfg, data = pretrain_config_from(args)
    out = Path(args.out)
    if args.resume is None:
        _prepare_out(out, args.force)
    _setup_determinism(cfg.precision)
    ds = _pretrain_dataset(data)
    ckpt = run_pretraining(cfg, ds, out, resume=args.resume, progress=args.progress)
    write_manifest(out, "pretrain", cfg.to_dict(), cfg.seed,
                   {"config": args.config, "data": data, "resume": args.resume},
                   {"checkpoint": ckpt.path, "log": out / "train.log", "digest": ckpt.digest()})
    print(f"pretraining finished at step {ckpt.step}; checkpoint {ckpt.path}")
    return EXIT_OK


def cmd_extract(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    _setup_determinism()
    ckpt = load_checkpoint(args.ckpt)
    ex = _extractor(args, ckpt, _blocks(args.blocks), args.t_fix)
    root = Path(args.images)
    ds = load_corpus(root, labeled=False)
    for im, pyr in zip(ds.images(), ex.pyramids(ds.images())):
        write_pyramid(out / f"{Path(im.source_id).stem}.pyr", pyr)
    cfg = {"t_fix": ex.t_fix, "blocks": ex.blocks, "condition": ex.condition.provider_id}
    write_manifest(out, "extract", cfg, None, {"ckpt": args.ckpt, "images": root},
                   {"count": len(ds), "checkpoint_digest": ckpt.digest()})
    print(f"extracted {len(ds)} pyramids to {out}")
    return EXIT_OK


def cmd_train_head(args) -> int:
    cfg = _head_config(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    _setup_determinism()
    ckpt = load_checkpoint(args.ckpt)
    train = _labeled_split(args.train)
    trained = train_head(ckpt, train, cfg, cache_dir=args.cache_dir)
    trained.save(out)
    write_manifest(out.parent, "train-head", cfg.to_dict(), cfg.seed,
                   {"ckpt": args.ckpt, "train": args.train}, {"head": out},
                   name=out.name + ".manifest.json")
    print(f"trained {cfg.kind} head ({len(train)} images, final loss {trained.log[-1]:.4f}) -> {out}")
    return EXIT_OK


def _load_pair(args):
    ckpt = load_checkpoint(args.ckpt)
    trained = load_head(args.head)
    hc = trained.config
    ex = FeatureExtractor(ckpt, hc.t_fix, hc.blocks, use_condition=hc.use_condition)
    return ckpt, trained, ex


def cmd_predict(args) -> int:
    _setup_determinism()
    ckpt, trained, ex = _load_pair(args)
    img = read_image(args.image)
    mask = predict_masks(ex, trained.head, [img])[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask(out, mask)
    write_manifest(out.parent, "predict", trained.config.to_dict(), trained.config.seed,
                   {"ckpt": args.ckpt, "head": args.head, "image": args.image}, {"mask": out},
                   name=out.name + ".manifest.json")
    print(f"wrote {out}")
    return EXIT_OK


def predict_dataset(ex: FeatureExtractor, head, ds: PatchDataset) -> np.ndarray:
    return predict_masks(ex, head, ds.images())


def run_evaluation(preds, ds: PatchDataset, out: Path, bf1_tol: float, n_resamples: int,
                   seed: int, metadata: dict, overlays: bool = False) -> list:
    gts = [s.mask for s in ds.items]
    reports = evaluate_masks(preds, gts, bf1_tol, n_resamples, seed)
    meta = dict(metadata, bf1_tol=bf1_tol, n_images=len(ds), n_resamples=n_resamples, seed=seed)
    write_report(out / "report.json", reports, meta)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for s, p in zip(ds.items, preds):
        write_mask(pred_dir / f"{Path(s.source_id).stem}.png", np.asarray(p))
    if overlays:
        from .visualize import render_overlay

        ov = out / "overlays"
        ov.mkdir(exist_ok=True)
        for s, p in zip(ds.items, preds):
            write_image(ov / f"{Path(s.source_id).stem}.png", render_overlay(s.image.pixels, np.asarray(p)))
    for r in reports:
        print(f"{r.metric_name:>9}: {r.mean:.4f} [{r.ci_low:.4f}, {r.ci_high:.4f}]")
    return reports


def cmd_evaluate(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    _setup_determinism()
    ckpt, trained, ex = _load_pair(args)
    test = _labeled_split(args.test)
    preds = predict_dataset(ex, trained.head, test)
    meta = {"checkpoint_digest": ckpt.digest(), "head": str(args.head), "head_kind": trained.config.kind}
    run_evaluation(preds, test, out, args.bf1_tol, args.resamples, args.seed, meta, args.overlays)
    write_manifest(out, "evaluate", {"bf1_tol": args.bf1_tol, "resamples": args.resamples}, args.seed,
                   {"ckpt": args.ckpt, "head": args.head, "test": args.test}, {"report": out / "report.json"})
    return EXIT_OK


def cmd_fewshot(args) -> int:
    if args.k < 1:
        raise ConfigError("k must be >= 1")
    cfg = _head_config(args)
    out = _prepare_out(Path(args.out), args.force)
    _setup_determinism()
    ckpt = load_checkpoint(args.ckpt)
    train = _labeled_split(args.train)
    if args.k > len(train):
        raise ConfigError(f"k={args.k} exceeds the {len(train)}-image training split")
    subset = sample_fewshot(train, args.k, args.seed)
    ids = subset.ids()
    trained = train_head(ckpt, subset, cfg, cache_dir=args.cache_dir)
    trained.save(out / "head.pt")
    test = _labeled_split(args.test)
    ex = FeatureExtractor(ckpt, cfg.t_fix, cfg.blocks, use_condition=cfg.use_condition)
    preds = predict_dataset(ex, trained.head, test)
    meta = {"checkpoint_digest": ckpt.digest(), "k": args.k, "subset": ids, "head_kind": cfg.kind}
    run_evaluation(preds, test, out, args.bf1_tol, args.resamples, args.seed, meta)
    write_manifest(out, "fewshot", dict(cfg.to_dict(), k=args.k), args.seed,
                   {"ckpt": args.ckpt, "train": args.train, "test": args.test},
                   {"report": out / "report.json", "head": out / "head.pt",
                    "subset_hash": _digest(sorted(ids))})
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .objective import l1_loss
    from .visualize import kmeans_cluster, render_overlay, to_uint8
    from .masking import apply_mask, sample_timestep_mask
    from PIL import Image

    out = _prepare_out(Path(args.out), args.force)
    _setup_determinism()
    ckpt = load_checkpoint(args.ckpt)
    ex = _extractor(args, ckpt, _blocks(args.blocks), args.t_fix)
    img = read_image(args.image)
    size = img.pixels.shape[0]
    pyr = ex(img)
    cm = kmeans_cluster(fuse_pyramid(pyr, size), args.k, args.seed)
    stem = Path(args.image).stem
    Image.fromarray(to_uint8(render_overlay(img.pixels, cm, alpha=args.alpha, background=None))).save(
        out / f"{stem}_kmeans{args.k}.png")
    # reconstruction panel: clean | masked | reconstruction
    pcfg = PretrainConfig.from_dict({k: v for k, v in ckpt.config.items()})
    rng = np.random.default_rng(args.seed)
    grid = sample_timestep_mask(size, size, args.t_mask, pcfg.T, pcfg.patch_size, rng)
    x0 = img.to_tensor()[None]
    xt = apply_mask(x0, grid)
    from .conditioning import encode_condition_batch

    z = encode_condition_batch(x0, ex.condition, [img.source_id])
    with torch.no_grad():
        xhat, _ = ex.model(xt, torch.tensor([args.t_mask]), z)
    panel = torch.cat([x0, xt, xhat.clamp(0, 1)], dim=-1)[0].permute(1, 2, 0).numpy()
    Image.fromarray(to_uint8(panel)).save(out / f"{stem}_reconstruction.png")
    write_manifest(out, "visualize", {"k": args.k, "t_fix": ex.t_fix, "blocks": ex.blocks, "t_mask": args.t_mask},
                   args.seed, {"ckpt": args.ckpt, "image": args.image},
                   {"inertia": cm.inertia, "reconstruction_l1": float(l1_loss(x0, xhat))})
    print(f"wrote visualizations to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_head_args(p):
    p.add_argument("--head-config", help="YAML file with head settings")
    p.add_argument("--kind", choices=("linear_probe", "light", "sota"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--t-fix", type=int)
    p.add_argument("--blocks", help="comma-separated decoder block indices (default 1,3,5,6,8,9)")
    p.add_argument("--no-condition", action="store_true", help="extract features without the condition provider")
    p.add_argument("--cache-dir", default=None, help="feature cache directory (default $MASKDIFF_CACHE_DIR)")


def _add_eval_args(p):
    p.add_argument("--bf1-tol", type=float, default=DEFAULT_BF1_TOL)
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskdiff", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the synthetic nuclei corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test", type=int, default=0, help="number of images held out as test/")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretrain", help="masked-diffusion pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--condition", choices=("none", "stub", "external"))
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--progress", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="write frozen feature pyramids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-fix", type=int, default=DEFAULT_T_FIX)
    p.add_argument("--blocks")
    p.add_argument("--no-condition", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-head", help="train a segmentation head on frozen features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True, help="labeled split directory (images/, masks/)")
    p.add_argument("--out", required=True, help="head file to write")
    p.add_argument("--seed", type=int)
    _add_head_args(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("predict", help="predict a mask PNG for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice / Precision / BF1 with bootstrap CIs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlays", action="store_true")
    _add_eval_args(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fewshot", help="k-shot head training + evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_head_args(p)
    _add_eval_args(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("visualize", help="K-means feature clusters and a reconstruction panel")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--t-fix", type=int, default=DEFAULT_T_FIX)
    p.add_argument("--t-mask", type=int, default=500, help="timestep for the reconstruction panel")
    p.add_argument("--blocks")
    p.add_argument("--no-condition", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_visualize)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", datefmt="%H:%M:%S")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProviderError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
