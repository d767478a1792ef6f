"""Dice, Precision, Boundary-F1 and per-image bootstrap confidence intervals."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_BF1_TOL = 2.0
DEFAULT_RESAMPLES = 1000


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """2|P&G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def precision(pred, gt) -> float:
    """|P&G| / |P|. Empty prediction: 1.0 if gt is also empty, else 0.0."""
    p, g = _pair(pred, gt)
    n = int(p.sum())
    if n == 0:
        return 1.0 if not g.any() else 0.0
    return int((p & g).sum()) / n


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or touching the image edge."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _within(src: np.ndarray, ref: np.ndarray, tol: float) -> int:
    """Number of ``src`` pixels within Euclidean distance ``tol`` of a ``ref`` pixel."""
    if not src.any():
        return 0
    if not ref.any():
        return 0
    dist = ndimage.distance_transform_edt(~ref)
    return int((dist[src] <= tol + 1e-12).sum())


def boundary_f1(pred, gt, tol: float = DEFAULT_BF1_TOL) -> float:
    """Harmonic mean of boundary precision and recall at pixel tolerance ``tol``."""
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    p, g = _pair(pred, gt)
    bp, bg = boundary(p), boundary(g)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    prec = _within(bp, bg, tol) / n_p
    rec = _within(bg, bp, tol) / n_g
    if prec + rec == 0:
        return 0.0
    return 2 * prec * rec / (prec + rec)


METRICS = {"dice": dice, "precision": precision, "bf1": boundary_f1}


@dataclass
class MetricReport:
    metric_name: str
    mean: float
    ci_low: float
    ci_high: float
    n_resamples: int = DEFAULT_RESAMPLES
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def bootstrap_ci(scores: Sequence[float], n: int = DEFAULT_RESAMPLES, seed: int = 0,
                 metric_name: str = "metric", alpha: float = 0.05) -> MetricReport:
    """Percentile bootstrap over images (resampled with replacement)."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap needs at least one score")
    if n < 1:
        raise ValueError("n_resamples must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n, x.size))
    means = x[idx].mean(axis=1)
    lo, hi = np.percentile(means, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return MetricReport(metric_name, float(x.mean()), float(lo), float(hi), n, seed)


def per_image_scores(preds, gts, bf1_tol: float = DEFAULT_BF1_TOL,
                     foreground: int = 1) -> Dict[str, List[float]]:
    out: Dict[str, List[float]] = {k: [] for k in METRICS}
    for p, g in zip(preds, gts):
        p = np.asarray(p) == foreground
        g = np.asarray(g) == foreground
        out["dice"].append(dice(p, g))
        out["precision"].append(precision(p, g))
        out["bf1"].append(boundary_f1(p, g, bf1_tol))
    return out


def evaluate_masks(preds, gts, bf1_tol: float = DEFAULT_BF1_TOL, n_resamples: int = DEFAULT_RESAMPLES,
                   seed: int = 0) -> List[MetricReport]:
    scores = per_image_scores(preds, gts, bf1_tol)
    return [bootstrap_ci(v, n_resamples, seed, k) for k, v in scores.items()]


def write_report(path, reports: Sequence[MetricReport], metadata: dict) -> None:
    doc = {"metrics": [r.to_dict() for r in reports], "metadata": metadata}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
