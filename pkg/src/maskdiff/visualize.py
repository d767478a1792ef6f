"""K-means clustering of dense features and colour overlays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

# fixed palette, indexed by label (RGB in [0, 1])
PALETTE = np.array([
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000],
    [1.000, 1.000, 0.200],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
    [0.600, 0.600, 0.600],
    [0.000, 0.800, 0.800],
])


@dataclass
class ClusterMap:
    labels: np.ndarray
    K: int
    inertia: float
    history: List[float] = field(default_factory=list)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters left to seed
            i = int(rng.integers(len(x)))
        else:
            i = int(rng.choice(len(x), p=d2 / total))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.stack(centers)


def _assign(x, centers):
    d = (x ** 2).sum(1)[:, None] - 2 * x @ centers.T + (centers ** 2).sum(1)[None]
    d = np.maximum(d, 0.0)
    lab = d.argmin(1)
    return lab, float(((x - centers[lab]) ** 2).sum())


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding on (N, D) vectors.

    Returns ``(labels, centers, inertia_history)``; the history records the
    within-cluster sum of squares after each assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 2:
        raise ValueError("K must be >= 2")
    if k > len(x):
        raise ValueError(f"K={k} exceeds the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels, inertia = _assign(x, centers)
    history = [inertia]
    for _ in range(max_iter):
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
        new, inertia = _assign(x, centers)
        history.append(inertia)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centers, history


def kmeans_cluster(f, K: int = 4, seed: int = 0, max_iter: int = 100,
                   normalize: bool = True) -> ClusterMap:
    """Cluster the per-pixel vectors of a (C, H, W) feature map."""
    # DenseFeatureMap carries its tensor in .values (torch.Tensor.values is a method)
    values = f if isinstance(f, np.ndarray) or hasattr(f, "detach") else f.values
    values = values.detach().cpu().numpy() if hasattr(values, "detach") else np.asarray(values)
    c, h, w = values.shape
    x = values.reshape(c, h * w).T.astype(np.float64)
    if normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    labels, _, history = kmeans(x, K, seed, max_iter)
    return ClusterMap(labels.reshape(h, w), K, history[-1], history)


def render_overlay(pixels: np.ndarray, labels, alpha: float = 0.5,
                   palette: np.ndarray = PALETTE, background: Optional[int] = 0) -> np.ndarray:
    """Alpha-blend palette colours over an (H, W, 3) image in [0, 1].

    Pixels labelled ``background`` are left untouched; pass ``None`` to colour
    every label. A ClusterMap always colours every label, since cluster 0 is a
    real cluster.
    """
    if isinstance(labels, ClusterMap):
        lab, background = labels.labels, None
    else:
        lab = np.asarray(labels)
    img = np.asarray(pixels, dtype=np.float64)
    if lab.shape != img.shape[:2]:
        raise ValueError(f"label shape {lab.shape} does not match image {img.shape[:2]}")
    color = palette[lab % len(palette)]
    if background is None:
        a = np.full(lab.shape, alpha)
    else:
        # foreground labels use palette entries 0.. in order
        color = palette[np.maximum(lab - 1, 0) % len(palette)]
        a = np.where(lab != background, alpha, 0.0)
    a = a[:, :, None]
    return (1 - a) * img + a * color


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
