"""Embedding-space analysis: range statistics, distance to the prior, 2-D PCA view."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .metrics import frechet_distance
from .numcore import Tensor
from .priorspace import PriorSpace

RANK_TOL = 1e-10


@dataclass(frozen=True)
class EmbeddingStats:
    max: float
    min: float
    per_dim_max: np.ndarray
    per_dim_min: np.ndarray
    frechet_to_prior: float
    training_time_s: float

    def row(self):
        return [self.max, self.min, self.frechet_to_prior, self.training_time_s]


def _rows(embs):
    a = np.asarray(embs.data if isinstance(embs, Tensor) else embs, dtype=np.float64)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError(f"expected a non-empty n x d array, got shape {a.shape}")
    return a


def embedding_stats(embs, prior: PriorSpace, elapsed=0.0) -> EmbeddingStats:
    a = _rows(embs)
    if a.shape[1] != prior.d:
        raise ValueError(f"embedding width {a.shape[1]} != prior width {prior.d}")
    return EmbeddingStats(float(a.max()), float(a.min()), a.max(axis=0), a.min(axis=0),
                          frechet_distance(a, prior.C), float(elapsed))


def project_2d(embs):
    """Deterministic PCA onto the top two principal directions.

    Each direction is signed so that its largest-magnitude loading is positive.
    """
    a = _rows(embs)
    if a.shape[0] < 3:
        raise ValueError("projection needs at least three points")
    x = a - a.mean(axis=0)
    w, V = np.linalg.eigh(x.T @ x / len(x))
    order = np.argsort(w)[::-1][:2]
    w, V = w[order], V[:, order]
    if len(w) < 2 or w[1] <= RANK_TOL * max(w[0], 1.0):
        raise ValueError("data has rank < 2")
    for k in range(2):
        if V[np.argmax(np.abs(V[:, k])), k] < 0:
            V[:, k] = -V[:, k]
    return x @ V


def write_stats_csv(rows, path):
    """``rows``: list of (label, EmbeddingStats)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["set", "max", "min", "frechet_to_prior"])
        for label, st in rows:
            w.writerow([label] + [f"{v:.10g}" for v in st.row()[:3]])


def write_projection_csv(labels, xy, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "x", "y"])
        for lab, (x, y) in zip(labels, xy):
            w.writerow([lab, f"{x:.10g}", f"{y:.10g}"])


def scatter_raster(xy, groups, size=64, margin=2):
    """Grey-level scatter plot, one intensity per group; returns a uint8 image."""
    xy = np.asarray(xy, dtype=np.float64)
    groups = np.asarray(groups)
    img = np.zeros((size, size), dtype=np.uint8)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pix = np.round((xy - lo) / span * (size - 1 - 2 * margin)).astype(int) + margin
    levels = np.unique(groups)
    shade = {g: int(255 * (i + 1) / len(levels)) for i, g in enumerate(levels)}
    for (px, py), g in zip(pix, groups):
        img[size - 1 - py, px] = shade[g]
    return img
