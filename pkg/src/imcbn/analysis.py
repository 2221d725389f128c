"""Weight-distortion statistics: 2-D PCA of (ideal, non-ideal) weight pairs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateCloud(ValueError):
    """The point cloud has no variance to decompose."""


@dataclass(frozen=True)
class PCAResult:
    pc1: float
    pc2: float
    eig1: float
    eig2: float
    n: int


def pca2(w_ideal, w_ni) -> PCAResult:
    """Proportion of variance along the two principal axes of the pair cloud.

    Uses the population covariance and the closed-form 2x2 eigensolution.
    """
    x = np.asarray(w_ideal, dtype=np.float64).ravel()
    y = np.asarray(w_ni, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} ideal vs {y.size} non-ideal values")
    if x.size < 2:
        raise ValueError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    a, c, b = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
    tr = a + c
    if not tr > 0:
        raise DegenerateCloud("zero total variance")
    root = math.hypot((a - c) / 2.0, b)
    eig1 = tr / 2.0 + root
    # det / eig1 avoids the cancellation in tr/2 - root for near-collinear clouds
    eig2 = max((a * c - b * b) / eig1, 0.0)
    total = eig1 + eig2
    return PCAResult(eig1 / total, eig2 / total, eig1, eig2, x.size)


def pc2_projected(pc2: float, t: float, t0: float = 1.0, nu: float = 0.0) -> float:
    """Scale a measured PC2 up by the drift range constriction ``(T/T0)**nu``."""
    return pc2 * 10.0 ** (nu * math.log10(t / t0))


@dataclass(frozen=True)
class DistStats:
    min: float
    max: float
    mean: float
    std: float
    edges: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def dist_stats(w, bins: int = 50) -> DistStats:
    a = np.asarray(w, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty tensor")
    lo, hi = float(a.min()), float(a.max())
    counts, edges = np.histogram(a, bins=bins, range=(lo, hi) if hi > lo else (lo - 0.5, lo + 0.5))
    return DistStats(lo, hi, float(a.mean()), float(a.std()), edges, counts)


PCA_COLUMNS = ["layer_id", "n", "pc1", "pc2", "pc2_proj", "min_ni", "max_ni"]


def pca_rows(pairs: dict, t: float = 1.0, t0: float = 1.0, nu: float = 0.0) -> list[dict]:
    """One CSV row per layer from ``{layer_id: (w_ideal, w_ni)}``."""
    rows = []
    for layer_id, (wi, wn) in pairs.items():
        r = pca2(wi, wn)
        rows.append({
            "layer_id": layer_id, "n": r.n, "pc1": r.pc1, "pc2": r.pc2,
            "pc2_proj": pc2_projected(r.pc2, t, t0, nu),
            "min_ni": float(np.min(wn)), "max_ni": float(np.max(wn)),
        })
    return rows


def write_csv(path, rows: list[dict], columns: list[str]):
    path = Path(path)
    with path.open("w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: _fmt(r[k]) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v
