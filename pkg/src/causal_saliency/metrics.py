"""Map-to-map similarity and map-to-mask localization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .saliency import SaliencyMap

METRICS = ("pearson", "spearman", "ssim")
SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4

MapLike = Union[SaliencyMap, np.ndarray]


@dataclass(frozen=True)
class SimilarityScore:
    metric: str
    value: float


def _gray(m: MapLike) -> np.ndarray:
    """(H, W) map: max over channels of |value|."""
    if isinstance(m, SaliencyMap):
        return m.gray
    a = np.abs(np.asarray(m, dtype=np.float64))
    while a.ndim > 3:
        a = a[0]
    return a.max(axis=0) if a.ndim == 3 else a


def _maxnorm(a: np.ndarray) -> np.ndarray:
    peak = a.max()
    return a / peak if peak > 0 else np.zeros_like(a)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, c1: float = SSIM_C1,
         c2: float = SSIM_C2) -> float:
    """Mean SSIM over every fully contained ``window`` x ``window`` patch (uniform weights)."""
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"maps smaller than the {window}x{window} SSIM window")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def similarity(a: MapLike, b: MapLike, metric: str = "spearman") -> SimilarityScore:
    """Compare two maps on their absolute (channel-max) magnitudes.

    pearson and ssim see abs-maxnormed maps; spearman correlates mean-tie ranks.
    Correlations involving a constant map are 0.
    """
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"map shapes differ: {ga.shape} vs {gb.shape}")
    if metric == "pearson":
        value = pearson(_maxnorm(ga), _maxnorm(gb))
    elif metric == "spearman":
        value = pearson(rankdata(ga.ravel()), rankdata(gb.ravel()))
    elif metric == "ssim":
        value = ssim(_maxnorm(ga), _maxnorm(gb))
    else:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return SimilarityScore(metric, value)


def localization_score(smap: MapLike, mask: np.ndarray) -> float:
    """Share of absolute saliency mass that falls inside ``mask``."""
    g = _gray(smap)
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim > 2:
        m = m[0]
    if m.shape != g.shape:
        raise ValueError(f"mask shape {m.shape} does not match map shape {g.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    total = g.sum()
    return float((g * (m > 0)).sum() / total) if total > 0 else 0.0
