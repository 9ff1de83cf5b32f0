"""Evaluation metrics: noise-normalized RMSE, SSIM, and their combination."""

from __future__ import annotations

import csv

import numpy as np
from scipy.signal import convolve2d

__all__ = [
    "rmse",
    "ssim",
    "combined_norm",
    "write_member_rmse_csv",
    "write_field_metrics_csv",
]


def rmse(d_obs, d_sim, sigma, time_ids) -> float:
    """sqrt((1/N) * sum over data of ((obs - sim)/sigma)^2).

    N is the number of distinct assimilation time steps, so adding data
    at an existing time increases the inner sum but not N.
    """
    d_obs, d_sim, sigma = (np.asarray(a, dtype=float) for a in (d_obs, d_sim, sigma))
    time_ids = np.asarray(time_ids)
    if not (d_obs.shape == d_sim.shape == sigma.shape == time_ids.shape):
        raise ValueError("observation, simulation, sigma and time vectors must align")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    n_steps = np.unique(time_ids).size
    return float(np.sqrt(np.sum(((d_obs - d_sim) / sigma) ** 2) / n_steps))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    image_a,
    image_b,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float | None = None,
    sigma: float = 1.5,
) -> float:
    """Mean local structural similarity with a Gaussian window.

    Defaults are the customary 11x11 window with sigma 1.5 and
    K1/K2 = 0.01/0.03.  dynamic_range defaults to max - min of the first
    image (the reference).  Symmetric in its two arguments apart from
    that default, which callers comparing against a truth map should
    pass explicitly.
    """
    a = np.asarray(image_a, dtype=float)
    b = np.asarray(image_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("images must be two equal-shape 2D arrays")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("images must be finite (mask inactive columns before calling)")
    if dynamic_range is None:
        dynamic_range = float(a.max() - a.min())
        if dynamic_range == 0.0:
            dynamic_range = 1.0
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be positive")
    window = min(window, min(a.shape))
    if window % 2 == 0:
        window -= 1
    w = _gaussian_window(window, sigma)

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    var_a = convolve2d(a * a, w, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, w, mode="valid") - mu_b**2
    cov = convolve2d(a * b, w, mode="valid") - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def combined_norm(ssim_value: float, rmse_value: float) -> float:
    """((1 - SSIM) + RMSE) / 2: decreasing in SSIM, increasing in RMSE."""
    return ((1.0 - ssim_value) + rmse_value) / 2.0


def write_member_rmse_csv(path, columns: dict) -> None:
    """Per-realization RMSE table; columns maps a label to a value vector."""
    labels = list(columns)
    vectors = [np.asarray(columns[label], dtype=float) for label in labels]
    n = vectors[0].size
    if any(v.size != n for v in vectors):
        raise ValueError("all RMSE columns must have the same length")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["realisation"] + labels)
        for i in range(n):
            w.writerow([i] + [format(v[i], ".17g") for v in vectors])


def write_field_metrics_csv(path, rows: dict) -> None:
    """Field-metric table; rows maps a label to (ssim, rmse, combined_norm)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "ssim", "rmse", "combined_norm"])
        for label, (s, r, n) in rows.items():
            w.writerow([label] + [format(v, ".17g") for v in (s, r, n)])
