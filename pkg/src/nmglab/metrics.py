"""Reconstruction and trajectory fidelity metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def _window_stats(x: np.ndarray, win: int) -> tuple[np.ndarray, np.ndarray]:
    w = sliding_window_view(x, (win, win))
    return w.mean(axis=(-2, -1)), w


def ssim(a, b, win: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over all valid ``win x win`` uniform windows (stride 1, dynamic range 1).

    Local variances/covariance are population (1/N) moments.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    mu_a, wa = _window_stats(a, win)
    mu_b, wb = _window_stats(b, win)
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def trajectory_deviation(a, b) -> np.ndarray:
    """Per-rung Euclidean distance; returns an array of (t, distance) rows."""
    la = a.latents if hasattr(a, "latents") else np.asarray(a)
    lb = b.latents if hasattr(b, "latents") else np.asarray(b)
    if la.shape != lb.shape:
        raise ValueError(f"trajectory shapes differ: {la.shape} vs {lb.shape}")
    d = np.sqrt(((la - lb).reshape(len(la), -1) ** 2).sum(axis=1))
    return np.column_stack([np.arange(len(la), dtype=np.float64), d])


@dataclass
class ReconReport:
    method: str
    mse: float
    ssim: float
    wall_ms: float
    deviation_series: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be non-negative")
        if self.ssim > 1 + 1e-12:
            raise ValueError("ssim cannot exceed 1")


REPORT_COLUMNS = ("method", "mse", "ssim", "wall_ms")


def write_reports_csv(path, reports: list[ReconReport], extra: dict[str, list] | None = None) -> None:
    """ReconReport rows as ``method,mse,ssim,wall_ms`` (plus optional extra leading columns)."""
    extra = extra or {}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(list(extra) + list(REPORT_COLUMNS))
        for i, r in enumerate(reports):
            wr.writerow([extra[k][i] for k in extra]
                        + [r.method, repr(r.mse), repr(r.ssim), f"{r.wall_ms:.3f}"])
