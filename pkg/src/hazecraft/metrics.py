"""PSNR, windowed SSIM with per-term reporting, and the mean/residual MSE split.

All metrics operate on [0, 1] intensities (peak = 1). Published numbers on a
0..255 scale convert by 255^2 for MSE-like quantities and are unchanged for
PSNR/SSIM. SSIM follows the canonical recipe: 11x11 Gaussian window with
sigma 1.5, C1 = (0.01*L)^2, C2 = (0.03*L)^2, C3 = C2/2, valid window
positions only (no border padding), and color inputs reduced to luminance by
the channel mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "MetricsReport",
    "SsimResult",
    "psnr",
    "ssim",
    "mse_decompose",
    "compute_report",
    "SSIM_WINDOW",
    "SSIM_SIGMA",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = (0.01 * 1.0) ** 2
_C2 = (0.03 * 1.0) ** 2
_C3 = _C2 / 2.0


class SsimResult(NamedTuple):
    ssim: float
    mean_l: float
    mean_c: float
    mean_s: float


@dataclass(frozen=True)
class MetricsReport:
    """Image-pair quality summary, CSV-friendly."""

    psnr: float
    ssim: float
    mean_l: float
    mean_c: float
    mean_s: float
    mse_total: float
    mse_mean_part: float
    mse_residual_part: float


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"images differ in shape: {x.shape} vs {y.shape}")
    if x.ndim not in (2, 3) or (x.ndim == 3 and x.shape[2] != 3):
        raise ValueError(f"images must be (H, W) or (H, W, 3); got shape {x.shape}")
    return x, y


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; identical images report +inf."""
    x, y = _check_pair(a, b)
    err = float(np.mean((x - y) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _luminance(x: np.ndarray) -> np.ndarray:
    return x if x.ndim == 2 else x.mean(axis=2)


def _gaussian_1d() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _window_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable Gaussian correlation; cropping the margin leaves only
    # positions whose window never touched the zero padding.
    m = SSIM_WINDOW // 2
    t = correlate1d(x, kernel, axis=0, mode="constant", cval=0.0)
    t = correlate1d(t, kernel, axis=1, mode="constant", cval=0.0)
    return t[m:-m, m:-m]


def ssim(a, b) -> SsimResult:
    """Windowed SSIM plus the mean luminance/contrast/structure terms.

    The overall score is the mean over valid windows of the product
    l*c*s. Inputs smaller than the 11x11 window are rejected.
    """
    x, y = _check_pair(a, b)
    lx = _luminance(x)
    ly = _luminance(y)
    if min(lx.shape) < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM; got {lx.shape}"
        )
    kernel = _gaussian_1d()
    mx = _window_mean(lx, kernel)
    my = _window_mean(ly, kernel)
    exx = _window_mean(lx * lx, kernel)
    eyy = _window_mean(ly * ly, kernel)
    exy = _window_mean(lx * ly, kernel)
    vx = np.maximum(exx - mx * mx, 0.0)
    vy = np.maximum(eyy - my * my, 0.0)
    cov = exy - mx * my
    sx = np.sqrt(vx)
    sy = np.sqrt(vy)
    l_term = (2.0 * mx * my + _C1) / (mx * mx + my * my + _C1)
    c_term = (2.0 * sx * sy + _C2) / (vx + vy + _C2)
    s_term = (cov + _C3) / (sx * sy + _C3)
    return SsimResult(
        ssim=float(np.mean(l_term * c_term * s_term)),
        mean_l=float(np.mean(l_term)),
        mean_c=float(np.mean(c_term)),
        mean_s=float(np.mean(s_term)),
    )


def mse_decompose(a, b) -> tuple[float, float, float]:
    """Split the MSE between two images into mean-image and residual parts.

    The mean image repeats the per-channel spatial mean everywhere; the
    residual is the zero-mean remainder, so the two MSEs add up to the
    total exactly. Returns (mse_total, mse_mean_part, mse_residual_part).
    """
    x, y = _check_pair(a, b)
    spatial = (0, 1)
    mean_x = x.mean(axis=spatial, keepdims=True)
    mean_y = y.mean(axis=spatial, keepdims=True)
    total = float(np.mean((x - y) ** 2))
    mean_part = float(np.mean((mean_x - mean_y) ** 2))
    residual_part = float(np.mean(((x - mean_x) - (y - mean_y)) ** 2))
    return total, mean_part, residual_part


def compute_report(a, b) -> MetricsReport:
    """All metrics for one image pair in a single report."""
    s = ssim(a, b)
    total, mean_part, residual_part = mse_decompose(a, b)
    return MetricsReport(
        psnr=psnr(a, b),
        ssim=s.ssim,
        mean_l=s.mean_l,
        mean_c=s.mean_c,
        mean_s=s.mean_s,
        mse_total=total,
        mse_mean_part=mean_part,
        mse_residual_part=residual_part,
    )
