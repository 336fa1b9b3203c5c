"""Dark-channel-prior dehazing: the classical non-learned reference pipeline.

Pipeline: dark channel (channel-min then patch-min), atmospheric light from
the brightest dark-channel pixels, transmission t = 1 - omega * dark(I/A),
optional guided-filter refinement, then recovery J = (I - A)/max(t, t0) + A.
Constants default to the canonical settings (15-pixel patch, omega 0.95,
t0 0.1, top 0.1% candidates). Outputs are not clamped; serialization does
that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter

__all__ = [
    "DcpConfig",
    "dark_channel",
    "estimate_atmospheric_light",
    "estimate_transmission",
    "guided_filter",
    "dcp_dehaze",
]


@dataclass(frozen=True)
class DcpConfig:
    patch: int = 15
    omega: float = 0.95
    t0: float = 0.1
    top_fraction: float = 0.001
    guided_radius: int = 40
    guided_eps: float = 1e-3

    def __post_init__(self) -> None:
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError(f"patch must be a positive odd integer, got {self.patch}")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError(f"omega must be in (0, 1], got {self.omega}")
        if not 0.0 < self.t0 < 1.0:
            raise ValueError(f"t0 must be in (0, 1), got {self.t0}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError(f"top_fraction must be in (0, 1], got {self.top_fraction}")
        if self.guided_radius < 1:
            raise ValueError(f"guided_radius must be >= 1, got {self.guided_radius}")
        if self.guided_eps <= 0:
            raise ValueError(f"guided_eps must be positive, got {self.guided_eps}")


def _check_rgb(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {arr.shape}")
    return arr


def dark_channel(img, patch: int) -> np.ndarray:
    """Minimum over channels, then minimum over an edge-replicated patch."""
    arr = _check_rgb(img)
    if patch % 2 == 0 or patch < 1:
        raise ValueError(f"patch must be a positive odd integer, got {patch}")
    if patch > min(arr.shape[0], arr.shape[1]):
        raise ValueError(f"patch {patch} exceeds image extent {arr.shape[:2]}")
    channel_min = arr.min(axis=2)
    return minimum_filter(channel_min, size=patch, mode="nearest")


def estimate_atmospheric_light(img, dark, top_fraction: float) -> np.ndarray:
    """Mean color of the pixels with the brightest dark-channel values.

    The candidate set holds the top ``top_fraction`` of pixels (at least
    one); ties are broken by row-major order.
    """
    arr = _check_rgb(img)
    dark_arr = np.asarray(dark, dtype=np.float64)
    if dark_arr.shape != arr.shape[:2]:
        raise ValueError(f"dark channel shape {dark_arr.shape} != image plane {arr.shape[:2]}")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    n = max(1, int(top_fraction * dark_arr.size))
    order = np.argsort(-dark_arr.ravel(), kind="stable")[:n]
    return arr.reshape(-1, 3)[order].mean(axis=0)


def estimate_transmission(img, a, omega: float, patch: int) -> np.ndarray:
    """t = 1 - omega * dark_channel(I / A); values lie in [1 - omega, 1]."""
    arr = _check_rgb(img)
    a_arr = np.asarray(a, dtype=np.float64).reshape(3)
    if a_arr.min() <= 0:
        raise ValueError("atmospheric light channels must be > 0")
    normalized = arr / a_arr[None, None, :]
    dc = np.clip(dark_channel(normalized, patch), 0.0, 1.0)
    return 1.0 - omega * dc


def _box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum over a (2r+1)-square window clipped at the image borders."""

    def along_axis(m: np.ndarray) -> np.ndarray:
        h = m.shape[0]
        cum = np.cumsum(m, axis=0)
        out = np.empty_like(m)
        out[: radius + 1] = cum[radius : 2 * radius + 1]
        out[radius + 1 : h - radius] = cum[2 * radius + 1 :] - cum[: h - 2 * radius - 1]
        out[h - radius :] = cum[-1:] - cum[h - 2 * radius - 1 : h - radius - 1]
        return out

    return along_axis(along_axis(x).T).T


def guided_filter(guide, src, radius: int, eps: float) -> np.ndarray:
    """Edge-preserving smoothing of ``src`` steered by ``guide``.

    Local linear model per window: a = cov(g, p) / (var(g) + eps),
    b = mean(p) - a*mean(g); the output averages a and b over the windows
    covering each pixel. Box means use border-clipped windows.
    """
    g = np.asarray(guide, dtype=np.float64)
    p = np.asarray(src, dtype=np.float64)
    if g.ndim != 2 or g.shape != p.shape:
        raise ValueError(f"guide {g.shape} and input {p.shape} must be the same (H, W)")
    if 2 * radius + 1 > min(g.shape):
        raise ValueError(f"radius {radius} exceeds image extent {g.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    counts = _box_sum(np.ones_like(g), radius)
    mean_g = _box_sum(g, radius) / counts
    mean_p = _box_sum(p, radius) / counts
    var_g = _box_sum(g * g, radius) / counts - mean_g * mean_g
    cov_gp = _box_sum(g * p, radius) / counts - mean_g * mean_p
    a = cov_gp / (var_g + eps)
    b = mean_p - a * mean_g
    mean_a = _box_sum(a, radius) / counts
    mean_b = _box_sum(b, radius) / counts
    return mean_a * g + mean_b


def dcp_dehaze(img, config: DcpConfig | None = None, refine: bool = True) -> np.ndarray:
    """Full dark-channel dehazing; output is unclamped.

    The patch and guided radius shrink automatically when the image is too
    small for the configured sizes, so the defaults tuned for VGA-scale
    photos still run on thumbnails.
    """
    arr = _check_rgb(img)
    cfg = config if config is not None else DcpConfig()
    extent = min(arr.shape[0], arr.shape[1])
    patch = min(cfg.patch, extent if extent % 2 == 1 else extent - 1)
    dark = dark_channel(arr, patch)
    a = estimate_atmospheric_light(arr, dark, cfg.top_fraction)
    a = np.maximum(a, 1e-6)  # guard the divisions for pathological black inputs
    t = estimate_transmission(arr, a, cfg.omega, patch)
    if refine:
        radius = min(cfg.guided_radius, (extent - 1) // 2)
        t = guided_filter(arr.mean(axis=2), t, radius, cfg.guided_eps)
    t = np.maximum(t, cfg.t0)
    return (arr - a[None, None, :]) / t[:, :, None] + a[None, None, :]
