"""Synthetic haze generation via the atmospheric scattering model.

Given a clean image J, a normalized depth map d and parameters (A, beta),
the hazy observation is

    I = J * t + A * (1 - t),   t = exp(-beta * d)

Depth maps are min-max normalized to [0, 1] per image before the
exponential, so the beta grid produces non-degenerate transmission for any
source depth scale. Haze is blended in linear [0, 1] intensity (no gamma
handling); values may leave [0, 1] in memory and are clamped only when
serialized to 8-bit PNG.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset_io
from .dataset_io import DatasetRecord
from .util import parallel_map

__all__ = [
    "BETA_CHOICES",
    "HazeParams",
    "transmission_from_depth",
    "apply_scattering",
    "sample_haze_params",
    "normalize_depth",
    "procedural_scene",
    "generate_scene_set",
    "build_dataset",
]

logger = logging.getLogger(__name__)

# Scattering coefficients sampled during dataset synthesis.
BETA_CHOICES = (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)

# Per-channel atmospheric light is sampled uniformly from this interval.
A_RANGE = (0.6, 1.0)


@dataclass(frozen=True)
class HazeParams:
    """Per-channel atmospheric light A, scattering coefficient beta, bias b."""

    a: tuple[float, float, float]
    beta: float
    b: float = 1.0

    def __post_init__(self) -> None:
        if len(self.a) != 3:
            raise ValueError(f"atmospheric light needs 3 channels, got {len(self.a)}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def transmission_from_depth(depth, beta: float) -> np.ndarray:
    """t = exp(-beta * d) for a depth map normalized to [0, 1]."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    d = np.asarray(depth, dtype=np.float64)
    if d.min() < 0.0 or d.max() > 1.0:
        raise ValueError("depth map must be normalized to [0, 1] (see normalize_depth)")
    return np.exp(-beta * d)


def apply_scattering(clean, t, a) -> np.ndarray:
    """Blend a clean (H, W, 3) image toward atmospheric light by 1 - t.

    The result is a pixelwise convex combination of the clean image and A;
    no clamping happens here.
    """
    img = np.asarray(clean, dtype=np.float64)
    trans = np.asarray(t, dtype=np.float64)
    a_arr = np.asarray(a, dtype=np.float64).reshape(3)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"clean image must be (H, W, 3), got shape {img.shape}")
    if trans.shape != img.shape[:2]:
        raise ValueError(f"transmission shape {trans.shape} != image plane {img.shape[:2]}")
    t3 = trans[:, :, None]
    return img * t3 + a_arr[None, None, :] * (1.0 - t3)


def _sample_params(rng: np.random.Generator, betas) -> HazeParams:
    a = tuple(float(v) for v in rng.uniform(A_RANGE[0], A_RANGE[1], size=3))
    beta = float(betas[int(rng.integers(len(betas)))])
    return HazeParams(a=a, beta=beta)


def sample_haze_params(seed, betas=BETA_CHOICES) -> HazeParams:
    """Draw A uniformly per channel on [0.6, 1.0] and beta from the grid.

    Deterministic for a fixed seed.
    """
    return _sample_params(np.random.default_rng(seed), tuple(betas))


def normalize_depth(depth) -> np.ndarray:
    """Min-max normalize a depth map to [0, 1]; a constant map becomes zeros."""
    d = np.asarray(depth, dtype=np.float64)
    lo = float(d.min())
    hi = float(d.max())
    if hi - lo < 1e-12:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def procedural_scene(seed, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Random piecewise-smooth scene with a matching depth map.

    A color-gradient backdrop carries a depth ramp toward 1 (farthest);
    colored, lightly shaded rectangles sit at their own depths and are
    painted far-to-near. Every region gets fine speckle texture (its own
    roughness amplitude) so haze measurably suppresses local contrast.
    Returns (clean (H, W, 3), depth (H, W)), both on [0, 1], fully
    determined by the seed.
    """
    if height < 16 or width < 16:
        raise ValueError(f"scene must be at least 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)

    def speckle(shape):
        amp = rng.uniform(0.05, 0.15)
        return rng.uniform(-amp, amp, size=shape)

    ramp = np.broadcast_to(np.linspace(0.0, 1.0, height)[:, None], (height, width))
    # Scene radiance stays below typical atmospheric light (sampled in
    # [0.6, 1.0]) so haze visibly washes content toward A.
    top = rng.uniform(0.05, 0.6, size=3)
    bottom = rng.uniform(0.05, 0.6, size=3)
    clean = top[None, None, :] * (1.0 - ramp[:, :, None]) + bottom[None, None, :] * ramp[:, :, None]
    clean += speckle((height, width, 3))
    if rng.random() < 0.5:
        depth = 0.55 + 0.45 * ramp  # bottom of the frame is farthest
    else:
        depth = 0.55 + 0.45 * (1.0 - ramp)
    depth = np.array(depth)

    n_rects = int(rng.integers(6, 13))
    rect_depths = np.sort(rng.uniform(0.05, 0.9, size=n_rects))[::-1]  # paint far first
    min_side = 3
    for rect_depth in rect_depths:
        rh = int(rng.integers(max(min_side, height // 16), max(min_side + 1, height // 4)))
        rw = int(rng.integers(max(min_side, width // 16), max(min_side + 1, width // 4)))
        y0 = int(rng.integers(0, height - rh + 1))
        x0 = int(rng.integers(0, width - rw + 1))
        color = rng.uniform(0.05, 0.6, size=3)
        shade = 1.0 + 0.3 * (rng.random() - 0.5) * np.linspace(-1.0, 1.0, rw)
        block = color[None, None, :] * shade[None, :, None] + speckle((rh, rw, 3))
        clean[y0 : y0 + rh, x0 : x0 + rw, :] = block
        depth[y0 : y0 + rh, x0 : x0 + rw] = rect_depth

    return np.clip(clean, 0.0, 1.0), np.clip(depth, 0.0, 1.0)


def generate_scene_set(out_dir, count: int, height: int, width: int, seed) -> list[tuple[str, str]]:
    """Write ``count`` procedural scenes under out_dir/clean and out_dir/depth.

    Scene i is generated from the sub-seed (seed, i), so any prefix of the
    set is reproducible. Returns the (clean_path, depth_path) pairs.
    """
    out = Path(out_dir)
    clean_dir = out / "clean"
    depth_dir = out / "depth"
    clean_dir.mkdir(parents=True, exist_ok=True)
    depth_dir.mkdir(parents=True, exist_ok=True)
    pairs: list[tuple[str, str]] = []
    for i in range(count):
        clean, depth = procedural_scene((seed, i), height, width)
        stem = f"scene{i:05d}"
        clean_path = clean_dir / f"{stem}.png"
        depth_path = depth_dir / f"{stem}.png"
        dataset_io.write_png(clean, clean_path)
        dataset_io.write_depth_png(depth, depth_path)
        pairs.append((str(clean_path), str(depth_path)))
    return pairs


def build_dataset(
    clean_dir, depth_dir, out_dir, seed, betas=None
) -> tuple[list[DatasetRecord], list[str]]:
    """Materialize hazy images for every clean/depth pair and write a manifest.

    Clean PNGs are matched to depth PNGs by filename stem; stems without a
    depth map are skipped and reported. Haze parameters are sampled per
    record from the seed, over stems in sorted order, so regeneration with
    the same seed is byte-identical. The manifest lands at
    ``out_dir/manifest.tsv``. Returns (records, skipped_stems).
    """
    clean_root = Path(clean_dir)
    depth_root = Path(depth_dir)
    out_root = Path(out_dir)
    beta_pool = BETA_CHOICES if betas is None else tuple(float(b) for b in betas)
    if not beta_pool or any(b <= 0 for b in beta_pool):
        raise ValueError(f"beta choices must be positive, got {beta_pool}")

    stems = sorted(p.stem for p in clean_root.glob("*.png"))
    kept: list[str] = []
    skipped: list[str] = []
    for stem in stems:
        if (depth_root / f"{stem}.png").is_file():
            kept.append(stem)
        else:
            skipped.append(stem)
            logger.warning("no depth map for %s; record skipped", stem)
    if not stems:
        logger.warning("no clean PNGs found in %s; writing an empty manifest", clean_root)

    rng = np.random.default_rng(seed)
    params = [_sample_params(rng, beta_pool) for _ in kept]

    hazy_dir = out_root / "hazy"
    hazy_dir.mkdir(parents=True, exist_ok=True)

    def make_record(item: tuple[str, HazeParams]) -> DatasetRecord:
        stem, p = item
        clean_path = clean_root / f"{stem}.png"
        depth_path = depth_root / f"{stem}.png"
        clean = dataset_io.read_png(clean_path)
        depth = normalize_depth(dataset_io.read_depth_png(depth_path))
        if depth.shape != clean.shape[:2]:
            raise ValueError(
                f"{stem}: depth map {depth.shape} does not match clean image {clean.shape[:2]}"
            )
        t = transmission_from_depth(depth, p.beta)
        hazy = apply_scattering(clean, t, p.a)
        hazy_path = hazy_dir / f"{stem}.png"
        dataset_io.write_png(hazy, hazy_path)
        return DatasetRecord(
            clean_path=str(clean_path),
            depth_path=str(depth_path),
            hazy_path=str(hazy_path),
            a=p.a,
            beta=p.beta,
        )

    records = parallel_map(make_record, zip(kept, params))
    dataset_io.write_manifest(records, out_root / "manifest.tsv")
    return records, skipped
