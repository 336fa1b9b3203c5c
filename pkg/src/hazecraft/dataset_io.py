"""PNG and manifest I/O shared by the whole pipeline.

Images travel as float64 arrays on [0, 1]: shape (H, W) for grayscale or
depth data, (H, W, 3) for RGB. Color images are stored as 8-bit RGB PNG,
depth maps as 16-bit grayscale PNG. The manifest is UTF-8 text with one
tab-separated record per line:

    clean_path <TAB> depth_path <TAB> hazy_path <TAB> A_r <TAB> A_g <TAB> A_b <TAB> beta

Reals are printed with 17 significant digits so they round-trip float64
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "DatasetRecord",
    "ImageFormatError",
    "ManifestError",
    "read_png",
    "write_png",
    "read_depth_png",
    "write_depth_png",
    "read_manifest",
    "write_manifest",
    "image_to_nchw",
    "nchw_to_image",
]


class ImageFormatError(ValueError):
    """A PNG could not be decoded or uses an unsupported layout."""


class ManifestError(ValueError):
    """A manifest line does not match the expected record format."""


@dataclass(frozen=True)
class DatasetRecord:
    """One (clean, depth, hazy) triple with the haze parameters that made it."""

    clean_path: str
    depth_path: str
    hazy_path: str
    a: tuple[float, float, float]
    beta: float


def read_png(path) -> np.ndarray:
    """Decode a PNG into a float64 array on [0, 1].

    Supports 8-bit RGB -> (H, W, 3), 8-bit grayscale -> (H, W) and 16-bit
    grayscale -> (H, W). Anything else is rejected.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "RGB":
                return np.asarray(img, dtype=np.float64) / 255.0
            if mode == "L":
                return np.asarray(img, dtype=np.float64) / 255.0
            if mode in ("I;16", "I"):
                arr = np.asarray(img, dtype=np.float64)
                if arr.min() < 0 or arr.max() > 65535:
                    raise ImageFormatError(f"{path}: sample values outside the 16-bit range")
                return arr / 65535.0
            raise ImageFormatError(
                f"{path}: unsupported PNG mode {mode!r}; expected 8-bit RGB/grayscale or 16-bit grayscale"
            )
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc


def write_png(img, path) -> None:
    """Write an 8-bit PNG, clamping to [0, 1] and quantizing by round(v*255)."""
    arr = np.asarray(img, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ImageFormatError(f"refusing to write non-finite image data to {path}")
    quant = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(quant, mode="L").save(path, format="PNG")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        Image.fromarray(quant, mode="RGB").save(path, format="PNG")
    else:
        raise ImageFormatError(f"image must be (H, W) or (H, W, 3); got shape {arr.shape}")


def read_depth_png(path) -> np.ndarray:
    """Read a grayscale depth PNG as (H, W) on [0, 1] (16-bit scale: v/65535)."""
    arr = read_png(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: depth map must be grayscale, got shape {arr.shape}")
    return arr


def write_depth_png(depth, path) -> None:
    """Write a depth map as 16-bit grayscale PNG, quantizing by round(v*65535)."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ImageFormatError(f"depth map must be (H, W); got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ImageFormatError(f"refusing to write non-finite depth data to {path}")
    quant = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(quant).save(path, format="PNG")  # uint16 -> 16-bit grayscale


def _format_real(value: float) -> str:
    return f"{value:.17g}"


def write_manifest(records, path) -> None:
    lines = []
    for rec in records:
        fields = (
            rec.clean_path,
            rec.depth_path,
            rec.hazy_path,
            _format_real(rec.a[0]),
            _format_real(rec.a[1]),
            _format_real(rec.a[2]),
            _format_real(rec.beta),
        )
        lines.append("\t".join(fields))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path) -> list[DatasetRecord]:
    text = Path(path).read_text(encoding="utf-8")
    records: list[DatasetRecord] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ManifestError(
                f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}"
            )
        try:
            a = (float(parts[3]), float(parts[4]), float(parts[5]))
            beta = float(parts[6])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid numeric field ({exc})") from None
        records.append(
            DatasetRecord(
                clean_path=parts[0], depth_path=parts[1], hazy_path=parts[2], a=a, beta=beta
            )
        )
    return records


def image_to_nchw(img) -> np.ndarray:
    """(H, W) or (H, W, 3) image array -> (1, C, H, W) tensor data."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None, None, :, :].copy()
    if arr.ndim == 3 and arr.shape[2] in (1, 3):
        return np.ascontiguousarray(arr.transpose(2, 0, 1)[None])
    raise ImageFormatError(f"image must be (H, W) or (H, W, C<=3); got shape {arr.shape}")


def nchw_to_image(arr) -> np.ndarray:
    """(1, C, H, W) tensor data -> (H, W) or (H, W, C) image array."""
    data = np.asarray(arr, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] != 1:
        raise ImageFormatError(f"expected a single-image (1, C, H, W) array; got shape {data.shape}")
    if data.shape[1] == 1:
        return data[0, 0].copy()
    return np.ascontiguousarray(data[0].transpose(1, 2, 0))
