"""The all-in-one dehazing model.

A five-layer CNN estimates a per-pixel correction field K from the hazy
input; the clean image is then generated pointwise as J = K*I - K + b with
the constant bias b (default 1). The multiscale variant fuses features by
concatenating earlier layers into later ones:

    c1 = relu(conv1 1x1 (x))
    c2 = relu(conv2 3x3 (c1))
    c3 = relu(conv3 5x5 (concat[c1, c2]))
    c4 = relu(conv4 7x7 (concat[c2, c3]))
    K  = relu(conv5 3x3 (concat[c1, c2, c3, c4]))

Every layer has three output channels, so the multiscale model carries
exactly 1,761 trainable scalars. The plain variant chains
conv1 -> conv2 -> conv3 -> conv4 -> conv5 with no concatenation, for
ablation runs. The final ReLU (keeping K >= 0) can be disabled via a flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConvSpec, GradTape, ShapeError, Tensor

__all__ = [
    "ArchVariant",
    "ConvLayer",
    "AodNetParams",
    "CheckpointError",
    "DEFAULT_INIT_STD",
    "DEFAULT_BIAS_B",
    "init_params",
    "param_count",
    "estimate_k",
    "generate_clean",
    "ground_truth_k",
    "dehaze",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_INIT_STD = 0.02
DEFAULT_BIAS_B = 1.0


class ArchVariant(str, Enum):
    MULTISCALE = "multiscale"
    PLAIN = "plain"


# Per variant: (layer name, out_channels, in_channels, square kernel size).
_LAYER_DIMS: dict[ArchVariant, tuple[tuple[str, int, int, int], ...]] = {
    ArchVariant.MULTISCALE: (
        ("conv1", 3, 3, 1),
        ("conv2", 3, 3, 3),
        ("conv3", 3, 6, 5),
        ("conv4", 3, 6, 7),
        ("conv5", 3, 12, 3),
    ),
    ArchVariant.PLAIN: (
        ("conv1", 3, 3, 1),
        ("conv2", 3, 3, 3),
        ("conv3", 3, 3, 5),
        ("conv4", 3, 3, 7),
        ("conv5", 3, 3, 3),
    ),
}

MIN_SPATIAL = 7


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the requested model."""


@dataclass
class ConvLayer:
    weights: Tensor  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)

    @property
    def spec(self) -> ConvSpec:
        cout, cin, kh, kw = self.weights.shape
        return ConvSpec(cin, cout, kh, kw, (kh - 1) // 2)


@dataclass
class AodNetParams:
    """The five convolution layers plus the constant output bias b."""

    variant: ArchVariant
    layers: dict[str, ConvLayer]
    bias_b: float = DEFAULT_BIAS_B

    def trainable_refs(self) -> list[object]:
        """Objects the tape keys gradients by, in optimizer order."""
        refs: list[object] = []
        for layer in self.layers.values():
            refs.append(layer.weights)
            refs.append(layer.bias)
        return refs

    def trainable_arrays(self) -> list[np.ndarray]:
        """Raw arrays in the same order as :meth:`trainable_refs`."""
        arrays: list[np.ndarray] = []
        for layer in self.layers.values():
            arrays.append(layer.weights.data)
            arrays.append(layer.bias)
        return arrays

    def with_arrays(self, arrays: list[np.ndarray]) -> "AodNetParams":
        """Rebuild the parameter set from updated raw arrays (same order)."""
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers: dict[str, ConvLayer] = {}
        for i, name in enumerate(self.layers):
            layers[name] = ConvLayer(Tensor(arrays[2 * i]), np.asarray(arrays[2 * i + 1], dtype=np.float64))
        return AodNetParams(variant=self.variant, layers=layers, bias_b=self.bias_b)


def param_count(params: AodNetParams) -> int:
    """Total number of trainable scalars (weights plus biases)."""
    return sum(layer.weights.size + layer.bias.size for layer in params.layers.values())


def init_params(
    seed, std: float = DEFAULT_INIT_STD, variant: ArchVariant = ArchVariant.MULTISCALE
) -> AodNetParams:
    """Gaussian N(0, std^2) weights and zero biases, deterministic per seed.

    Layers are drawn in conv1..conv5 order from a single generator.
    """
    if std <= 0:
        raise ValueError(f"init std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    layers: dict[str, ConvLayer] = {}
    for name, cout, cin, k in _LAYER_DIMS[ArchVariant(variant)]:
        weights = rng.normal(0.0, std, size=(cout, cin, k, k))
        layers[name] = ConvLayer(Tensor(weights), np.zeros(cout))
    return AodNetParams(variant=ArchVariant(variant), layers=layers)


def _conv_block(params: AodNetParams, name: str, x: Tensor, tape: GradTape | None) -> Tensor:
    layer = params.layers[name]
    return tc.conv2d(x, layer.weights, layer.bias, layer.spec, tape)


def estimate_k(
    params: AodNetParams,
    hazy: Tensor,
    tape: GradTape | None = None,
    final_relu: bool = True,
) -> Tensor:
    """Run the K-estimation network; output shape equals the input shape."""
    if hazy.shape[1] != 3:
        raise ShapeError(f"hazy input must have 3 channels, got {hazy.shape[1]}")
    if hazy.shape[2] < MIN_SPATIAL or hazy.shape[3] < MIN_SPATIAL:
        raise ShapeError(
            f"spatial dims must be at least {MIN_SPATIAL}x{MIN_SPATIAL}, got "
            f"{hazy.shape[2]}x{hazy.shape[3]}"
        )
    c1 = tc.relu(_conv_block(params, "conv1", hazy, tape), tape)
    c2 = tc.relu(_conv_block(params, "conv2", c1, tape), tape)
    if params.variant is ArchVariant.MULTISCALE:
        c3 = tc.relu(_conv_block(params, "conv3", tc.concat_channels([c1, c2], tape), tape), tape)
        c4 = tc.relu(_conv_block(params, "conv4", tc.concat_channels([c2, c3], tape), tape), tape)
        k = _conv_block(params, "conv5", tc.concat_channels([c1, c2, c3, c4], tape), tape)
    else:
        c3 = tc.relu(_conv_block(params, "conv3", c2, tape), tape)
        c4 = tc.relu(_conv_block(params, "conv4", c3, tape), tape)
        k = _conv_block(params, "conv5", c4, tape)
    if final_relu:
        k = tc.relu(k, tape)
    return k


def generate_clean(k: Tensor, hazy: Tensor, b: float, tape: GradTape | None = None) -> Tensor:
    """Pointwise J = K*I - K + b; no clamping in memory."""
    return tc.add_scalar(tc.sub(tc.mul(k, hazy, tape), k, tape), float(b), tape)


def dehaze(
    params: AodNetParams,
    hazy: Tensor,
    tape: GradTape | None = None,
    final_relu: bool = True,
) -> Tensor:
    """Estimate K and generate the clean image in one call."""
    k = estimate_k(params, hazy, tape=tape, final_relu=final_relu)
    return generate_clean(k, hazy, params.bias_b, tape=tape)


def ground_truth_k(
    hazy: Tensor, t: Tensor, a, b: float = 1.0, eps: float = 1e-6
) -> tuple[Tensor, np.ndarray]:
    """The exact correction field implied by the scattering parameters.

        K = ((I - A)/t + (A - b)) / (I - 1)

    Diagnostic only; never part of the inference path. Pixels where
    |I - 1| <= eps sit on the formula's singularity: they are masked False
    in the returned boolean array and get K = 0 instead of a near-infinite
    value. Returns (K, valid_mask), both shaped like ``hazy``.
    """
    a_arr = np.asarray(a, dtype=np.float64).reshape(3)
    i = hazy.data
    if i.shape[1] != 3:
        raise ShapeError(f"hazy input must have 3 channels, got {i.shape[1]}")
    if t.shape[0] != i.shape[0] or t.shape[2:] != i.shape[2:] or t.shape[1] not in (1, 3):
        raise ShapeError(f"transmission shape {t.shape} does not match hazy {i.shape}")
    if t.data.min() <= 0:
        raise ValueError("transmission must be strictly positive")
    t_full = np.broadcast_to(t.data, i.shape)
    denom = i - 1.0
    valid = np.abs(denom) > eps
    a_img = a_arr.reshape(1, 3, 1, 1)
    numer = (i - a_img) / t_full + (a_img - float(b))
    k = np.where(valid, numer / np.where(valid, denom, 1.0), 0.0)
    return Tensor(k), valid


_CKPT_MAGIC = ("AODNET-CKPT", "v1")
_VALUES_PER_LINE = 8


def save_checkpoint(params: AodNetParams, path) -> None:
    """Serialize all layers as UTF-8 text with 17-significant-digit scalars."""
    lines = [f"{_CKPT_MAGIC[0]} {_CKPT_MAGIC[1]} {params.variant.value}"]
    for name, layer in params.layers.items():
        cout, cin, kh, kw = layer.weights.shape
        lines.append(f"layer {name} {cout} {cin} {kh} {kw}")
        flat = layer.weights.data.ravel()
        for i in range(0, flat.size, _VALUES_PER_LINE):
            lines.append(" ".join(f"{v:.17g}" for v in flat[i : i + _VALUES_PER_LINE]))
        lines.append(" ".join(f"{v:.17g}" for v in layer.bias))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_checkpoint(path, variant: ArchVariant | None = None) -> AodNetParams:
    """Parse a checkpoint; exact inverse of :func:`save_checkpoint`.

    When ``variant`` is given, a file holding the other architecture is
    rejected instead of silently loading mismatched shapes.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise CheckpointError(f"{path}:1: empty checkpoint file")
    head = lines[0].split()
    if len(head) != 3 or (head[0], head[1]) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}:1: malformed header {lines[0]!r}")
    try:
        file_variant = ArchVariant(head[2])
    except ValueError:
        raise CheckpointError(f"{path}:1: unknown architecture variant {head[2]!r}") from None
    if variant is not None and file_variant is not ArchVariant(variant):
        raise CheckpointError(
            f"{path}: checkpoint holds {file_variant.value} weights; cannot load into a "
            f"{ArchVariant(variant).value} model (layer shapes differ)"
        )

    layers: dict[str, ConvLayer] = {}
    lineno = 1  # 1-based index of the last consumed line
    pos = 1  # next line to consume
    for name, cout, cin, k in _LAYER_DIMS[file_variant]:
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise CheckpointError(f"{path}: unexpected end of file; missing layer {name}")
        lineno = pos + 1
        header = lines[pos].split()
        pos += 1
        if len(header) != 6 or header[0] != "layer":
            raise CheckpointError(f"{path}:{lineno}: expected 'layer {name} ...', got {lines[lineno - 1]!r}")
        if header[1] != name:
            raise CheckpointError(f"{path}:{lineno}: expected layer {name}, found {header[1]!r}")
        dims = header[2:]
        if dims != [str(cout), str(cin), str(k), str(k)]:
            raise CheckpointError(
                f"{path}:{lineno}: layer {name} shape {' '.join(dims)} does not match the "
                f"{file_variant.value} architecture ({cout} {cin} {k} {k})"
            )
        need = cout * cin * k * k + cout
        values: list[float] = []
        while len(values) < need:
            while pos < len(lines) and not lines[pos].strip():
                pos += 1
            if pos >= len(lines):
                raise CheckpointError(
                    f"{path}: unexpected end of file in layer {name} "
                    f"({len(values)}/{need} scalars read)"
                )
            lineno = pos + 1
            tokens = lines[pos].split()
            if tokens and tokens[0] == "layer":
                raise CheckpointError(
                    f"{path}:{lineno}: layer {name} ends early ({len(values)}/{need} scalars)"
                )
            pos += 1
            for tok in tokens:
                try:
                    values.append(float(tok))
                except ValueError:
                    raise CheckpointError(
                        f"{path}:{lineno}: invalid numeric token {tok!r} in layer {name}"
                    ) from None
        if len(values) > need:
            raise CheckpointError(
                f"{path}:{lineno}: layer {name} holds {len(values)} scalars, expected {need}"
            )
        arr = np.asarray(values, dtype=np.float64)
        weights = arr[: cout * cin * k * k].reshape(cout, cin, k, k)
        bias = arr[cout * cin * k * k :]
        layers[name] = ConvLayer(Tensor(weights), bias)
    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos < len(lines):
        raise CheckpointError(f"{path}:{pos + 1}: unexpected trailing content {lines[pos]!r}")
    return AodNetParams(variant=file_variant, layers=layers)
