"""Dense NCHW tensors with just enough reverse-mode autodiff for the dehazing net.

The operation set is deliberately small: stride-1 zero-padded convolution,
ReLU, channel concatenation, pointwise arithmetic, mean-squared-error loss,
plus the SGD-with-momentum update and the gradient clip the trainer uses.
All math runs in float64. A :class:`GradTape` records forward operations and
replays them once in reverse; gradients are keyed by the identity of the
participating tensors and bias arrays, so parameters can be looked up
directly after ``tape.backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

try:  # optional: JIT-compiled convolution loops (numpy fallback below)
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

__all__ = [
    "Tensor",
    "ConvSpec",
    "GradTape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "conv2d",
    "conv2d_backward",
    "relu",
    "concat_channels",
    "elementwise",
    "mul",
    "add",
    "sub",
    "add_scalar",
    "mse_loss",
    "sgd_momentum_step",
    "clip_gradients",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ValueError):
    """NaN or infinity appeared where finite values are required."""


class Tensor:
    """Rank-4 float64 array in (batch, channel, height, width) layout.

    Tensors are immutable: the wrapped buffer is marked read-only and every
    operation allocates a fresh output. Construction rejects non-finite
    values, so a diverging computation fails loudly at the op that produced
    it instead of poisoning everything downstream.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        self._adopt(np.array(data, dtype=np.float64, order="C"))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for buffers freshly allocated by an operation: no copy.
        t = object.__new__(cls)
        t._adopt(np.ascontiguousarray(arr, dtype=np.float64))
        return t

    def _adopt(self, arr: np.ndarray) -> None:
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (N,C,H,W); got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds NaN or infinite values")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Gradients:
    """Gradient lookup keyed by the exact objects used in the forward graph.

    Keys are tensors (or conv bias vectors) by identity, not by value, so the
    caller must hold on to the same objects it fed into the operations.
    """

    def __init__(self, by_id: dict[int, np.ndarray], refs: dict[int, object]) -> None:
        self._by_id = by_id
        self._refs = refs  # keeps the keyed objects alive so ids stay unique

    def __contains__(self, obj: object) -> bool:
        return id(obj) in self._by_id

    def __getitem__(self, obj: object) -> np.ndarray:
        try:
            return self._by_id[id(obj)]
        except KeyError:
            raise KeyError("object did not receive a gradient on this tape") from None

    def get(self, obj: object, default=None):
        return self._by_id.get(id(obj), default)

    def __len__(self) -> int:
        return len(self._by_id)


class GradTape:
    """Ordered log of executed operations, replayed once in reverse.

    One tape serves one forward/backward cycle. A tensor consumed by several
    operations receives the sum of their gradient contributions.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple, Callable[[np.ndarray], list]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Sequence[object], backward: Callable) -> None:
        self._records.append((output, tuple(inputs), backward))

    def backward(self, output: Tensor, seed_gradient: np.ndarray | None = None) -> Gradients:
        """Propagate gradients from ``output`` back through every recorded op.

        ``seed_gradient`` defaults to all-ones (the natural seed when
        ``output`` is a single-element loss).
        """
        if seed_gradient is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed_gradient, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"seed gradient shape {seed.shape} != output shape {output.data.shape}"
                )
        by_id: dict[int, np.ndarray] = {id(output): seed}
        refs: dict[int, object] = {id(output): output}
        for out, inputs, bwd in reversed(self._records):
            gout = by_id.get(id(out))
            if gout is None:
                continue  # op does not influence the differentiated output
            for obj, contrib in zip(inputs, bwd(gout)):
                if contrib is None:
                    continue
                key = id(obj)
                if key in by_id:
                    by_id[key] = by_id[key] + contrib
                else:
                    by_id[key] = contrib
                    refs[key] = obj
        return Gradients(by_id, refs)


@dataclass(frozen=True)
class ConvSpec:
    """Stride-1 convolution geometry: channel counts, odd kernel, zero padding."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    pad: int

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel_h, self.kernel_w) < 1 or self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ShapeError("kernel dims must be positive odd integers")
        if self.pad < 0:
            raise ShapeError("pad must be non-negative")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int) -> "ConvSpec":
        """Spec whose zero padding preserves H and W for an odd square kernel."""
        return cls(in_channels, out_channels, kernel, kernel, (kernel - 1) // 2)


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _normalize_bias(bias, out_channels: int) -> np.ndarray:
    arr = np.asarray(bias, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != out_channels:
        raise ShapeError(f"bias must be a vector of length {out_channels}, got shape {arr.shape}")
    return arr


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _conv_forward_kernel(xp, w, b, out):  # pragma: no cover - measured via callers
        n, _, _, _ = xp.shape
        cout, cin, kh, kw = w.shape
        oh, ow = out.shape[2], out.shape[3]
        for ni in range(n):
            for co in range(cout):
                for y in range(oh):
                    for x in range(ow):
                        acc = b[co]
                        for ci in range(cin):
                            for dy in range(kh):
                                for dx in range(kw):
                                    acc += w[co, ci, dy, dx] * xp[ni, ci, y + dy, x + dx]
                        out[ni, co, y, x] = acc

    @numba.njit(cache=True)
    def _conv_backward_kernel(gout, xp, w, grad_xp, grad_w):  # pragma: no cover
        n = xp.shape[0]
        cout, cin, kh, kw = w.shape
        oh, ow = gout.shape[2], gout.shape[3]
        for ni in range(n):
            for co in range(cout):
                for y in range(oh):
                    for x in range(ow):
                        g = gout[ni, co, y, x]
                        for ci in range(cin):
                            for dy in range(kh):
                                for dx in range(kw):
                                    grad_w[co, ci, dy, dx] += g * xp[ni, ci, y + dy, x + dx]
                                    grad_xp[ni, ci, y + dy, x + dx] += g * w[co, ci, dy, dx]


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    n = x.shape[0]
    cout, _, kh, kw = w.shape
    oh = x.shape[2] + 2 * pad - kh + 1
    ow = x.shape[3] + 2 * pad - kw + 1
    xp = _pad_nchw(x, pad)
    if _HAVE_NUMBA:
        out = np.empty((n, cout, oh, ow))
        _conv_forward_kernel(np.ascontiguousarray(xp), w, b, out)
        return out
    out = np.broadcast_to(b.reshape(1, cout, 1, 1), (n, cout, oh, ow)).copy()
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + oh, dx : dx + ow]
            # (cout, n, oh, ow) <- contract the input-channel axis
            prod = np.tensordot(w[:, :, dy, dx], patch, axes=(1, 1))
            out += prod.transpose(1, 0, 2, 3)
    return out


def _conv2d_backward_raw(
    gout: np.ndarray, x: np.ndarray, w: np.ndarray, pad: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, wd = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = gout.shape[2], gout.shape[3]
    xp = _pad_nchw(x, pad)
    grad_b = gout.sum(axis=(0, 2, 3))
    if _HAVE_NUMBA:
        grad_w = np.zeros_like(w)
        grad_xp = np.zeros_like(xp)
        _conv_backward_kernel(
            np.ascontiguousarray(gout), np.ascontiguousarray(xp), w, grad_xp, grad_w
        )
    else:
        grad_w = np.empty_like(w)
        grad_xp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, :, dy : dy + oh, dx : dx + ow]
                grad_w[:, :, dy, dx] = np.tensordot(gout, patch, axes=([0, 2, 3], [0, 2, 3]))
                spread = np.tensordot(w[:, :, dy, dx], gout, axes=(0, 1))  # (cin, n, oh, ow)
                grad_xp[:, :, dy : dy + oh, dx : dx + ow] += spread.transpose(1, 0, 2, 3)
    if pad == 0:
        grad_x = grad_xp
    else:
        grad_x = grad_xp[:, :, pad : pad + h, pad : pad + wd].copy()
    return grad_x, grad_w, grad_b


def conv2d(
    input: Tensor, weights: Tensor, bias, spec: ConvSpec, tape: GradTape | None = None
) -> Tensor:
    """Stride-1 cross-correlation with zero padding and a per-channel bias.

    ``weights`` is (out_channels, in_channels, kernel_h, kernel_w) and
    ``bias`` a float64 vector of length out_channels. Output spatial size is
    H + 2*pad - kernel_h + 1 (unchanged when pad = (kernel-1)/2). When the
    bias gradient is needed later, pass the bias as a float64 ndarray: the
    tape keys gradients by object identity.
    """
    expected_w = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected_w:
        raise ShapeError(f"weights shape {weights.shape} does not match spec {expected_w}")
    if input.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {input.shape[1]} channels, spec expects {spec.in_channels}")
    bias_arr = _normalize_bias(bias, spec.out_channels)
    oh = input.shape[2] + 2 * spec.pad - spec.kernel_h + 1
    ow = input.shape[3] + 2 * spec.pad - spec.kernel_w + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {spec.kernel_h}x{spec.kernel_w} exceeds padded input "
            f"{input.shape[2] + 2 * spec.pad}x{input.shape[3] + 2 * spec.pad}"
        )
    out = Tensor._wrap(_conv2d_forward(input.data, weights.data, bias_arr, spec.pad))
    if tape is not None:
        x_data, w_data, pad = input.data, weights.data, spec.pad

        def backward(gout: np.ndarray) -> list[np.ndarray]:
            return list(_conv2d_backward_raw(gout, x_data, w_data, pad))

        tape.record(out, (input, weights, bias_arr), backward)
    return out


def conv2d_backward(
    grad_out: Tensor, input: Tensor, weights: Tensor, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain-rule gradients of :func:`conv2d` for an explicit upstream gradient.

    Returns (grad_input, grad_weights, grad_bias). The tape calls the same
    math internally; this entry point exists for direct checks.
    """
    oh = input.shape[2] + 2 * spec.pad - spec.kernel_h + 1
    ow = input.shape[3] + 2 * spec.pad - spec.kernel_w + 1
    expected = (input.shape[0], spec.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    expected_w = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expected_w:
        raise ShapeError(f"weights shape {weights.shape} does not match spec {expected_w}")
    return _conv2d_backward_raw(grad_out.data, input.data, weights.data, spec.pad)


def relu(input: Tensor, tape: GradTape | None = None) -> Tensor:
    """Elementwise max(0, x); gradient passes where x > 0 and is 0 at x <= 0."""
    out = Tensor._wrap(np.maximum(input.data, 0.0))
    if tape is not None:
        mask = input.data > 0.0

        def backward(gout: np.ndarray) -> list[np.ndarray]:
            return [np.where(mask, gout, 0.0)]

        tape.record(out, (input,), backward)
    return out


def concat_channels(inputs: Sequence[Tensor], tape: GradTape | None = None) -> Tensor:
    """Concatenate along the channel axis; backward slices the gradient apart."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise ShapeError(f"concat inputs disagree on N/H/W: {first} vs {t.shape}")
    out = Tensor._wrap(np.concatenate([t.data for t in inputs], axis=1))
    if tape is not None:
        sizes = [t.shape[1] for t in inputs]

        def backward(gout: np.ndarray) -> list[np.ndarray]:
            pieces = []
            offset = 0
            for c in sizes:
                pieces.append(gout[:, offset : offset + c].copy())
                offset += c
            return pieces

        tape.record(out, tuple(inputs), backward)
    return out


_ELEMENTWISE_KINDS = ("mul", "add", "sub")


def elementwise(a: Tensor, b: Tensor, kind: str, tape: GradTape | None = None) -> Tensor:
    """Pointwise mul/add/sub of two same-shape tensors."""
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {_ELEMENTWISE_KINDS}")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise operands differ in shape: {a.shape} vs {b.shape}")
    if kind == "mul":
        out = Tensor._wrap(a.data * b.data)
    elif kind == "add":
        out = Tensor._wrap(a.data + b.data)
    else:
        out = Tensor._wrap(a.data - b.data)
    if tape is not None:
        if kind == "mul":
            a_data, b_data = a.data, b.data

            def backward(gout: np.ndarray) -> list[np.ndarray]:
                return [gout * b_data, gout * a_data]

        elif kind == "add":

            def backward(gout: np.ndarray) -> list[np.ndarray]:
                return [gout, gout]

        else:

            def backward(gout: np.ndarray) -> list[np.ndarray]:
                return [gout, -gout]

        tape.record(out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    return elementwise(a, b, "mul", tape)


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    return elementwise(a, b, "add", tape)


def sub(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    return elementwise(a, b, "sub", tape)


def add_scalar(a: Tensor, c: float, tape: GradTape | None = None) -> Tensor:
    """Add a scalar constant to every element."""
    out = Tensor._wrap(a.data + float(c))
    if tape is not None:

        def backward(gout: np.ndarray) -> list[np.ndarray]:
            return [gout]

        tape.record(out, (a,), backward)
    return out


def mse_loss(pred: Tensor, target: Tensor, tape: GradTape | None = None) -> Tensor:
    """Mean over all elements of (pred - target)^2, as a (1,1,1,1) tensor.

    Gradient w.r.t. pred is 2*(pred - target)/count.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss operands differ in shape: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    value = float(np.mean(diff * diff))
    out = Tensor._wrap(np.full((1, 1, 1, 1), value))
    if tape is not None:
        count = diff.size

        def backward(gout: np.ndarray) -> list[np.ndarray]:
            coef = float(gout.reshape(())) * 2.0 / count
            grad_pred = coef * diff
            return [grad_pred, -grad_pred]

        tape.record(out, (pred, target), backward)
    return out


def sgd_momentum_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Classical momentum update, applied independently per buffer:

        v_new = momentum * v - lr * (g + weight_decay * p)
        p_new = p + v_new

    Returns fresh arrays without mutating the inputs. Non-finite gradients
    are rejected so a diverging run aborts instead of corrupting weights.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity must have the same length")
    new_params: list[np.ndarray] = []
    new_velocity: list[np.ndarray] = []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"buffer {i}: mismatched shapes param={p.shape} grad={g.shape} velocity={v.shape}"
            )
        if not np.isfinite(g).all():
            raise NonFiniteError(f"buffer {i}: gradient contains NaN or infinite values")
        v_new = momentum * v - lr * (g + weight_decay * p)
        new_velocity.append(v_new)
        new_params.append(p + v_new)
    return new_params, new_velocity


def clip_gradients(
    grads: Sequence[np.ndarray], bound: float, mode: str = "elementwise"
) -> list[np.ndarray]:
    """Bound gradient magnitudes before the optimizer step.

    ``elementwise`` (default) clamps every scalar into [-bound, +bound].
    ``norm`` rescales the whole gradient list so its global L2 norm is at
    most ``bound`` (provided as an alternative reading of the clip rule; the
    elementwise clamp is the documented default).
    """
    if bound <= 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    if mode == "elementwise":
        return [np.clip(g, -bound, bound) for g in grads]
    if mode == "norm":
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if total <= bound:
            return [np.array(g) for g in grads]
        scale = bound / total
        return [g * scale for g in grads]
    raise ValueError(f"unknown clip mode {mode!r}; expected 'elementwise' or 'norm'")
