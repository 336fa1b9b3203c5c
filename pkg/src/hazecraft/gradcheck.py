"""Finite-difference verification of every differentiable operation.

Each check perturbs inputs with central differences (eps = 1e-5) and
compares against the tape's analytic gradients under the relative error
|a - n| / max(1, |a|, |n|). The suite covers the individual ops, a small
composed network, and the full dehaze + MSE training graph on an 8x8
instance. ReLU test points are nudged away from the kink so the numeric
derivative is well defined.
"""

from __future__ import annotations

import numpy as np

from . import aod_net
from . import tensor_core as tc

__all__ = ["DEFAULT_TOLERANCE", "central_difference", "relative_error", "run_suite"]

DEFAULT_TOLERANCE = 1e-5
_EPS = 1e-5


def central_difference(f, x: np.ndarray, eps: float = _EPS) -> np.ndarray:
    """Entrywise (f(x + eps) - f(x - eps)) / (2 eps) for a scalar-valued f."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        plus = x.copy()
        plus[idx] += eps
        minus = x.copy()
        minus[idx] -= eps
        grad[idx] = (f(plus) - f(minus)) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _away_from_zero(arr: np.ndarray, margin: float = 0.05) -> np.ndarray:
    out = arr.copy()
    small = np.abs(out) < margin
    out[small] = margin * np.where(out[small] >= 0, 1.0, -1.0)
    return out


def _check_conv(rng: np.random.Generator) -> dict[str, float]:
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    seed_grad = rng.normal(size=(1, 3, 5, 5))
    spec = tc.ConvSpec.same(2, 3, 3)

    def forward(x_=None, w_=None, b_=None) -> float:
        out = tc.conv2d(
            tc.Tensor(x if x_ is None else x_),
            tc.Tensor(w if w_ is None else w_),
            b if b_ is None else b_,
            spec,
        )
        return float(np.sum(out.data * seed_grad))

    tape = tc.GradTape()
    xt, wt = tc.Tensor(x), tc.Tensor(w)
    out = tc.conv2d(xt, wt, b, spec, tape)
    grads = tape.backward(out, seed_grad)
    return {
        "conv2d/input": relative_error(grads[xt], central_difference(lambda v: forward(x_=v), x)),
        "conv2d/weights": relative_error(grads[wt], central_difference(lambda v: forward(w_=v), w)),
        "conv2d/bias": relative_error(grads[b], central_difference(lambda v: forward(b_=v), b)),
    }


def _check_relu(rng: np.random.Generator) -> dict[str, float]:
    x = _away_from_zero(rng.normal(size=(1, 3, 4, 4)))
    seed_grad = rng.normal(size=x.shape)
    tape = tc.GradTape()
    xt = tc.Tensor(x)
    out = tc.relu(xt, tape)
    grads = tape.backward(out, seed_grad)
    numeric = central_difference(
        lambda v: float(np.sum(tc.relu(tc.Tensor(v)).data * seed_grad)), x
    )
    return {"relu": relative_error(grads[xt], numeric)}


def _check_concat(rng: np.random.Generator) -> dict[str, float]:
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    seed_grad = rng.normal(size=(1, 5, 3, 3))
    tape = tc.GradTape()
    at, bt = tc.Tensor(a), tc.Tensor(b)
    out = tc.concat_channels([at, bt], tape)
    grads = tape.backward(out, seed_grad)

    def forward(a_=None, b_=None) -> float:
        cat = tc.concat_channels([tc.Tensor(a if a_ is None else a_), tc.Tensor(b if b_ is None else b_)])
        return float(np.sum(cat.data * seed_grad))

    return {
        "concat/first": relative_error(grads[at], central_difference(lambda v: forward(a_=v), a)),
        "concat/second": relative_error(grads[bt], central_difference(lambda v: forward(b_=v), b)),
    }


def _check_elementwise(rng: np.random.Generator) -> dict[str, float]:
    results: dict[str, float] = {}
    for kind in ("mul", "add", "sub"):
        a = rng.normal(size=(1, 2, 3, 3))
        b = rng.normal(size=(1, 2, 3, 3))
        seed_grad = rng.normal(size=a.shape)
        tape = tc.GradTape()
        at, bt = tc.Tensor(a), tc.Tensor(b)
        out = tc.elementwise(at, bt, kind, tape)
        grads = tape.backward(out, seed_grad)

        def forward(a_=None, b_=None, _kind=kind) -> float:
            res = tc.elementwise(
                tc.Tensor(a if a_ is None else a_), tc.Tensor(b if b_ is None else b_), _kind
            )
            return float(np.sum(res.data * seed_grad))

        err_a = relative_error(grads[at], central_difference(lambda v: forward(a_=v), a))
        err_b = relative_error(grads[bt], central_difference(lambda v: forward(b_=v), b))
        results[f"elementwise/{kind}"] = max(err_a, err_b)
    a = rng.normal(size=(1, 2, 3, 3))
    seed_grad = rng.normal(size=a.shape)
    tape = tc.GradTape()
    at = tc.Tensor(a)
    out = tc.add_scalar(at, 0.7, tape)
    grads = tape.backward(out, seed_grad)
    numeric = central_difference(
        lambda v: float(np.sum(tc.add_scalar(tc.Tensor(v), 0.7).data * seed_grad)), a
    )
    results["add_scalar"] = relative_error(grads[at], numeric)
    return results


def _check_mse(rng: np.random.Generator) -> dict[str, float]:
    pred = rng.normal(size=(1, 3, 4, 4))
    target = rng.normal(size=pred.shape)
    tape = tc.GradTape()
    pt = tc.Tensor(pred)
    loss = tc.mse_loss(pt, tc.Tensor(target), tape)
    grads = tape.backward(loss)
    numeric = central_difference(
        lambda v: tc.mse_loss(tc.Tensor(v), tc.Tensor(target)).item(), pred
    )
    return {"mse_loss": relative_error(grads[pt], numeric)}


def _check_composed(rng: np.random.Generator) -> dict[str, float]:
    # Three conv layers with ReLUs and a concat, closed by the MSE loss.
    x = rng.normal(size=(1, 2, 6, 6))
    w1 = rng.normal(size=(3, 2, 3, 3)) * 0.6
    b1 = rng.normal(size=3) * 0.2
    w2 = rng.normal(size=(2, 3, 1, 1)) * 0.6
    b2 = rng.normal(size=2) * 0.2
    w3 = rng.normal(size=(1, 5, 3, 3)) * 0.6
    b3 = rng.normal(size=1) * 0.2
    target = rng.normal(size=(1, 1, 6, 6))
    s1 = tc.ConvSpec.same(2, 3, 3)
    s2 = tc.ConvSpec.same(3, 2, 1)
    s3 = tc.ConvSpec.same(5, 1, 3)

    def forward(arrs: dict[str, np.ndarray], tape: tc.GradTape | None = None):
        xt = tc.Tensor(arrs["x"])
        w1t, w2t, w3t = tc.Tensor(arrs["w1"]), tc.Tensor(arrs["w2"]), tc.Tensor(arrs["w3"])
        h1 = tc.relu(tc.conv2d(xt, w1t, arrs["b1"], s1, tape), tape)
        h2 = tc.relu(tc.conv2d(h1, w2t, arrs["b2"], s2, tape), tape)
        cat = tc.concat_channels([h1, h2], tape)
        out = tc.conv2d(cat, w3t, arrs["b3"], s3, tape)
        loss = tc.mse_loss(out, tc.Tensor(target), tape)
        return loss, {"x": xt, "w1": w1t, "b1": arrs["b1"], "w2": w2t, "b2": arrs["b2"], "w3": w3t, "b3": arrs["b3"]}

    base = {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2, "w3": w3, "b3": b3}
    tape = tc.GradTape()
    loss, nodes = forward(base, tape)
    grads = tape.backward(loss)
    worst = 0.0
    for key in base:
        def scalar(v, _key=key):
            trial = dict(base)
            trial[_key] = v
            return forward(trial)[0].item()

        numeric = central_difference(scalar, base[key])
        worst = max(worst, relative_error(grads[nodes[key]], numeric))
    return {"composed_toy_net": worst}


def _check_dehaze_end_to_end(rng: np.random.Generator) -> dict[str, float]:
    params = aod_net.init_params(rng.integers(1 << 31), std=0.5)
    # Nonzero biases keep preactivations clear of the ReLU kink.
    arrays = params.trainable_arrays()
    arrays = [
        a if a.ndim == 4 else rng.normal(0.0, 0.1, size=a.shape) for a in arrays
    ]
    params = params.with_arrays(arrays)
    hazy = rng.uniform(0.05, 0.95, size=(1, 3, 8, 8))
    target = rng.uniform(0.0, 1.0, size=hazy.shape)

    tape = tc.GradTape()
    hazy_t = tc.Tensor(hazy)
    loss = tc.mse_loss(aod_net.dehaze(params, hazy_t, tape=tape), tc.Tensor(target), tape)
    grads = tape.backward(loss)

    worst = 0.0
    refs = params.trainable_refs()
    base_arrays = params.trainable_arrays()
    for slot, ref in enumerate(refs):
        def scalar(v, _slot=slot):
            trial_arrays = [
                v if j == _slot else base_arrays[j] for j in range(len(base_arrays))
            ]
            trial = params.with_arrays(trial_arrays)
            out = aod_net.dehaze(trial, tc.Tensor(hazy))
            return tc.mse_loss(out, tc.Tensor(target)).item()

        numeric = central_difference(scalar, base_arrays[slot])
        worst = max(worst, relative_error(grads[ref], numeric))
    return {"dehaze_mse_end_to_end": worst}


def run_suite(seed: int = 0) -> dict[str, float]:
    """Run every check; returns the max relative error per check name."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    report.update(_check_conv(rng))
    report.update(_check_relu(rng))
    report.update(_check_concat(rng))
    report.update(_check_elementwise(rng))
    report.update(_check_mse(rng))
    report.update(_check_composed(rng))
    report.update(_check_dehaze_end_to_end(rng))
    return report
