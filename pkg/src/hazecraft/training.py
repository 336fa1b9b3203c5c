"""Seeded end-to-end training loop and evaluation harness.

Each iteration runs the full dehaze forward pass on a batch, takes the MSE
against the clean targets, backpropagates through the tape, clips gradients,
and applies the SGD-with-momentum update. Everything is driven by one run
seed: shuffling uses a generator reseeded per epoch with seed + epoch, and
random crops (when configured) come from the same per-epoch generator, so a
(seed, config, manifest) triple fully determines the final checkpoint.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import aod_net, dataset_io, metrics
from . import tensor_core as tc
from .aod_net import AodNetParams, ArchVariant
from .dataset_io import DatasetRecord
from .metrics import MetricsReport
from .util import parallel_map

__all__ = [
    "TrainConfig",
    "TrainLog",
    "IterationStat",
    "TrainingError",
    "train",
    "evaluate",
    "write_eval_csv",
]

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training could not start or had to abort."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 8
    epochs: int = 40
    clip_bound: float = 0.1
    clip_mode: str = "elementwise"
    crop: tuple[int, int] | None = None
    seed: int = 0
    init_std: float = aod_net.DEFAULT_INIT_STD

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive; momentum and weight_decay non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.clip_bound <= 0:
            raise ValueError(f"clip_bound must be positive, got {self.clip_bound}")
        if self.clip_mode not in ("elementwise", "norm"):
            raise ValueError(f"clip_mode must be 'elementwise' or 'norm', got {self.clip_mode!r}")
        if self.init_std <= 0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")
        if self.crop is not None and (self.crop[0] < 7 or self.crop[1] < 7):
            raise ValueError(f"crop must be at least 7x7, got {self.crop}")


@dataclass(frozen=True)
class IterationStat:
    iteration: int
    epoch: int
    loss: float
    clipped_fraction: float


@dataclass
class TrainLog:
    """Per-iteration losses plus per-epoch aggregates."""

    iterations: list[IterationStat] = field(default_factory=list)
    epoch_mean_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    epoch_clipped_fraction: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        lines = ["iteration,epoch,loss,clipped_fraction"]
        for it in self.iterations:
            lines.append(f"{it.iteration},{it.epoch},{it.loss:.17g},{it.clipped_fraction:.17g}")
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _load_image(cache: dict, path: str, loader) -> np.ndarray:
    hit = cache.get(path)
    if hit is None:
        try:
            hit = loader(path)
        except (OSError, ValueError) as exc:
            raise TrainingError(f"cannot read {path}: {exc}") from exc
        cache[path] = hit
    return hit


def _chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def _warn_on_dead_output_channels(
    params: AodNetParams, records: Sequence[DatasetRecord], cache: dict
) -> None:
    # A K output channel whose preactivation is negative on every pixel of a
    # data sample gets no gradient through the final ReLU; with zero-bias
    # Gaussian init that is a permanently dead color channel. Flag it up
    # front so the user can pick another seed instead of burning a full run.
    probe = [
        _chw(_load_image(cache, rec.hazy_path, dataset_io.read_png))
        for rec in records[: min(8, len(records))]
    ]
    try:
        k = aod_net.estimate_k(params, tc.Tensor(np.stack(probe)))
    except (tc.ShapeError, ValueError):
        return  # mixed sizes; the probe is best-effort only
    alive = (k.data > 0).mean(axis=(0, 2, 3))
    for channel, fraction in enumerate(alive):
        if fraction == 0.0:
            logger.warning(
                "K output channel %d starts ReLU-dead under this init seed; "
                "short trainings are unlikely to revive it (alive fractions: %s)",
                channel,
                np.array2string(alive, precision=4),
            )


def train(
    records: Sequence[DatasetRecord],
    config: TrainConfig,
    variant: ArchVariant = ArchVariant.MULTISCALE,
    *,
    initial_params: AodNetParams | None = None,
    epoch_hook: Callable[[int, AodNetParams], None] | None = None,
) -> tuple[AodNetParams, TrainLog]:
    """Run the full training protocol over the manifest records.

    Returns the final parameters and the loss log. With epochs = 0 the
    initial parameters come back unchanged. ``epoch_hook`` (if given) fires
    after every epoch with (epoch_index, current_params), e.g. to write
    periodic checkpoints.
    """
    if not records:
        raise TrainingError("manifest is empty; nothing to train on")
    variant = ArchVariant(variant)
    params = (
        initial_params
        if initial_params is not None
        else aod_net.init_params(config.seed, config.init_std, variant)
    )
    velocity = [np.zeros_like(a) for a in params.trainable_arrays()]
    log = TrainLog()
    cache: dict[str, np.ndarray] = {}
    iteration = 0

    if config.epochs > 0:
        _warn_on_dead_output_channels(params, records, cache)

    for epoch in range(config.epochs):
        started = time.perf_counter()
        rng = np.random.default_rng(config.seed + epoch)
        order = rng.permutation(len(records))

        batches: list[list[tuple[np.ndarray, np.ndarray]]] = []
        current: list[tuple[np.ndarray, np.ndarray]] = []
        for idx in order:
            rec = records[int(idx)]
            hazy = _load_image(cache, rec.hazy_path, dataset_io.read_png)
            clean = _load_image(cache, rec.clean_path, dataset_io.read_png)
            if hazy.ndim != 3 or clean.shape != hazy.shape:
                raise TrainingError(
                    f"record {rec.hazy_path}: hazy/clean images must be matching RGB"
                )
            if config.crop is not None:
                ch, cw = config.crop
                h, w = hazy.shape[:2]
                if h < ch or w < cw:
                    raise TrainingError(
                        f"record {rec.hazy_path}: image {h}x{w} smaller than crop {ch}x{cw}"
                    )
                y0 = int(rng.integers(0, h - ch + 1))
                x0 = int(rng.integers(0, w - cw + 1))
                hazy = hazy[y0 : y0 + ch, x0 : x0 + cw]
                clean = clean[y0 : y0 + ch, x0 : x0 + cw]
            current.append((_chw(hazy), _chw(clean)))
            if len(current) == config.batch_size:
                batches.append(current)
                current = []
        if current:
            batches.append(current)

        epoch_losses: list[float] = []
        epoch_clipped: list[float] = []
        for batch in batches:
            try:
                hazy_batch = np.stack([pair[0] for pair in batch])
                clean_batch = np.stack([pair[1] for pair in batch])
            except ValueError as exc:
                raise TrainingError(
                    f"cannot assemble a batch from differently sized images ({exc}); "
                    "set a crop size to train on mixed-size data"
                ) from exc
            tape = tc.GradTape()
            try:
                pred = aod_net.dehaze(params, tc.Tensor(hazy_batch), tape=tape)
                loss_t = tc.mse_loss(pred, tc.Tensor(clean_batch), tape=tape)
            except tc.NonFiniteError as exc:
                raise TrainingError(f"non-finite forward pass at iteration {iteration}: {exc}") from exc
            loss = loss_t.item()

            grads_map = tape.backward(loss_t)
            refs = params.trainable_refs()
            grads = [grads_map[ref] for ref in refs]
            total_entries = sum(g.size for g in grads)
            exceed = sum(int(np.count_nonzero(np.abs(g) > config.clip_bound)) for g in grads)
            clipped_fraction = exceed / total_entries
            grads = tc.clip_gradients(grads, config.clip_bound, config.clip_mode)
            try:
                arrays, velocity = tc.sgd_momentum_step(
                    params.trainable_arrays(),
                    grads,
                    velocity,
                    config.lr,
                    config.momentum,
                    config.weight_decay,
                )
                params = params.with_arrays(arrays)
            except tc.NonFiniteError as exc:
                raise TrainingError(f"non-finite update at iteration {iteration}: {exc}") from exc

            log.iterations.append(IterationStat(iteration, epoch, loss, clipped_fraction))
            epoch_losses.append(loss)
            epoch_clipped.append(clipped_fraction)
            iteration += 1

        log.epoch_mean_loss.append(float(np.mean(epoch_losses)))
        log.epoch_clipped_fraction.append(float(np.mean(epoch_clipped)))
        log.epoch_seconds.append(time.perf_counter() - started)
        logger.info(
            "epoch %d: mean loss %.6g (%.2fs, clipped %.3f)",
            epoch,
            log.epoch_mean_loss[-1],
            log.epoch_seconds[-1],
            log.epoch_clipped_fraction[-1],
        )
        if epoch_hook is not None:
            epoch_hook(epoch, params)

    return params, log


def _mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        mean_l=float(np.mean([r.mean_l for r in reports])),
        mean_c=float(np.mean([r.mean_c for r in reports])),
        mean_s=float(np.mean([r.mean_s for r in reports])),
        mse_total=float(np.mean([r.mse_total for r in reports])),
        mse_mean_part=float(np.mean([r.mse_mean_part for r in reports])),
        mse_residual_part=float(np.mean([r.mse_residual_part for r in reports])),
    )


def evaluate(
    params: AodNetParams, records: Sequence[DatasetRecord]
) -> tuple[list[tuple[DatasetRecord, MetricsReport]], MetricsReport]:
    """Score the dehazed output against the clean target for every record.

    The model output is clamped to [0, 1] first, i.e. metrics see the same
    values 8-bit serialization would keep. Returns the per-record reports
    and their field-wise mean.
    """
    if not records:
        raise TrainingError("manifest is empty; nothing to evaluate")

    def score(rec: DatasetRecord) -> MetricsReport:
        try:
            hazy = dataset_io.read_png(rec.hazy_path)
            clean = dataset_io.read_png(rec.clean_path)
        except (OSError, ValueError) as exc:
            raise TrainingError(f"cannot read record ({exc})") from exc
        pred = aod_net.dehaze(params, tc.Tensor(dataset_io.image_to_nchw(hazy)))
        dehazed = np.clip(dataset_io.nchw_to_image(pred.data), 0.0, 1.0)
        return metrics.compute_report(dehazed, clean)

    # dehaze() only reads the shared params, so records can fan out freely
    reports = parallel_map(score, records)
    return list(zip(records, reports)), _mean_report(reports)


def write_eval_csv(
    results: Sequence[tuple[DatasetRecord, MetricsReport]],
    aggregate: MetricsReport,
    path,
) -> None:
    """CSV with one row per image (keyed by hazy path) plus a final mean row."""

    def row(name: str, r: MetricsReport) -> str:
        vals = [
            r.psnr,
            r.ssim,
            r.mean_l,
            r.mean_c,
            r.mean_s,
            r.mse_total,
            r.mse_mean_part,
            r.mse_residual_part,
        ]
        return ",".join([name] + [f"{v:.9g}" for v in vals])

    lines = ["image,psnr_db,ssim,mean_l,mean_c,mean_s,mse_total,mse_mean,mse_residual"]
    for rec, rep in results:
        lines.append(row(rec.hazy_path, rep))
    lines.append(row("mean", aggregate))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
