"""Command-line surface: dataset synthesis, training, inference, evaluation.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import aod_net, baseline_dcp, dataset_io, gradcheck, haze_synth, metrics, training
from .aod_net import ArchVariant
from .tensor_core import Tensor


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the documented contract is 1.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW (e.g. 64x64), got {text!r}") from None


def _cmd_gen_scenes(args: argparse.Namespace) -> int:
    pairs = haze_synth.generate_scene_set(args.out, args.count, args.size[0], args.size[1], args.seed)
    print(f"wrote {len(pairs)} scenes under {args.out} (clean/ and depth/)")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    records, skipped = haze_synth.build_dataset(
        args.clean, args.depth, args.out, seed=args.seed, betas=args.beta
    )
    for stem in skipped:
        print(f"warning: no depth map for {stem}; record skipped", file=sys.stderr)
    if not records:
        print("warning: no input images found; wrote an empty manifest", file=sys.stderr)
    print(f"{len(records)} records -> {Path(args.out) / 'manifest.tsv'}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    records = dataset_io.read_manifest(args.manifest)
    config = training.TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        epochs=args.epochs,
        clip_bound=args.clip,
        clip_mode=args.clip_mode,
        crop=args.crop,
        seed=args.seed,
        init_std=args.init_std,
    )
    hook = None
    if args.checkpoint_every:
        def hook(epoch: int, params: aod_net.AodNetParams) -> None:
            if (epoch + 1) % args.checkpoint_every == 0:
                aod_net.save_checkpoint(params, f"{args.out}.epoch{epoch + 1:03d}")

    params, log = training.train(records, config, ArchVariant(args.arch), epoch_hook=hook)
    aod_net.save_checkpoint(params, args.out)
    if args.log:
        log.write_csv(args.log)
    if log.epoch_mean_loss:
        print(
            f"trained {config.epochs} epochs over {len(records)} records; "
            f"final epoch mean loss {log.epoch_mean_loss[-1]:.6g}"
        )
    print(f"checkpoint -> {args.out}")
    return 0


def _read_rgb(path) -> np.ndarray:
    img = dataset_io.read_png(path)
    if img.ndim == 2:  # promote grayscale so the 3-channel model can run on it
        img = np.stack([img, img, img], axis=2)
    return img


def _cmd_dehaze(args: argparse.Namespace) -> int:
    params = aod_net.load_checkpoint(args.model)
    hazy = _read_rgb(args.input)
    started = time.perf_counter()
    out = aod_net.dehaze(params, Tensor(dataset_io.image_to_nchw(hazy)))
    elapsed = time.perf_counter() - started
    dataset_io.write_png(np.clip(dataset_io.nchw_to_image(out.data), 0.0, 1.0), args.output)
    h, w = hazy.shape[:2]
    print(f"dehazed {h}x{w} image in {elapsed:.3f}s -> {args.output}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    params = aod_net.load_checkpoint(args.model)
    records = dataset_io.read_manifest(args.manifest)
    results, aggregate = training.evaluate(params, records)
    training.write_eval_csv(results, aggregate, args.csv)
    print(
        f"{len(results)} images: mean PSNR {aggregate.psnr:.4f} dB, "
        f"mean SSIM {aggregate.ssim:.4f} -> {args.csv}"
    )
    return 0


def _cmd_dcp(args: argparse.Namespace) -> int:
    img = _read_rgb(args.input)
    out = baseline_dcp.dcp_dehaze(img, refine=not args.no_refine)
    dataset_io.write_png(np.clip(out, 0.0, 1.0), args.output)
    print(f"dark-channel dehazing -> {args.output}")
    return 0


def _cmd_decompose(args: argparse.Namespace) -> int:
    a = dataset_io.read_png(args.a)
    b = dataset_io.read_png(args.b)
    total, mean_part, residual_part = metrics.mse_decompose(a, b)
    print(f"mse_total    {total:.9g}")
    print(f"mse_mean     {mean_part:.9g}")
    print(f"mse_residual {residual_part:.9g}")
    return 0


def _cmd_grad_check(args: argparse.Namespace) -> int:
    report = gradcheck.run_suite(args.seed)
    worst = 0.0
    for name in sorted(report):
        print(f"{name:28s} {report[name]:.3e}")
        worst = max(worst, report[name])
    print(f"{'max relative error':28s} {worst:.3e}")
    if worst < gradcheck.DEFAULT_TOLERANCE:
        print("gradient check PASSED")
        return 0
    print(f"gradient check FAILED (tolerance {gradcheck.DEFAULT_TOLERANCE:g})", file=sys.stderr)
    return 2


def _build_parser() -> _Parser:
    parser = _Parser(prog="hazecraft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesize hazy images from clean/depth pairs")
    p.add_argument("--clean", required=True, type=Path, help="directory of clean RGB PNGs")
    p.add_argument("--depth", required=True, type=Path, help="directory of 16-bit depth PNGs")
    p.add_argument("--out", required=True, type=Path, help="output directory (hazy/ + manifest.tsv)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument(
        "--beta",
        action="append",
        type=float,
        default=None,
        help="restrict the scattering coefficient pool (repeatable; default 0.4..1.6 grid)",
    )
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("gen-scenes", help="generate procedural clean/depth scene pairs")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--count", required=True, type=int, help="number of scenes")
    p.add_argument("--size", type=_size, default=(64, 64), help="scene size HxW (default 64x64)")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    p.set_defaults(func=_cmd_gen_scenes)

    p = sub.add_parser("train", help="train the dehazing network on a manifest")
    p.add_argument("--manifest", required=True, type=Path, help="dataset manifest (TSV)")
    p.add_argument("--out", required=True, type=Path, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=40, help="training epochs (default 40)")
    p.add_argument("--lr", type=float, default=0.001, help="learning rate (default 0.001)")
    p.add_argument("--batch", type=int, default=8, help="batch size (default 8)")
    p.add_argument("--momentum", type=float, default=0.9, help="momentum (default 0.9)")
    p.add_argument("--weight-decay", type=float, default=0.0001, help="L2 decay (default 0.0001)")
    p.add_argument("--clip", type=float, default=0.1, help="gradient clip bound (default 0.1)")
    p.add_argument(
        "--clip-mode",
        choices=("elementwise", "norm"),
        default="elementwise",
        help="elementwise clamp (default) or global-norm rescale",
    )
    p.add_argument("--crop", type=_size, default=None, help="random training crop HxW (default: full images)")
    p.add_argument(
        "--arch",
        choices=tuple(v.value for v in ArchVariant),
        default=ArchVariant.MULTISCALE.value,
        help="network variant (default multiscale)",
    )
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--init-std", type=float, default=aod_net.DEFAULT_INIT_STD, help="weight init stddev (default 0.02)")
    p.add_argument("--log", type=Path, default=None, help="write the per-iteration loss CSV here")
    p.add_argument(
        "--checkpoint-every",
        type=int,
        default=0,
        help="also write OUT.epochNNN every N epochs (default: only at the end)",
    )
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("dehaze", help="dehaze one image with a trained checkpoint")
    p.add_argument("--model", required=True, type=Path, help="checkpoint path")
    p.add_argument("--input", required=True, type=Path, help="hazy PNG")
    p.add_argument("--output", required=True, type=Path, help="output PNG")
    p.set_defaults(func=_cmd_dehaze)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--model", required=True, type=Path, help="checkpoint path")
    p.add_argument("--manifest", required=True, type=Path, help="dataset manifest (TSV)")
    p.add_argument("--csv", required=True, type=Path, help="metrics CSV output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("dcp", help="dehaze one image with the dark-channel baseline")
    p.add_argument("--input", required=True, type=Path, help="hazy PNG")
    p.add_argument("--output", required=True, type=Path, help="output PNG")
    p.add_argument("--no-refine", action="store_true", help="skip guided-filter refinement")
    p.set_defaults(func=_cmd_dcp)

    p = sub.add_parser("decompose", help="mean/residual MSE split between two images")
    p.add_argument("--a", required=True, type=Path, help="first PNG")
    p.add_argument("--b", required=True, type=Path, help="second PNG")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("grad-check", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    p.set_defaults(func=_cmd_grad_check)

    return parser


def run(argv=None) -> int:
    """Parse and execute one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return int(args.func(args) or 0)
    except Exception as exc:  # runtime failure contract: message on stderr, exit 2
        print(f"hazecraft: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
