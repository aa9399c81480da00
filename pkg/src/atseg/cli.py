"""Command-line entry point: ``atseg {gen-data,train,eval,predict,compare}``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import LocalStatConfig, fixed_threshold, local_stat_threshold
from .datasets import (
    SplitSpec,
    corpus_fingerprint,
    decode_pgm_file,
    dequantize,
    gen_synthetic,
    load_dataset,
    save_pgm,
    split_dataset,
    stack,
    write_dataset,
)
from .errors import AtsegError
from .losses import LossConfig, aggregate, compute_metrics
from .segnet import UNetConfig, hard_binarize, init_params
from .training import TrainConfig, infer, load_checkpoint, save_checkpoint, train

log = logging.getLogger("atseg")

SPLITS = ("train", "val", "test", "all")
STRATEGIES = ("adaptive", "fixed_0.5", "local_mean", "niblack", "sauvola")


# ---------------------------------------------------------------- arg types


def positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


def positive_float(s: str) -> float:
    v = float(s)
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s}")
    return v


def odd_int(s: str) -> int:
    v = int(s)
    if v < 1 or v % 2 == 0:
        raise argparse.ArgumentTypeError(f"expected a positive odd integer, got {s}")
    return v


def unit_interval(s: str) -> float:
    v = float(s)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1), got {s}")
    return v


def image_size(s: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", s)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {s!r}")
    return int(m.group(1)), int(m.group(2))


def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"atseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic PGM dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", required=True, type=positive_int)
    p.add_argument("--size", required=True, type=image_size, help="HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bias-field", action="store_true", help="add a left-to-right intensity ramp")
    p.add_argument("--depth", type=positive_int, default=UNetConfig.depth,
                   help="U-Net depth the corpus must be compatible with (size divisible by 2^depth)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train U-Net and threshold head")
    p.add_argument("--config", type=Path, help="file of 'key = value' lines; flags take precedence")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=nonneg_int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=positive_float, default=TrainConfig.lr)
    p.add_argument("--threshold-lr", type=positive_float, default=None,
                   help="separate learning rate for the threshold head (default: --lr)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=positive_int, default=TrainConfig.batch_size)
    p.add_argument("--lambda-mse", type=nonneg_float, default=LossConfig.lambda_mse)
    p.add_argument("--tau", type=positive_float, default=LossConfig.tau)
    p.add_argument("--epsilon", type=positive_float, default=LossConfig.epsilon)
    p.add_argument("--base-channels", type=positive_int, default=UNetConfig.base_channels)
    p.add_argument("--depth", type=positive_int, default=UNetConfig.depth)
    p.add_argument("--pooled-size", type=positive_int, default=UNetConfig.pooled_size)
    p.add_argument("--dropout", type=unit_interval, default=UNetConfig.dropout_rate)
    p.add_argument("--detach-threshold-input", action="store_true",
                   help="stop threshold-branch gradients from reaching the U-Net")
    p.add_argument("--fixed-threshold-only", action="store_true",
                   help="train without the threshold branch; evaluate with the 0.5 cut")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True, type=Path, help="directory for the per-sample CSV")
    p.add_argument("--binarize", choices=("auto", "adaptive", "fixed"), default="auto",
                   help="auto follows the checkpoint's training mode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="mask, probability and threshold maps for one image")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="adaptive vs fixed vs classical thresholds")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--window", type=odd_int, default=LocalStatConfig.window)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_compare)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if path is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        parser.error(f"cannot read --config: {e}")
    defaults = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in actions:
            parser.error(f"{path}:{lineno}: unknown or malformed setting {line!r}")
        action = actions[key]
        value = value.strip()
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = parse_bool(value)
            else:
                defaults[key] = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as e:
            parser.error(f"{path}:{lineno}: {e}")
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers


def write_manifest(out: Path, items: dict) -> None:
    text = "".join(f"{k} = {v}\n" for k, v in items.items())
    (out / "manifest.txt").write_text(text)


def _fmt(x: float) -> str:
    return repr(float(x))


def _split(samples, which: str, seed: int):
    if which == "all":
        return list(samples)
    train_s, val_s, test_s = split_dataset(samples, SplitSpec(seed=seed))
    return {"train": train_s, "val": val_s, "test": test_s}[which]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    h, w = args.size
    step = 2**args.depth
    if h < 16 or w < 16 or h % step or w % step:
        raise UsageError(f"--size {h}x{w}: both extents must be >= 16 and divisible by 2^depth = {step}")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"--out {args.out}: cannot create directory ({e.strerror})") from None
    if not os.access(args.out, os.W_OK):
        raise UsageError(f"--out {args.out}: directory is not writable")
    samples = gen_synthetic(args.n, h, w, args.seed, args.bias_field)
    write_dataset(samples, args.out)
    count, digest = corpus_fingerprint(args.out)
    write_manifest(args.out, {
        "command": "gen-data", "tool_version": __version__, "n": args.n, "size": f"{h}x{w}",
        "seed": args.seed, "bias_field": args.bias_field, "corpus_count": count, "corpus_sha256": digest,
    })
    print(f"wrote {count} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    samples = load_dataset(args.data)
    h, w = samples[0].hw
    lam = 0.0 if args.fixed_threshold_only else args.lambda_mse
    net = UNetConfig(
        base_channels=args.base_channels, depth=args.depth, image_h=h, image_w=w,
        dropout_rate=args.dropout, pooled_size=args.pooled_size,
    )
    cfg = TrainConfig(
        lr=args.lr, threshold_lr=args.threshold_lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        loss=LossConfig(epsilon=args.epsilon, lambda_mse=lam, tau=args.tau),
        detach_threshold_input=args.detach_threshold_input,
        fixed_threshold_only=args.fixed_threshold_only,
    )
    train_s, val_s, test_s = split_dataset(samples, SplitSpec(seed=args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    model = init_params(net, args.seed)
    result = train(train_s, val_s, model, cfg, csv_path=args.out / "metrics.csv")
    save_checkpoint(result.final, args.out / "model_final.ckpt")
    save_checkpoint(result.best, args.out / "model_best.ckpt")
    count, digest = corpus_fingerprint(args.data)
    items = {"command": "train", "tool_version": __version__}
    items.update({f"net.{k}": v for k, v in net.to_dict().items()})
    items.update({
        "lr": cfg.lr, "threshold_lr": cfg.threshold_lr, "beta1": cfg.beta1, "beta2": cfg.beta2, "adam_eps": cfg.adam_eps,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed,
        "loss.epsilon": cfg.loss.epsilon, "loss.lambda_mse": cfg.loss.lambda_mse, "loss.tau": cfg.loss.tau,
        "detach_threshold_input": cfg.detach_threshold_input,
        "fixed_threshold_only": cfg.fixed_threshold_only,
        "split": f"{len(train_s)}/{len(val_s)}/{len(test_s)}",
        "corpus_count": count, "corpus_sha256": digest,
        "best_epoch": result.best.epoch, "best_val_dice": _fmt(result.best.val_dice),
    })
    write_manifest(args.out, items)
    print(f"trained {cfg.epochs} epoch(s); best val dice {result.best.val_dice:.4f} at epoch {result.best.epoch}")
    return 0


def _load_eval_inputs(args):
    ck = load_checkpoint(args.ckpt)
    samples = _split(load_dataset(args.data), args.split, ck.seed)
    if not samples:
        raise AtsegError(f"split {args.split!r} is empty")
    want = (ck.config.image_h, ck.config.image_w)
    if samples[0].hw != want:
        raise AtsegError(f"dataset images are {samples[0].hw}, checkpoint expects {want}")
    return ck, samples


def cmd_eval(args) -> int:
    ck, samples = _load_eval_inputs(args)
    adaptive = ck.adaptive if args.binarize == "auto" else args.binarize == "adaptive"
    images, masks = stack(samples)
    prob, thr = infer(ck.to_model(), images, adaptive)
    pred = hard_binarize(prob, thr)
    per = [compute_metrics(pred[i], masks[i]) for i in range(len(samples))]
    agg = aggregate(per)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = ["id,dice,iou,pixel_accuracy,tp,fp,fn,tn"]
    for s, r in zip(samples, per):
        rows.append(f"{s.id},{_fmt(r.dice)},{_fmt(r.iou)},{_fmt(r.pixel_accuracy)},{r.tp},{r.fp},{r.fn},{r.tn}")
    (args.out / f"eval_{args.split}.csv").write_text("\n".join(rows) + "\n")
    print(f"split={args.split} samples={len(samples)} binarize={'adaptive' if adaptive else 'fixed_0.5'}")
    print(f"dice={agg.dice:.6f} iou={agg.iou:.6f} accuracy={agg.pixel_accuracy:.6f} fp={agg.fp} fn={agg.fn}")
    return 0


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.ckpt)
    image = dequantize(decode_pgm_file(args.image))
    want = (ck.config.image_h, ck.config.image_w)
    if image.shape != want:
        raise AtsegError(f"image is {image.shape[0]}x{image.shape[1]}, checkpoint expects {want[0]}x{want[1]}")
    prob, thr = infer(ck.to_model(), image[None, None], ck.adaptive)
    mask = hard_binarize(prob, thr)
    args.out.mkdir(parents=True, exist_ok=True)
    save_pgm(mask[0], args.out / "mask.pgm")
    save_pgm(prob[0], args.out / "prob.pgm")
    save_pgm(thr[0], args.out / "threshold.pgm")
    print(f"foreground pixels: {int(mask.sum())} of {mask.size}")
    return 0


def compare_strategies(ck, samples, window: int) -> dict:
    """Micro-averaged MetricsRecord per strategy, all applied to the U-Net probability map."""
    images, masks = stack(samples)
    prob, thr = infer(ck.to_model(), images, adaptive=True)
    preds = {
        "adaptive": hard_binarize(prob, thr),
        "fixed_0.5": fixed_threshold(prob),
    }
    for name, method in (("local_mean", "mean"), ("niblack", "niblack"), ("sauvola", "sauvola")):
        cfg = LocalStatConfig(method=method, window=window)
        preds[name] = np.stack([local_stat_threshold(p[0], cfg)[None] for p in prob])
    return {
        name: aggregate(compute_metrics(pred[i], masks[i]) for i in range(len(samples)))
        for name, pred in preds.items()
    }


def cmd_compare(args) -> int:
    ck, samples = _load_eval_inputs(args)
    results = compare_strategies(ck, samples, args.window)
    lines = ["strategy,dice,iou,fp,fn"]
    for name in STRATEGIES:
        r = results[name]
        lines.append(f"{name},{_fmt(r.dice)},{_fmt(r.iou)},{r.fp},{r.fn}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"compare_{args.split}.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


class UsageError(Exception):
    pass


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (AtsegError, OSError) as e:
        print(f"atseg: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
