"""Command-line front end: train, score, eval, visualize, generate.

Exit codes: 0 success, 1 usage error, 2 data/validation error. Config
files are flat JSON; unknown keys are rejected to catch typos.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import random
import sys
from pathlib import Path

import torch

from . import checkpoint, evalharness, imgpipe, report, scorer, trainer
from .errors import ConfigError, DatasetError, HtdgError
from .nets import derive_seed
from .trainer import TrainConfig, resolution_for_variant

_INT_KEYS = {"max_resolution", "min_resolution", "iters_per_scale", "d_steps",
             "g_steps", "transform_chunk", "width"}
_FLOAT_KEYS = {"r", "lr", "beta1", "beta2", "alpha", "score_fraction"}
_BOOL_KEYS = {"per_scale_mean"}
_STR_KEYS = {"variant"}
CONFIG_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


def config_from_file(path: str | None) -> TrainConfig:
    """Build a TrainConfig from defaults overridden by a JSON file."""
    if path is None:
        return TrainConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(CONFIG_KEYS)}")
    kwargs = {}
    for key, value in data.items():
        if key in _INT_KEYS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key {key} must be an integer, got {value!r}")
            kwargs[key] = value
        elif key in _FLOAT_KEYS:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {key} must be a number, got {value!r}")
            kwargs[key] = float(value)
        elif key in _BOOL_KEYS:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {key} must be a boolean, got {value!r}")
            kwargs[key] = value
        else:
            if not isinstance(value, str):
                raise ConfigError(f"config key {key} must be a string, got {value!r}")
            kwargs[key] = value
    return TrainConfig(**kwargs)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _setup_logging(log_file: Path | None = None) -> None:
    logger = logging.getLogger("htdg")
    logger.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(name)s %(message)s")
    for h in list(logger.handlers):
        if isinstance(h, logging.FileHandler):
            h.close()
            logger.removeHandler(h)
    if not any(getattr(h, "_htdg_console", False) for h in logger.handlers):
        console = logging.StreamHandler(sys.stdout)
        console._htdg_console = True
        console.setFormatter(fmt)
        logger.addHandler(console)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(log_file, mode="w")
        fh.setFormatter(fmt)
        logger.addHandler(fh)


def _load_train_images(data: str, class_name: str, k: int, seed: int, cfg: TrainConfig):
    files = evalharness.split_files(data, class_name, "train")
    if len(files) < k:
        raise DatasetError(f"class {class_name!r} has {len(files)} train images, need k={k}")
    channels = evalharness.detect_channels(files[0])
    resolution = resolution_for_variant(cfg)
    rng = random.Random(derive_seed("subset", seed, class_name, k))
    chosen = rng.sample(files, k)
    imgs = [imgpipe.load_preprocessed(p, channels, resolution) for p in chosen]
    return imgs, chosen


def cmd_train(args) -> int:
    cfg = dataclasses.replace(config_from_file(args.config), seed=args.seed)
    out = Path(args.out)
    _setup_logging(out / "train.log")
    imgs, chosen = _load_train_images(args.data, args.class_name, args.k, args.seed, cfg)
    logging.getLogger("htdg.cli").info(
        "training class=%s k=%d seed=%d variant=%s on %s",
        args.class_name, args.k, args.seed, cfg.variant, [p.name for p in chosen],
    )
    stack = trainer.train_stack(imgs, cfg)
    checkpoint.save_stack(stack, out)
    print(f"saved checkpoint to {out}")
    return 0


def cmd_score(args) -> int:
    _setup_logging()
    stack = checkpoint.load_stack(args.model)
    resolution = stack.sizes[-1][0]
    files = imgpipe.list_image_files(args.images)
    if not files:
        raise DatasetError(f"no image files in {args.images}")
    rows = []
    for f in files:
        img = imgpipe.load_preprocessed(f, stack.channels, resolution)
        if args.defect:
            s = scorer.defect_score(stack, img, args.fraction)
        else:
            s = scorer.anomaly_score(stack, img)
        rows.append((str(f), s))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "score"])
        w.writerows(rows)
    report.render_score_figure([r[0] for r in rows], [r[1] for r in rows],
                               out.with_suffix(".png"))
    print(f"scored {len(rows)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    _setup_logging()
    cfg = dataclasses.replace(config_from_file(args.config), seed=args.seed)
    variant = args.variant if args.variant is not None else cfg.variant
    summary = evalharness.run_ablation(
        args.data, args.class_name, args.k, variant, cfg,
        n_trials=args.trials, score_mode=args.score_mode,
    )
    out = Path(args.out)
    evalharness.write_results_csv(summary, out)
    report.render_trial_figure(summary, out.with_suffix(".png"))
    print(
        f"class={summary.class_name} k={summary.k} variant={summary.variant} "
        f"mean_auc={summary.mean:.4f} std={summary.std:.4f} -> {out}"
    )
    return 0


def cmd_visualize(args) -> int:
    _setup_logging()
    stack = checkpoint.load_stack(args.model)
    resolution = stack.sizes[-1][0]
    img = imgpipe.load_preprocessed(args.image, stack.channels, resolution)
    map2d = scorer.defect_map(stack, img, args.fraction)
    out = Path(args.out)
    report.save_map_png(map2d, out)
    if args.raw is not None:
        report.save_map_raw(map2d, args.raw)
    overlay = out.parent / (out.stem + "_overlay.png")
    report.render_overlay_figure(img, map2d, overlay)
    print(f"wrote defect map to {out}")
    return 0


def cmd_generate(args) -> int:
    _setup_logging()
    stack = checkpoint.load_stack(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j in range(args.count):
        rng = torch.Generator().manual_seed(derive_seed("sample", args.seed, j))
        img = trainer.generate_sample(stack, args.i, rng)
        imgpipe.save_image(img, out / f"sample_{j:03d}.png")
    print(f"wrote {args.count} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="htdg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model stack on k images of one class")
    p.add_argument("--data", required=True, help="dataset root (<root>/<class>/<split>/)")
    p.add_argument("--class", dest="class_name", required=True, help="normal class name")
    p.add_argument("--k", type=int, required=True, help="number of training images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint directory to create")
    p.add_argument("--config", default=None, help="JSON config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a directory of images with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="output CSV (path,score)")
    p.add_argument("--defect", action="store_true", help="lowest-fraction defect score")
    p.add_argument("--fraction", type=float, default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="run the k-shot trial protocol and report AUC")
    p.add_argument("--data", required=True)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--trials", type=int, default=evalharness.DEFAULT_TRIALS)
    p.add_argument("--variant", default=None, choices=list(trainer.VARIANTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--score-mode", default="anomaly", choices=["anomaly", "defect"])
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output CSV (trial rows + summary)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="render the defect map for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--raw", default=None, help="also dump the raw float32 map here")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("generate", help="sample images from a trained stack")
    p.add_argument("--model", required=True)
    p.add_argument("--i", type=int, default=0, help="conditioning sample index")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code is None else int(exc.code)
    try:
        return args.func(args)
    except HtdgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    return run_command(argv)


if __name__ == "__main__":
    sys.exit(main())
