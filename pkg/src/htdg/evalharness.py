"""k-shot trial protocol: subset sampling, training, AUC and ablations.

Datasets are directories laid out as <root>/<class>/<split>/ with split
in {train, test}. A trial trains on k sampled images of one class and
scores the full test split of every class; the trained class is the
positive (higher score = more normal).
"""

from __future__ import annotations

import csv
import logging
import math
import random
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, replace
from pathlib import Path

from PIL import Image as PILImage

from . import imgpipe, scorer, trainer
from .errors import DatasetError, ValidationError
from .nets import derive_seed
from .trainer import TrainConfig, VARIANTS, fraction_default, resolution_for_variant

logger = logging.getLogger("htdg.evalharness")

DEFAULT_TRIALS = 10
GRAY_MODES = {"1", "L", "LA", "I", "I;16", "F"}


def auc(normal_scores: list[float], anomalous_scores: list[float]) -> float:
    """Probability a random normal outscores a random anomalous (ties half).

    Mann-Whitney pair counting; normal is the positive class.
    """
    if not normal_scores or not anomalous_scores:
        raise ValidationError("auc needs nonempty score lists for both classes")
    for s in list(normal_scores) + list(anomalous_scores):
        if math.isnan(s) or math.isinf(s):
            raise ValidationError(f"auc got a non-finite score: {s}")
    ranked = sorted(anomalous_scores)
    wins = 0
    ties = 0
    for s in normal_scores:
        lo = bisect_left(ranked, s)
        hi = bisect_right(ranked, s)
        wins += lo
        ties += hi - lo
    return (wins + 0.5 * ties) / (len(normal_scores) * len(anomalous_scores))


@dataclass
class TrialSummary:
    """Per-trial AUCs with their population statistics."""

    class_name: str
    k: int
    variant: str
    aucs: list[float]
    seeds: list[int]
    mean: float
    std: float

    @classmethod
    def from_aucs(
        cls, class_name: str, k: int, variant: str, aucs: list[float], seeds: list[int]
    ) -> "TrialSummary":
        mean = sum(aucs) / len(aucs)
        std = math.sqrt(sum((a - mean) ** 2 for a in aucs) / len(aucs))
        return cls(class_name, k, variant, list(aucs), list(seeds), mean, std)


def discover_classes(dataset_root: str | Path) -> list[str]:
    root = Path(dataset_root)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"dataset root contains no class directories: {root}")
    return classes


def split_files(dataset_root: str | Path, class_name: str, split: str) -> list[Path]:
    d = Path(dataset_root) / class_name / split
    if not d.is_dir():
        raise DatasetError(f"missing {split} split for class {class_name!r}: {d}")
    files = imgpipe.list_image_files(d)
    if not files:
        raise DatasetError(f"no image files in {d}")
    return files


def detect_channels(path: Path) -> int:
    """1 for grayscale-mode files, 3 otherwise (palette counts as color)."""
    try:
        with PILImage.open(path) as im:
            return 1 if im.mode in GRAY_MODES else 3
    except OSError as exc:
        raise DatasetError(f"cannot inspect image {path}: {exc}") from exc


def _score_one(stack, img, score_mode: str, fraction: float) -> float:
    if score_mode == "defect":
        return scorer.defect_score(stack, img, fraction)
    return scorer.anomaly_score(stack, img)


def run_trial(
    dataset_root: str | Path,
    class_name: str,
    k: int,
    seed: int,
    cfg: TrainConfig,
    score_mode: str = "anomaly",
) -> float:
    """One seeded trial: sample k, train (or not for variant f), score all."""
    if score_mode not in ("anomaly", "defect"):
        raise ValidationError(f"score_mode must be 'anomaly' or 'defect', got {score_mode!r}")
    train_files = split_files(dataset_root, class_name, "train")
    if len(train_files) < k:
        raise DatasetError(
            f"class {class_name!r} has {len(train_files)} train images, need k={k}"
        )
    channels = detect_channels(train_files[0])
    resolution = resolution_for_variant(cfg)
    rng = random.Random(derive_seed("subset", seed, class_name, k))
    chosen = rng.sample(train_files, k)
    train_imgs = [imgpipe.load_preprocessed(p, channels, resolution) for p in chosen]
    logger.info(
        "trial seed=%d class=%s k=%d variant=%s train=%s",
        seed, class_name, k, cfg.variant, [p.name for p in chosen],
    )

    stack = None
    if cfg.variant != "f":
        stack = trainer.train_stack(train_imgs, replace(cfg, seed=seed))
    fraction = cfg.score_fraction if cfg.score_fraction is not None else fraction_default(k)

    normal: list[float] = []
    anomalous: list[float] = []
    for cls in discover_classes(dataset_root):
        for f in split_files(dataset_root, cls, "test"):
            img = imgpipe.load_preprocessed(f, channels, resolution)
            if cfg.variant == "f":
                s = scorer.mse_baseline_score(train_imgs, img)
            else:
                s = _score_one(stack, img, score_mode, fraction)
            (normal if cls == class_name else anomalous).append(s)
    value = auc(normal, anomalous)
    logger.info("trial seed=%d class=%s auc=%.4f", seed, class_name, value)
    return value


def run_trials(
    dataset_root: str | Path,
    class_name: str,
    k: int,
    n_trials: int,
    cfg: TrainConfig,
    score_mode: str = "anomaly",
) -> TrialSummary:
    """n_trials independent trials with seeds cfg.seed .. cfg.seed+n-1."""
    if n_trials < 1:
        raise ValidationError(f"n_trials must be >= 1, got {n_trials}")
    seeds = [cfg.seed + t for t in range(n_trials)]
    aucs = [run_trial(dataset_root, class_name, k, s, cfg, score_mode) for s in seeds]
    return TrialSummary.from_aucs(class_name, k, cfg.variant, aucs, seeds)


def run_ablation(
    dataset_root: str | Path,
    class_name: str,
    k: int,
    variant: str,
    cfg: TrainConfig,
    n_trials: int = DEFAULT_TRIALS,
    score_mode: str = "anomaly",
) -> TrialSummary:
    """run_trials with the variant-configured TrainConfig."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return run_trials(dataset_root, class_name, k, n_trials, replace(cfg, variant=variant), score_mode)


def write_results_csv(summary: TrialSummary, path: str | Path) -> None:
    """Per-trial rows followed by a summary block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "k", "variant", "trial", "seed", "auc"])
        for t, (s, a) in enumerate(zip(summary.seeds, summary.aucs)):
            w.writerow([summary.class_name, summary.k, summary.variant, t, s, a])
        w.writerow(["class", "k", "variant", "mean", "std"])
        w.writerow([summary.class_name, summary.k, summary.variant, summary.mean, summary.std])
