"""Few-shot anomaly detection with transformation-discriminating GANs."""

from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    HtdgError,
    IngestionError,
    SequencingError,
    TrainingError,
    ValidationError,
)
from .imgpipe import (
    Pyramid,
    build_pyramid,
    equalize_histogram,
    load_image,
    load_preprocessed,
    save_image,
    upsample,
)
from .transforms import TransformDescriptor, apply_transform, enumerate_transforms, invert_response_map
from .nets import Discriminator, Generator, attach_condition, discriminator_forward, generator_forward
from .trainer import (
    ModelStack,
    TrainConfig,
    discriminator_loss,
    generate_sample,
    generator_adv_loss,
    noise_sigma,
    reconstruction_loss,
    reconstruction_pass,
    train_scale,
    train_stack,
)
from .scorer import anomaly_score, defect_map, defect_score, mse_baseline_score, patch_votes
from .evalharness import TrialSummary, auc, run_ablation, run_trial, run_trials
from .checkpoint import load_stack, save_stack

__version__ = "0.1.0"

__all__ = [
    "HtdgError", "ValidationError", "ConfigError", "IngestionError", "DatasetError",
    "SequencingError", "TrainingError", "CheckpointError",
    "Pyramid", "load_image", "save_image", "load_preprocessed", "equalize_histogram",
    "build_pyramid", "upsample",
    "TransformDescriptor", "enumerate_transforms", "apply_transform", "invert_response_map",
    "Generator", "Discriminator", "generator_forward", "discriminator_forward", "attach_condition",
    "ModelStack", "TrainConfig", "discriminator_loss", "generator_adv_loss",
    "reconstruction_pass", "reconstruction_loss", "noise_sigma", "train_scale", "train_stack",
    "generate_sample",
    "patch_votes", "anomaly_score", "defect_score", "defect_map", "mse_baseline_score",
    "auc", "run_trial", "run_trials", "run_ablation", "TrialSummary",
    "save_stack", "load_stack",
    "__version__",
]
