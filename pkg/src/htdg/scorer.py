"""Anomaly scoring, lowest-fraction defect scoring and defect maps.

Votes are correct-class probabilities of the transformation classifier,
computed per scale, transformation and patch position. All probability
work runs in float64 so score identities hold to tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import imgpipe
from .errors import ValidationError
from .trainer import ModelStack, fraction_default, make_transform_list
from .transforms import apply_transform, invert_response_map

SCORE_BATCH = 16


@dataclass
class PatchVotes:
    """maps[n][i] is the (H_n, W_n) correct-class probability map."""

    maps: list[list[torch.Tensor]]


def patch_votes(stack: ModelStack, img: torch.Tensor) -> PatchVotes:
    """Correct-class probability maps for every scale and transformation.

    The fake logit is removed before the softmax; the degenerate M=1
    variants keep it so the vote stays informative (real-vs-fake
    probability).
    """
    stack.require_trained()
    imgpipe.validate_image(img)
    if img.shape[0] != stack.channels:
        raise ValidationError(
            f"image has {img.shape[0]} channels, stack expects {stack.channels}"
        )
    pyramid = imgpipe.build_pyramid_from_sizes(img, stack.sizes, stack.r)
    tlist = make_transform_list(stack.channels, stack.variant)
    has_fake_class = stack.variant != "a"
    maps: list[list[torch.Tensor]] = []
    with torch.no_grad():
        for n in range(stack.N + 1):
            disc = stack.discriminators[n]
            disc.eval()
            level = pyramid.levels[n]
            transformed = torch.stack([apply_transform(level, t) for t in tlist])
            scale_maps: list[torch.Tensor] = []
            for lo in range(0, len(tlist), SCORE_BATCH):
                hi = min(lo + SCORE_BATCH, len(tlist))
                logits = disc(transformed[lo:hi]).to(torch.float64)
                if has_fake_class and stack.M > 1:
                    probs = torch.softmax(logits[:, 1:], dim=1)
                    class_offset = 0
                else:
                    # variant a has no fake logit; M=1 keeps it (see above)
                    probs = torch.softmax(logits, dim=1)
                    class_offset = 1 if (has_fake_class and stack.M == 1) else 0
                for j in range(hi - lo):
                    scale_maps.append(probs[j, lo + j + class_offset].clone())
            maps.append(scale_maps)
    return PatchVotes(maps=maps)


def _selected_sum(flat: torch.Tensor, m: int) -> float:
    """Sum of the m lowest entries, ties broken by lowest linear index."""
    if m >= flat.numel():
        return float(flat.sum())
    order = torch.argsort(flat, stable=True)
    selected = torch.sort(order[:m]).values
    return float(flat[selected].sum())


def _resolve_fraction(stack: ModelStack, fraction: float | None) -> float:
    if fraction is None:
        configured = stack.config.get("score_fraction")
        fraction = configured if configured is not None else fraction_default(stack.k)
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    return float(fraction)


def defect_score(
    stack: ModelStack,
    img: torch.Tensor,
    fraction: float | None = None,
    per_scale_mean: bool | None = None,
) -> float:
    """Sum of votes over the lowest-vote patch fraction of every map.

    fraction=1.0 selects everything and reproduces the anomaly score.
    The per-map selection size is ceil(fraction * H * W).
    """
    fraction = _resolve_fraction(stack, fraction)
    if per_scale_mean is None:
        per_scale_mean = bool(stack.config.get("per_scale_mean", False))
    votes = patch_votes(stack, img)
    total = 0.0
    for scale_maps in votes.maps:
        for vm in scale_maps:
            flat = vm.reshape(-1)
            m = math.ceil(fraction * flat.numel())
            s = _selected_sum(flat, m)
            if per_scale_mean:
                s /= m
            total += s
    return total


def anomaly_score(stack: ModelStack, img: torch.Tensor) -> float:
    """Total vote mass across scales, transformations and positions.

    Higher means more normal; implemented as the full-fraction defect
    score so the two agree exactly.
    """
    return defect_score(stack, img, fraction=1.0)


def defect_map(stack: ModelStack, img: torch.Tensor, fraction: float | None = None) -> torch.Tensor:
    """Finest-scale localization map from the lowest-vote patches.

    Per transformation, votes outside the selected lowest set are
    zeroed, the spatial action is inverted and the maps are summed.
    """
    fraction = _resolve_fraction(stack, fraction)
    votes = patch_votes(stack, img)
    tlist = make_transform_list(stack.channels, stack.variant)
    finest = votes.maps[stack.N]
    h, w = stack.sizes[stack.N]
    out = torch.zeros(h, w, dtype=torch.float64)
    for vm, t in zip(finest, tlist):
        flat = vm.reshape(-1)
        m = math.ceil(fraction * flat.numel())
        masked = torch.zeros_like(flat)
        if m >= flat.numel():
            masked = flat.clone()
        else:
            order = torch.argsort(flat, stable=True)[:m]
            masked[order] = flat[order]
        out = out + invert_response_map(masked.reshape(vm.shape), t)
    return out


def mse_baseline_score(train_imgs: list[torch.Tensor], img: torch.Tensor) -> float:
    """Training-free baseline: negative mean MSE against the train set."""
    if not train_imgs:
        raise ValidationError("need at least one training image")
    total = 0.0
    for ref in train_imgs:
        if ref.shape != img.shape:
            raise ValidationError(
                f"shape mismatch: train {tuple(ref.shape)} vs test {tuple(img.shape)}"
            )
        diff = img.to(torch.float64) - ref.to(torch.float64)
        total += float(torch.mean(diff * diff))
    return -total / len(train_imgs)
