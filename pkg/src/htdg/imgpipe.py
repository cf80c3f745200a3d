"""Image ingestion, normalization and multi-scale pyramid construction.

Images are torch tensors of shape (C, H, W) with C in {1, 3} and values
in [-1, 1]. The affine map between the byte and internal representations
is v/127.5 - 1; its inverse quantizes with round-half-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ConfigError, IngestionError, ValidationError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def validate_image(img: torch.Tensor) -> None:
    """Check the (C, H, W) shape, channel count and [-1, 1] range."""
    if img.dim() != 3:
        raise ValidationError(f"expected a (C, H, W) tensor, got shape {tuple(img.shape)}")
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValidationError(f"channel count must be 1 or 3, got {c}")
    if h < 1 or w < 1:
        raise ValidationError(f"image dimensions must be >= 1, got {h}x{w}")
    if not torch.isfinite(img).all():
        raise ValidationError("image contains non-finite values")
    if img.min() < -1.0 or img.max() > 1.0:
        raise ValidationError("image values must lie in [-1, 1]")


def to_unit_range(bytes_array: np.ndarray) -> torch.Tensor:
    """Map a [0, 255] array to a float32 tensor in [-1, 1]."""
    return torch.from_numpy(np.asarray(bytes_array, dtype=np.float32) / 127.5 - 1.0)


def to_byte_range(img: torch.Tensor) -> np.ndarray:
    """Quantize a [-1, 1] tensor to uint8 with round-half-up."""
    v = (img.detach().to(torch.float64) + 1.0) * 127.5
    v = torch.floor(v + 0.5).clamp(0, 255)
    return v.cpu().numpy().astype(np.uint8)


def load_image(path: str | Path, channels: int, target: int) -> torch.Tensor:
    """Load an image file as a (channels, target, target) tensor in [-1, 1].

    Non-square inputs are center-cropped to square before the bicubic
    resize. RGB to gray uses BT.601 luma; gray to RGB replicates.
    """
    if channels not in (1, 3):
        raise ValidationError(f"channels must be 1 or 3, got {channels}")
    if target < 1:
        raise ValidationError(f"target resolution must be >= 1, got {target}")
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            pil = im.convert("L" if channels == 1 else "RGB")
    except (OSError, ValueError, SyntaxError) as exc:
        raise IngestionError(f"cannot read image file {path}: {exc}") from exc
    w, h = pil.size
    if w < 1 or h < 1:
        raise ValidationError(f"zero-sized image: {path}")
    if w != h:
        side = min(w, h)
        left = (w - side) // 2
        top = (h - side) // 2
        pil = pil.crop((left, top, left + side, top + side))
    if pil.size != (target, target):
        pil = pil.resize((target, target), PILImage.Resampling.BICUBIC)
    arr = np.asarray(pil, dtype=np.uint8)
    if channels == 1:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_unit_range(arr)


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write a [-1, 1] tensor as an 8-bit PNG (lossless round trip)."""
    validate_image(img.clamp(-1.0, 1.0))
    arr = to_byte_range(img.clamp(-1.0, 1.0))
    if arr.shape[0] == 1:
        pil = PILImage.fromarray(arr[0], mode="L")
    else:
        pil = PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    pil.save(Path(path))


def equalize_histogram(img: torch.Tensor) -> torch.Tensor:
    """Per-channel 256-bin histogram equalization.

    Works on the quantized [0, 255] representation with the CDF remap
    h(v) = round((cdf(v) - cdf_min) / (P - cdf_min) * 255) and maps back
    to [-1, 1]. Constant channels are returned unchanged.
    """
    validate_image(img)
    out = img.clone()
    bytes_all = to_byte_range(img)
    for c in range(img.shape[0]):
        v = bytes_all[c]
        hist = np.bincount(v.ravel(), minlength=256)
        occupied = np.nonzero(hist)[0]
        if occupied.size <= 1:
            continue
        cdf = np.cumsum(hist)
        total = int(cdf[-1])
        cdf_min = int(cdf[occupied[0]])
        scale = 255.0 / (total - cdf_min)
        lut = np.floor((cdf - cdf_min) * scale + 0.5).clip(0, 255)
        remapped = lut[v]
        out[c] = to_unit_range(remapped)
    return out


@dataclass
class Pyramid:
    """Ordered image list from coarsest (scale 0) to finest (scale N)."""

    levels: list[torch.Tensor]
    r: float
    N: int

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [(lv.shape[1], lv.shape[2]) for lv in self.levels]


def pyramid_sizes(finest_h: int, finest_w: int, r: float, min_size: int) -> list[tuple[int, int]]:
    """Level sizes coarse to fine: round-half-up of finest * r^(N-n)."""
    if not 0.0 < r < 1.0:
        raise ConfigError(f"scale factor r must lie in (0, 1), got {r}")
    if min_size > min(finest_h, finest_w):
        raise ConfigError(
            f"min_size {min_size} exceeds finest resolution {min(finest_h, finest_w)}"
        )
    def level(n: int) -> tuple[int, int]:
        return (_round_half_up(finest_h * r**n), _round_half_up(finest_w * r**n))

    n_scales = 0
    while _round_half_up(min(finest_h, finest_w) * r ** (n_scales + 1)) >= min_size:
        nxt, cur = level(n_scales + 1), level(n_scales)
        # rounding can stall for r close to 1; sizes must strictly shrink
        if nxt[0] >= cur[0] or nxt[1] >= cur[1]:
            break
        n_scales += 1
    return [level(n_scales - n) for n in range(n_scales + 1)]


def downsample(img: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Antialiased bicubic downsampling, clamped to [-1, 1]."""
    if h > img.shape[1] or w > img.shape[2]:
        raise ValidationError(f"downsample target {h}x{w} exceeds source {img.shape[1]}x{img.shape[2]}")
    if (h, w) == (img.shape[1], img.shape[2]):
        return img.clone()
    out = F.interpolate(
        img.unsqueeze(0), size=(h, w), mode="bicubic", align_corners=False, antialias=True
    )[0]
    return out.clamp(-1.0, 1.0)


def upsample(img: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Bicubic upsampling to h x w, clamped to [-1, 1]."""
    if h < img.shape[1] or w < img.shape[2]:
        raise ValidationError(f"upsample target {h}x{w} below source {img.shape[1]}x{img.shape[2]}")
    if (h, w) == (img.shape[1], img.shape[2]):
        return img.clone()
    out = F.interpolate(img.unsqueeze(0), size=(h, w), mode="bicubic", align_corners=False)[0]
    return out.clamp(-1.0, 1.0)


def build_pyramid(img: torch.Tensor, r: float, min_size: int = 12) -> Pyramid:
    """Decompose an image into N+1 bicubic scales, coarse to fine.

    N is the largest n with round(finest * r^n) >= min_size; every level
    is downsampled directly from the input.
    """
    validate_image(img)
    if min_size < 11:
        raise ValidationError(f"min_size must cover the 11x11 receptive field, got {min_size}")
    sizes = pyramid_sizes(img.shape[1], img.shape[2], r, min_size)
    levels = [downsample(img, h, w) for h, w in sizes]
    return Pyramid(levels=levels, r=r, N=len(sizes) - 1)


def build_pyramid_from_sizes(img: torch.Tensor, sizes: list[tuple[int, int]], r: float) -> Pyramid:
    """Rebuild a pyramid at the exact level sizes of a trained model."""
    validate_image(img)
    if (img.shape[1], img.shape[2]) != tuple(sizes[-1]):
        raise ValidationError(
            f"image size {img.shape[1]}x{img.shape[2]} does not match finest level {sizes[-1]}"
        )
    levels = [downsample(img, h, w) for h, w in sizes]
    return Pyramid(levels=levels, r=r, N=len(sizes) - 1)


def list_image_files(directory: str | Path) -> list[Path]:
    """Sorted image files directly inside a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"not a directory: {directory}")
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def load_preprocessed(path: str | Path, channels: int, target: int) -> torch.Tensor:
    """Load, resize and histogram-equalize one image (train and test path)."""
    return equalize_histogram(load_image(path, channels, target))
