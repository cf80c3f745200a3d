"""File outputs for scoring and evaluation: maps, raw dumps and figures.

All figures render through the Agg backend straight to disk; nothing
here opens a display.
"""

from __future__ import annotations

import struct
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image as PILImage

from .errors import ValidationError

MAP_MAGIC = b"HTDG"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sIII")


def _as_2d(map2d: torch.Tensor) -> np.ndarray:
    if map2d.dim() != 2:
        raise ValidationError(f"expected an H x W map, got shape {tuple(map2d.shape)}")
    return map2d.detach().cpu().numpy()


def save_map_png(map2d: torch.Tensor, path: str | Path) -> None:
    """Min-max normalize a map and write it as an 8-bit grayscale PNG."""
    arr = _as_2d(map2d).astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    png = np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(png, mode="L").save(Path(path))


def save_map_raw(map2d: torch.Tensor, path: str | Path) -> None:
    """Dump a map as little-endian float32 with a 16-byte header."""
    arr = _as_2d(map2d).astype("<f4")
    h, w = arr.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, h, w) + arr.tobytes())


def load_map_raw(path: str | Path) -> torch.Tensor:
    """Read a raw map dump back (inverse of save_map_raw)."""
    data = Path(path).read_bytes()
    if len(data) < _MAP_HEADER.size:
        raise ValidationError(f"raw map {path} is shorter than its header")
    magic, version, h, w = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC or version != MAP_VERSION:
        raise ValidationError(f"raw map {path} has bad magic/version {magic!r}/{version}")
    payload = data[_MAP_HEADER.size :]
    if len(payload) != 4 * h * w:
        raise ValidationError(f"raw map {path} is truncated")
    return torch.from_numpy(np.frombuffer(payload, dtype="<f4").copy().reshape(h, w))


def _image_to_display(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().numpy()
    arr = (arr + 1.0) / 2.0
    if arr.shape[0] == 1:
        return arr[0]
    return np.transpose(arr, (1, 2, 0)).clip(0.0, 1.0)


def render_score_figure(paths: list[str], scores: list[float], out_path: str | Path) -> None:
    """Histogram of image scores, saved next to the CSV."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(scores, bins=min(30, max(5, len(scores) // 2 + 1)), color="steelblue")
    ax.set_xlabel("score (higher = more normal)")
    ax.set_ylabel("images")
    ax.set_title(f"score distribution over {len(paths)} images")
    fig.tight_layout()
    fig.savefig(Path(out_path), dpi=120)
    plt.close(fig)


def render_trial_figure(summary, out_path: str | Path) -> None:
    """Per-trial AUC bars with the mean marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(len(summary.aucs)))
    ax.bar(xs, summary.aucs, color="steelblue")
    ax.axhline(summary.mean, color="firebrick", linestyle="--",
               label=f"mean {summary.mean:.3f} (std {summary.std:.3f})")
    ax.set_xticks(xs)
    ax.set_xlabel("trial")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{summary.class_name} k={summary.k} variant={summary.variant}")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(Path(out_path), dpi=120)
    plt.close(fig)


def render_overlay_figure(img: torch.Tensor, map2d: torch.Tensor, out_path: str | Path) -> None:
    """Input image beside the defect map and a red overlay of its support."""
    base = _image_to_display(img)
    heat = _as_2d(map2d).astype(np.float64)
    lo, hi = float(heat.min()), float(heat.max())
    norm = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    axes[0].imshow(base, cmap="gray" if base.ndim == 2 else None, vmin=0, vmax=1)
    axes[0].set_title("input")
    axes[1].imshow(norm, cmap="magma")
    axes[1].set_title("defect map")
    axes[2].imshow(base, cmap="gray" if base.ndim == 2 else None, vmin=0, vmax=1)
    axes[2].imshow(np.where(norm > 0, norm, np.nan), cmap="autumn", alpha=0.6)
    axes[2].set_title("overlay (selected patches)")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(Path(out_path), dpi=120)
    plt.close(fig)
