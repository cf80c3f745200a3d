"""Per-scale generator and discriminator networks.

Both are fully convolutional stacks of five 3x3 blocks (same padding,
11x11 effective receptive field). Blocks 1-4 normalize per channel over
the spatial positions of the single instance and apply LeakyReLU(0.2);
block 5 is a bare convolution. The generator ends in tanh and emits a
residual; the discriminator emits one logit map per class.
"""

from __future__ import annotations

import hashlib

import torch
from torch import nn

from .errors import ValidationError

DEFAULT_WIDTH = 32
DEFAULT_BLOCKS = 5
LEAKY_SLOPE = 0.2
INIT_STD = 0.02


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from a tuple of labels and integers."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


class SpatialInstanceNorm(nn.InstanceNorm2d):
    """Per-instance channel normalization that tolerates 1x1 inputs.

    A single spatial element has zero variance, so the normalized value
    is 0 and the output collapses to the affine bias.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] * x.shape[-1] == 1 and (self.training or not self.track_running_stats):
            if self.affine:
                return self.bias.view(1, -1, 1, 1).expand_as(x) + 0.0 * x
            return torch.zeros_like(x)
        return super().forward(x)


def _make_blocks(
    in_channels: int, width: int, out_channels: int, n_blocks: int, track_running_stats: bool
) -> nn.Sequential:
    if n_blocks < 1:
        raise ValidationError(f"need at least 1 block, got {n_blocks}")
    layers: list[nn.Module] = []
    c_in = in_channels
    for b in range(n_blocks - 1):
        layers.append(nn.Conv2d(c_in, width, kernel_size=3, padding=1))
        layers.append(
            SpatialInstanceNorm(width, affine=True, track_running_stats=track_running_stats)
        )
        layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        c_in = width
    layers.append(nn.Conv2d(c_in, out_channels, kernel_size=3, padding=1))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Residual generator: tanh-bounded detail added on top of the input."""

    def __init__(
        self,
        image_channels: int,
        conditioned: bool = False,
        width: int = DEFAULT_WIDTH,
        n_blocks: int = DEFAULT_BLOCKS,
    ):
        super().__init__()
        self.image_channels = image_channels
        self.conditioned = conditioned
        self.in_channels = image_channels + (1 if conditioned else 0)
        # shared statistics across train/eval keep reconstructions stable
        self.body = _make_blocks(
            self.in_channels, width, image_channels, n_blocks, track_running_stats=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.body(x))


class Discriminator(nn.Module):
    """Markovian patch classifier emitting out_channels logit maps."""

    def __init__(
        self,
        image_channels: int,
        out_channels: int,
        width: int = DEFAULT_WIDTH,
        n_blocks: int = DEFAULT_BLOCKS,
    ):
        super().__init__()
        self.image_channels = image_channels
        self.out_channels = out_channels
        # running statistics make eval-time responses strictly local
        self.body = _make_blocks(
            image_channels, width, out_channels, n_blocks, track_running_stats=True
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded init: conv kernels N(0, 0.02), all biases 0, norms identity."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=gen)
                m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def generator_forward(gen: Generator, x: torch.Tensor) -> torch.Tensor:
    """Run the generator on one (C, H, W) input; returns the residual only."""
    if x.dim() != 3:
        raise ValidationError(f"expected a (C, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[0] != gen.in_channels:
        raise ValidationError(
            f"generator expects {gen.in_channels} input channels, got {x.shape[0]}"
        )
    return gen(x.unsqueeze(0))[0]


def discriminator_forward(disc: Discriminator, img: torch.Tensor) -> torch.Tensor:
    """Run the discriminator on one (C, H, W) image; returns class logit maps."""
    if img.dim() != 3:
        raise ValidationError(f"expected a (C, H, W) input, got shape {tuple(img.shape)}")
    if img.shape[0] != disc.image_channels:
        raise ValidationError(
            f"discriminator expects {disc.image_channels} input channels, got {img.shape[0]}"
        )
    return disc(img.unsqueeze(0))[0]


def encode_condition(i: int, k: int) -> float:
    """Sample-index encoding i / max(1, k - 1), mapping indices into [0, 1]."""
    return float(i) / float(max(1, k - 1))


def attach_condition(x: torch.Tensor, i: int, k: int) -> torch.Tensor:
    """Append one constant channel carrying the sample-index encoding."""
    if not 0 <= i < k:
        raise ValidationError(f"sample index {i} out of range for k={k}")
    if x.dim() == 3:
        cond = x.new_full((1, x.shape[1], x.shape[2]), encode_condition(i, k))
        return torch.cat([x, cond], dim=0)
    if x.dim() == 4:
        cond = x.new_full((x.shape[0], 1, x.shape[2], x.shape[3]), encode_condition(i, k))
        return torch.cat([x, cond], dim=1)
    raise ValidationError(f"expected a 3D or 4D tensor, got shape {tuple(x.shape)}")
