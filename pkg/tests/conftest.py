"""Shared fixtures: procedural images, tiny trained stacks, datasets."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from htdg import TrainConfig, train_stack
from htdg.imgpipe import save_image
from htdg.nets import Discriminator, Generator, init_weights
from htdg.trainer import ModelStack, make_transform_list, new_stack


def blob_texture(seed: int, size: int = 64, amp: float = 0.7) -> torch.Tensor:
    """Binary blob pattern from thresholded smooth noise, values +-amp."""
    rng = np.random.default_rng(seed)
    coarse = torch.from_numpy(rng.normal(size=(size // 8, size // 8))).float()
    up = F.interpolate(
        coarse[None, None], size=(size, size), mode="bicubic", align_corners=False
    )[0, 0]
    return torch.where(up > 0, amp, -amp)[None, :, :]


def stripe_texture(seed: int, size: int = 32, diag: int = 1, period: float = 6.0) -> torch.Tensor:
    """Oriented sinusoidal stripes plus per-image pixel noise.

    Orientation (diag=+1 or -1) is what a transformation classifier can
    latch onto locally; the fixed phase keeps one-shot trials stable.
    """
    g = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    base = torch.sin(2 * math.pi * (xs + diag * ys) / period)
    noise = (torch.rand(size, size, generator=g) - 0.5) * 0.3
    return (0.8 * base + noise).clamp(-1.0, 1.0)[None, :, :]


def sawtooth_texture(seed: int, size: int = 32, period: float = 8.0) -> torch.Tensor:
    """Diagonal sawtooth ramp plus per-image noise.

    Negating the image reverses the ramp direction, so the inverted
    class resembles a flipped texture rather than an unrelated one.
    """
    g = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    frac = ((xs + ys) % period) / period
    base = 0.8 * (2.0 * frac - 1.0)
    noise = (torch.rand(size, size, generator=g) - 0.5) * 0.2
    return (base + noise).clamp(-1.0, 1.0)[None, :, :]


def checkerboard(size: int = 64, cell: int = 8, amp: float = 0.7) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    pattern = ((ys // cell + xs // cell) % 2).float() * 2.0 - 1.0
    return (amp * pattern)[None, :, :]


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        max_resolution=16,
        min_resolution=12,
        width=8,
        iters_per_scale=30,
        d_steps=1,
        g_steps=1,
        transform_chunk=21,
        seed=11,
        log_every=50,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_train_img() -> torch.Tensor:
    return blob_texture(7, size=16)


@pytest.fixture(scope="session")
def tiny_stack(tiny_train_img) -> ModelStack:
    """A small but genuinely trained 2-scale stack (grayscale, M=42)."""
    return train_stack([tiny_train_img], tiny_config())


def build_untrained_stack(
    img: torch.Tensor,
    cfg: TrainConfig,
    zero_disc: bool = False,
    zero_gen: bool = True,
    seed: int = 123,
):
    """Stack with initialized (or zeroed) nets and no training at all."""
    stack, pyramids = new_stack([img], cfg)
    for n in range(stack.N + 1):
        out_channels = stack.M + (1 if stack.variant != "a" else 0)
        disc = Discriminator(stack.channels, out_channels, width=cfg.width)
        init_weights(disc, seed + 2 * n)
        if zero_disc:
            with torch.no_grad():
                for p in disc.parameters():
                    p.zero_()
        gen = None
        if stack.variant != "a":
            gen = Generator(stack.channels, conditioned=stack.conditioned, width=cfg.width)
            init_weights(gen, seed + 2 * n + 1)
            if zero_gen:
                with torch.no_grad():
                    for p in gen.parameters():
                        p.zero_()
        stack.add_scale(gen, disc, 1.0 if n == 0 else 0.5)
        disc.eval()
        if gen is not None:
            gen.eval()
    return stack, pyramids


def write_two_class_dataset(root, make_a, make_b, n_train=4, n_test=6, channels=1):
    """<root>/{alpha,beta}/{train,test} filled from two image factories."""
    for name, factory in (("alpha", make_a), ("beta", make_b)):
        for split, count, offset in (("train", n_train, 0), ("test", n_test, 100)):
            d = root / name / split
            d.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                save_image(factory(offset + i), d / f"{name}_{split}_{i:02d}.png")


def transforms_for(stack: ModelStack):
    return make_transform_list(stack.channels, stack.variant)
