"""Coarse-to-fine adversarial training of the per-scale model stack.

Each scale trains a generator against a transformation-classifying
discriminator: real patches of the i-th transformed image must be
classified as class i, generated patches as class 0, while the
generator additionally minimizes a reconstruction loss from a fixed
noise draw. Lower scales stay frozen. Ablation variants reduce the
transform set, drop the generator, or collapse the pyramid.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import imgpipe
from .errors import ConfigError, SequencingError, TrainingError, ValidationError
from .nets import (
    Discriminator,
    Generator,
    attach_condition,
    derive_seed,
    init_weights,
)
from .transforms import (
    TransformDescriptor,
    apply_transform,
    enumerate_transforms,
    identity_transform,
)

logger = logging.getLogger("htdg.trainer")

VARIANTS = ("full", "a", "b", "c", "d100", "e20", "f")
SIGMA0 = 1.0


@dataclass
class TrainConfig:
    """Hyperparameters for pyramid construction, optimization and scoring."""

    r: float = 0.75
    max_resolution: int = 64
    min_resolution: int = 12
    width: int = 32
    iters_per_scale: int = 2000
    d_steps: int = 3
    g_steps: int = 3
    lr: float = 0.0005
    beta1: float = 0.5
    beta2: float = 0.999
    alpha: float = 100.0
    transform_chunk: int = 14
    seed: int = 0
    variant: str = "full"
    score_fraction: float | None = None
    per_scale_mean: bool = False
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.r < 1.0:
            raise ConfigError(f"r must lie in (0, 1), got {self.r}")
        for name in ("max_resolution", "min_resolution", "width", "iters_per_scale",
                     "d_steps", "g_steps", "transform_chunk", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "beta2", "alpha"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.score_fraction is not None and not 0.0 < self.score_fraction <= 1.0:
            raise ConfigError(f"score_fraction must lie in (0, 1], got {self.score_fraction}")


def resolution_for_variant(cfg: TrainConfig) -> int:
    """Finest resolution: variants d100/e20 pin it to 100/20 pixels."""
    if cfg.variant == "d100":
        return 100
    if cfg.variant == "e20":
        return 20
    return cfg.max_resolution


def fraction_default(k: int) -> float:
    """Lowest-vote patch fraction: 5% in the one-shot setting, else 10%."""
    return 0.05 if k == 1 else 0.10


def make_transform_list(channels: int, variant: str) -> list[TransformDescriptor]:
    """Transform classes used as discriminator targets for a variant."""
    if variant in ("b", "c"):
        return [identity_transform()]
    return enumerate_transforms(color_mode=(channels == 3))


@dataclass
class ModelStack:
    """Trained per-scale networks plus everything needed to score."""

    k: int
    M: int
    r: float
    N: int
    channels: int
    sizes: list[tuple[int, int]]
    variant: str
    config: dict
    z_star: torch.Tensor | None = None
    generators: list[Generator | None] = field(default_factory=list)
    discriminators: list[Discriminator] = field(default_factory=list)
    sigmas: list[float] = field(default_factory=list)
    image_indices: list[int] = field(default_factory=list)

    @property
    def conditioned(self) -> bool:
        return self.k > 1 and self.variant != "a"

    @property
    def n_trained(self) -> int:
        return len(self.discriminators)

    @property
    def is_trained(self) -> bool:
        return self.n_trained == self.N + 1

    def add_scale(self, gen: Generator | None, disc: Discriminator, sigma: float) -> None:
        if sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {sigma}")
        self.generators.append(gen)
        self.discriminators.append(disc)
        self.sigmas.append(float(sigma))

    def require_trained(self) -> None:
        if not self.is_trained:
            raise SequencingError(
                f"stack has {self.n_trained} trained scales, needs {self.N + 1}"
            )


def _check_response_maps(maps: list[torch.Tensor], n_classes: int) -> None:
    if not maps:
        raise ValidationError("empty response map list")
    for m in maps:
        if m.dim() != 3 or m.shape[0] != n_classes:
            raise ValidationError(
                f"expected ({n_classes}, H, W) response maps, got shape {tuple(m.shape)}"
            )


def _ce_mean(map_: torch.Tensor, target_class: int) -> torch.Tensor:
    target = torch.full(map_.shape[1:], target_class, dtype=torch.long, device=map_.device)
    return F.cross_entropy(map_.unsqueeze(0), target.unsqueeze(0))


def discriminator_loss(
    real_maps: list[torch.Tensor], fake_maps: list[torch.Tensor]
) -> torch.Tensor:
    """Sum over i of mean-patch CE(real_i -> class i) + CE(fake_i -> class 0).

    Map i carries M+1 logit channels with the fake class at channel 0.
    """
    m = len(real_maps)
    if len(fake_maps) != m:
        raise ValidationError(
            f"got {m} real maps but {len(fake_maps)} fake maps, transformation index missing"
        )
    _check_response_maps(real_maps, m + 1)
    _check_response_maps(fake_maps, m + 1)
    loss = real_maps[0].new_zeros(())
    for i, rm in enumerate(real_maps, start=1):
        loss = loss + _ce_mean(rm, i)
    for fm in fake_maps:
        loss = loss + _ce_mean(fm, 0)
    return loss


def generator_adv_loss(fake_maps: list[torch.Tensor]) -> torch.Tensor:
    """Sum over i of mean-patch CE(fake_i -> class i)."""
    m = len(fake_maps)
    _check_response_maps(fake_maps, m + 1)
    loss = fake_maps[0].new_zeros(())
    for i, fm in enumerate(fake_maps, start=1):
        loss = loss + _ce_mean(fm, i)
    return loss


def _ce_chunk(maps: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """Batched form: per-map mean-patch CE summed over the chunk."""
    target = classes.view(-1, 1, 1).expand(maps.shape[0], maps.shape[2], maps.shape[3])
    per_patch = F.cross_entropy(maps, target, reduction="none")
    return per_patch.mean(dim=(1, 2)).sum()


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all entries."""
    if recon.shape != target.shape:
        raise ValidationError(
            f"shape mismatch: recon {tuple(recon.shape)} vs target {tuple(target.shape)}"
        )
    return torch.mean((recon - target) ** 2)


def _cond(stack: ModelStack, x: torch.Tensor, i: int) -> torch.Tensor:
    if stack.conditioned:
        return attach_condition(x, i, stack.k)
    return x


def _up(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return imgpipe.upsample(x, size[0], size[1])


def reconstruction_pass(stack: ModelStack, i: int, up_to: int) -> torch.Tensor:
    """Deterministic reconstruction from the fixed coarsest noise draw.

    Scale 0 maps the fixed draw directly; higher scales add residual
    detail on top of the upsampled lower reconstruction.
    """
    if not 0 <= i < stack.k:
        raise ValidationError(f"sample index {i} out of range for k={stack.k}")
    if up_to >= len(stack.generators) or any(
        stack.generators[n] is None for n in range(up_to + 1)
    ):
        raise SequencingError(f"scales 0..{up_to} are not all trained with generators")
    if stack.z_star is None:
        raise SequencingError("stack has no fixed coarsest-scale noise draw")
    x = None
    for n in range(up_to + 1):
        gen = stack.generators[n]
        if n == 0:
            x = gen(_cond(stack, stack.z_star, i).unsqueeze(0))[0]
        else:
            base = _up(x, stack.sizes[n])
            x = gen(_cond(stack, base, i).unsqueeze(0))[0] + base
    return x


def noise_sigma(stack: ModelStack, n: int, pyramids: list[imgpipe.Pyramid]) -> float:
    """Per-scale noise amplitude from the lower-scale reconstruction error.

    Scale 0 uses the configured constant; scale n averages over training
    images the RMSE between the upsampled reconstruction and the real
    level.
    """
    if n == 0:
        return SIGMA0
    if stack.n_trained < n:
        raise SequencingError(f"cannot compute sigma for scale {n}: lower scales untrained")
    total = 0.0
    with torch.no_grad():
        for i, pyr in enumerate(pyramids):
            recon = reconstruction_pass(stack, i, n - 1)
            up = _up(recon, stack.sizes[n])
            total += float(torch.sqrt(torch.mean((up - pyr.levels[n]) ** 2)))
    return total / len(pyramids)


def _sample_lower(stack: ModelStack, i: int, up_to: int, gen_rng: torch.Generator) -> torch.Tensor:
    """Random cascade through frozen scales 0..up_to (fresh noise each)."""
    x = None
    for n in range(up_to + 1):
        h, w = stack.sizes[n]
        z = torch.randn(stack.channels, h, w, generator=gen_rng) * stack.sigmas[n]
        gen = stack.generators[n]
        if n == 0:
            x = gen(_cond(stack, z, i).unsqueeze(0))[0]
        else:
            base = _up(x, (h, w))
            x = gen(_cond(stack, z + base, i).unsqueeze(0))[0] + base
    return x


def generate_sample(stack: ModelStack, i: int, rng: torch.Generator) -> torch.Tensor:
    """Draw one image from the full cascade, clamped to [-1, 1]."""
    stack.require_trained()
    if stack.variant == "a":
        raise SequencingError("variant a trains no generators and cannot sample")
    if not 0 <= i < stack.k:
        raise ValidationError(f"sample index {i} out of range for k={stack.k}")
    with torch.no_grad():
        x = _sample_lower(stack, i, stack.N, rng)
    return x.clamp(-1.0, 1.0)


def _transformed_stack(img: torch.Tensor, tlist: list[TransformDescriptor]) -> torch.Tensor:
    return torch.stack([apply_transform(img, t) for t in tlist])


def _check_finite(values: dict[str, float], scale: int, iteration: int) -> None:
    for name, v in values.items():
        if v != v or v in (float("inf"), float("-inf")):
            raise TrainingError(
                f"non-finite {name} loss ({v}) at scale {scale} iteration {iteration}"
            )


def train_scale(
    stack: ModelStack,
    n: int,
    pyramids: list[imgpipe.Pyramid],
    cfg: TrainConfig,
    seed: int | None = None,
) -> ModelStack:
    """Optimize scale n in place; lower scales must be trained and frozen.

    Every iteration draws its randomness from a stream keyed by
    (seed, scale, iteration), so runs are reproducible and any scale can
    be re-trained in isolation.
    """
    if stack.n_trained != n + 1:
        raise SequencingError(
            f"train_scale({n}) expects scales 0..{n} present and lower scales trained, "
            f"stack has {stack.n_trained}"
        )
    seed = cfg.seed if seed is None else seed
    has_gen = stack.variant != "a"
    disc = stack.discriminators[n]
    gen = stack.generators[n]
    disc.train().requires_grad_(True)
    if gen is not None:
        gen.train().requires_grad_(True)
    for m in range(n):
        stack.discriminators[m].eval().requires_grad_(False)
        if stack.generators[m] is not None:
            stack.generators[m].eval().requires_grad_(False)

    tlist = make_transform_list(stack.channels, stack.variant)
    if len(tlist) != stack.M:
        raise ValidationError(f"transform list has {len(tlist)} entries, stack expects {stack.M}")
    aug_list = enumerate_transforms(color_mode=(stack.channels == 3)) if stack.variant == "c" else None
    sigma = stack.sigmas[n]
    h, w = stack.sizes[n]
    k = stack.k

    # class targets: with a fake class reals map to 1..M, without to 0..M-1
    fake_class_present = stack.variant != "a"
    real_classes = torch.arange(1 if fake_class_present else 0,
                                stack.M + (1 if fake_class_present else 0), dtype=torch.long)
    fake_classes = torch.zeros(stack.M, dtype=torch.long)

    reals = [pyr.levels[n] for pyr in pyramids]
    if stack.variant != "c":
        reals_t = [_transformed_stack(x, tlist) for x in reals]
    else:
        reals_t = None

    recon_bases = None
    recon_targets = [pyr.levels[n] for pyr in pyramids]
    if has_gen:
        with torch.no_grad():
            if n == 0:
                recon_inputs = [_cond(stack, stack.z_star, i) for i in range(k)]
                recon_bases = [None] * k
            else:
                lows = [reconstruction_pass(stack, i, n - 1) for i in range(k)]
                recon_bases = [_up(x, (h, w)) for x in lows]
                recon_inputs = [_cond(stack, recon_bases[i], i) for i in range(k)]

    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_g = (
        torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        if has_gen
        else None
    )

    chunk = cfg.transform_chunk
    for it in range(cfg.iters_per_scale):
        rng = torch.Generator().manual_seed(derive_seed("iter", seed, n, it))
        i = int(torch.randint(k, (1,), generator=rng)) if k > 1 else 0

        g_input = None
        base = None
        if has_gen:
            with torch.no_grad():
                if n == 0:
                    z = torch.randn(stack.channels, h, w, generator=rng) * sigma
                    g_input = _cond(stack, z, i)
                else:
                    low = _sample_lower(stack, i, n - 1, rng)
                    base = _up(low, (h, w))
                    z = torch.randn(stack.channels, h, w, generator=rng) * sigma
                    g_input = _cond(stack, z + base, i)

        t_aug = None
        if stack.variant == "c":
            t_aug = aug_list[int(torch.randint(len(aug_list), (1,), generator=rng))]
            real_now = apply_transform(reals[i], t_aug).unsqueeze(0)
        else:
            real_now = reals_t[i]

        # discriminator phase: the fake is fixed while D updates
        d_loss_val = 0.0
        fake_t = None
        if has_gen:
            with torch.no_grad():
                fake = gen(g_input.unsqueeze(0))[0]
                if base is not None:
                    fake = fake + base
                if stack.variant == "c":
                    fake_t = apply_transform(fake, t_aug).unsqueeze(0)
                else:
                    fake_t = _transformed_stack(fake, tlist)
        for _ in range(cfg.d_steps):
            opt_d.zero_grad(set_to_none=True)
            d_loss_val = 0.0
            for lo in range(0, stack.M, chunk):
                hi = min(lo + chunk, stack.M)
                part = _ce_chunk(disc(real_now[lo:hi]), real_classes[lo:hi])
                if fake_t is not None:
                    part = part + _ce_chunk(disc(fake_t[lo:hi]), fake_classes[lo:hi])
                part.backward()
                d_loss_val += float(part.detach())
            opt_d.step()

        # generator phase: adversarial CE plus weighted reconstruction
        g_adv_val = 0.0
        recon_val = 0.0
        if has_gen:
            adv_classes = real_classes  # fool D into the per-transform class
            for _ in range(cfg.g_steps):
                opt_g.zero_grad(set_to_none=True)
                recon_out = gen(recon_inputs[i].unsqueeze(0))[0]
                if recon_bases[i] is not None:
                    recon_out = recon_out + recon_bases[i]
                recon = reconstruction_loss(recon_out, recon_targets[i])
                (cfg.alpha * recon).backward()
                recon_val = float(recon.detach())

                fake = gen(g_input.unsqueeze(0))[0]
                if base is not None:
                    fake = fake + base
                if stack.variant == "c":
                    gfake_t = apply_transform(fake, t_aug).unsqueeze(0)
                else:
                    gfake_t = torch.stack([apply_transform(fake, t) for t in tlist])
                g_adv_val = 0.0
                for lo in range(0, stack.M, chunk):
                    hi = min(lo + chunk, stack.M)
                    part = _ce_chunk(disc(gfake_t[lo:hi]), adv_classes[lo:hi])
                    part.backward(retain_graph=hi < stack.M)
                    g_adv_val += float(part.detach())
                opt_g.step()

        _check_finite(
            {"discriminator": d_loss_val, "generator_adv": g_adv_val, "reconstruction": recon_val},
            n,
            it,
        )
        if it % cfg.log_every == 0 or it == cfg.iters_per_scale - 1:
            logger.info(
                "scale=%d iter=%d d_loss=%.4f g_adv=%.4f recon=%.6f sigma=%.4f",
                n, it, d_loss_val, g_adv_val, recon_val, sigma,
            )
    return stack


def new_stack(train_imgs: list[torch.Tensor], cfg: TrainConfig) -> tuple[ModelStack, list[imgpipe.Pyramid]]:
    """Build the untrained stack skeleton and per-image pyramids."""
    if not train_imgs:
        raise ValidationError("need at least one training image")
    if cfg.variant == "f":
        raise ConfigError("variant f is a training-free baseline, nothing to train")
    channels = train_imgs[0].shape[0]
    for img in train_imgs:
        imgpipe.validate_image(img)
        if img.shape[0] != channels:
            raise ValidationError("training images disagree on channel count")
    finest = min(train_imgs[0].shape[1], train_imgs[0].shape[2])
    single_scale = cfg.variant in ("d100", "e20")
    min_size = finest if single_scale else cfg.min_resolution
    pyramids = [imgpipe.build_pyramid(img, cfg.r, min_size) for img in train_imgs]
    sizes = pyramids[0].sizes
    for pyr in pyramids:
        if pyr.sizes != sizes:
            raise ValidationError("training images disagree on pyramid sizes")
    k = len(train_imgs)
    tlist = make_transform_list(channels, cfg.variant)
    stack = ModelStack(
        k=k,
        M=len(tlist),
        r=cfg.r,
        N=len(sizes) - 1,
        channels=channels,
        sizes=sizes,
        variant=cfg.variant,
        config=dataclasses.asdict(cfg),
        image_indices=list(range(k)),
    )
    if cfg.variant != "a":
        h0, w0 = sizes[0]
        zgen = torch.Generator().manual_seed(derive_seed("zstar", cfg.seed))
        stack.z_star = torch.randn(channels, h0, w0, generator=zgen) * SIGMA0
    return stack, pyramids


def _fresh_scale_nets(stack: ModelStack, cfg: TrainConfig, n: int) -> tuple[Generator | None, Discriminator]:
    out_channels = stack.M + (1 if stack.variant != "a" else 0)
    gen = None
    if stack.variant != "a":
        gen = Generator(stack.channels, conditioned=stack.conditioned, width=cfg.width)
        init_weights(gen, derive_seed("init-g", cfg.seed, n))
    disc = Discriminator(stack.channels, out_channels, width=cfg.width)
    init_weights(disc, derive_seed("init-d", cfg.seed, n))
    return gen, disc


def train_stack(train_imgs: list[torch.Tensor], cfg: TrainConfig) -> ModelStack:
    """Full coarse-to-fine training over all scales."""
    stack, pyramids = new_stack(train_imgs, cfg)
    for n in range(stack.N + 1):
        gen, disc = _fresh_scale_nets(stack, cfg, n)
        sigma = noise_sigma(stack, n, pyramids) if stack.variant != "a" else 0.0
        stack.add_scale(gen, disc, sigma)
        train_scale(stack, n, pyramids, cfg)
        logger.info("finished scale %d/%d (sigma=%.4f)", n, stack.N, sigma)
    for m in range(stack.N + 1):
        stack.discriminators[m].eval().requires_grad_(False)
        if stack.generators[m] is not None:
            stack.generators[m].eval().requires_grad_(False)
    return stack
