"""Acceptance gate: ten timed end-to-end criteria, one test per criterion.

Each test prints one summary line (visible via -rA) and asserts its own
runtime budget where one applies. The heavy criteria (6-8) train real
models at desk scale, so the full file takes roughly 45 minutes on one
CPU core.
"""

import math
import random
import time

import numpy as np
import torch
from PIL import Image
from sklearn.datasets import load_digits

from htdg import scorer, trainer
from htdg.checkpoint import load_stack, save_stack
from htdg.evalharness import auc, run_trials
from htdg.imgpipe import build_pyramid
from htdg.nets import (
    Discriminator,
    Generator,
    discriminator_forward,
    generator_forward,
    init_weights,
)
from htdg.trainer import TrainConfig, train_stack
from htdg.transforms import enumerate_transforms

from conftest import (
    blob_texture,
    build_untrained_stack,
    checkerboard,
    sawtooth_texture,
    tiny_config,
    write_two_class_dataset,
)


def finish(num: int, label: str, t0: float, budget_s: float | None, **stats) -> None:
    """Assert the runtime budget (if any) and print the criterion line."""
    elapsed = time.monotonic() - t0
    if budget_s is not None:
        assert elapsed < budget_s, (
            f"criterion {num} took {elapsed:.1f}s, budget {budget_s:.0f}s"
        )
    extra = " ".join(f"{k}={v}" for k, v in stats.items())
    budget = f"{budget_s:.0f}s" if budget_s is not None else "none"
    print(f"[criterion {num:02d}] {label}: PASS {extra} "
          f"elapsed={elapsed:.1f}s budget={budget}")


def test_criterion_01_transform_enumeration():
    t0 = time.monotonic()
    color = enumerate_transforms(color_mode=True)
    gray = enumerate_transforms(color_mode=False)
    assert len(color) == 54
    assert len(gray) == 42
    for lst in (color, gray):
        keys = {(t.flip, t.tx, t.ty, t.rot, t.gray) for t in lst}
        assert len(keys) == len(lst)
        assert [t.index for t in lst] == list(range(1, len(lst) + 1))
        assert lst[0].is_identity
    assert all(not t.gray for t in gray)
    assert all(t.gray for t in color[42:50])
    assert all(not t.gray for t in color[:42])
    finish(1, "transform enumeration", t0, 1.0, color=54, gray=42)


def test_criterion_02_auc_oracle():
    t0 = time.monotonic()
    rng = random.Random(123)
    worst = 0.0
    for trial in range(1000):
        n_pos = rng.randint(1, 20)
        n_neg = rng.randint(1, 20)
        if trial % 2 == 0:
            pos = [float(rng.randint(0, 5)) for _ in range(n_pos)]
            neg = [float(rng.randint(0, 5)) for _ in range(n_neg)]
        else:
            pos = [rng.uniform(-3.0, 3.0) for _ in range(n_pos)]
            neg = [rng.uniform(-3.0, 3.0) for _ in range(n_neg)]
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0
                   for p in pos for n in neg)
        expected = wins / (n_pos * n_neg)
        worst = max(worst, abs(auc(pos, neg) - expected))
    assert worst <= 1e-12
    finish(2, "AUC pair-counting oracle", t0, 5.0, pairs=1000,
           worst_abs_err=f"{worst:.2e}")


def test_criterion_03_gradient_check():
    t0 = time.monotonic()
    m = 3
    gen = Generator(2, conditioned=False, width=4, n_blocks=2)
    disc = Discriminator(2, m + 1, width=4, n_blocks=2)
    init_weights(gen, 31)
    init_weights(disc, 32)
    gen.double().train()
    disc.double().train()

    rng = torch.Generator().manual_seed(7)

    def draw():
        return torch.rand((2, 8, 8), generator=rng, dtype=torch.float64) * 2.0 - 1.0

    x = draw()
    reals = [x, torch.flip(x, dims=[2]), torch.flip(x, dims=[1])]
    fake_base = draw()
    fake_in = fake_base + 0.3 * draw()
    rec_base = 0.5 * x
    rec_in = rec_base + 0.2 * draw()

    def objective():
        fake = fake_base + generator_forward(gen, fake_in)
        fake_map = discriminator_forward(disc, fake)
        real_maps = [discriminator_forward(disc, r) for r in reals]
        recon = rec_base + generator_forward(gen, rec_in)
        return (trainer.discriminator_loss(real_maps, [fake_map] * m)
                + trainer.generator_adv_loss([fake_map] * m)
                + 100.0 * trainer.reconstruction_loss(recon, x))

    loss = objective()
    loss.backward()

    eps = 1e-5
    n_params = 0
    worst = 0.0
    params = list(disc.parameters()) + list(gen.parameters())
    with torch.no_grad():
        for p in params:
            analytic = p.grad.reshape(-1)
            flat = p.data.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                hi = objective().item()
                flat[j] = orig - eps
                lo = objective().item()
                flat[j] = orig
                numeric = (hi - lo) / (2.0 * eps)
                a = analytic[j].item()
                err = abs(a - numeric)
                tol = 1e-7 + 1e-4 * abs(numeric)
                assert err <= tol, (
                    f"param element {n_params + j}: analytic {a:.10e} "
                    f"vs numeric {numeric:.10e} (err {err:.2e} > tol {tol:.2e})"
                )
                worst = max(worst, err / max(abs(numeric), 1e-3))
            n_params += flat.numel()
    finish(3, "analytic vs finite-difference gradients", t0, 120.0,
           params=n_params, worst_rel_err=f"{worst:.2e}")


def ce_map_oracle(maps: torch.Tensor, target_class: int) -> float:
    """Mean over patches of -log softmax[target], by explicit loops."""
    k, h, w = maps.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            logits = [float(maps[c, y, x]) for c in range(k)]
            mx = max(logits)
            lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
            total += lse - logits[target_class]
    return total / (h * w)


def test_criterion_04_loss_oracle():
    t0 = time.monotonic()
    rng = torch.Generator().manual_seed(44)
    worst = 0.0
    for m in (1, 2, 3):
        real_maps = [torch.randn((m + 1, 4, 4), generator=rng, dtype=torch.float64)
                     for _ in range(m)]
        fake_maps = [torch.randn((m + 1, 4, 4), generator=rng, dtype=torch.float64)
                     for _ in range(m)]
        expected_d = sum(ce_map_oracle(real_maps[i], i + 1) for i in range(m))
        expected_d += sum(ce_map_oracle(fake_maps[i], 0) for i in range(m))
        expected_g = sum(ce_map_oracle(fake_maps[i], i + 1) for i in range(m))
        got_d = float(trainer.discriminator_loss(real_maps, fake_maps))
        got_g = float(trainer.generator_adv_loss(fake_maps))
        worst = max(worst, abs(got_d - expected_d), abs(got_g - expected_g))

        zeros = [torch.zeros((m + 1, 4, 4), dtype=torch.float64) for _ in range(m)]
        d0 = float(trainer.discriminator_loss(zeros, zeros))
        g0 = float(trainer.generator_adv_loss(zeros))
        assert abs(d0 - 2 * m * math.log(m + 1)) <= 1e-12
        assert abs(g0 - m * math.log(m + 1)) <= 1e-12
    assert worst <= 1e-10
    finish(4, "loss triple-loop oracle", t0, None, worst_abs_err=f"{worst:.2e}")


def test_criterion_05_uniform_discriminator_identity():
    t0 = time.monotonic()
    cfg = TrainConfig(max_resolution=64, min_resolution=12, width=8,
                      iters_per_scale=1, d_steps=1, g_steps=1,
                      transform_chunk=21, seed=0)
    results = {}
    for channels in (1, 3):
        if channels == 1:
            img = blob_texture(3, size=64)
        else:
            img = torch.cat([blob_texture(s, size=64) for s in (3, 4, 5)])
        stack, _ = build_untrained_stack(img, cfg, zero_disc=True)
        assert stack.N + 1 == 6
        assert stack.M == (54 if channels == 3 else 42)
        expected = float(sum(h * w for h, w in stack.sizes))
        score = scorer.anomaly_score(stack, img)
        assert expected == 9050.0
        assert abs(score - expected) < 1e-9, (channels, score, expected)
        results[channels] = score
    finish(5, "zero-weight discriminator score identity", t0, None,
           gray=results[1], color=results[3], expected=9050)


def test_criterion_06_reconstruction_convergence():
    t0 = time.monotonic()
    img = checkerboard(size=64, cell=8, amp=0.7)
    cfg = TrainConfig(max_resolution=64, min_resolution=12, width=8,
                      iters_per_scale=500, d_steps=1, g_steps=1,
                      transform_chunk=21, seed=5)
    stack = train_stack([img], cfg)
    pyr = build_pyramid(img, cfg.r, cfg.min_resolution)
    recon = trainer.reconstruction_pass(stack, 0, stack.N)
    mse = float(torch.mean((recon - pyr.levels[stack.N]).double() ** 2))
    assert mse < 0.05
    finish(6, "checkerboard reconstruction", t0, 1200.0,
           scales=stack.N + 1, recon_mse=f"{mse:.4f}")


def test_criterion_07_desk_scale_separability(tmp_path):
    t0 = time.monotonic()
    data = tmp_path / "data"
    write_two_class_dataset(
        data,
        make_a=lambda i: sawtooth_texture(i),
        make_b=lambda i: -sawtooth_texture(i),
        n_train=4,
        n_test=6,
    )
    cfg = TrainConfig(max_resolution=32, min_resolution=22, width=16,
                      iters_per_scale=300, d_steps=3, g_steps=3,
                      transform_chunk=21, seed=0)
    summary = run_trials(data, "alpha", 1, 3, cfg)
    assert summary.mean >= 0.9, summary.aucs
    finish(7, "texture vs inverted texture separability", t0, 1800.0,
           mean_auc=f"{summary.mean:.3f}",
           aucs=[round(a, 3) for a in summary.aucs])


def write_digits_dataset(root, n_test_per_class: int = 40) -> None:
    """PNG tree <root>/<digit>/{train,test} from the 8x8 digits corpus."""
    digits = load_digits()
    by_class: dict[int, list[np.ndarray]] = {c: [] for c in range(10)}
    for arr, target in zip(digits.images, digits.target):
        by_class[int(target)].append(arr)
    for c, arrs in by_class.items():
        splits = (("test", arrs[:n_test_per_class]), ("train", arrs[n_test_per_class:]))
        for split, members in splits:
            d = root / str(c) / split
            d.mkdir(parents=True)
            for j, arr in enumerate(members):
                png = np.floor(arr * (255.0 / 16.0) + 0.5).astype(np.uint8)
                Image.fromarray(png, mode="L").save(d / f"{c}_{split}_{j:03d}.png")


def test_criterion_08_digits_one_shot(tmp_path):
    t0 = time.monotonic()
    data = tmp_path / "digits"
    write_digits_dataset(data)
    n_test = sum(1 for _ in data.glob("*/test/*.png"))
    n_train0 = sum(1 for _ in (data / "0" / "train").glob("*.png"))
    assert n_test == 400
    cfg = TrainConfig(max_resolution=32, min_resolution=22, width=16,
                      iters_per_scale=500, d_steps=3, g_steps=3,
                      transform_chunk=21, seed=0)
    summary = run_trials(data, "0", 1, 3, cfg)
    assert summary.mean >= 0.60, summary.aucs
    finish(8, "digit class 0 one-shot AUC", t0, 7200.0,
           mean_auc=f"{summary.mean:.3f}",
           aucs=[round(a, 3) for a in summary.aucs],
           train_pool=n_train0, test_images=n_test)


def test_criterion_09_defect_score_consistency(tiny_stack):
    t0 = time.monotonic()
    h, w = tiny_stack.sizes[-1]
    rng = torch.Generator().manual_seed(909)
    worst = 0.0
    for _ in range(100):
        img = torch.rand((1, h, w), generator=rng) * 2.0 - 1.0
        full = scorer.defect_score(tiny_stack, img, fraction=1.0)
        total = scorer.anomaly_score(tiny_stack, img)
        worst = max(worst, abs(full - total))
        assert full == total
    fractions = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
    for _ in range(20):
        img = torch.rand((1, h, w), generator=rng) * 2.0 - 1.0
        scores = [scorer.defect_score(tiny_stack, img, fraction=f) for f in fractions]
        for lo, hi in zip(scores, scores[1:]):
            assert hi >= lo, scores
    finish(9, "defect score consistency", t0, None, inputs=100,
           worst_abs_err=f"{worst:.2e}", fractions=len(fractions))


def test_criterion_10_determinism_and_serialization(tmp_path):
    t0 = time.monotonic()
    img = blob_texture(7, size=16)
    cfg = tiny_config(iters_per_scale=20)
    original = train_stack([img], cfg)
    first = save_stack(original, tmp_path / "a")
    second = save_stack(train_stack([img], cfg), tmp_path / "b")
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name

    reloaded = load_stack(first)
    rng = torch.Generator().manual_seed(1010)
    for _ in range(5):
        probe = torch.rand((1, 16, 16), generator=rng) * 2.0 - 1.0
        assert scorer.anomaly_score(original, probe) == \
            scorer.anomaly_score(reloaded, probe)
    finish(10, "determinism and serialization", t0, None,
           files=len(names), probes=5)
