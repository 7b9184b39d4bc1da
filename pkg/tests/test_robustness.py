import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from synthetic import dc_task, eval_set, square_task, train_tiny
from vitviz.ablation import evaluate_accuracy
from vitviz.data import BoxAnnotation, TensorEvalSet
from vitviz.errors import ContractError, UnannotatedImageError
from vitviz.models.adapter import IMAGENET_MEAN
from vitviz.models import ViTConfig, VisionTransformer, wrap_vit
from vitviz.robustness import (MaskingReport, box_union_mask, evaluate_frequency, low_pass, mask_background,
                               mask_foreground, plot_frequency_curves, run_frequency_study,
                               run_masking_study)


def ann(*boxes):
    return BoxAnnotation("x", tuple(boxes), tuple(0 for _ in boxes))


def filled(out, img):
    return (out != img).any(dim=0)


@pytest.fixture
def img():
    return torch.rand(3, 20, 24, generator=torch.Generator().manual_seed(0))


def test_whole_image_box(img):
    full = ann((0, 0, 24, 20))
    fg = mask_foreground(img, full)
    assert torch.allclose(fg, torch.tensor(IMAGENET_MEAN).reshape(3, 1, 1).expand_as(img))
    assert torch.equal(mask_background(img, full), img)


def test_degenerate_box_unchanged(img):
    assert torch.equal(mask_foreground(img, ann((5, 3, 5, 10))), img)


def test_no_boxes_error(img):
    with pytest.raises(UnannotatedImageError):
        mask_foreground(img, ann())
    with pytest.raises(UnannotatedImageError):
        mask_background(img, ann())


def _raster_oracle(boxes, H, W):
    count = 0
    for r in range(H):
        for c in range(W):
            if any(x0 <= c + 0.5 < x1 and y0 <= r + 0.5 < y1 for x0, y0, x1, y1 in boxes):
                count += 1
    return count


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 24), st.floats(0, 20), st.floats(0, 24), st.floats(0, 20)),
                min_size=1, max_size=3))
def test_raster_oracle_and_complement(raw):
    boxes = tuple((min(a, c), min(b, d), max(a, c), max(b, d)) for a, b, c, d in raw)
    image = torch.rand(3, 20, 24, generator=torch.Generator().manual_seed(1))
    a = ann(*boxes)
    fg = box_union_mask(a, 20, 24)
    assert int(fg.sum()) == _raster_oracle(boxes, 20, 24)
    fg_filled = filled(mask_foreground(image, a, fill=(-1.0, -1.0, -1.0)), image)
    assert torch.equal(fg_filled, fg)
    bg_filled = filled(mask_background(image, a, fill=(-1.0, -1.0, -1.0)), image)
    assert not (fg & bg_filled).any()
    assert torch.equal(fg | bg_filled, torch.ones(20, 24, dtype=torch.bool))


def test_overlapping_boxes_idempotent(img):
    a = ann((2, 2, 12, 12), (8, 8, 20, 18))
    once = mask_foreground(img, a)
    assert torch.equal(mask_foreground(once, a), once)
    separate = mask_foreground(mask_foreground(img, ann((2, 2, 12, 12))), ann((8, 8, 20, 18)))
    assert torch.equal(once, separate)
    assert int(box_union_mask(a, 20, 24).sum()) == 100 + 120 - 16


def test_masking_report_normalization():
    r = MaskingReport("m", 80.0, 90.0, 60.0, 72.0, 20.0, 27.0, 10)
    d = r.to_dict()
    assert d["normalized_full_top5"] == 100.0
    assert d["normalized_foreground_top5"] == 100 * 72.0 / 90.0
    assert d["normalized_background_top1"] == 100 * 20.0 / 80.0


@pytest.fixture(scope="module")
def square_model():
    x, y, _ = square_task(2000, 0)
    return train_tiny(x, y, steps=400)


def test_foreground_only_signal_gives_chance_background(square_model):
    x, y, a = square_task(400, 1)
    reports, failures = run_masking_study([square_model], eval_set(x, y, a))
    r = reports["vit-tiny-trained"]
    assert not failures and r.full_top1 >= 90 and r.foreground_top1 >= 90
    sigma = 100 * math.sqrt(0.25 * 0.75 / r.n)
    assert abs(r.background_top1 - 25.0) <= 3 * sigma


def test_failing_model_is_skipped(square_model):
    big = wrap_vit("vit-32px", VisionTransformer(ViTConfig(32, 8, 1, 8, 2, num_classes=4)).init_random(0))
    x, y, a = square_task(20, 1)
    reports, failures = run_masking_study([big, square_model], eval_set(x, y, a))
    assert list(reports) == ["vit-tiny-trained"] and "vit-32px" in failures


# --- low-pass filtering ------------------------------------------------------

def test_full_passband(img):
    assert torch.allclose(low_pass(img, 1.0), img, atol=1e-5)


def test_dc_limit(img):
    out = low_pass(img, 1e-6, clamp=False)
    assert torch.allclose(out, img.mean(dim=(-2, -1), keepdim=True).expand_as(img), atol=1e-6)


def _tone(size=20, cycles_per_px=0.15, vertical=False):
    r = torch.arange(size, dtype=torch.float64)
    wave = 0.5 + 0.3 * torch.cos(2 * math.pi * cycles_per_px * r)
    img = wave[:, None].expand(size, size) if vertical else wave[None, :].expand(size, size)
    return img.expand(3, size, size).clone()


@pytest.mark.parametrize("vertical", [False, True])
def test_tone_oracle(vertical):
    tone = _tone(vertical=vertical)  # 0.15 cycles/px = 0.3 x Nyquist
    assert torch.allclose(low_pass(tone, 0.5), tone, atol=1e-9)
    assert torch.allclose(low_pass(tone, 0.2), torch.full_like(tone, 0.5), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 1000))
def test_idempotent(c, seed):
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    once = low_pass(x, c, clamp=False)
    assert torch.allclose(low_pass(once, c, clamp=False), once, atol=1e-5)


def test_idempotent_with_clamp_on_midrange():
    x = 0.5 + 0.1 * torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(3))
    once = low_pass(x, 0.4)
    assert torch.allclose(low_pass(once, 0.4), once, atol=1e-5)


def test_energy_monotone():
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    energies = [float(torch.fft.fft2(low_pass(x, c, clamp=False)).abs().pow(2).sum())
                for c in [0.05 * i for i in range(1, 21)]]
    assert all(a <= b + 1e-9 for a, b in zip(energies, energies[1:]))


def test_cutoff_validation(img):
    with pytest.raises(ContractError):
        low_pass(img, 0.0)


def test_frequency_anchor_exact(tiny):
    g = torch.Generator().manual_seed(0)
    es = TensorEvalSet(torch.rand(40, 3, 16, 16, generator=g), torch.randint(0, 10, (40,), generator=g))
    curve = evaluate_frequency(tiny, es)
    assert curve.unfiltered == evaluate_accuracy(tiny, es).top1
    assert curve.retained()[-1] == 1.0
    with pytest.raises(ContractError):
        evaluate_frequency(tiny, es, cutoffs=[0.5, 0.2, 1.0])
    with pytest.raises(ContractError):
        evaluate_frequency(tiny, es, cutoffs=[0.2, 0.5])


def test_low_frequency_task_flat_curve(tmp_path):
    x, y = dc_task(2000, 0)
    model = train_tiny(x, y, steps=200)
    xt, yt = dc_task(400, 1)
    curves, failures = run_frequency_study([model], eval_set(xt, yt))
    accs = curves["vit-tiny-trained"].top1_accuracy
    assert not failures and max(accs) - min(accs) <= 2.0
    path = plot_frequency_curves(curves, tmp_path / "f.png")
    assert path.exists()
