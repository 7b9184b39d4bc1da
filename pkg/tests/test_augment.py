import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from vitviz.augment import (AugmentationSpec, ScheduleSpec, apply_draw, color_shift, draw_parameters,
                            gaussian_noise, jitter, sample_ensemble)
from vitviz.errors import ContractError


@pytest.fixture
def img():
    return torch.rand(3, 16, 20, generator=torch.Generator().manual_seed(0))


def test_jitter_identity(img):
    assert torch.equal(jitter(img, 0, 0), img)


def test_jitter_full_period(img):
    assert torch.equal(jitter(img, img.shape[-1], 0), img)
    assert torch.equal(jitter(img, 0, img.shape[-2]), img)


@given(st.integers(-32, 32), st.integers(-32, 32))
def test_jitter_inverse(dx, dy):
    x = torch.arange(3 * 16 * 20, dtype=torch.float32).reshape(3, 16, 20)
    assert torch.equal(jitter(jitter(x, dx, dy, 32), -dx, -dy, 32), x)


def test_jitter_direction(img):
    out = jitter(img, 3, 5)
    assert torch.equal(out[:, 5, 3], img[:, 0, 0])


def test_jitter_bound(img):
    with pytest.raises(ContractError):
        jitter(img, 33, 0, bound=32)


def test_jitter_zero_pad_mode(img):
    out = jitter(img, 2, 0, wrap=False)
    assert torch.all(out[..., :2] == 0) and torch.equal(out[..., 2:], img[..., :-2])


def test_color_shift_identity(img):
    assert torch.equal(color_shift(img, torch.zeros(3), torch.ones(3)), img)


def test_color_shift_ones():
    assert torch.equal(color_shift(torch.zeros(3, 4, 4), torch.ones(3), torch.ones(3)), torch.ones(3, 4, 4))


def test_color_shift_per_channel(img):
    out = color_shift(img, torch.tensor([0.0, 1.0, 2.0]), torch.tensor([1.0, 2.0, 3.0]))
    for c in range(3):
        assert torch.allclose(out[c], (c + 1) * img[c] + c)


def test_color_shift_validation(img):
    with pytest.raises(ContractError):
        color_shift(img, torch.zeros(3), torch.tensor([1.0, 0.0, 1.0]))
    with pytest.raises(ContractError):
        color_shift(img, torch.zeros(2), torch.ones(2))


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(0, 400), st.integers(0, 7))
def test_sampled_ranges(seed, step, k):
    d = draw_parameters(AugmentationSpec(seed=seed), step, k)
    assert torch.all(d.sigma >= math.exp(-1)) and torch.all(d.sigma <= math.exp(1))
    assert torch.all(d.mu.abs() <= 1)
    assert abs(d.dx) <= 32 and abs(d.dy) <= 32


def test_noise_identity(img):
    assert torch.equal(gaussian_noise(img, 0.0, 1), img)


def test_noise_determinism(img):
    assert torch.equal(gaussian_noise(img, 0.3, 42), gaussian_noise(img, 0.3, 42))
    assert not torch.equal(gaussian_noise(img, 0.3, 42), gaussian_noise(img, 0.3, 43))


def test_noise_std_statistics():
    x = torch.rand(3, 224, 224, generator=torch.Generator().manual_seed(5))
    diff = gaussian_noise(x, 0.5, 9) - x
    assert abs(float(diff.std()) - 0.5) <= 0.02


def test_noise_negative_std(img):
    with pytest.raises(ContractError):
        gaussian_noise(img, -0.1, 0)


def test_ensemble_identity_parameters(img):
    spec = AugmentationSpec(jitter_bound=0, cs_mean_scale=0.0, cs_std_scale=0.0, gs_std=0.0, ensemble_size=1)
    assert torch.equal(sample_ensemble(img, spec, 0)[0], img)


def test_ensemble_determinism(img):
    spec = AugmentationSpec(jitter_bound=4, seed=11)
    a = sample_ensemble(img, spec, 3)
    b = sample_ensemble(img, spec, 3)
    assert torch.equal(a, b) and a.shape == (8, 3, 16, 20)
    assert not torch.equal(a, sample_ensemble(img, spec, 4))


def test_ensemble_member_is_pure_function_of_seed_step_k(img):
    spec = AugmentationSpec(jitter_bound=4, seed=11, ensemble_size=4)
    big = sample_ensemble(img, spec, 2)
    d = draw_parameters(spec, 2, 3, noise_std=spec.gs_std)
    assert torch.equal(big[3], apply_draw(img, d, 4))


def test_final_step_has_no_noise(img):
    sched = ScheduleSpec(total_steps=10)
    spec = AugmentationSpec(jitter_bound=4, seed=1, ensemble_size=2)
    out = sample_ensemble(img, spec, 9, sched)
    for k in range(2):
        d = draw_parameters(spec, 9, k)
        expected = color_shift(jitter(img, d.dx, d.dy), d.mu, d.sigma)
        assert torch.equal(out[k], expected.to(out.dtype))
    with pytest.raises(ContractError):
        sample_ensemble(img, spec, 10, sched)


def test_schedule_endpoints():
    s = ScheduleSpec()
    assert s.gs_std_at(0) == 0.5 and s.gs_std_at(s.total_steps - 1) == 0.0 and s.gs_std_at(s.total_steps) == 0.0
    assert s.lr_at(0) == pytest.approx(0.1) and s.lr_at(s.total_steps) == pytest.approx(0.0, abs=1e-15)
    mid = s.gs_std_at((s.total_steps - 1) / 2)
    assert mid == pytest.approx(0.25)
    lrs = [s.lr_at(t) for t in range(s.total_steps + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_composition_order_non_commuting():
    """Gradient image: jitter then per-channel scale differs from scale then jitter under zero padding,
    and the pipeline output equals the Jitter -> CS -> GS composition only."""
    x = torch.linspace(0, 1, 16).repeat(3, 16, 1)
    d = draw_parameters(AugmentationSpec(jitter_bound=4, seed=2), 0, 0, noise_std=0.1)
    d = type(d)(3, 1, d.mu, d.sigma, 0.1, d.noise_seed)
    jc = gaussian_noise(color_shift(jitter(x, 3, 1, wrap=False), d.mu, d.sigma), 0.1, d.noise_seed)
    cj = gaussian_noise(jitter(color_shift(x, d.mu, d.sigma), 3, 1, wrap=False), 0.1, d.noise_seed)
    ng = color_shift(gaussian_noise(jitter(x, 3, 1, wrap=False), 0.1, d.noise_seed), d.mu, d.sigma)
    out = apply_draw(x, d, wrap=False)
    assert torch.equal(out, jc)
    assert not torch.allclose(out, cj) and not torch.allclose(out, ng)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 50), st.integers(0, 7))
def test_pipeline_order_property(seed, step, k):
    x = torch.linspace(0, 1, 12).repeat(3, 12, 1) + torch.linspace(0, 0.5, 3)[:, None, None]
    spec = AugmentationSpec(jitter_bound=3, seed=seed, wrap=False, gs_std=0.2)
    d = draw_parameters(spec, step, k)
    expected = gaussian_noise(color_shift(jitter(x, d.dx, d.dy, wrap=False), d.mu, d.sigma), d.noise_std, d.noise_seed)
    assert torch.equal(apply_draw(x, d, 3, wrap=False), expected)


def test_ensemble_gradient_flows(img):
    x = img.clone().requires_grad_(True)
    sample_ensemble(x, AugmentationSpec(jitter_bound=2, ensemble_size=3), 0).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_spec_validation():
    with pytest.raises(ContractError):
        AugmentationSpec(ensemble_size=0)
    with pytest.raises(ContractError):
        AugmentationSpec(gs_std=-1)
