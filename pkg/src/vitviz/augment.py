"""Stochastic augmentation stack: Jitter, then ColorShift, then additive noise.

Every random draw comes from a generator seeded by ``(seed, step, k)`` so an
ensemble member can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ContractError


@dataclass(frozen=True)
class AugmentationSpec:
    jitter_bound: int = 32
    cs_mean_scale: float = 1.0
    cs_std_scale: float = 1.0
    gs_std: float = 0.5
    ensemble_size: int = 8
    seed: int = 0
    wrap: bool = True  # circular jitter; False pads with zeros

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ContractError("ensemble_size must be >= 1")
        if self.gs_std < 0 or self.jitter_bound < 0:
            raise ContractError("gs_std and jitter_bound must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ScheduleSpec:
    gs_std_start: float = 0.5
    gs_std_end: float = 0.0
    lr_start: float = 0.1
    lr_end: float = 0.0
    total_steps: int = 400

    def gs_std_at(self, step: int) -> float:
        """Linear from start (step 0) to end (step total_steps - 1 and beyond)."""
        frac = min(step / max(self.total_steps - 1, 1), 1.0)
        return self.gs_std_start + (self.gs_std_end - self.gs_std_start) * frac

    def lr_at(self, step: int) -> float:
        """Cosine annealing; reaches lr_end at step == total_steps."""
        frac = min(step / self.total_steps, 1.0)
        return self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1 + math.cos(math.pi * frac))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AugmentationDraw:
    dx: int
    dy: int
    mu: torch.Tensor
    sigma: torch.Tensor
    noise_std: float
    noise_seed: int


def jitter(image, dx: int, dy: int, bound: int | None = None, wrap: bool = True):
    """Translate by ``dx`` columns and ``dy`` rows."""
    if bound is not None and (abs(dx) > bound or abs(dy) > bound):
        raise ContractError(f"jitter offset ({dx}, {dy}) exceeds bound {bound}")
    if wrap:
        return torch.roll(image, shifts=(dy, dx), dims=(-2, -1))
    out = torch.zeros_like(image)
    H, W = image.shape[-2:]
    src_r = slice(max(-dy, 0), H - max(dy, 0))
    dst_r = slice(max(dy, 0), H - max(-dy, 0))
    src_c = slice(max(-dx, 0), W - max(dx, 0))
    dst_c = slice(max(dx, 0), W - max(-dx, 0))
    out[..., dst_r, dst_c] = image[..., src_r, src_c]
    return out


def color_shift(image, mu, sigma):
    """Per-channel affine map ``sigma[c] * x_c + mu[c]``; channel axis is -3."""
    mu = torch.as_tensor(mu, dtype=image.dtype)
    sigma = torch.as_tensor(sigma, dtype=image.dtype)
    channels = image.shape[-3]
    if mu.shape[-1] != channels or sigma.shape[-1] != channels:
        raise ContractError(f"mu/sigma need {channels} entries")
    if (sigma <= 0).any():
        raise ContractError("sigma must be positive")
    return sigma[..., :, None, None] * image + mu[..., :, None, None]


def gaussian_noise(image, std: float, seed: int | torch.Generator):
    """Add per-pixel N(0, std^2) noise; std == 0 returns the input unchanged."""
    if std < 0:
        raise ContractError("std must be >= 0")
    if std == 0:
        return image
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    noise = torch.randn(image.shape, generator=gen, dtype=image.dtype)
    return image + std * noise


def stream_seed(seed: int, *path: int) -> int:
    """64-bit seed for the sub-stream addressed by ``path``."""
    seq = np.random.SeedSequence([int(seed), *map(int, path)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def draw_parameters(spec: AugmentationSpec, step: int, k: int, channels: int = 3,
                    noise_std: float | None = None) -> AugmentationDraw:
    gen = torch.Generator().manual_seed(stream_seed(spec.seed, step, k))
    b = spec.jitter_bound
    dx, dy = (torch.randint(-b, b + 1, (2,), generator=gen).tolist() if b else (0, 0))
    mu = (torch.rand(channels, generator=gen, dtype=torch.float64) * 2 - 1) * spec.cs_mean_scale
    log_sigma = (torch.rand(channels, generator=gen, dtype=torch.float64) * 2 - 1) * spec.cs_std_scale
    noise_seed = int(torch.randint(0, 2**62, (1,), generator=gen))
    std = spec.gs_std if noise_std is None else noise_std
    return AugmentationDraw(dx, dy, mu, log_sigma.exp(), std, noise_seed)


def apply_draw(image, draw: AugmentationDraw, bound: int | None = None, wrap: bool = True):
    out = jitter(image, draw.dx, draw.dy, bound, wrap)
    out = color_shift(out, draw.mu, draw.sigma)
    return gaussian_noise(out, draw.noise_std, draw.noise_seed)


def sample_ensemble(image, spec: AugmentationSpec, step: int,
                    schedule: ScheduleSpec | None = None):
    """Stack of ``ensemble_size`` augmented copies of a (C, H, W) image.

    The noise std comes from ``schedule`` at this step when given, otherwise
    from ``spec.gs_std``. Gradients flow back to ``image``.
    """
    if schedule is not None:
        if step >= schedule.total_steps:
            raise ContractError(f"step {step} beyond schedule of {schedule.total_steps}")
        std = schedule.gs_std_at(step)
    else:
        std = spec.gs_std
    channels = image.shape[-3]
    members = []
    for k in range(spec.ensemble_size):
        draw = draw_parameters(spec, step, k, channels, std)
        members.append(apply_draw(image, draw, spec.jitter_bound, spec.wrap))
    return torch.stack(members)
