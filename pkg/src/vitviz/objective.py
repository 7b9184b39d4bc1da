"""Feature-visualization objective: patch-sum main loss and TV penalty.

Maximization form: ``total = main - lambda_tv * tv``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError
from .models import FeatureLocator, PatchActivationGrid


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_tv: float = 5e-5
    include_cls_in_sum: bool = False

    def __post_init__(self):
        if self.lambda_tv < 0:
            raise ContractError(f"lambda_tv must be >= 0, got {self.lambda_tv}")


@dataclass
class ObjectiveValue:
    """Scalars, or 0-dim tensors still attached to the graph when returned by
    :func:`evaluate_objective`."""

    main: float
    tv: float
    total: float

    def detached(self) -> "ObjectiveValue":
        return ObjectiveValue(float(self.main), float(self.tv), float(self.total))

    def to_dict(self):
        return {"main": float(self.main), "tv": float(self.tv), "total": float(self.total)}


def main_loss(grid, include_cls: bool = False, cls_value=None):
    """Sum of patch activations (over the last two axes, so batches sum per image)."""
    values = grid.values if isinstance(grid, PatchActivationGrid) else torch.as_tensor(grid)
    if isinstance(grid, PatchActivationGrid) and cls_value is None:
        cls_value = grid.cls
    if values.numel() == 0:
        raise ContractError("empty activation grid")
    total = values.sum(dim=(-2, -1))
    if include_cls:
        if cls_value is None:
            raise ContractError("include_cls requested but no CLS value available")
        total = total + cls_value
    return total


def total_variation(image):
    """Anisotropic L1 TV, averaged over channels and valid neighbor positions.

    Accepts (C, H, W) or (B, C, H, W); batched input gives one value per image.
    """
    if image.shape[-1] < 2 or image.shape[-2] < 2:
        raise ContractError("total variation needs at least 2 pixels per spatial axis")
    dv = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=(-3, -2, -1))
    dh = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(dim=(-3, -2, -1))
    return dv + dh


def objective_terms(handle, images, locator: FeatureLocator, cfg: ObjectiveConfig):
    """Differentiable (main, tv, total) tensors, one entry per image in the batch."""
    grid = handle.read_feature(images, locator)
    main = main_loss(grid, cfg.include_cls_in_sum)
    tv = total_variation(images)
    return main, tv, main - cfg.lambda_tv * tv


def evaluate_objective(handle, image, locator: FeatureLocator, cfg: ObjectiveConfig) -> ObjectiveValue:
    """Objective of a single image; ``total`` can be backpropagated to ``image``."""
    main, tv, total = objective_terms(handle, image, locator, cfg)
    return ObjectiveValue(main.sum(), tv.sum(), total.sum())
