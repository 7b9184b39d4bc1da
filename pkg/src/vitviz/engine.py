"""Activation-maximization loop over augmentation ensembles."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch

from .augment import AugmentationSpec, ScheduleSpec, sample_ensemble, stream_seed
from .errors import ContractError, OptimizationError, VitVizError
from .models import SITES, FeatureLocator
from .objective import ObjectiveConfig, ObjectiveValue, objective_terms

log = logging.getLogger(__name__)

INITS = ("uniform-noise", "gaussian-noise", "provided-image")
_INIT_STREAM = 0x1A17


@dataclass(frozen=True)
class OptimizationConfig:
    locator: FeatureLocator
    steps: int = 400
    ensemble_size: int = 8
    lambda_tv: float = 5e-5
    lr_start: float = 0.1
    lr_end: float = 0.0
    betas: tuple = (0.5, 0.99)
    gs_std_start: float = 0.5
    gs_std_end: float = 0.0
    jitter_bound: int = 32
    cs_mean_scale: float = 1.0
    cs_std_scale: float = 1.0
    jitter_wrap: bool = True
    include_cls_in_sum: bool = False
    seed: int = 0
    init: str = "uniform-noise"

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.init not in INITS:
            raise ContractError(f"init must be one of {INITS}")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def lr_schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.gs_std_start, self.gs_std_end, self.lr_start, self.lr_end, self.steps)

    @property
    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(self.jitter_bound, self.cs_mean_scale, self.cs_std_scale,
                                self.gs_std_start, self.ensemble_size, self.seed, self.jitter_wrap)

    @property
    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.lambda_tv, self.include_cls_in_sum)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizationConfig":
        d = dict(d)
        d["locator"] = FeatureLocator(**d["locator"])
        return cls(**d)

    def digest(self, model_id: str) -> str:
        payload = json.dumps({"model": model_id, "config": self.to_dict()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class VisualizationResult:
    image: torch.Tensor
    trace: list
    config_digest: str
    wall_time: float
    locator: FeatureLocator
    model_id: str
    seed: int

    @property
    def stem(self) -> str:
        loc = self.locator
        return f"{self.model_id}_L{loc.layer}_C{loc.channel}_{loc.site}_s{self.seed}"

    def trace_record(self) -> dict:
        """Sidecar content; excludes wall time so the file is reproducible."""
        return {
            "schema": "vitviz.trace/1",
            "model_id": self.model_id,
            "locator": self.locator.to_dict(),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "trace": [v.to_dict() for v in self.trace],
        }


@dataclass
class FailedRun:
    locator: FeatureLocator
    error: str
    exception: Optional[BaseException] = field(default=None, repr=False)


def initial_image(handle, cfg: OptimizationConfig, init_image=None):
    lo, hi = handle.input_range
    shape = (3, handle.image_size, handle.image_size)
    gen = torch.Generator().manual_seed(stream_seed(cfg.seed, _INIT_STREAM))
    if cfg.init == "provided-image":
        if init_image is None:
            raise ContractError("init='provided-image' needs init_image")
        return init_image.detach().to(handle.dtype).clone()
    if cfg.init == "gaussian-noise":
        x = (lo + hi) / 2 + (hi - lo) / 8 * torch.randn(shape, generator=gen, dtype=torch.float64)
        return x.clamp(lo, hi).to(handle.dtype)
    return (lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)).to(handle.dtype)


def optimize_feature(handle, cfg: OptimizationConfig, init_image=None) -> VisualizationResult:
    """Gradient ascent on sum_k [main(a_k(x)) - lambda * TV(a_k(x))] with Adam."""
    locator = cfg.locator.validate(handle.spec)
    schedule, aug, obj = cfg.lr_schedule, cfg.augmentation, cfg.objective
    start = time.perf_counter()

    x = initial_image(handle, cfg, init_image).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.lr_start, betas=cfg.betas)
    trace = []
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = schedule.lr_at(step)
        batch = sample_ensemble(x, aug, step, schedule)
        main, tv, total = objective_terms(handle, batch, locator, obj)
        objective = total.sum()
        opt.zero_grad()
        (-objective).backward()
        if not torch.isfinite(x.grad).all() or not torch.isfinite(objective):
            raise OptimizationError(f"non-finite gradient at step {step} for {locator.key}", step)
        trace.append(ObjectiveValue(float(main.detach().sum()), float(tv.detach().sum()),
                                    float(objective.detach())))
        opt.step()

    lo, hi = handle.input_range
    image = x.detach().clamp(lo, hi)
    return VisualizationResult(image, trace, cfg.digest(handle.model_id),
                               time.perf_counter() - start, locator, handle.model_id, cfg.seed)


def derive_seed(seed: int, locator: FeatureLocator) -> int:
    """Per-locator seed, independent of the locator's position in a batch."""
    return stream_seed(seed, locator.layer, locator.channel, SITES.index(locator.site)) % 2**31


def batch_visualize(handle, locators, template: OptimizationConfig, workers: int = 1):
    """One independent run per locator; failures come back as :class:`FailedRun`."""
    configs = [replace(template, locator=loc, seed=derive_seed(template.seed, loc)) for loc in locators]

    def run(cfg):
        try:
            return optimize_feature(handle, cfg)
        except (VitVizError, IndexError, ValueError, RuntimeError) as exc:
            log.warning("visualization failed for %s: %s", cfg.locator.key, exc)
            return FailedRun(cfg.locator, str(exc), exc)

    if workers <= 1:
        return [run(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, configs))


def smoothed(values, window: int = 20):
    """Exponential moving average with span ``window``."""
    alpha = 2.0 / (window + 1)
    out, acc = [], None
    for v in values:
        acc = v if acc is None else alpha * v + (1 - alpha) * acc
        out.append(acc)
    return out


def save_visualization(result: VisualizationResult, directory, input_range=(0.0, 1.0)):
    """Write ``<stem>.png`` and ``<stem>.trace.json``; returns both paths."""
    from .reporting import save_png, write_json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    png = save_png(result.image, directory / f"{result.stem}.png", input_range)
    trace = write_json(directory / f"{result.stem}.trace.json", result.trace_record())
    return png, trace
