"""Token-mixing probes: CLS isolation, per-patch classification, spatial drop curves."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augment import stream_seed
from .errors import EmptyEvaluationSetError, VitVizError
from .models import AttentionSurgeryPlan, FeatureLocator, require_vit

log = logging.getLogger(__name__)


def topk_hits(logits, labels, ks=(1, 5)) -> dict:
    """k -> bool tensor; equal logits rank the lower class index first."""
    order = torch.argsort(logits, dim=-1, descending=True, stable=True)
    labels = labels.to(order.device).reshape(-1, 1)
    return {k: (order[:, :k] == labels).any(dim=1) for k in ks}


@dataclass
class AccuracyPair:
    top1: float
    top5: float
    n: int

    def to_dict(self):
        return asdict(self)


def _accumulate(eval_set, handle, forward, batch_size):
    hits1 = hits5 = n = 0
    for _, images, labels in eval_set.batches(batch_size, handle.image_size):
        with torch.no_grad():
            h = topk_hits(forward(images), labels)
        hits1 += int(h[1].sum())
        hits5 += int(h[5].sum())
        n += len(labels)
    if n == 0:
        raise EmptyEvaluationSetError("empty evaluation set")
    return AccuracyPair(100.0 * hits1 / n, 100.0 * hits5 / n, n)


def evaluate_accuracy(handle, eval_set, batch_size: int = 64, forward=None) -> AccuracyPair:
    return _accumulate(eval_set, handle, forward or handle.logits, batch_size)


class SurgeryVerificationError(VitVizError):
    pass


def verify_cls_isolation(handle, plan: AttentionSurgeryPlan, seed: int = 0):
    """Perturb the CLS input of every isolated block and require identical patch outputs."""
    vit = require_vit(handle)
    model = vit.module
    gen = torch.Generator().manual_seed(seed)
    T, d = vit.spec.num_patches + 1, vit.spec.hidden_dim
    bias = vit.cls_isolation_bias()
    with torch.no_grad():
        for layer in sorted(plan.cls_isolated_layers):
            tokens = torch.randn(2, T, d, generator=gen, dtype=vit.dtype)
            perturbed = tokens.clone()
            perturbed[:, 0] += 10 * torch.randn(2, d, generator=gen, dtype=vit.dtype)
            a = model.blocks[layer](tokens, bias)
            b = model.blocks[layer](perturbed, bias)
            if not torch.equal(a[:, 1:], b[:, 1:]):
                raise SurgeryVerificationError(f"patch outputs depend on CLS in isolated layer {layer}")


@dataclass
class ClsIsolationReport:
    natural: AccuracyPair
    isolated: AccuracyPair
    isolated_layers: list
    injection_layer: int

    def to_dict(self):
        return {"natural": self.natural.to_dict(), "isolated": self.isolated.to_dict(),
                "isolated_layers": self.isolated_layers, "injection_layer": self.injection_layer}


def run_cls_isolation(handle, eval_set, batch_size: int = 64) -> ClsIsolationReport:
    """Accuracy with CLS cut from all blocks but the last, plus natural accuracy."""
    vit = require_vit(handle)
    if len(eval_set) == 0:
        raise EmptyEvaluationSetError("empty evaluation set")
    plan = AttentionSurgeryPlan.isolate_until_last(vit.spec.num_layers).validate(vit.spec)
    verify_cls_isolation(vit, plan)
    natural = evaluate_accuracy(vit, eval_set, batch_size)
    isolated = evaluate_accuracy(vit, eval_set, batch_size,
                                 forward=lambda x: vit.forward_with_surgery(x, plan))
    return ClsIsolationReport(natural, isolated, sorted(plan.cls_isolated_layers),
                              plan.cls_constant_injection_layer)


@dataclass
class PatchHeadReport:
    per_patch_top1: np.ndarray  # (rows, cols) percentages
    per_patch_top5: np.ndarray
    natural_top1: float
    natural_top5: float
    n: int

    @property
    def average_top1(self):
        return float(self.per_patch_top1.mean())

    @property
    def average_top5(self):
        return float(self.per_patch_top5.mean())

    @property
    def max_top1(self):
        return float(self.per_patch_top1.max())

    @property
    def max_top5(self):
        return float(self.per_patch_top5.max())

    def to_dict(self):
        return {
            "per_patch_top1": self.per_patch_top1.tolist(),
            "per_patch_top5": self.per_patch_top5.tolist(),
            "average_top1": self.average_top1, "average_top5": self.average_top5,
            "max_top1": self.max_top1, "max_top5": self.max_top5,
            "natural_top1": self.natural_top1, "natural_top5": self.natural_top5, "n": self.n,
        }


def run_patch_head_sweep(handle, eval_set, batch_size: int = 32) -> PatchHeadReport:
    """Apply the CLS-trained head to every final-layer patch token, one at a time."""
    vit = require_vit(handle)
    rows, cols = vit.spec.grid_dims
    offset = int(vit.spec.has_cls_token)
    hits1 = torch.zeros(rows * cols, dtype=torch.long)
    hits5 = torch.zeros(rows * cols, dtype=torch.long)
    nat1 = nat5 = n = 0
    for _, images, labels in eval_set.batches(batch_size, vit.image_size):
        with torch.no_grad():
            final = vit.final_tokens(images)
            logits = vit.classify_tokens(final)  # (B, T, classes)
        nat = topk_hits(logits[:, 0] if offset else vit.module.head_features(final.mean(1)), labels)
        nat1 += int(nat[1].sum())
        nat5 += int(nat[5].sum())
        for p in range(rows * cols):
            h = topk_hits(logits[:, offset + p], labels)
            hits1[p] += int(h[1].sum())
            hits5[p] += int(h[5].sum())
        n += len(labels)
    if n == 0:
        raise EmptyEvaluationSetError("empty evaluation set")
    grid1 = (100.0 * hits1.double() / n).reshape(rows, cols).numpy()
    grid5 = (100.0 * hits5.double() / n).reshape(rows, cols).numpy()
    return PatchHeadReport(grid1, grid5, 100.0 * nat1 / n, 100.0 * nat5 / n, n)


def heatmap_figure(report: PatchHeadReport, metric: str = "top1"):
    """(figure, image artist) for the per-patch accuracy grid, extremes annotated."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = report.per_patch_top1 if metric == "top1" else report.per_patch_top5
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label=f"{metric} accuracy (%)")
    lo_idx = np.unravel_index(np.argmin(grid), grid.shape)
    hi_idx = np.unravel_index(np.argmax(grid), grid.shape)
    ax.annotate(f"{grid[hi_idx]:.2f}", (hi_idx[1], hi_idx[0]), color="white", ha="center",
                va="center", fontsize=7, weight="bold")
    ax.annotate(f"{grid[lo_idx]:.2f}", (lo_idx[1], lo_idx[0]), color="red", ha="center",
                va="center", fontsize=7)
    ax.set_title(f"per-patch {metric}: min {grid.min():.2f}  max {grid.max():.2f}", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    return fig, im


def render_accuracy_heatmap(report: PatchHeadReport, path, metric: str = "top1"):
    import matplotlib.pyplot as plt

    from .reporting import save_figure

    fig, _ = heatmap_figure(report, metric)
    save_figure(fig, path)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Spatial drop curves
# ---------------------------------------------------------------------------


@dataclass
class SpatialDropCurve:
    drop_fractions: list
    count_ratio: list
    mass_ratio: list
    layer: int
    linearity_r2: float  # of count_ratio vs drop fraction
    mass_r2: float
    locator: FeatureLocator
    n_images: int
    skipped: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["locator"] = self.locator.to_dict()
        return d


def linear_r2(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    ss_res = float(((ys - (slope * xs + intercept)) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def black_out_patches(image, patch_mask, patch_size: int):
    """Zero (black) every patch where ``patch_mask`` (rows, cols) is True."""
    pixel = patch_mask.repeat_interleave(patch_size, 0).repeat_interleave(patch_size, 1)
    return image.masked_fill(pixel.to(image.device), 0.0)


def run_spatial_drop(handle, locator: FeatureLocator, images, drop_fractions=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                     threshold: float = 0.5, trials: int = 5, seed: int = 0) -> SpatialDropCurve:
    """Count/mass of still-active patches as a growing share of active patches is blacked out.

    Ratios are relative to the image with only its inactive patches blacked out.
    """
    vit = require_vit(handle)
    locator = locator.validate(vit.spec)
    p = vit.spec.patch_size
    fractions = [float(x) for x in drop_fractions]
    count_acc = np.zeros(len(fractions))
    mass_acc = np.zeros(len(fractions))
    used, skipped = 0, []

    def grid_of(batch):
        with torch.no_grad():
            return vit.read_feature(batch, locator).values

    for idx, image in enumerate(images):
        active = grid_of(image.unsqueeze(0))[0] > threshold
        if not active.any():
            skipped.append(idx)
            log.info("image %d has no active patches for %s; skipped", idx, locator.key)
            continue
        base = black_out_patches(image, ~active, p)
        g0 = grid_of(base.unsqueeze(0))[0]
        a0 = g0 > threshold
        c0, m0 = int(a0.sum()), float(g0[a0].sum())
        if c0 == 0:
            skipped.append(idx)
            log.info("image %d loses all active patches once inactive ones are blacked out", idx)
            continue
        active_idx = active.flatten().nonzero().flatten()
        variants, slots = [], []
        for fi, x in enumerate(fractions):
            n_drop = math.floor(x * len(active_idx))
            for t in range(trials):
                gen = torch.Generator().manual_seed(stream_seed(seed, idx, fi, t))
                chosen = active_idx[torch.randperm(len(active_idx), generator=gen)[:n_drop]]
                mask = torch.zeros(active.numel(), dtype=torch.bool)
                mask[chosen] = True
                variants.append(black_out_patches(base, mask.reshape(active.shape), p))
                slots.append(fi)
        grids = grid_of(torch.stack(variants))
        counts = np.zeros(len(fractions))
        masses = np.zeros(len(fractions))
        for g, fi in zip(grids, slots):
            a = g > threshold
            counts[fi] += int(a.sum()) / c0
            masses[fi] += float(g[a].sum()) / m0
        count_acc += counts / trials
        mass_acc += masses / trials
        used += 1
    if used == 0:
        raise EmptyEvaluationSetError(f"no image has active patches for {locator.key}")
    count = (count_acc / used).tolist()
    mass = (mass_acc / used).tolist()
    return SpatialDropCurve(fractions, count, mass, locator.layer, linear_r2(fractions, count),
                            linear_r2(fractions, mass), locator, used, skipped)


def layer_linearity(curves) -> dict:
    """layer -> mean count-ratio R^2 over that layer's curves."""
    by_layer = {}
    for c in curves:
        by_layer.setdefault(c.layer, []).append(c.linearity_r2)
    return {l: float(np.mean(v)) for l, v in sorted(by_layer.items())}
