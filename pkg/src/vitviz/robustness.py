"""Foreground/background masking and low-pass filtering accuracy studies."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import torch

from .ablation import topk_hits
from .data import BoxAnnotation
from .errors import ContractError, EmptyEvaluationSetError, UnannotatedImageError, VitVizError
from .models.adapter import IMAGENET_MEAN

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = tuple(round(0.1 * i, 1) for i in range(1, 11))


def box_union_mask(ann: BoxAnnotation, height: int, width: int):
    """Boolean (H, W) mask; a pixel is inside a box when its center is in [min, max)."""
    cy = torch.arange(height, dtype=torch.float64)[:, None] + 0.5
    cx = torch.arange(width, dtype=torch.float64)[None, :] + 0.5
    mask = torch.zeros(height, width, dtype=torch.bool)
    for x0, y0, x1, y1 in ann.boxes:
        mask |= (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    return mask


def _fill_value(fill, image):
    if fill == "mean":
        fill = IMAGENET_MEAN
    elif fill == "black":
        fill = (0.0,) * image.shape[0]
    return torch.as_tensor(fill, dtype=image.dtype).reshape(-1, 1, 1)


def _masked(image, region, fill):
    return torch.where(region, _fill_value(fill, image).expand_as(image), image)


def mask_foreground(image, ann: BoxAnnotation, fill="mean"):
    """Fill the union of the retained boxes; everything outside is untouched."""
    if not ann.boxes:
        raise UnannotatedImageError(f"{ann.image_id}: no retained boxes")
    return _masked(image, box_union_mask(ann, *image.shape[-2:]), fill)


def mask_background(image, ann: BoxAnnotation, fill="mean"):
    """Fill everything outside the union of the retained boxes."""
    if not ann.boxes:
        raise UnannotatedImageError(f"{ann.image_id}: no retained boxes")
    return _masked(image, ~box_union_mask(ann, *image.shape[-2:]), fill)


@dataclass
class MaskingReport:
    model_id: str
    full_top1: float
    full_top5: float
    foreground_top1: float  # background masked out
    foreground_top5: float
    background_top1: float  # foreground masked out
    background_top5: float
    n: int
    fill: str = "mean"

    def normalized(self, which: str, k: int = 5) -> float:
        raw = getattr(self, f"{which}_top{k}")
        full = getattr(self, f"full_top{k}")
        return 100.0 * raw / full if full else float("nan")

    def to_dict(self):
        d = asdict(self)
        for k in (1, 5):
            for which in ("full", "foreground", "background"):
                d[f"normalized_{which}_top{k}"] = self.normalized(which, k)
        return d


def _flush(handle, batch, labels, hits):
    if not labels:
        return
    y = torch.tensor(labels)
    with torch.no_grad():
        for name, images in batch.items():
            h = topk_hits(handle.logits(torch.stack(images)), y)
            hits[name][0] += int(h[1].sum())
            hits[name][1] += int(h[5].sum())


def evaluate_masking(handle, eval_set, fill="mean", batch_size: int = 32) -> MaskingReport:
    hits = {name: [0, 0] for name in ("full", "foreground", "background")}
    batch = {name: [] for name in hits}
    labels = []
    n = 0
    for _, image, label, ann in eval_set.annotated(handle.image_size):
        batch["full"].append(image)
        batch["foreground"].append(mask_background(image, ann, fill))
        batch["background"].append(mask_foreground(image, ann, fill))
        labels.append(label)
        n += 1
        if len(labels) == batch_size:
            _flush(handle, batch, labels, hits)
            batch = {name: [] for name in hits}
            labels = []
    _flush(handle, batch, labels, hits)
    if n == 0:
        raise EmptyEvaluationSetError("no annotated images")
    pct = {name: (100.0 * h1 / n, 100.0 * h5 / n) for name, (h1, h5) in hits.items()}
    return MaskingReport(handle.model_id, *pct["full"], *pct["foreground"], *pct["background"],
                         n, fill if isinstance(fill, str) else "custom")


def run_masking_study(handles, eval_set, fill="mean", batch_size: int = 32):
    """model id -> MaskingReport; a model that fails to evaluate is skipped with a diagnostic."""
    reports, failures = {}, {}
    for handle in handles:
        try:
            reports[handle.model_id] = evaluate_masking(handle, eval_set, fill, batch_size)
        except UnannotatedImageError:
            raise
        except (VitVizError, RuntimeError) as exc:
            log.error("masking study: %s skipped: %s", handle.model_id, exc)
            failures[handle.model_id] = str(exc)
    return reports, failures


def low_pass(image, cutoff: float, clamp: bool = True, input_range=(0.0, 1.0)):
    """Ideal radial low-pass filter on the last two axes.

    Coefficients with radial frequency above ``cutoff`` x Nyquist are zeroed;
    ``cutoff >= 1`` is the full passband and returns the image unchanged.
    """
    if not cutoff > 0:
        raise ContractError("cutoff must be > 0")
    if cutoff >= 1.0:
        return image.clone()
    H, W = image.shape[-2:]
    fy = torch.fft.fftfreq(H, dtype=torch.float64)[:, None]
    fx = torch.fft.fftfreq(W, dtype=torch.float64)[None, :]
    keep = torch.sqrt(fy**2 + fx**2) / 0.5 <= cutoff
    spectrum = torch.fft.fft2(image.double())
    out = torch.fft.ifft2(spectrum * keep).real.to(image.dtype)
    if clamp:
        out = out.clamp(*input_range)
    return out


@dataclass
class FrequencyCurve:
    model_id: str
    cutoffs: list
    top1_accuracy: list
    n: int

    @property
    def unfiltered(self) -> float:
        return self.top1_accuracy[self.cutoffs.index(1.0)]

    def retained(self) -> list:
        """Top-1 at each cutoff as a fraction of unfiltered top-1."""
        base = self.unfiltered
        return [a / base if base else float("nan") for a in self.top1_accuracy]

    def to_dict(self):
        return {**asdict(self), "retained": self.retained()}


def evaluate_frequency(handle, eval_set, cutoffs=DEFAULT_CUTOFFS, batch_size: int = 32) -> FrequencyCurve:
    cutoffs = [float(c) for c in cutoffs]
    if cutoffs != sorted(cutoffs) or 1.0 not in cutoffs:
        raise ContractError("cutoffs must be ascending and include 1.0")
    hits = [0] * len(cutoffs)
    n = 0
    for _, images, labels in eval_set.batches(batch_size, handle.image_size):
        with torch.no_grad():
            for i, c in enumerate(cutoffs):
                hits[i] += int(topk_hits(handle.logits(low_pass(images, c, input_range=handle.input_range)),
                                         labels, ks=(1,))[1].sum())
        n += len(labels)
    if n == 0:
        raise EmptyEvaluationSetError("empty evaluation set")
    return FrequencyCurve(handle.model_id, cutoffs, [100.0 * h / n for h in hits], n)


def run_frequency_study(handles, eval_set, cutoffs=DEFAULT_CUTOFFS, batch_size: int = 32):
    curves, failures = {}, {}
    for handle in handles:
        try:
            curves[handle.model_id] = evaluate_frequency(handle, eval_set, cutoffs, batch_size)
        except ContractError:
            raise
        except (VitVizError, RuntimeError) as exc:
            log.error("frequency study: %s skipped: %s", handle.model_id, exc)
            failures[handle.model_id] = str(exc)
    return curves, failures


def plot_frequency_curves(curves: dict, path):
    from .reporting import plot_curves

    return plot_curves({m: (c.cutoffs, c.top1_accuracy) for m, c in curves.items()}, path,
                       "cutoff (fraction of Nyquist)", "top-1 accuracy (%)", "low-pass filtering")
