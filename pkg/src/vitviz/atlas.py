"""Most-activating corpus images per feature, activation maps, and triptych figures."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import CorpusIndex, ResizeSpec, load_image
from .errors import ContractError, DataError, StoreIntegrityError
from .models import FeatureLocator, PatchActivationGrid

log = logging.getLogger(__name__)

STORE_SCHEMA = "vitviz.atlas/1"
RECORDS = "records.jsonl"
INDEX = "index.json"


@dataclass
class ActivationRecord:
    image_id: str
    locator: FeatureLocator
    score: float  # exact (fsum) sum of grid entries, CLS excluded
    grid: list  # rows x cols nested lists
    max_activation: float
    cls: Optional[float] = None

    @classmethod
    def from_grid(cls, image_id, locator, values, cls_value=None) -> "ActivationRecord":
        grid = values.detach().cpu().double().tolist()
        flat = [v for row in grid for v in row]
        return cls(image_id, locator, math.fsum(flat), grid, max(flat),
                   None if cls_value is None else float(cls_value))

    def grid_tensor(self):
        return torch.tensor(self.grid, dtype=torch.float64)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "locator": self.locator.key, "score": self.score,
                "max": self.max_activation, "cls": self.cls, "grid": self.grid}

    @classmethod
    def from_dict(cls, d) -> "ActivationRecord":
        return cls(d["image_id"], FeatureLocator.parse(d["locator"]), d["score"], d["grid"],
                   d["max"], d.get("cls"))


@dataclass
class ScanStats:
    forwards: int = 0
    new_records: int = 0
    skipped: list = field(default_factory=list)


class ActivationStore:
    """Append-only JSONL record log plus an index sidecar that pins its hash.

    Opening a store whose log does not match the sidecar fails closed.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.records: dict = {}  # (locator key, image id) -> ActivationRecord
        self.corpus_digest = None
        self.skipped: dict = {}
        self._log_hash = hashlib.sha256()
        self._load()

    @property
    def log_path(self):
        return self.root / RECORDS

    @property
    def index_path(self):
        return self.root / INDEX

    def _load(self):
        if not self.index_path.exists():
            if self.log_path.exists():
                raise StoreIntegrityError(f"{self.root}: record log without index")
            return
        index = json.loads(self.index_path.read_text())
        if index.get("schema") != STORE_SCHEMA:
            raise StoreIntegrityError(f"{self.root}: unknown store schema {index.get('schema')!r}")
        raw = self.log_path.read_bytes() if self.log_path.exists() else b""
        self._log_hash.update(raw)
        if self._log_hash.hexdigest() != index["log_sha256"]:
            raise StoreIntegrityError(f"{self.root}: record log hash does not match index")
        lines = raw.decode().splitlines()
        if len(lines) != index["n_records"]:
            raise StoreIntegrityError(f"{self.root}: record count mismatch")
        for line in lines:
            rec = ActivationRecord.from_dict(json.loads(line))
            self.records[(rec.locator.key, rec.image_id)] = rec
        self.corpus_digest = index["corpus_digest"]
        self.skipped = dict(index.get("skipped", {}))

    def bind(self, corpus_digest: str):
        if self.corpus_digest is not None and self.corpus_digest != corpus_digest:
            raise StoreIntegrityError(
                f"{self.root}: store was built for corpus {self.corpus_digest[:12]}, "
                f"not {corpus_digest[:12]}")
        self.corpus_digest = corpus_digest

    def has(self, locator: FeatureLocator, image_id: str) -> bool:
        return (locator.key, image_id) in self.records

    def append(self, records):
        self.root.mkdir(parents=True, exist_ok=True)
        payload = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records).encode()
        with open(self.log_path, "ab") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        self._log_hash.update(payload)
        for r in records:
            self.records[(r.locator.key, r.image_id)] = r
        self._write_index()

    def mark_skipped(self, image_id, reason):
        self.skipped[image_id] = reason
        self._write_index()

    def _write_index(self):
        self.root.mkdir(parents=True, exist_ok=True)
        index = {
            "schema": STORE_SCHEMA,
            "corpus_digest": self.corpus_digest,
            "n_records": len(self.records),
            "log_sha256": self._log_hash.hexdigest(),
            "locators": sorted({k for k, _ in self.records}),
            "skipped": dict(sorted(self.skipped.items())),
        }
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
        os.replace(tmp, self.index_path)

    def for_locator(self, locator: FeatureLocator) -> list:
        return [r for (k, _), r in self.records.items() if k == locator.key]

    def state_digest(self) -> str:
        return self._log_hash.hexdigest()


def scan_corpus(handle, corpus: CorpusIndex, locators, store, batch_size: int = 16,
                resize_mode: str = "resize_crop", images=None):
    """Score every (image, locator) pair not already in ``store``.

    ``images`` optionally maps image id -> preloaded (3, S, S) tensor (skips disk).
    Returns (store, ScanStats); ``stats.forwards`` counts model forward calls.
    """
    store = store if isinstance(store, ActivationStore) else ActivationStore(store)
    store.bind(corpus.digest)
    locators = [loc.validate(handle.spec) for loc in locators]
    pairs = sorted({(loc.layer, loc.site) for loc in locators})
    stats = ScanStats()
    resize = ResizeSpec(handle.image_size, resize_mode)
    rows, cols = handle.spec.grid_dims

    pending = [e for e in corpus
               if e.image_id not in store.skipped
               and not all(store.has(loc, e.image_id) for loc in locators)]
    for start in range(0, len(pending), batch_size):
        chunk = pending[start:start + batch_size]
        ids, tensors = [], []
        for e in chunk:
            try:
                img = images[e.image_id] if images is not None else load_image(corpus.resolve(e), resize)[0]
            except DataError as exc:
                store.mark_skipped(e.image_id, str(exc))
                stats.skipped.append((e.image_id, str(exc)))
                continue
            ids.append(e.image_id)
            tensors.append(img)
        if not ids:
            continue
        with torch.no_grad():
            outs = handle.readouts(torch.stack(tensors), pairs)
        stats.forwards += 1
        new = []
        for loc in locators:
            ro = outs[(loc.layer, loc.site)]
            patch = ro.patch_tokens()[..., loc.channel].reshape(-1, rows, cols)
            cls = ro.cls_tokens()
            for b, image_id in enumerate(ids):
                if store.has(loc, image_id):
                    continue
                cls_v = None if cls is None else cls[b, loc.channel]
                new.append(ActivationRecord.from_grid(image_id, loc, patch[b], cls_v))
        store.append(new)
        stats.new_records += len(new)
    return store, stats


@dataclass
class TopK:
    records: list
    truncated: bool


def top_k(store: ActivationStore, locator: FeatureLocator, k: int, by: str = "sum") -> TopK:
    """Descending by score; ties broken by ascending image id."""
    recs = store.for_locator(locator)
    if not recs:
        raise ContractError(f"store holds no records for {locator.key}")
    key = (lambda r: (-r.score, r.image_id)) if by == "sum" else (lambda r: (-r.max_activation, r.image_id))
    ranked = sorted(recs, key=key)
    return TopK(ranked[:k], k > len(ranked))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class Overlay:
    heat: np.ndarray  # (H, W) in [0, 1]
    rgb: np.ndarray  # (H, W, 3) uint8


def _heat_colors(heat):
    """Black -> red -> yellow -> white ramp, deterministic and dependency-free."""
    r = np.clip(heat * 3, 0, 1)
    g = np.clip(heat * 3 - 1, 0, 1)
    b = np.clip(heat * 3 - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


def activation_overlay(image, grid, alpha: float = 0.6) -> Overlay:
    """Min-max normalize the grid, nearest-upsample to pixels, blend over the image.

    A constant grid renders as uniform 0.5 intensity.
    """
    if isinstance(grid, PatchActivationGrid):
        grid = grid.values
    values = torch.as_tensor(grid, dtype=torch.float64).detach().cpu().numpy()
    rows, cols = values.shape
    H, W = image.shape[-2:]
    if H % rows or W % cols:
        raise ContractError(f"grid {rows}x{cols} does not tile a {H}x{W} image")
    lo, hi = values.min(), values.max()
    norm = np.full_like(values, 0.5) if hi == lo else (values - lo) / (hi - lo)
    heat = np.repeat(np.repeat(norm, H // rows, axis=0), W // cols, axis=1)
    src = image.detach().double().clamp(0, 1).cpu().numpy().transpose(1, 2, 0)
    rgb = (1 - alpha) * src + alpha * _heat_colors(heat)
    return Overlay(heat, (rgb * 255).round().clip(0, 255).astype(np.uint8))


def _panel(arr: np.ndarray, size: int) -> Image.Image:
    img = Image.fromarray(arr)
    return img if img.size == (size, size) else img.resize((size, size), Image.NEAREST)


def render_triptych(vis, top: Optional[ActivationRecord], source_image, path,
                    panel_size: int | None = None, gutter: int = 8) -> Path:
    """Optimized image | most-activating image | its activation overlay.

    Without a top record, renders the optimized image beside a labeled placeholder.
    """
    from .reporting import to_uint8

    if top is not None and top.locator != vis.locator:
        raise ContractError(f"locator mismatch: {vis.locator.key} vs {top.locator.key}")
    size = panel_size or vis.image.shape[-1]
    panels = [_panel(to_uint8(vis.image), size)]
    if top is None:
        ph = Image.new("RGB", (size, size), (128, 128, 128))
        ImageDraw.Draw(ph).text((4, 4), "no top record", fill=(255, 255, 255))
        panels.append(ph)
    else:
        panels.append(_panel(to_uint8(source_image), size))
        panels.append(_panel(activation_overlay(source_image, top.grid_tensor()).rgb, size))
    width = len(panels) * size + (len(panels) - 1) * gutter
    canvas = Image.new("RGB", (width, size), (255, 255, 255))
    for i, p in enumerate(panels):
        canvas.paste(p, (i * (size + gutter), 0))
    path = Path(path)
    canvas.save(path, format="PNG")
    return path


def triptych_width(panel_size: int, gutter: int = 8, panels: int = 3) -> int:
    return panels * panel_size + (panels - 1) * gutter
