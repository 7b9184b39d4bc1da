"""Corpus manifests, image loading, labeled/annotated evaluation sets."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusEntry:
    image_id: str
    path: str
    label: Optional[int] = None
    # Boxes in source-image pixels: (x_min, y_min, x_max, y_max, label)
    boxes: tuple = ()

    def to_dict(self) -> dict:
        d = {"id": self.image_id, "path": self.path, "label": self.label}
        if self.boxes:
            d["boxes"] = [list(b) for b in self.boxes]
        return d


@dataclass(frozen=True)
class CorpusIndex:
    entries: tuple
    split: str = "custom"
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DataError(f"duplicate image id {e.image_id!r} in corpus")
            seen.add(e.image_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.split.encode())
        for e in self.entries:
            h.update(json.dumps(e.to_dict(), sort_keys=True).encode() + b"\n")
        return h.hexdigest()

    def resolve(self, entry: CorpusEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    @classmethod
    def load(cls, manifest, split: str = "custom") -> "CorpusIndex":
        """Read a line-delimited JSON manifest: ``{"id", "path", "label"[, "boxes"]}``."""
        manifest = Path(manifest)
        if not manifest.exists():
            raise DataError(f"corpus manifest not found: {manifest}")
        entries = []
        for n, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(CorpusEntry(
                    str(rec["id"]), rec["path"], rec.get("label"),
                    tuple(tuple(b) for b in rec.get("boxes", ()))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{manifest}:{n}: malformed manifest line ({exc})") from exc
        return cls(tuple(entries), split, manifest.parent)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries))
        return path

    def subset(self, ids) -> "CorpusIndex":
        ids = set(ids)
        return CorpusIndex(tuple(e for e in self.entries if e.image_id in ids), self.split, self.root)

    def stratified_subset(self, n: int, seed: int = 0) -> "CorpusIndex":
        """About ``n`` entries, spread evenly over labels, deterministic in ``seed``."""
        by_label = defaultdict(list)
        for e in self.entries:
            by_label[e.label].append(e)
        rng = random.Random(seed)
        labels = sorted(by_label, key=lambda l: (l is None, l))
        for l in labels:
            rng.shuffle(by_label[l])
        chosen, depth = [], 0
        while len(chosen) < min(n, len(self.entries)):
            for l in labels:
                if depth < len(by_label[l]) and len(chosen) < n:
                    chosen.append(by_label[l][depth])
            depth += 1
        keep = {e.image_id for e in chosen}
        return CorpusIndex(tuple(e for e in self.entries if e.image_id in keep), self.split, self.root)


@dataclass(frozen=True)
class ResizeSpec:
    """``resize_crop``: shorter side to size/crop_fraction, then center crop.
    ``squash``: direct resize to size x size."""

    size: int
    mode: str = "resize_crop"
    crop_fraction: float = 0.875

    def geometry(self, width: int, height: int):
        """(resized_w, resized_h, left, top) of the crop window in resized pixels."""
        if self.mode == "squash":
            return self.size, self.size, 0, 0
        short = int(round(self.size / self.crop_fraction))
        if width <= height:
            rw, rh = short, int(round(height * short / width))
        else:
            rw, rh = int(round(width * short / height)), short
        left = int(round((rw - self.size) / 2))
        top = int(round((rh - self.size) / 2))
        return rw, rh, left, top

    def apply(self, img: Image.Image) -> Image.Image:
        rw, rh, left, top = self.geometry(*img.size)
        img = img.resize((rw, rh), Image.BILINEAR)
        return img.crop((left, top, left + self.size, top + self.size))

    def map_box(self, box, width: int, height: int):
        """Source-pixel box -> model-input box, clipped to the crop."""
        rw, rh, left, top = self.geometry(width, height)
        sx, sy = rw / width, rh / height
        x0, y0, x1, y1 = box[:4]
        out = (x0 * sx - left, y0 * sy - top, x1 * sx - left, y1 * sy - top)
        s = self.size
        return (min(max(out[0], 0), s), min(max(out[1], 0), s),
                min(max(out[2], 0), s), min(max(out[3], 0), s))


def pil_to_tensor(img: Image.Image):
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_image(path, resize: ResizeSpec):
    """Returns ((3, S, S) tensor in [0, 1], (source_width, source_height))."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            size = img.size
            return pil_to_tensor(resize.apply(img)), size
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Bounding boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxAnnotation:
    image_id: str
    boxes: tuple  # ((x_min, y_min, x_max, y_max), ...)
    labels: tuple

    def retained(self, true_label) -> "BoxAnnotation":
        keep = [(b, l) for b, l in zip(self.boxes, self.labels) if l == true_label]
        return BoxAnnotation(self.image_id, tuple(b for b, _ in keep), tuple(l for _, l in keep))

    def mapped(self, resize: ResizeSpec, width: int, height: int) -> "BoxAnnotation":
        return BoxAnnotation(self.image_id,
                             tuple(resize.map_box(b, width, height) for b in self.boxes),
                             self.labels)

    def to_dict(self):
        return {"image_id": self.image_id, "boxes": [list(b) for b in self.boxes],
                "labels": list(self.labels)}


def parse_imagenet_xml(path):
    """ImageNet (PASCAL VOC-style) box file -> (image_id, (w, h), BoxAnnotation[wnid labels])."""
    root = ET.parse(path).getroot()
    image_id = Path(root.findtext("filename") or Path(path).stem).stem
    size = root.find("size")
    width = int(size.findtext("width")) if size is not None else 0
    height = int(size.findtext("height")) if size is not None else 0
    boxes, labels = [], []
    for obj in root.iter("object"):
        bb = obj.find("bndbox")
        boxes.append(tuple(float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")))
        labels.append(obj.findtext("name"))
    return image_id, (width, height), BoxAnnotation(image_id, tuple(boxes), tuple(labels))


def annotate_corpus(corpus: CorpusIndex, xml_dir, wnids) -> CorpusIndex:
    """Attach true-class boxes from an ImageNet box directory; unboxed images dropped.

    ``wnids``: class index -> wnid (the sorted synset list for ImageNet-1k).
    """
    xml_dir = Path(xml_dir)
    index = {w: i for i, w in enumerate(wnids)}
    files = {p.stem: p for p in sorted(xml_dir.rglob("*.xml"))}
    out = []
    for e in corpus:
        xml = files.get(Path(e.path).stem)
        if xml is None:
            continue
        _, _, ann = parse_imagenet_xml(xml)
        boxes = tuple((*b, index.get(l, -1)) for b, l in zip(ann.boxes, ann.labels)
                      if index.get(l, -1) == e.label)
        if boxes:
            out.append(CorpusEntry(e.image_id, e.path, e.label, boxes))
    return CorpusIndex(tuple(out), corpus.split, corpus.root)


# ---------------------------------------------------------------------------
# Evaluation sets
# ---------------------------------------------------------------------------


class TensorEvalSet:
    """In-memory labeled images, optionally with model-resolution box annotations."""

    def __init__(self, images, labels, ids=None, annotations=None):
        self.images = images
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        self.ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(images))]
        self.annotations = list(annotations) if annotations is not None else None
        self.skipped = []

    def __len__(self):
        return len(self.images)

    def _check(self, image_size):
        if image_size is not None and self.images.shape[-1] != image_size:
            raise DataError(f"tensor eval set is {self.images.shape[-1]}px, model needs {image_size}px")

    def batches(self, batch_size: int, image_size: int | None = None) -> Iterator:
        self._check(image_size)
        for i in range(0, len(self), batch_size):
            yield self.ids[i:i + batch_size], self.images[i:i + batch_size], self.labels[i:i + batch_size]

    def annotated(self, image_size: int | None = None) -> Iterator:
        """(id, image, label, BoxAnnotation) one at a time."""
        self._check(image_size)
        if self.annotations is None:
            raise DataError("eval set carries no annotations")
        for i in range(len(self)):
            yield self.ids[i], self.images[i], int(self.labels[i]), self.annotations[i]


class CorpusEvalSet:
    """Disk-backed eval set; unreadable images are skipped and logged."""

    def __init__(self, corpus: CorpusIndex, resize_mode: str = "resize_crop"):
        self.corpus = corpus
        self.resize_mode = resize_mode
        self.skipped = []

    def __len__(self):
        return len(self.corpus)

    def _load(self, entry, image_size):
        try:
            return load_image(self.corpus.resolve(entry), ResizeSpec(image_size, self.resize_mode))
        except DataError as exc:
            log.warning("%s", exc)
            self.skipped.append((entry.image_id, str(exc)))
            return None

    def batches(self, batch_size: int, image_size: int = 224) -> Iterator:
        ids, imgs, labels = [], [], []
        for e in self.corpus:
            loaded = self._load(e, image_size)
            if loaded is None:
                continue
            ids.append(e.image_id)
            imgs.append(loaded[0])
            labels.append(e.label)
            if len(ids) == batch_size:
                yield ids, torch.stack(imgs), torch.tensor(labels)
                ids, imgs, labels = [], [], []
        if ids:
            yield ids, torch.stack(imgs), torch.tensor(labels)

    def annotated(self, image_size: int = 224) -> Iterator:
        resize = ResizeSpec(image_size, self.resize_mode)
        for e in self.corpus:
            loaded = self._load(e, image_size)
            if loaded is None:
                continue
            image, (w, h) = loaded
            ann = BoxAnnotation(e.image_id, tuple(tuple(b[:4]) for b in e.boxes),
                                tuple(b[4] if len(b) > 4 else e.label for b in e.boxes))
            yield e.image_id, image, e.label, ann.retained(e.label).mapped(resize, w, h)
