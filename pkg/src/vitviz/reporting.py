"""Serialization: rasters, canonical JSON, line-delimited reports, run manifests."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

REPORT_SCHEMA = "vitviz.report/1"
MANIFEST_NAME = "manifest.json"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, torch.Tensor):
        return obj.tolist()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(obj, indent=None) -> str:
    return json.dumps(obj, sort_keys=True, indent=indent, default=_jsonable, allow_nan=True)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj, indent=2) + "\n")
    return path


def write_report(path, kind: str, records) -> Path:
    """One JSON object per line, each tagged with the schema and record kind."""
    path = Path(path)
    with open(path, "w") as f:
        for rec in records:
            f.write(dumps({"schema": REPORT_SCHEMA, "kind": kind, **rec}) + "\n")
    return path


def read_report(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if rec.get("schema") != REPORT_SCHEMA:
                    raise ValueError(f"{path}: unsupported report schema {rec.get('schema')!r}")
                out.append(rec)
    return out


def to_uint8(image, input_range=(0.0, 1.0)) -> np.ndarray:
    """(C, H, W) tensor in ``input_range`` -> (H, W, 3) uint8."""
    lo, hi = input_range
    x = ((image.detach().double().cpu() - lo) / (hi - lo)).clamp(0, 1)
    arr = (x * 255).round().to(torch.uint8).numpy()
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def save_png(image, path, input_range=(0.0, 1.0)) -> Path:
    path = Path(path)
    arr = image if isinstance(image, np.ndarray) else to_uint8(image, input_range)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)
    return path


def save_figure(fig, path) -> Path:
    """Deterministic PNG from a matplotlib figure (no timestamp/software chunks)."""
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    return path


def plot_curves(curves, path, xlabel, ylabel, title=""):
    """``curves``: mapping label -> (xs, ys), drawn on shared axes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label in sorted(curves):
        xs, ys = curves[label]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    save_figure(fig, path)
    plt.close(fig)
    return Path(path)


@dataclass
class RunManifest:
    config_digest: str
    model_digest: str | None
    corpus_digest: str | None
    started: str
    finished: str
    artifacts: list = field(default_factory=list)  # [{"path": rel, "sha256": hex}]
    tool_version: str = ""
    command: str = ""
    wall_time: float = 0.0
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def verify(self, root) -> list:
        """Return relative paths whose content no longer matches the recorded hash."""
        root = Path(root)
        bad = []
        for art in self.artifacts:
            p = root / art["path"]
            if not p.exists() or sha256_file(p) != art["sha256"]:
                bad.append(art["path"])
        return bad


def inventory(root, exclude=(MANIFEST_NAME,)) -> list:
    root = Path(root)
    items = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            items.append({"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p)})
    return items


def find_orphans(root) -> list:
    """Files under ``root`` not listed by any manifest (manifests themselves excluded)."""
    root = Path(root)
    claimed = set()
    for mpath in root.rglob(MANIFEST_NAME):
        manifest = RunManifest.load(mpath)
        base = mpath.parent
        claimed.update((base / a["path"]).resolve() for a in manifest.artifacts)
    return sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.name != MANIFEST_NAME and p.resolve() not in claimed
    )


def finite_or_none(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x
