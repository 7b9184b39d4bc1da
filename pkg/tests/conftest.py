import json

import numpy as np
import pytest
import torch
from PIL import Image

from vitviz.models import load_model


@pytest.fixture(scope="session")
def tiny():
    return load_model("vit-tiny-test")


@pytest.fixture(scope="session")
def tiny64(tiny):
    return tiny.to(torch.float64)


@pytest.fixture
def rand_image():
    return torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0))


def write_corpus(root, n=12, size=(24, 20), classes=10, seed=0, boxes=((2, 2, 12, 14),)):
    """PNG corpus plus manifest; returns the manifest path."""
    rng = np.random.default_rng(seed)
    manifest = root / "corpus.jsonl"
    with open(manifest, "w") as f:
        for i in range(n):
            name = f"img{i:03d}.png"
            arr = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(arr).save(root / name)
            f.write(json.dumps({"id": f"img{i:03d}", "path": name, "label": i % classes,
                                "boxes": [list(b) for b in boxes]}) + "\n")
    return manifest


@pytest.fixture
def corpus_file(tmp_path):
    return write_corpus(tmp_path)
