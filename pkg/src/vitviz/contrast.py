"""Readout-site contrast: the same (layer, channel) visualized at several sites, tiled in one grid.

    python -m vitviz.contrast --model vit-b16@/path/to/weights.pth --layers 2 5 8 --channel 10 --output grid.png

Without ``--model`` the tiny synthetic ViT is used, so the pipeline runs anywhere.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from PIL import Image, ImageDraw

from .engine import FailedRun, OptimizationConfig, batch_visualize
from .errors import VitVizError
from .models import FeatureLocator, load_model
from .reporting import sha256_file, to_uint8, write_json

DEFAULT_SITES = ("ffn_gelu", "key", "query", "value")


def contrast_locators(spec, layers, channel, sites=DEFAULT_SITES):
    """Matched locators: one channel index, valid at every requested site."""
    width = min(spec.site_width(s) for s in sites)
    if not 0 <= channel < width:
        raise VitVizError(f"channel {channel} must be < {width} to exist at every site in {sites}")
    return [FeatureLocator(l, channel, s).validate(spec) for l in layers for s in sites]


def compose_grid(results, layers, sites, panel=None, gutter=4, label_h=14):
    """Rows are layers, columns are sites; failed runs render as gray tiles."""
    first = next((r for r in results if not isinstance(r, FailedRun)), None)
    size = panel or (first.image.shape[-1] if first is not None else 64)
    W = len(sites) * (size + gutter) + gutter
    H = label_h + len(layers) * (size + label_h + gutter) + gutter
    canvas = Image.new("RGB", (W, H), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for j, site in enumerate(sites):
        draw.text((gutter + j * (size + gutter), 1), site, fill=(0, 0, 0))
    for i, layer in enumerate(layers):
        y = label_h + i * (size + label_h + gutter)
        draw.text((gutter, y), f"layer {layer}", fill=(0, 0, 0))
        for j in range(len(sites)):
            r = results[i * len(sites) + j]
            if isinstance(r, FailedRun):
                tile = Image.new("RGB", (size, size), (128, 128, 128))
            else:
                tile = Image.fromarray(to_uint8(r.image)).resize((size, size), Image.NEAREST)
            canvas.paste(tile, (gutter + j * (size + gutter), y + label_h))
    return canvas


def run_contrast(handle, layers, channel, sites=DEFAULT_SITES, template=None, panel=None):
    template = template or OptimizationConfig(FeatureLocator(0, 0))
    locators = contrast_locators(handle.spec, layers, channel, sites)
    results = batch_visualize(handle, locators, template)
    return results, compose_grid(results, list(layers), list(sites), panel)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m vitviz.contrast", description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="vit-tiny-test", help="id or id@weights")
    ap.add_argument("--layers", type=int, nargs="+", default=None)
    ap.add_argument("--channel", type=int, default=0)
    ap.add_argument("--sites", nargs="+", default=list(DEFAULT_SITES))
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--jitter-bound", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--panel", type=int, default=None, help="tile size in pixels")
    ap.add_argument("--output", required=True, help="grid PNG path; a .json summary is written beside it")
    args = ap.parse_args(argv)
    try:
        model_id, _, weights = args.model.partition("@")
        handle = load_model(model_id, weights or None)
        layers = args.layers if args.layers is not None else list(range(handle.spec.num_layers))
        template = OptimizationConfig(FeatureLocator(0, 0), steps=args.steps,
                                      jitter_bound=args.jitter_bound, seed=args.seed)
        results, grid = run_contrast(handle, layers, args.channel, args.sites, template, args.panel)
    except VitVizError as exc:
        print(f"contrast: error[{exc.exit_code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.save(out, format="PNG")
    summary = {
        "model_id": handle.model_id, "model_digest": handle.digest, "layers": layers,
        "channel": args.channel, "sites": args.sites, "grid": out.name, "grid_sha256": sha256_file(out),
        "runs": [{"locator": r.locator.key, "error": r.error} if isinstance(r, FailedRun) else
                 {"locator": r.locator.key, "seed": r.seed, "final_main": r.trace[-1].main,
                  "initial_main": r.trace[0].main} for r in results],
    }
    write_json(out.with_suffix(".json"), summary)
    print(json.dumps({"grid": str(out), "failed": sum(isinstance(r, FailedRun) for r in results)}))
    return 0 if not any(isinstance(r, FailedRun) for r in results) else 5


if __name__ == "__main__":
    sys.exit(main())
