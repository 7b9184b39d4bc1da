"""Command-line frontend: config resolution, dispatch, atomic run directories.

Precedence for every parameter: command-line flag > config file > default.
Exit codes: 0 success, 2 usage, 3 data, 4 model, 5 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import DataError, UsageError, VitVizError
from .reporting import MANIFEST_NAME, RunManifest, inventory, sha256_bytes, write_json

log = logging.getLogger("vitviz")

COMMANDS = ("visualize", "atlas-scan", "top-k", "triptych", "cls-ablate", "patch-head",
            "spatial-curve", "mask-eval", "freq-eval")


@dataclass(frozen=True)
class Param:
    type: type
    default: object = None
    many: bool = False
    help: str = ""
    required: bool = False


_VIS = {
    "layer": Param(int, required=True, help="block index"),
    "channels": Param(int, [0], many=True, help="channel indices at the readout site"),
    "site": Param(str, "ffn_gelu", help="ffn_gelu | ffn_pre_gelu | key | query | value | block_output"),
    "steps": Param(int, 400),
    "ensemble_size": Param(int, 8),
    "lambda_tv": Param(float, 5e-5),
    "lr": Param(float, 0.1),
    "lr_end": Param(float, 0.0),
    "beta1": Param(float, 0.5),
    "beta2": Param(float, 0.99),
    "gs_std_start": Param(float, 0.5),
    "gs_std_end": Param(float, 0.0),
    "jitter_bound": Param(int, 32),
    "cs_mean_scale": Param(float, 1.0),
    "cs_std_scale": Param(float, 1.0),
    "init": Param(str, "uniform-noise"),
    "workers": Param(int, 1),
}
_EVAL = {
    "batch_size": Param(int, 32),
    "resize_mode": Param(str, "resize_crop", help="resize_crop | squash"),
    "subset": Param(int, None, help="stratified subset size"),
}
_SCAN = {
    "layer": Param(int, required=True),
    "channels": Param(int, [0], many=True),
    "site": Param(str, "ffn_gelu"),
    "batch_size": Param(int, 16),
    "resize_mode": Param(str, "resize_crop"),
    "store": Param(str, None, help="store directory, or 'cache' for the cache root"),
}

SCHEMAS = {
    "visualize": _VIS,
    "atlas-scan": _SCAN,
    "top-k": {
        "store": Param(str, required=True),
        "layer": Param(int, required=True),
        "channels": Param(int, [0], many=True),
        "site": Param(str, "ffn_gelu"),
        "k": Param(int, 10),
        "rank_by": Param(str, "sum", help="sum | max"),
    },
    "triptych": {**_VIS, "batch_size": Param(int, 16), "resize_mode": Param(str, "resize_crop"),
                 "store": Param(str, None)},
    "cls-ablate": {**_EVAL},
    "patch-head": {**_EVAL},
    "spatial-curve": {
        **_EVAL,
        "layers": Param(int, required=True, many=True),
        "channels": Param(int, [0], many=True),
        "site": Param(str, "ffn_gelu"),
        "top_images": Param(int, 10),
        "fractions": Param(float, [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], many=True),
        "threshold": Param(float, 0.5),
        "trials": Param(int, 5),
        "store": Param(str, None),
    },
    "mask-eval": {**_EVAL, "fill": Param(str, "mean", help="mean | black"),
                  "bbox_dir": Param(str, None), "wnids": Param(str, None, help="file, one wnid per line")},
    "freq-eval": {**_EVAL, "cutoffs": Param(float, [round(0.1 * i, 1) for i in range(1, 11)], many=True)},
}

NEEDS_CORPUS = {"atlas-scan", "triptych", "cls-ablate", "patch-head", "spatial-curve",
                "mask-eval", "freq-eval"}
NEEDS_MODEL = set(COMMANDS) - {"top-k"}
TOP_LEVEL = ("command", "model", "corpus", "output", "seed", "params")


@dataclass(frozen=True)
class RunConfig:
    command: str
    output: str
    model: tuple = ()
    corpus: str | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def to_dict(self, include_output: bool = True) -> dict:
        d = {"command": self.command, "model": list(self.model), "corpus": self.corpus,
             "output": self.output, "seed": self.seed, "params": dict(self.params)}
        if not include_output:
            del d["output"]
        return d

    @property
    def digest(self) -> str:
        # the output location does not change results
        return sha256_bytes(json.dumps(self.to_dict(include_output=False), sort_keys=True).encode())

    def save(self, path, include_output: bool = True) -> Path:
        return write_json(path, self.to_dict(include_output))


def cache_root() -> Path:
    return Path(os.environ.get("VITVIZ_CACHE", Path.home() / ".cache" / "vitviz"))


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitviz", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--model", nargs="+", help="model id, or id@weights (path | torchvision | seed:N)")
        p.add_argument("--corpus", help="line-delimited JSON corpus manifest")
        p.add_argument("--output", help="run output directory (must not exist)")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        for name, spec in SCHEMAS[command].items():
            default = "required" if spec.required else f"default: {spec.default}"
            kw = {"type": spec.type, "dest": f"param__{name}", "metavar": name.upper(),
                  "help": f"{spec.help} ({default})" if spec.help else f"({default})"}
            if spec.many:
                kw["nargs"] = "+"
            p.add_argument(_flag(name), **kw)
    return parser


def _coerce(command, name, value):
    schema = SCHEMAS[command]
    if name not in schema:
        raise UsageError(f"unknown parameter {name!r} for command {command!r}")
    spec = schema[name]
    if value is None:
        return None
    try:
        if spec.many:
            if not isinstance(value, (list, tuple)):
                value = [value]
            return [spec.type(v) for v in value]
        return spec.type(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"parameter {name!r}: {exc}") from exc


def parse_config(argv=None) -> RunConfig:
    try:
        args = vars(build_parser().parse_args(argv))
    except SystemExit as exc:
        if exc.code in (0, None):
            raise
        raise UsageError("invalid command line") from None
    command = args.pop("command")
    if args.pop("verbose", False):
        logging.basicConfig(level=logging.INFO)

    file_cfg = {}
    if "config" in args:
        path = Path(args.pop("config"))
        try:
            file_cfg = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        unknown = sorted(set(file_cfg) - set(TOP_LEVEL))
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]!r}")
        if file_cfg.get("command", command) != command:
            raise UsageError(f"config file is for {file_cfg['command']!r}, command line says {command!r}")

    params = {name: spec.default for name, spec in SCHEMAS[command].items()}
    for name, value in (file_cfg.get("params") or {}).items():
        params[name] = _coerce(command, name, value)
    for key, value in args.items():
        if key.startswith("param__"):
            name = key[len("param__"):]
            params[name] = _coerce(command, name, value)

    def pick(key, default=None):
        return args.get(key, file_cfg.get(key, default))

    model = pick("model", [])
    model = tuple([model] if isinstance(model, str) else model)
    cfg = RunConfig(command=command, output=pick("output"), model=model, corpus=pick("corpus"),
                    seed=int(pick("seed", 0)), params=params)
    _validate(cfg)
    return cfg


def load_config(path, output=None) -> RunConfig:
    """Parse a saved config (the inverse of :meth:`RunConfig.save`).

    Run-directory snapshots omit the output location; pass ``output`` to re-run one.
    """
    try:
        command = json.loads(Path(path).read_text())["command"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    return parse_config([command, "--config", str(path)] + (["--output", str(output)] if output else []))


def _validate(cfg: RunConfig):
    if not cfg.output:
        raise UsageError("missing required option 'output'")
    if cfg.command in NEEDS_MODEL and not cfg.model:
        raise UsageError("missing required option 'model'")
    if cfg.command in NEEDS_CORPUS and not cfg.corpus:
        raise UsageError("missing required option 'corpus'")
    for name, spec in SCHEMAS[cfg.command].items():
        if spec.required and cfg.params.get(name) is None:
            raise UsageError(f"missing required parameter {name!r}")


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _load_models(cfg: RunConfig):
    from .models import load_model

    handles = []
    for spec in cfg.model:
        model_id, _, weights = spec.partition("@")
        handles.append(load_model(model_id, weights or None))
    return handles


def _corpus(cfg: RunConfig):
    from .data import CorpusIndex

    corpus = CorpusIndex.load(cfg.corpus)
    subset = cfg.params.get("subset")
    if subset:
        corpus = corpus.stratified_subset(subset, cfg.seed)
    return corpus


def _store_path(cfg, handle, corpus, workdir):
    store = cfg.params.get("store")
    if store is None:
        return workdir / "store"
    if store == "cache":
        return cache_root() / "stores" / f"{handle.digest[:16]}_{corpus.digest[:16]}"
    return Path(store)


def _locators(cfg, layers=None):
    from .models import FeatureLocator

    layers = layers if layers is not None else [cfg.params["layer"]]
    return [FeatureLocator(l, c, cfg.params["site"]) for l in layers for c in cfg.params["channels"]]


def _opt_template(cfg, locator):
    from .engine import OptimizationConfig

    p = cfg.params
    return OptimizationConfig(
        locator=locator, steps=p["steps"], ensemble_size=p["ensemble_size"], lambda_tv=p["lambda_tv"],
        lr_start=p["lr"], lr_end=p["lr_end"], betas=(p["beta1"], p["beta2"]),
        gs_std_start=p["gs_std_start"], gs_std_end=p["gs_std_end"], jitter_bound=p["jitter_bound"],
        cs_mean_scale=p["cs_mean_scale"], cs_std_scale=p["cs_std_scale"], seed=cfg.seed, init=p["init"])


def _cmd_visualize(cfg, work):
    from .engine import FailedRun, batch_visualize, save_visualization
    from .reporting import write_report

    (handle,) = _load_models(cfg)[:1]
    locators = _locators(cfg)
    results = batch_visualize(handle, locators, _opt_template(cfg, locators[0]), cfg.params["workers"])
    failed = [r for r in results if isinstance(r, FailedRun)]
    for r in results:
        if not isinstance(r, FailedRun):
            save_visualization(r, work / "visualizations", handle.input_range)
    if failed:
        write_report(work / "failures.jsonl", "failure",
                     [{"locator": f.locator.to_dict(), "error": f.error} for f in failed])
        if len(failed) == len(results):
            raise failed[0].exception
    return {"model_digest": handle.digest,
            "wall_time": {r.stem: r.wall_time for r in results if not isinstance(r, FailedRun)}}


def _cmd_atlas_scan(cfg, work):
    from .atlas import scan_corpus
    from .reporting import write_report

    (handle,) = _load_models(cfg)[:1]
    corpus = _corpus(cfg)
    store, stats = scan_corpus(handle, corpus, _locators(cfg), _store_path(cfg, handle, corpus, work),
                               cfg.params["batch_size"], cfg.params["resize_mode"])
    write_report(work / "scan.jsonl", "scan", [{
        "store": str(store.root) if not store.root.is_relative_to(work) else store.root.relative_to(work).as_posix(),
        "new_records": stats.new_records, "forwards": stats.forwards,
        "skipped": [list(s) for s in stats.skipped], "store_digest": store.state_digest()}])
    return {"model_digest": handle.digest, "corpus_digest": corpus.digest}


def _cmd_top_k(cfg, work):
    from .atlas import ActivationStore, top_k
    from .reporting import write_report

    store = ActivationStore(cfg.params["store"])
    rows = []
    for loc in _locators(cfg):
        ranked = top_k(store, loc, cfg.params["k"], cfg.params["rank_by"])
        rows += [{"locator": loc.key, "rank": i, "image_id": r.image_id, "score": r.score,
                  "max": r.max_activation, "truncated": ranked.truncated}
                 for i, r in enumerate(ranked.records)]
    write_report(work / "topk.jsonl", "top_k", rows)
    return {"corpus_digest": store.corpus_digest}


def _cmd_triptych(cfg, work):
    from .atlas import render_triptych, scan_corpus, top_k
    from .data import ResizeSpec, load_image
    from .engine import FailedRun, batch_visualize, save_visualization

    (handle,) = _load_models(cfg)[:1]
    corpus = _corpus(cfg)
    locators = _locators(cfg)
    store, _ = scan_corpus(handle, corpus, locators, _store_path(cfg, handle, corpus, work),
                           cfg.params["batch_size"], cfg.params["resize_mode"])
    results = batch_visualize(handle, locators, _opt_template(cfg, locators[0]), cfg.params["workers"])
    entries = {e.image_id: e for e in corpus}
    resize = ResizeSpec(handle.image_size, cfg.params["resize_mode"])
    for vis in results:
        if isinstance(vis, FailedRun):
            raise vis.exception
        save_visualization(vis, work / "visualizations", handle.input_range)
        ranked = top_k(store, vis.locator, 1).records
        top = ranked[0] if ranked else None
        source = load_image(corpus.resolve(entries[top.image_id]), resize)[0] if top else None
        render_triptych(vis, top, source, work / f"{vis.stem}_triptych.png")
    return {"model_digest": handle.digest, "corpus_digest": corpus.digest}


def _eval_set(cfg):
    from .data import CorpusEvalSet

    corpus = _corpus(cfg)
    return corpus, CorpusEvalSet(corpus, cfg.params["resize_mode"])


def _cmd_cls_ablate(cfg, work):
    from .ablation import run_cls_isolation
    from .reporting import write_report

    (handle,) = _load_models(cfg)[:1]
    corpus, eval_set = _eval_set(cfg)
    report = run_cls_isolation(handle, eval_set, cfg.params["batch_size"])
    write_report(work / "cls_isolation.jsonl", "cls_isolation",
                 [{"model_id": handle.model_id, **report.to_dict(), "skipped": eval_set.skipped}])
    return {"model_digest": handle.digest, "corpus_digest": corpus.digest}


def _cmd_patch_head(cfg, work):
    from .ablation import render_accuracy_heatmap, run_patch_head_sweep
    from .reporting import write_report

    (handle,) = _load_models(cfg)[:1]
    corpus, eval_set = _eval_set(cfg)
    report = run_patch_head_sweep(handle, eval_set, cfg.params["batch_size"])
    write_report(work / "patch_head.jsonl", "patch_head", [{"model_id": handle.model_id, **report.to_dict()}])
    render_accuracy_heatmap(report, work / "patch_head_heatmap.png")
    return {"model_digest": handle.digest, "corpus_digest": corpus.digest}


def _cmd_spatial_curve(cfg, work):
    from .ablation import layer_linearity, run_spatial_drop
    from .atlas import scan_corpus, top_k
    from .data import ResizeSpec, load_image
    from .errors import EmptyEvaluationSetError
    from .reporting import plot_curves, write_report

    p = cfg.params
    (handle,) = _load_models(cfg)[:1]
    corpus = _corpus(cfg)
    locators = _locators(cfg, p["layers"])
    store, _ = scan_corpus(handle, corpus, locators, _store_path(cfg, handle, corpus, work),
                           p["batch_size"], p["resize_mode"])
    entries = {e.image_id: e for e in corpus}
    resize = ResizeSpec(handle.image_size, p["resize_mode"])
    curves, rows = [], []
    for loc in locators:
        recs = top_k(store, loc, p["top_images"]).records
        images = [load_image(corpus.resolve(entries[r.image_id]), resize)[0] for r in recs]
        try:
            curve = run_spatial_drop(handle, loc, images, p["fractions"], p["threshold"], p["trials"], cfg.seed)
        except EmptyEvaluationSetError as exc:
            rows.append({"locator": loc.to_dict(), "skipped": str(exc)})
            continue
        curves.append(curve)
        rows.append(curve.to_dict())
    by_layer = layer_linearity(curves)
    write_report(work / "spatial_curves.jsonl", "spatial_curve", rows)
    write_report(work / "spatial_linearity.jsonl", "layer_linearity",
                 [{"layer": l, "mean_r2": r2} for l, r2 in by_layer.items()])
    if curves:
        mean_curves = {}
        for layer in by_layer:
            cs = [c for c in curves if c.layer == layer]
            ys = [sum(c.count_ratio[i] for c in cs) / len(cs) for i in range(len(p["fractions"]))]
            mean_curves[f"layer {layer}"] = (p["fractions"], ys)
        plot_curves(mean_curves, work / "spatial_curves.png", "fraction of active patches dropped",
                    "active-patch count ratio")
    return {"model_digest": handle.digest, "corpus_digest": corpus.digest}


def _cmd_mask_eval(cfg, work):
    from .data import CorpusEvalSet, annotate_corpus
    from .reporting import write_report
    from .robustness import run_masking_study

    p = cfg.params
    handles = _load_models(cfg)
    corpus = _corpus(cfg)
    if p["bbox_dir"]:
        if not p["wnids"]:
            raise UsageError("bbox_dir needs wnids")
        wnids = [w.strip() for w in Path(p["wnids"]).read_text().splitlines() if w.strip()]
        corpus = annotate_corpus(corpus, p["bbox_dir"], wnids)
    unboxed = [e.image_id for e in corpus if not any((b[4] if len(b) > 4 else e.label) == e.label for b in e.boxes)]
    if unboxed:
        raise DataError(f"{len(unboxed)} corpus images have no true-class box (first: {unboxed[0]})")
    reports, failures = run_masking_study(handles, CorpusEvalSet(corpus, p["resize_mode"]), p["fill"],
                                          p["batch_size"])
    write_report(work / "masking.jsonl", "masking",
                 [r.to_dict() for r in reports.values()] +
                 [{"model_id": m, "error": e} for m, e in failures.items()])
    if not reports:
        raise VitVizError("every model failed the masking study")
    return {"model_digest": {h.model_id: h.digest for h in handles}, "corpus_digest": corpus.digest}


def _cmd_freq_eval(cfg, work):
    from .data import CorpusEvalSet
    from .reporting import write_report
    from .robustness import plot_frequency_curves, run_frequency_study

    p = cfg.params
    handles = _load_models(cfg)
    corpus = _corpus(cfg)
    curves, failures = run_frequency_study(handles, CorpusEvalSet(corpus, p["resize_mode"]), p["cutoffs"],
                                           p["batch_size"])
    write_report(work / "frequency.jsonl", "frequency_curve",
                 [c.to_dict() for c in curves.values()] +
                 [{"model_id": m, "error": e} for m, e in failures.items()])
    if not curves:
        raise VitVizError("every model failed the frequency study")
    plot_frequency_curves(curves, work / "frequency.png")
    return {"model_digest": {h.model_id: h.digest for h in handles}, "corpus_digest": corpus.digest}


HANDLERS = {
    "visualize": _cmd_visualize, "atlas-scan": _cmd_atlas_scan, "top-k": _cmd_top_k,
    "triptych": _cmd_triptych, "cls-ablate": _cmd_cls_ablate, "patch-head": _cmd_patch_head,
    "spatial-curve": _cmd_spatial_curve, "mask-eval": _cmd_mask_eval, "freq-eval": _cmd_freq_eval,
}


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def execute(cfg: RunConfig) -> RunManifest:
    """Run in a hidden temp directory, then rename into place; never leaves partial output."""
    _validate(cfg)
    out = Path(cfg.output)
    if out.exists():
        raise UsageError(f"output directory {out} already exists")
    out.parent.mkdir(parents=True, exist_ok=True)
    lock = out.with_name(out.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out} is locked by another run ({lock})") from None
    os.close(fd)
    work = out.with_name(f".{out.name}.tmp-{os.getpid()}")
    try:
        if work.exists():
            shutil.rmtree(work)
        work.mkdir()
        started, t0 = _now(), time.perf_counter()
        cfg.save(work / "config.json", include_output=False)
        notes = HANDLERS[cfg.command](cfg, work) or {}
        model_digest = notes.pop("model_digest", None)
        corpus_digest = notes.pop("corpus_digest", None)
        manifest = RunManifest(
            config_digest=cfg.digest,
            model_digest=model_digest if not isinstance(model_digest, dict) else
            sha256_bytes(json.dumps(model_digest, sort_keys=True).encode()),
            corpus_digest=corpus_digest, started=started, finished=_now(),
            artifacts=inventory(work), tool_version=__version__, command=cfg.command,
            wall_time=time.perf_counter() - t0,
            notes={**notes, "output": str(out), **({"model_digests": model_digest} if isinstance(model_digest, dict) else {})})
        write_json(work / MANIFEST_NAME, manifest.to_dict())
        os.replace(work, out)
        return manifest
    finally:
        if work.exists():
            shutil.rmtree(work, ignore_errors=True)
        lock.unlink(missing_ok=True)


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        manifest = execute(cfg)
    except VitVizError as exc:
        print(f"vitviz: error[{exc.exit_code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("vitviz: interrupted", file=sys.stderr)
        return 5
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to the internal exit code
        log.exception("internal error")
        print(f"vitviz: internal error: {exc}", file=sys.stderr)
        return 5
    print(json.dumps({"output": cfg.output, "artifacts": len(manifest.artifacts)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
