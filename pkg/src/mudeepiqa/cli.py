"""Command-line entry point: one subcommand per pipeline stage.

Every run writes ``<subcommand>.resolved.json`` into ``--out-dir``; passing
that file back through ``--config`` reproduces the step.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("mudeepiqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


# subcommand defaults; the config file and explicit flags override these in turn
DEFAULTS = {
    "global": {"seed": 0, "out_dir": ".", "threads": None},
    "simulate": {"kind": "disks", "count": 1, "size": 512, "spec": None, "format": "raw"},
    "degrade": {"preset": "desk", "recipe": None, "image_size": None, "experimental": None, "workers": None},
    "frc": {"manifest": None, "inputs": None, "output": "frc.csv"},
    "label": {"manifest": "manifest.json", "source": "frc", "labels": None, "target_name": None, "output": None},
    "train": {
        "manifest": "manifest.json",
        "epochs": 300,
        "batch_patches": 128,
        "learning_rate": 1e-4,
        "checkpoint_policy": "final",
        "init_seed": None,
        "model_out": "model.bin",
    },
    "predict": {"model": "model.bin", "inputs": "manifest.json", "heatmaps": False, "output": "predictions"},
    "rank": {"predictions": "predictions/predictions.csv", "manifest": "manifest.json", "output": "ranking.csv", "plot": False},
    "krcc": {"predictions": "predictions/predictions.csv", "manifest": "manifest.json", "higher_is_better": None, "output": "krcc.json"},
    "report": {"predictions": "predictions/predictions.csv", "manifest": "manifest.json", "model": None, "output": "regression.json"},
    "bench": {"model": "model.bin", "inputs": None, "synthetic": 100, "size": 512, "output": "bench.json"},
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--out-dir", dest="out_dir", default=S)
    common.add_argument("--threads", type=int, default=S)
    common.add_argument("--config", default=S, help="JSON file mirroring the flags")
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    p = _Parser(prog="mudeepiqa", description="Patch-CNN image quality assessment for microscopy", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="render clean parametric structures")
    s.add_argument("--kind", default=S)
    s.add_argument("--count", type=int, default=S, help="number of images")
    s.add_argument("--size", type=int, default=S)
    s.add_argument("--spec", default=S, help="JSON list of structure specs")
    s.add_argument("--format", choices=["raw", "png", "tiff"], default=S)

    s = sub.add_parser("degrade", parents=[common], help="build a degraded corpus and manifest")
    s.add_argument("--preset", choices=["paper", "desk", "noisefree", "graded"], default=S)
    s.add_argument("--recipe", default=S, help="JSON recipe overriding the preset")
    s.add_argument("--image-size", dest="image_size", type=int, default=S)
    s.add_argument("--experimental", nargs="*", default=S, help="directories of clean experimental FOVs")
    s.add_argument("--workers", type=int, default=S)

    s = sub.add_parser("frc", parents=[common], help="single-image FRC resolution")
    s.add_argument("--manifest", default=S)
    s.add_argument("--inputs", nargs="*", default=S, help="image files or directories")
    s.add_argument("--output", default=S)

    s = sub.add_parser("label", parents=[common], help="attach FRC or external labels to a manifest")
    s.add_argument("--manifest", default=S)
    s.add_argument("--source", choices=["frc", "csv"], default=S)
    s.add_argument("--labels", default=S, help="CSV id,label (for --source csv)")
    s.add_argument("--target-name", dest="target_name", default=S)
    s.add_argument("--output", default=S)

    s = sub.add_parser("train", parents=[common], help="train the patch CNN")
    s.add_argument("--manifest", default=S)
    s.add_argument("--epochs", type=int, default=S)
    s.add_argument("--batch-patches", dest="batch_patches", type=int, default=S)
    s.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=S)
    s.add_argument("--checkpoint-policy", dest="checkpoint_policy", choices=["final", "best_validation"], default=S)
    s.add_argument("--init-seed", dest="init_seed", type=int, default=S)
    s.add_argument("--model-out", dest="model_out", default=S)

    s = sub.add_parser("predict", parents=[common], help="score images and emit patch maps")
    s.add_argument("--model", default=S)
    s.add_argument("--inputs", default=S, help="manifest JSON or image directory")
    s.add_argument("--heatmaps", action="store_true", default=S)
    s.add_argument("--output", default=S)

    for name, helptext in (("rank", "quality ranking table"), ("krcc", "grouped Kendall correlation"), ("report", "regression of predictions on labels")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--predictions", default=S)
        s.add_argument("--manifest", default=S)
        s.add_argument("--output", default=S)
        if name == "rank":
            s.add_argument("--plot", action="store_true", default=S)
        if name == "krcc":
            g = s.add_mutually_exclusive_group()
            g.add_argument("--higher-is-better", dest="higher_is_better", action="store_true", default=S)
            g.add_argument("--lower-is-better", dest="higher_is_better", action="store_false", default=S)
        if name == "report":
            s.add_argument("--model", default=S, help="model file supplying label normalization")

    s = sub.add_parser("bench", parents=[common], help="FRC vs model prediction wall-clock")
    s.add_argument("--model", default=S)
    s.add_argument("--inputs", default=S, help="manifest JSON or image directory")
    s.add_argument("--synthetic", type=int, default=S, help="number of generated images when no inputs")
    s.add_argument("--size", type=int, default=S)
    s.add_argument("--output", default=S)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    explicit = vars(args).copy()
    command = explicit.pop("command")
    cfg = {**DEFAULTS["global"], **DEFAULTS[command]}
    config_path = explicit.pop("config", None)
    if config_path:
        from_file = json.loads(Path(config_path).read_text())
        from_file.pop("command", None)
        unknown = set(from_file) - set(cfg) - {"verbose"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(from_file)
    cfg.update(explicit)
    cfg["command"] = command
    return cfg


def _path(cfg: dict, value) -> Path:
    """Relative paths are taken relative to --out-dir."""
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["out_dir"]) / p


def _load_manifest(cfg, key="manifest"):
    from .degrade import DatasetManifest

    return DatasetManifest.load_json(_path(cfg, cfg[key]))


# --------------------------------------------------------------------------- commands


def cmd_simulate(cfg):
    from .imagecore import write_image
    from .synth import StructureSpec, gen_structure, make_spec

    out = _path(cfg, "simulated")
    if cfg["spec"]:
        specs = [StructureSpec.from_dict(d) for d in json.loads(Path(cfg["spec"]).read_text())]
    else:
        from .degrade import derive_seed

        size = (cfg["size"], cfg["size"])
        specs = [make_spec(cfg["kind"], canvas=size, seed=derive_seed(cfg["seed"], i)) for i in range(cfg["count"])]
    suffix = {"raw": ".f32", "png": ".png", "tiff": ".tif"}[cfg["format"]]
    written = []
    for i, spec in enumerate(specs):
        path = out / f"{spec.kind}_{i:04d}{suffix}"
        write_image(gen_structure(spec), path)
        written.append({"path": str(path.relative_to(cfg["out_dir"])), "spec": spec.to_dict()})
    (out / "specs.json").write_text(json.dumps(written, indent=1))
    return {"images": len(written)}


def cmd_degrade(cfg):
    from .degrade import Recipe, build_dataset, preset

    if cfg["recipe"]:
        recipe = Recipe.from_dict(json.loads(Path(cfg["recipe"]).read_text()))
        recipe.global_seed = cfg["seed"]
    else:
        overrides = {}
        if cfg["image_size"]:
            overrides["image_size"] = cfg["image_size"]
        if cfg["experimental"]:
            overrides["experimental"] = list(cfg["experimental"])
        recipe = preset(cfg["preset"], global_seed=cfg["seed"], **overrides)
    workers = cfg["workers"] or cfg["threads"] or 1
    manifest = build_dataset(recipe, cfg["out_dir"], workers=workers)
    return {"entries": len(manifest.entries), "counts": manifest.counts()}


def cmd_frc(cfg):
    from .frc import FRC_SETTINGS, frc_resolution
    from .imagecore import read_image
    from .predict import _inputs

    pairs = []
    if cfg["manifest"]:
        pairs += _inputs(_load_manifest(cfg))
    for item in cfg["inputs"] or []:
        p = Path(item)
        pairs += _inputs(p) if p.is_dir() else [(p.stem, p)]
    out = _path(cfg, cfg["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cutoff_freq", "resolution_px", "resolution_um", "no_crossing_flag"])
        for eid, path in pairs:
            est = frc_resolution(read_image(path))
            um = "" if est.resolution_um is None else repr(est.resolution_um)
            w.writerow([eid, repr(est.cutoff_frequency), repr(est.resolution_px), um, int(est.no_crossing)])
    out.with_suffix(".settings.json").write_text(json.dumps(FRC_SETTINGS, indent=1))
    return {"images": len(pairs)}


def cmd_label(cfg):
    from .frc import FRC_SETTINGS, label_manifest
    from .train import read_label_csv

    manifest = _load_manifest(cfg)
    if cfg["source"] == "frc":
        labels = label_manifest(manifest)
        source = cfg["target_name"] or "frc_resolution"
    else:
        if not cfg["labels"]:
            raise UsageError("--labels CSV required with --source csv")
        labels = read_label_csv(cfg["labels"])
        source = cfg["target_name"] or "quality_score"
    missing = [e.id for e in manifest.entries if e.split in ("train", "val") and e.id not in labels]
    if missing:
        raise ValueError(f"labels missing for {len(missing)} train/val entries, e.g. {missing[:3]}")
    for e in manifest.entries:
        if e.id in labels:
            e.label = float(labels[e.id])
    manifest.label_source = source
    out = _path(cfg, cfg["output"] or cfg["manifest"])
    manifest.save(out)
    if cfg["source"] == "frc":
        out.with_name("label_settings.json").write_text(json.dumps(FRC_SETTINGS, indent=1))
    return {"labeled": sum(e.label is not None for e in manifest.entries), "label_source": source}


def cmd_train(cfg):
    from .net import init_model, save_model
    from .train import LabelError, TrainConfig, run_metadata, train_model, write_history

    manifest = _load_manifest(cfg)
    if manifest.label_source is None or any(e.label is None for e in manifest.split("train")):
        raise LabelError("labels missing: run the label step first")
    config = TrainConfig(
        epochs=cfg["epochs"],
        batch_patches=cfg["batch_patches"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        checkpoint_policy=cfg["checkpoint_policy"],
    )
    init_seed = cfg["seed"] if cfg["init_seed"] is None else cfg["init_seed"]
    model = init_model(seed=init_seed)
    model, history = train_model(model, manifest, config=config)
    save_model(model, _path(cfg, cfg["model_out"]))
    write_history(history, _path(cfg, "history.csv"))
    meta = run_metadata(config, model, manifest)
    meta["init_seed"] = init_seed
    _path(cfg, "run.json").write_text(json.dumps(meta, indent=1))
    last = history[-1] if history else {}
    return {"epochs": len(history), "final_train_E_wp": last.get("train_E_wp"), "final_val_metric": last.get("val_metric")}


def cmd_predict(cfg):
    from .net import load_model
    from .predict import predict_batch

    model = load_model(_path(cfg, cfg["model"]))
    source = _path(cfg, cfg["inputs"])
    rows, errors, seconds = predict_batch(model, source, _path(cfg, cfg["output"]), heatmaps=cfg["heatmaps"])
    return {"rows": len(rows), "errors": len(errors), "prediction_seconds": seconds}


def _truths(manifest) -> dict:
    return {e.id: {"level": e.level, "sample": e.sample, "kind": e.artifact.kind, "label": e.label} for e in manifest.entries}


def cmd_rank(cfg):
    from .evaluate import build_ranking, plot_ranking
    from .predict import read_predictions

    preds = read_predictions(_path(cfg, cfg["predictions"]))
    ranked = build_ranking(preds, _truths(_load_manifest(cfg)))
    out = ranked.to_csv(_path(cfg, cfg["output"]))
    if cfg["plot"]:
        plot_ranking(ranked, out.with_suffix(".png"))
    return {"rows": len(ranked.entries)}


def cmd_krcc(cfg):
    from .evaluate import KendallUndefined, grouped_krcc
    from .net import TARGET_HIGHER_IS_BETTER
    from .predict import read_predictions

    pred_path = _path(cfg, cfg["predictions"])
    preds = read_predictions(pred_path)
    hib = cfg["higher_is_better"]
    if hib is None:
        meta_path = pred_path.with_suffix(".json")
        target = json.loads(meta_path.read_text()).get("target_name") if meta_path.exists() else None
        hib = TARGET_HIGHER_IS_BETTER.get(target, True)
    truths = _truths(_load_manifest(cfg))
    result = {"higher_is_better": hib, "per_kind": {}}
    kinds = sorted({t["kind"] for i, t in truths.items() if i in preds and t["level"]})
    for kind in kinds:
        ids = [i for i in preds if truths[i]["kind"] == kind and truths[i]["level"]]
        try:
            tau = grouped_krcc([preds[i] for i in ids], [truths[i]["level"] for i in ids], hib)
        except KendallUndefined as exc:
            tau = None
            result.setdefault("undefined", {})[kind] = str(exc)
        result["per_kind"][kind] = tau
    _path(cfg, cfg["output"]).write_text(json.dumps(result, indent=1))
    return result


def cmd_report(cfg):
    from .evaluate import regression_report
    from .net import load_model
    from .predict import read_predictions

    preds = read_predictions(_path(cfg, cfg["predictions"]))
    truths = _truths(_load_manifest(cfg))
    ids = [i for i in preds if truths.get(i, {}).get("label") is not None]
    mean, std = 0.0, 1.0
    if cfg["model"]:
        m = load_model(_path(cfg, cfg["model"]))
        mean, std = m.label_mean, m.label_std
    out = _path(cfg, cfg["output"])
    rep = regression_report(
        [truths[i]["label"] for i in ids], [preds[i] for i in ids], mean, std, scatter_path=out.with_suffix(".scatter.csv")
    )
    out.write_text(json.dumps(rep, indent=1))
    return rep


def cmd_bench(cfg):
    import torch

    from .evaluate import bench
    from .imagecore import read_image
    from .net import load_model
    from .predict import _inputs
    from .synth import STRUCTURE_KINDS, gen_structure, make_spec
    from .degrade import ArtifactSpec, BASELINE_NOISE, NOISE_KEYS, apply_artifact, derive_seed

    torch.set_num_threads(1)
    model = load_model(_path(cfg, cfg["model"]))
    if cfg["inputs"]:
        images = [read_image(p) for _, p in _inputs(_path(cfg, cfg["inputs"]))]
    else:
        images = []
        for i in range(cfg["synthetic"]):
            kind = STRUCTURE_KINDS[i % len(STRUCTURE_KINDS)]
            clean = gen_structure(make_spec(kind, canvas=(cfg["size"], cfg["size"]), seed=derive_seed(cfg["seed"], i)))
            art = ArtifactSpec("reference", {k: BASELINE_NOISE for k in NOISE_KEYS}, derive_seed(cfg["seed"], i, 1))
            images.append(apply_artifact(clean, art))
    report = bench(images, model)
    report.save(_path(cfg, cfg["output"]))
    return report.to_dict()


COMMANDS = {
    "simulate": cmd_simulate,
    "degrade": cmd_degrade,
    "frc": cmd_frc,
    "label": cmd_label,
    "train": cmd_train,
    "predict": cmd_predict,
    "rank": cmd_rank,
    "krcc": cmd_krcc,
    "report": cmd_report,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    from .train import NumericError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or an argparse error already reported
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        _emit_error("usage", f"config: {exc}")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if cfg["threads"]:
        import torch

        torch.set_num_threads(int(cfg["threads"]))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in cfg.items() if k != "verbose"}
    (out_dir / f"{cfg['command']}.resolved.json").write_text(json.dumps(resolved, indent=1, default=str))
    try:
        summary = COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except NumericError as exc:
        _emit_error("numeric", str(exc))
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        _emit_error("data", f"{type(exc).__name__}: {exc}")
        return EXIT_DATA
    print(json.dumps(summary, default=_json_default))
    return EXIT_OK


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


if __name__ == "__main__":
    sys.exit(main())
