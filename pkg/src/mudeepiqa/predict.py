"""Global scores and patch-wise quality/weight maps for arbitrary images."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import RAW_SUFFIX, Image, PatchGeometryError, partition_patches, read_image
from .net import Model, PatchPrediction, aggregate, forward_patches

log = logging.getLogger(__name__)

# fixed rendering constants so overlays are comparable between runs
COLORMAP = "inferno"
OVERLAY_ALPHA = 0.45
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", RAW_SUFFIX)
CSV_FIELDS = ["id", "score", "map_quality_path", "map_weight_path", "elapsed_ms"]


@dataclass(frozen=True)
class PredictionResult:
    score: float  # denormalized
    patch_quality: np.ndarray  # rows x cols, denormalized
    patch_weight: np.ndarray  # rows x cols
    origins: list
    patch_size: int
    normalized_quality: np.ndarray
    label_mean: float = 0.0
    label_std: float = 1.0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.patch_quality.shape

    def normalized_score(self) -> float:
        return aggregate(PatchPrediction(self.normalized_quality.ravel(), self.patch_weight.ravel()))


def predict_image(model: Model, image: Image) -> PredictionResult:
    grid = partition_patches(image)
    pred = forward_patches(model, grid, training=False)
    score = float(model.denormalize(aggregate(pred)))
    shape = (grid.rows, grid.cols)
    yq = pred.qualities.reshape(shape)
    return PredictionResult(
        score=score,
        patch_quality=model.denormalize(yq),
        patch_weight=pred.weights.reshape(shape),
        origins=grid.origin_offsets,
        patch_size=grid.patch_size,
        normalized_quality=yq,
        label_mean=model.label_mean,
        label_std=model.label_std,
    )


def write_map_csv(values: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.17g")
    return path


def read_map_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def render_heatmap(
    result: PredictionResult,
    image: Image,
    which: str,
    out_path,
    model_fingerprint: str | None = None,
    normalized: bool = False,
) -> dict[str, Path]:
    """Write the map as CSV plus a PNG overlay and a JSON sidecar with the value range.

    The overlay shows the (cropped) grayscale image with the patch map,
    upsampled to patch blocks, alpha-blended on top.
    """
    from matplotlib import colormaps
    from PIL import Image as PILImage

    if which == "quality":
        values = result.normalized_quality if normalized else result.patch_quality
    elif which == "weight":
        values = result.patch_weight
    else:
        raise ValueError("which must be 'quality' or 'weight'")
    rows, cols = values.shape
    p = result.patch_size
    if image.height < rows * p or image.width < cols * p:
        raise PatchGeometryError(f"{rows}x{cols} patch map does not fit a {image.shape} image")
    out_path = Path(out_path)
    base = out_path.with_suffix("")
    csv_path = write_map_csv(values, base.with_suffix(".csv"))

    under = np.asarray(image.pixels[: rows * p, : cols * p], dtype=np.float64)
    span = np.ptp(under)
    under = (under - under.min()) / span if span > 0 else np.zeros_like(under)
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    block = np.kron(scaled, np.ones((p, p)))
    color = colormaps[COLORMAP](block)[..., :3]
    rgb = (1 - OVERLAY_ALPHA) * under[..., None] + OVERLAY_ALPHA * color
    png_path = base.with_suffix(".png")
    png_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(png_path)

    sidecar = {
        "map": which,
        "units": "normalized" if (normalized and which == "quality") else "label",
        "min": lo,
        "max": hi,
        "colormap": COLORMAP,
        "alpha": OVERLAY_ALPHA,
        "patch_size": p,
        "grid": [rows, cols],
        "model_fingerprint": model_fingerprint,
    }
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, indent=1))
    return {"csv": csv_path, "png": png_path, "json": json_path}


def _inputs(source) -> list[tuple[str, Path]]:
    """(id, path) pairs from a manifest object, manifest JSON path or directory."""
    from .degrade import DatasetManifest

    if isinstance(source, DatasetManifest):
        return [(e.id, source.image_path(e)) for e in source.entries if e.path]
    source = Path(source)
    if source.is_file() and source.suffix == ".json":
        return _inputs(DatasetManifest.load_json(source))
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return [(p.stem, p) for p in files]
    raise FileNotFoundError(f"no manifest or directory at {source}")


def predict_batch(model: Model, source, out_dir, heatmaps: bool = False) -> tuple[list[dict], list[dict], float]:
    """Predict every image of ``source``; per-file failures are recorded and skipped.

    Writes ``predictions.csv`` (and ``errors.json`` when anything failed) to
    ``out_dir``; map paths are relative to it. Returns (rows, errors,
    total seconds spent on model prediction).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, errors = [], []
    total = 0.0
    for eid, path in _inputs(source):
        try:
            image = read_image(path)
            t = time.perf_counter()
            result = predict_image(model, image)
            elapsed = time.perf_counter() - t
        except (ValueError, OSError) as exc:
            errors.append({"id": eid, "path": str(path), "error": f"{type(exc).__name__}: {exc}"})
            log.warning("skipping %s: %s", path, exc)
            continue
        total += elapsed
        qpath = Path("maps") / f"{eid}_quality.csv"
        wpath = Path("maps") / f"{eid}_weight.csv"
        if heatmaps:
            render_heatmap(result, image, "quality", out_dir / qpath, model.arch_fingerprint)
            render_heatmap(result, image, "weight", out_dir / wpath, model.arch_fingerprint)
        else:
            write_map_csv(result.patch_quality, out_dir / qpath)
            write_map_csv(result.patch_weight, out_dir / wpath)
        rows.append(
            {
                "id": eid,
                "score": result.score,
                "map_quality_path": str(qpath),
                "map_weight_path": str(wpath),
                "elapsed_ms": elapsed * 1e3,
            }
        )
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "score": repr(r["score"])})
    if errors:
        (out_dir / "errors.json").write_text(json.dumps(errors, indent=1))
    (out_dir / "predictions.json").write_text(
        json.dumps(
            {
                "model_fingerprint": model.arch_fingerprint,
                "target_name": model.target_name,
                "n_images": len(rows),
                "n_errors": len(errors),
                "prediction_seconds": total,
            },
            indent=1,
        )
    )
    return rows, errors, total


def read_predictions(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["id"]: float(r["score"]) for r in csv.DictReader(fh)}
