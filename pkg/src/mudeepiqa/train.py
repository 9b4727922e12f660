"""Label normalization, the weighted-patch loss and the training loop."""

from __future__ import annotations

import copy
import csv
import json
import logging
import platform
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .degrade import DatasetManifest
from .imagecore import partition_patches
from .net import Model, PatchPrediction

log = logging.getLogger(__name__)


class LabelError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


# --------------------------------------------------------------------------- labels


def zscore_fit(train_labels) -> tuple[float, float]:
    """Mean and population standard deviation of the training labels."""
    x = np.asarray(train_labels, dtype=np.float64)
    if x.size < 2 or not np.all(np.isfinite(x)):
        raise LabelError("need at least two finite training labels")
    std = float(x.std())
    if std == 0:
        raise LabelError("training labels have zero standard deviation")
    return float(x.mean()), std


def zscore_apply(label, mean: float, std: float):
    return (np.asarray(label, dtype=np.float64) - mean) / std


def zscore_invert(value, mean: float, std: float):
    return np.asarray(value, dtype=np.float64) * std + mean


# --------------------------------------------------------------------------- loss


@dataclass(frozen=True)
class LossBreakdown:
    E_w: float
    E_p: float
    E_wp: float


def loss_terms(y: torch.Tensor, alpha: torch.Tensor, q_t: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Image-level and patch-level absolute errors for one single-image batch."""
    estimate = torch.sum(alpha * y) / torch.sum(alpha)
    e_w = torch.abs(estimate - q_t)
    e_p = torch.mean(torch.abs(y - q_t))
    return e_w, e_p


def loss_wp(pred: PatchPrediction, q_t: float) -> LossBreakdown:
    y = np.asarray(pred.qualities, dtype=np.float64)
    a = np.asarray(pred.weights, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty prediction")
    e_w = abs(float(np.sum(a * y) / np.sum(a)) - q_t)
    e_p = float(np.mean(np.abs(y - q_t)))
    return LossBreakdown(e_w, e_p, e_w + e_p)


# --------------------------------------------------------------------------- batching


def make_batches(patches, batch_patches: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle one image's patches into full batches; the remainder is dropped."""
    arr = patches.patches if hasattr(patches, "patches") else np.asarray(patches)
    n = arr.shape[0]
    if n < batch_patches:
        warnings.warn(f"image has {n} patches, fewer than one batch of {batch_patches}; skipped", stacklevel=2)
        return []
    order = rng.permutation(n)
    k = n // batch_patches
    return [arr[order[i * batch_patches : (i + 1) * batch_patches]] for i in range(k)]


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_patches: int = 128
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    checkpoint_policy: str = "final"  # or "best_validation"
    label_stats: tuple | None = None  # (mean, std); fitted on train labels when None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_patches < 1 or self.epochs < 0:
            raise ValueError("batch_patches must be >= 1 and epochs >= 0")
        if self.checkpoint_policy not in ("final", "best_validation"):
            raise ValueError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        self.betas = tuple(self.betas)


def _labels_for(entries, labels: dict | None) -> list[float]:
    out = []
    for e in entries:
        value = labels.get(e.id) if labels is not None else e.label
        if value is None:
            raise LabelError(f"labels missing for entry {e.id}")
        if not np.isfinite(value):
            raise LabelError(f"non-finite label for entry {e.id}")
        out.append(float(value))
    return out


class _PatchCache:
    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, torch.Tensor] = {}

    def __call__(self, entry) -> torch.Tensor:
        t = self._cache.get(entry.id)
        if t is None:
            grid = partition_patches(self.manifest.load(entry))
            t = torch.from_numpy(np.array(grid.patches, dtype=np.float32)).unsqueeze(1)
            self._cache[entry.id] = t
        return t


def image_estimate(model: Model, x: torch.Tensor) -> float:
    """Weighted aggregate over all patches of one image, inference mode."""
    model.net.eval()
    with torch.no_grad():
        y, a = model.net(x)
    return float(torch.sum(a * y) / torch.sum(a))


def validate(model: Model, entries, targets, patches) -> tuple[float, float]:
    """(mean squared, mean absolute) image-level residual over ``entries``."""
    if not entries:
        return float("nan"), float("nan")
    res = np.array([image_estimate(model, patches(e)) - q for e, q in zip(entries, targets)])
    return float(np.mean(res**2)), float(np.mean(np.abs(res)))


def parameter_digest(model: Model) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(model.parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def train_model(
    model: Model,
    manifest: DatasetManifest,
    labels: dict | None = None,
    config: TrainConfig | None = None,
    target_name: str | None = None,
    progress=None,
) -> tuple[Model, list[dict]]:
    """Fit ``model`` on the train split of ``manifest``.

    Labels come from ``labels`` (id -> value) or the manifest's label slots.
    Every batch holds patches of a single image. Returns the model selected by
    the checkpoint policy and one history row per epoch.
    """
    config = config or TrainConfig()
    train_entries = manifest.split("train")
    val_entries = manifest.split("val")
    if not train_entries:
        raise LabelError("manifest has no training entries")
    train_raw = _labels_for(train_entries, labels)
    val_raw = _labels_for(val_entries, labels)
    mean, std = config.label_stats if config.label_stats is not None else zscore_fit(train_raw)
    if std <= 0:
        raise LabelError("label std must be > 0")
    model.label_mean, model.label_std = float(mean), float(std)
    if target_name is not None:
        model.target_name = target_name
    elif manifest.label_source:
        model.target_name = manifest.label_source
    q_train = zscore_apply(train_raw, mean, std)
    q_val = zscore_apply(val_raw, mean, std)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    patches = _PatchCache(manifest)
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)

    history: list[dict] = []
    best = (np.inf, None)
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.net.train()
        losses = []
        for i in rng.permutation(len(train_entries)):
            x_img = patches(train_entries[i])
            for batch in make_batches(x_img.numpy(), config.batch_patches, rng):
                x = torch.from_numpy(batch)
                y, a = model.net(x)
                e_w, e_p = loss_terms(y, a, float(q_train[i]))
                loss = e_w + e_p
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, image {train_entries[i].id}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
        val_mse, val_mae = validate(model, val_entries, q_val, patches)
        row = {
            "epoch": epoch,
            "train_E_wp": float(np.mean(losses)) if losses else float("nan"),
            "val_metric": val_mse,
            "val_mae": val_mae,
            "elapsed_s": time.perf_counter() - t0,
        }
        history.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d train E_wp %.4f val %.4f", epoch, row["train_E_wp"], val_mse)
        if config.checkpoint_policy == "best_validation" and val_mse < best[0]:
            best = (val_mse, copy.deepcopy(model.net.state_dict()))
    if config.checkpoint_policy == "best_validation" and best[1] is not None:
        model.net.load_state_dict(best[1])
    model.net.eval()
    model.meta.update(
        {
            "train_config": _jsonable(asdict(config)),
            "epochs_run": config.epochs,
            "train_seconds": time.perf_counter() - t0,
        }
    )
    return model, history


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_E_wp", "val_metric", "val_mae", "elapsed_s"])
        w.writeheader()
        w.writerows(history)
    return path


def run_metadata(config: TrainConfig, model: Model, manifest: DatasetManifest) -> dict:
    return {
        "config": _jsonable(asdict(config)),
        "seed": config.seed,
        "global_seed": manifest.global_seed,
        "label_source": manifest.label_source,
        "label_mean": model.label_mean,
        "label_std": model.label_std,
        "target_name": model.target_name,
        "arch_fingerprint": model.arch_fingerprint,
        "package_version": __version__,
        "torch_version": torch.__version__,
        "numeric_backend": f"torch CPU, {torch.get_num_threads()} threads",
        "reproducibility": "bit-identical history on the same machine and thread count (CPU kernels are deterministic)",
        "platform": platform.platform(),
    }


def read_label_csv(path) -> dict[str, float]:
    """External scores: CSV with columns ``id,label``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["id"]] = float(row["label"])
    return out
