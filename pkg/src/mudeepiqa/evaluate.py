"""Rankings, Kendall rank correlation, regression summaries and timing benchmarks."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class KendallUndefined(ValueError):
    """tau-b has a zero denominator (one side entirely tied)."""


def _count_inversions(a: np.ndarray) -> int:
    """Number of pairs i < j with a[i] > a[j], by bottom-up merge sort."""
    a = list(a)
    n = len(a)
    buf = a[:]
    inv = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    inv += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k : k + mid - i] = a[i:mid]
            k += mid - i
            buf[k : k + hi - j] = a[j:hi]
        a, buf = buf, a
        width *= 2
    return inv


def _tied_pairs(sorted_vals) -> int:
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall_tau(x, y) -> float:
    """Tie-corrected Kendall tau-b in O(n log n) (Knight's algorithm)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D sequences of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two observations")
    n0 = n * (n - 1) // 2
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    ties_x = _tied_pairs(xs)
    ties_y = _tied_pairs(ys)
    # pairs tied on both coordinates
    pairs = np.stack([xs, ys], axis=1)
    _, joint = np.unique(pairs, axis=0, return_counts=True)
    ties_xy = int(np.sum(joint * (joint - 1) // 2))
    swaps = _count_inversions(ys)
    denom = (n0 - ties_x) * (n0 - ties_y)
    if denom == 0:
        raise KendallUndefined("Kendall tau undefined: all values tied on one side")
    num = n0 - ties_x - ties_y + ties_xy - 2 * swaps
    return float(np.clip(num / np.sqrt(float(denom)), -1.0, 1.0))


def group_means(scores, levels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    levels = np.asarray(levels)
    if scores.shape != levels.shape:
        raise ValueError("every score needs a level tag")
    uniq = np.unique(levels)
    return uniq, np.array([scores[levels == u].mean() for u in uniq])


def grouped_krcc(scores, artifact_levels, higher_is_better: bool = True) -> float:
    """Kendall tau between per-level mean scores and quality.

    Quality is the negated artifact level, so a method whose mean score falls
    as the artifact grows gets +1. Pass ``higher_is_better=False`` for targets
    where larger scores mean worse images (e.g. resolution in pixels).
    """
    uniq, means = group_means(scores, artifact_levels)
    if uniq.size < 2:
        raise ValueError("need at least two distinct artifact levels")
    sign = 1.0 if higher_is_better else -1.0
    return kendall_tau(sign * means, -uniq.astype(np.float64))


# --------------------------------------------------------------------------- rankings


@dataclass
class RankedSet:
    entries: list[dict]  # id, score, true_artifact_level, sample_label; descending score

    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "id", "score", "level", "sample"])
            for rank, e in enumerate(self.entries, start=1):
                w.writerow([rank, e["id"], repr(e["score"]), e["true_artifact_level"], e["sample_label"]])
        return path


def build_ranking(predictions: dict, truths: dict) -> RankedSet:
    """Descending ranking; equal scores keep id order.

    ``truths`` maps id -> {"level": ..., "sample": ...}.
    """
    missing = sorted(set(predictions) - set(truths))
    if missing:
        raise KeyError(f"no ground truth for ids {missing[:5]}")
    entries = [
        {
            "id": i,
            "score": float(s),
            "true_artifact_level": truths[i].get("level"),
            "sample_label": truths[i].get("sample"),
        }
        for i, s in predictions.items()
    ]
    entries.sort(key=lambda e: e["id"])
    entries.sort(key=lambda e: -e["score"])
    return RankedSet(entries)


def plot_ranking(ranked: RankedSet, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(ranked.entries)), 3))
    ax.bar(range(len(ranked.entries)), [e["score"] for e in ranked.entries], color="0.4")
    ax.set_xticks(range(len(ranked.entries)), ranked.ids(), rotation=90, fontsize=6)
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------- regression


def regression_report(targets, predictions, label_mean: float = 0.0, label_std: float = 1.0, scatter_path=None) -> dict:
    """OLS fit of predictions on targets plus MSE in normalized label units."""
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if t.shape != p.shape or t.size < 3:
        raise ValueError("need at least three (target, prediction) pairs")
    if np.ptp(t) == 0 or np.ptp(p) == 0:
        raise ValueError("degenerate variance in targets or predictions")
    design = np.column_stack([t, np.ones_like(t)])
    (slope, intercept), *_ = np.linalg.lstsq(design, p, rcond=None)
    r = float(np.corrcoef(t, p)[0, 1])
    mse = float(np.mean(((p - t) / label_std) ** 2))
    if scatter_path is not None:
        scatter_path = Path(scatter_path)
        scatter_path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(scatter_path, np.column_stack([t, p]), delimiter=",", header="target,prediction", comments="", fmt="%.17g")
    return {"slope": float(slope), "intercept": float(intercept), "r": r, "mse": mse, "n": int(t.size)}


# --------------------------------------------------------------------------- timing


def hardware_note() -> str:
    import torch

    return (
        f"{platform.machine()} {platform.processor() or ''} {os.cpu_count()} cpus; "
        f"torch {torch.__version__} {torch.get_num_threads()} threads; python {platform.python_version()}"
    ).strip()


@dataclass
class BenchReport:
    n_images: int
    prediction_metrics: float  # direct FRC over the images, seconds
    prediction_model: float  # CNN prediction over the same images, seconds
    label_computation: float | None = None
    training: float | None = None
    hardware: str = field(default_factory=hardware_note)
    notes: str = "stages run serially in one process; wall-clock from time.perf_counter"

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def bench(images, model, label_computation: float | None = None, training: float | None = None) -> BenchReport:
    """Wall-clock of direct FRC versus model prediction over the same images.

    ``images`` is a list of Image objects (already in memory so file I/O is
    excluded from both pathways).
    """
    from .frc import frc_resolution
    from .predict import predict_image

    images = list(images)
    t = time.perf_counter()
    for img in images:
        frc_resolution(img)
    t_frc = time.perf_counter() - t if images else 0.0
    t = time.perf_counter()
    for img in images:
        predict_image(model, img)
    t_model = time.perf_counter() - t if images else 0.0
    if training is None and model.meta.get("train_seconds") is not None:
        training = float(model.meta["train_seconds"])
    return BenchReport(len(images), t_frc, t_model, label_computation, training)
