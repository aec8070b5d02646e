"""Confusion matrices, temporal error profiles, strategy comparison and the content-view study."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .errors import DataError, DimensionError, RunError
from .model import ModelBundle, to_input
from .synthmovie import Movie

UNDEFINED = math.nan
CATEGORIES = ("tp", "fp", "fn", "tn", "actual_pos", "actual_neg")


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def metrics(self) -> dict[str, float]:
        """Per-class precision and recall; ``nan`` marks a zero denominator."""

        def ratio(num, den):
            return num / den if den else UNDEFINED

        return {
            "prec0": ratio(self.tn, self.tn + self.fn),
            "rec0": ratio(self.tn, self.tn + self.fp),
            "prec1": ratio(self.tp, self.tp + self.fp),
            "rec1": ratio(self.tp, self.tp + self.fn),
        }


def _as_binary(x, name):
    x = np.asarray(x).ravel()
    if x.size and not np.isin(x, (0, 1)).all():
        raise DataError(f"{name} must contain only 0 and 1")
    return x.astype(np.int64)


def confusion_and_prf(predictions, labels) -> tuple[ConfusionMatrix, dict[str, float]]:
    p = _as_binary(predictions, "predictions")
    y = _as_binary(labels, "labels")
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    cm = ConfusionMatrix(
        tn=int(np.sum((p == 0) & (y == 0))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tp=int(np.sum((p == 1) & (y == 1))),
    )
    return cm, cm.metrics()


@dataclass
class TemporalErrorProfile:
    category: str
    frame_indices: list[int]
    percentages: list[float]
    counts: list[int]
    total: int
    empty: bool


def _category_mask(p, y, category):
    return {
        "tp": (p == 1) & (y == 1),
        "fp": (p == 1) & (y == 0),
        "fn": (p == 0) & (y == 1),
        "tn": (p == 0) & (y == 0),
        "actual_pos": y == 1,
        "actual_neg": y == 0,
    }[category]


def temporal_error_distribution(predictions, labels, frame_indices, category: str = "fp",
                                n_frames: int | None = None) -> TemporalErrorProfile:
    """Share (in percent) of a prediction category falling on each frame index.

    Pairs are bucketed by their earlier frame index.
    """
    if category not in CATEGORIES:
        raise DataError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    p = _as_binary(predictions, "predictions")
    y = _as_binary(labels, "labels")
    t = np.asarray(frame_indices, dtype=np.int64).ravel()
    if not (p.shape == y.shape == t.shape):
        raise DataError("predictions, labels and frame indices must be aligned")
    if t.size and t.min() < 0:
        raise DataError("frame indices must be non-negative")
    n = n_frames if n_frames is not None else (int(t.max()) + 1 if t.size else 0)
    if t.size and t.max() >= n:
        raise DataError(f"frame index {int(t.max())} outside movie of {n} frames")
    counts = np.bincount(t[_category_mask(p, y, category)], minlength=n)[:n]
    total = int(counts.sum())
    if total == 0:
        pct = [0.0] * n
    else:
        pct = (100.0 * counts / total).tolist()
    return TemporalErrorProfile(category, list(range(n)), pct, counts.tolist(), total, total == 0)


def total_variation(p: TemporalErrorProfile, q: TemporalErrorProfile) -> float:
    """Total variation distance between two profiles treated as distributions."""
    a = np.asarray(p.percentages) / 100.0
    b = np.asarray(q.percentages) / 100.0
    return 0.5 * float(np.abs(a - b).sum())


METRIC_NAMES = ("prec0", "rec0", "prec1", "rec1")


def summarize_runs(rows: Sequence[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation per metric over runs, ignoring undefined values."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([r[name] for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if len(vals) == 0:
            out[name] = (UNDEFINED, UNDEFINED)
        elif len(vals) == 1:
            out[name] = (float(vals[0]), UNDEFINED)
        else:
            out[name] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out


@dataclass
class EventEvaluation:
    confusion: ConfusionMatrix
    metrics: dict[str, float]
    probabilities: np.ndarray
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"confusion": asdict(self.confusion), "metrics": self.metrics, "n": self.confusion.total}


def evaluate_event_bundle(bundle: ModelBundle, arrays) -> EventEvaluation:
    """Predict every labeled pair of ``arrays`` and score it against its label."""
    from .eventtrain import predict_event

    probs, pred = predict_event(bundle, arrays)
    cm, metrics = confusion_and_prf(pred, arrays.labels)
    return EventEvaluation(cm, metrics, probs, pred)


def compare_strategies(
    train,
    test,
    strategies: Sequence[str],
    n_runs: int = 10,
    seeds: Sequence[int] | None = None,
    **train_kwargs,
) -> tuple[dict[str, dict[str, tuple[float, float]]], dict[str, list[dict[str, float]]]]:
    """Repeat train+test cycles per strategy and summarize metrics as mean and sample std.

    Run ``i`` of every strategy uses ``seeds[i]`` (default ``i``), which
    drives the head initialization, the random backbone where one is used,
    and the minibatch order. Extra keyword arguments go to
    ``train_event_head`` (e.g. ``backbone_bundle``, ``epochs``).
    Returns the summary table and the per-run metric rows.
    """
    from .eventtrain import train_event_head

    if n_runs < 2:
        raise DataError(f"n_runs must be >= 2, got {n_runs}")
    seeds = list(range(n_runs)) if seeds is None else list(seeds)
    if len(seeds) != n_runs:
        raise DataError(f"{len(seeds)} seeds given for {n_runs} runs")
    table, runs = {}, {}
    for name in strategies:
        rows = []
        for i, seed in enumerate(seeds):
            try:
                bundle, _ = train_event_head(name, train, seed=seed, **train_kwargs)
                rows.append(evaluate_event_bundle(bundle, test).metrics)
            except Exception as exc:
                raise RunError(name, i, exc) from exc
        runs[name] = rows
        table[name] = summarize_runs(rows)
    return table, runs


def write_comparison_csv(table: dict[str, dict[str, tuple[float, float]]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
        for group, stats in table.items():
            w.writerow([group] + [f"{v:.6f}" for m in METRIC_NAMES for v in stats[m]])


def write_profiles_csv(profiles: Sequence[TemporalErrorProfile], path: str | Path) -> None:
    n = max(len(p.percentages) for p in profiles)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [p.category for p in profiles])
        for i in range(n):
            w.writerow([i] + [f"{p.percentages[i]:.6f}" if i < len(p.percentages) else "" for p in profiles])


def plot_profiles(profiles: Sequence[TemporalErrorProfile], path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    for prof in profiles:
        ax.plot(prof.frame_indices, prof.percentages, label=prof.category)
    ax.set_xlabel("frame index")
    ax.set_ylabel("% of category total")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def resample_frames(frames: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resampling with an antialiasing prefilter when shrinking; returns uint8."""
    if factor == 1:
        return np.asarray(frames)
    x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)[:, None]
    h, w = x.shape[-2:]
    size = (int(round(h * factor)), int(round(w * factor)))
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=factor < 1)
    return np.clip(np.rint(y[:, 0].numpy()), 0, 255).astype(np.uint8)


@dataclass
class ContentViewResult:
    crop_size_factor: float
    resolution_factor: float
    crop_size: int
    accuracies: list[float]
    mean: float
    std: float

    def to_dict(self) -> dict:
        return asdict(self)


def tap_accuracy_content_view(
    bundle: ModelBundle,
    movie: Movie,
    crop_size_factor: float = 1.0,
    resolution_factor: float = 1.0,
    n_runs: int = 3,
    *,
    training_crop: int | None = None,
    n_pairs: int = 1000,
    seed: int = 0,
) -> ContentViewResult:
    """TAP accuracy on crops of ``crop_size_factor * training_crop`` from frames resampled by ``resolution_factor``.

    Each run draws a fresh set of random crop pairs (half time-flipped);
    the result carries mean and sample std over runs.
    """
    from .taptrain import evaluate_tap, fixed_tap_pairs

    for name, f in (("crop_size_factor", crop_size_factor), ("resolution_factor", resolution_factor)):
        if f not in (0.5, 1, 2):
            raise DataError(f"{name} must be one of 0.5, 1, 2; got {f}")
    if training_crop is None:
        training_crop = int(bundle.provenance.get("patch", 96))
    crop = int(round(training_crop * crop_size_factor))
    frames = resample_frames(movie.frames, resolution_factor)
    if crop > min(frames.shape[1:]):
        raise DimensionError(f"crop {crop} larger than resampled frame {frames.shape[1:]}")
    m = bundle.backbone_config.input_multiple
    if crop % m:
        raise DimensionError(f"crop {crop} must be divisible by {m}")
    accs = []
    for run in range(n_runs):
        a, b, y, _ = fixed_tap_pairs(frames, n_pairs, crop, seed + run)
        accs.append(evaluate_tap(bundle, a, b, y)["accuracy"])
    arr = np.array(accs)
    return ContentViewResult(crop_size_factor, resolution_factor, crop, accs, float(arr.mean()),
                             float(arr.std(ddof=1)) if n_runs > 1 else 0.0)
