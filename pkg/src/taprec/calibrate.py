"""Temperature scaling, expected calibration error and reliability-diagram data."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class BinRecord:
    lower: float
    upper: float
    midpoint: float
    mean_confidence: float
    accuracy: float
    count: int
    empty: bool


@dataclass
class CalibrationReport:
    temperature: float
    ece_before: float
    ece_after: float
    n_bins: int
    bins_before: list[BinRecord] = field(default_factory=list)
    bins_after: list[BinRecord] = field(default_factory=list)
    objective: str = "ece"
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def confidence_and_correctness(logits, labels, temperature: float = 1.0):
    """Max-class probability of ``softmax(logits / T)`` and whether the argmax is right.

    Ties in the argmax resolve to the lower class index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    probs = softmax(logits / temperature)
    pred = np.argmax(logits, axis=-1)
    return probs.max(axis=-1), (pred == labels).astype(np.float64)


def _bin_index(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    # bins are (lo, hi]; confidence 0 falls into the first bin
    idx = np.ceil(confidences * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def _check(confidences, correctness):
    c = np.asarray(confidences, dtype=np.float64).ravel()
    k = np.asarray(correctness, dtype=np.float64).ravel()
    if c.size == 0:
        raise DataError("no samples")
    if c.shape != k.shape:
        raise DataError(f"length mismatch: {c.size} confidences, {k.size} correctness values")
    if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
        raise DataError("confidences must lie in [0, 1]")
    return c, k


def reliability_diagram_data(confidences, correctness, n_bins: int = 10) -> list[BinRecord]:
    c, k = _check(confidences, correctness)
    idx = _bin_index(c, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=c, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=k, minlength=n_bins)
    out = []
    for b in range(n_bins):
        n = int(counts[b])
        out.append(BinRecord(
            lower=b / n_bins, upper=(b + 1) / n_bins, midpoint=(b + 0.5) / n_bins,
            mean_confidence=float(conf_sum[b] / n) if n else 0.0,
            accuracy=float(acc_sum[b] / n) if n else 0.0,
            count=n, empty=n == 0,
        ))
    return out


def expected_calibration_error(confidences, correctness, n_bins: int = 10) -> float:
    """Sum over equal-width bins of (bin size / N) * |accuracy - mean confidence|."""
    c, _ = _check(confidences, correctness)
    n = c.size
    return float(math.fsum(r.count / n * abs(r.accuracy - r.mean_confidence)
                           for r in reliability_diagram_data(confidences, correctness, n_bins) if r.count))


def _nll(logits, labels, t):
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _objective(logits, labels, n_bins, objective):
    if objective == "nll":
        return lambda t: _nll(logits, labels, t)
    return lambda t: expected_calibration_error(*confidence_and_correctness(logits, labels, t), n_bins)


def fit_temperature(
    logits,
    labels,
    n_bins: int = 10,
    t_min: float = 0.05,
    t_max: float = 20.0,
    n_grid: int = 400,
    objective: str = "ece",
    refine_iters: int = 60,
) -> tuple[float, bool]:
    """Temperature minimizing the objective on a log grid, refined by golden-section search.

    Returns ``(T, degenerate)``. ``degenerate`` is set (and T = 1) when every
    logit row is constant, since no temperature changes anything then.
    T = 1 is always a candidate, and ties go to the candidate closest to 1
    in log space.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) == 0 or len(logits) != len(labels):
        raise DataError("need non-empty (N, C) logits with N labels")
    if len(np.unique(labels)) < 2:
        raise DataError("validation labels must contain both classes")
    if np.all(np.ptp(logits, axis=-1) == 0):
        return 1.0, True
    if objective not in ("ece", "nll"):
        raise DataError(f"unknown objective {objective!r}")
    f = _objective(logits, labels, n_bins, objective)

    grid = np.unique(np.concatenate([np.geomspace(t_min, t_max, n_grid), [1.0]]))
    values = np.array([f(t) for t in grid])
    best = values.min()
    ties = np.flatnonzero(values == best)
    i = int(ties[np.argmin(np.abs(np.log(grid[ties])))])
    t_best, v_best = float(grid[i]), float(best)

    # golden-section search inside the neighbouring grid cells, in log T
    lo = math.log(grid[max(i - 1, 0)])
    hi = math.log(grid[min(i + 1, len(grid) - 1)])
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, f2 = f(math.exp(x1)), f(math.exp(x2))
    for _ in range(refine_iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = f(math.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = f(math.exp(x2))
        for x, v in ((x1, f1), (x2, f2)):
            if v < v_best:
                t_best, v_best = math.exp(x), v
    return t_best, False


def calibrate(val_logits, val_labels, test_logits=None, test_labels=None, n_bins: int = 10,
              objective: str = "ece", **search) -> CalibrationReport:
    """Fit T on the validation split and report ECE before/after on the test split.

    Without a test split the report is computed on the validation split.
    """
    t, degenerate = fit_temperature(val_logits, val_labels, n_bins, objective=objective, **search)
    if test_logits is None:
        test_logits, test_labels = val_logits, val_labels
    before = confidence_and_correctness(test_logits, test_labels, 1.0)
    after = confidence_and_correctness(test_logits, test_labels, t)
    return CalibrationReport(
        temperature=t,
        ece_before=expected_calibration_error(*before, n_bins),
        ece_after=expected_calibration_error(*after, n_bins),
        n_bins=n_bins,
        bins_before=reliability_diagram_data(*before, n_bins),
        bins_after=reliability_diagram_data(*after, n_bins),
        objective=objective,
        degenerate=degenerate,
    )


def plot_reliability(bins: list[BinRecord], ece: float, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    width = bins[0].upper - bins[0].lower
    filled = [b for b in bins if not b.empty]
    ax.bar([b.lower for b in filled], [b.accuracy for b in filled], width=width, align="edge",
           edgecolor="black", color="tab:blue", label="accuracy")
    ax.plot([0, 1], [0, 1], "r--", label="perfect calibration")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.text(0.03, 0.92, f"ECE = {ece:.4f}", transform=ax.transAxes)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
