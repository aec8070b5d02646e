from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import brute_force_confusion
from taprec.errors import DataError
from taprec.evaluate import (
    ConfusionMatrix,
    confusion_and_prf,
    summarize_runs,
    temporal_error_distribution,
    total_variation,
    write_comparison_csv,
)


def _from_counts(tn, fp, fn, tp):
    pred = [0] * tn + [1] * fp + [0] * fn + [1] * tp
    label = [0] * tn + [0] * fp + [1] * fn + [1] * tp
    return pred, label


def test_reported_confusion_counts():
    cm, m = confusion_and_prf(*_from_counts(15502, 1028, 272, 2198))
    assert (cm.tn, cm.fp, cm.fn, cm.tp) == (15502, 1028, 272, 2198)
    want = {"prec0": 0.98, "rec0": 0.94, "prec1": 0.68, "rec1": 0.89}
    for k, v in want.items():
        assert abs(m[k] - v) < 0.005
    assert m["prec0"] == pytest.approx(15502 / 15774)
    assert m["rec1"] == pytest.approx(2198 / 2470)


def test_recount_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(0, 51))
        pred, label = rng.integers(0, 2, n), rng.integers(0, 2, n)
        cm, m = confusion_and_prf(pred, label)
        tn, fp, fn, tp = brute_force_confusion(pred.tolist(), label.tolist())
        assert (cm.tn, cm.fp, cm.fn, cm.tp) == (tn, fp, fn, tp)
        assert (m["prec1"] == tp / (tp + fp)) if tp + fp else math.isnan(m["prec1"])
        assert (m["rec0"] == tn / (tn + fp)) if tn + fp else math.isnan(m["rec0"])


def test_undefined_and_invalid():
    _, m = confusion_and_prf([0, 0], [0, 0])
    assert math.isnan(m["prec1"]) and math.isnan(m["rec1"]) and m["prec0"] == 1.0
    with pytest.raises(DataError):
        confusion_and_prf([0, 1], [0])
    with pytest.raises(DataError):
        confusion_and_prf([2], [0])


def test_error_profile_percentages():
    pred = [1, 1, 0, 1, 0]
    label = [0, 0, 1, 1, 0]
    frames = [0, 2, 2, 3, 1]
    prof = temporal_error_distribution(pred, label, frames, "fp", n_frames=5)
    assert prof.counts == [1, 0, 1, 0, 0] and prof.percentages == [50.0, 0, 50.0, 0, 0] and prof.total == 2
    empty = temporal_error_distribution([0], [0], [0], "tp", n_frames=2)
    assert empty.empty and empty.percentages == [0.0, 0.0]
    assert total_variation(prof, prof) == 0.0
    other = temporal_error_distribution(pred, label, frames, "actual_pos", n_frames=5)
    assert total_variation(prof, other) == pytest.approx(0.5)
    with pytest.raises(DataError):
        temporal_error_distribution(pred, label, frames, "nope")
    with pytest.raises(DataError):
        temporal_error_distribution(pred, label, frames, "fp", n_frames=3)


def test_summary_uses_sample_std(tmp_path):
    rows = [{"prec0": a, "rec0": a, "prec1": a, "rec1": math.nan} for a in (0.2, 0.4, 0.6)]
    table = summarize_runs(rows)
    assert table["prec0"] == pytest.approx((0.4, 0.2))
    assert all(math.isnan(v) for v in table["rec1"])
    write_comparison_csv({"a0": table}, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("group,prec0_mean,prec0_std") and lines[1].startswith("a0,0.400000,0.200000")


def test_confusion_total():
    assert ConfusionMatrix(1, 2, 3, 4).total == 10
