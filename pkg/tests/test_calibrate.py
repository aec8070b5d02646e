from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import calibrated_logit_set, ece_oracle
from taprec.calibrate import (
    calibrate,
    confidence_and_correctness,
    expected_calibration_error,
    fit_temperature,
    plot_reliability,
    reliability_diagram_data,
    softmax,
)
from taprec.errors import DataError

TEMPERATURES = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0]


def test_temperature_never_changes_hard_predictions():
    logits = np.random.default_rng(0).normal(0, 3, (10_000, 2))
    base = np.argmax(softmax(logits), axis=-1)
    for t in TEMPERATURES:
        assert np.array_equal(np.argmax(softmax(logits / t), axis=-1), base)


def test_ece_examples():
    assert expected_calibration_error([0.9] * 10, [1] * 9 + [0]) == pytest.approx(0.0, abs=1e-12)
    assert expected_calibration_error([0.9] * 10, [0] * 10) == pytest.approx(0.9)
    with pytest.raises(DataError):
        expected_calibration_error([], [])
    with pytest.raises(DataError):
        expected_calibration_error([1.2], [1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]) | st.floats(0, 1), st.integers(0, 1)),
                min_size=1, max_size=60),
       st.integers(1, 15))
def test_ece_matches_loop_oracle(pairs, n_bins):
    conf = [c for c, _ in pairs]
    corr = [k for _, k in pairs]
    assert expected_calibration_error(conf, corr, n_bins) == pytest.approx(ece_oracle(conf, corr, n_bins), abs=1e-12)


def test_reliability_bins_are_well_formed():
    conf, corr = np.array([0.55, 0.65, 0.65, 1.0]), np.array([1, 0, 1, 1])
    bins = reliability_diagram_data(conf, corr, 10)
    assert len(bins) == 10 and sum(b.count for b in bins) == 4
    assert bins[6].count == 2 and bins[6].accuracy == 0.5 and bins[9].count == 1
    assert bins[0].empty and not bins[6].empty


@pytest.mark.parametrize("seed", range(3))
def test_inflated_logits_recover_calibration(seed):
    logits, labels = calibrated_logit_set(seed)
    ece0 = expected_calibration_error(*confidence_and_correctness(logits, labels))
    t, degenerate = fit_temperature(10 * logits, labels)
    ece1 = expected_calibration_error(*confidence_and_correctness(10 * logits, labels, t))
    assert not degenerate
    assert abs(t - 10) < 0.1
    assert abs(ece1 - ece0) < 1e-3


@pytest.mark.parametrize("objective", ["ece", "nll"])
def test_fitting_never_worsens_ece(objective):
    rng = np.random.default_rng(1)
    for _ in range(5):
        logits = rng.normal(0, rng.uniform(0.5, 6), (800, 2))
        labels = (rng.random(800) < 1 / (1 + np.exp(logits[:, 0] - logits[:, 1]))).astype(int)
        report = calibrate(logits, labels, objective=objective)
        if objective == "ece":
            assert report.ece_after <= report.ece_before
        assert report.temperature > 0


def test_constant_logits_are_degenerate():
    t, degenerate = fit_temperature(np.zeros((10, 2)), [0, 1] * 5)
    assert degenerate and t == 1.0


def test_single_class_labels_rejected():
    with pytest.raises(DataError):
        fit_temperature(np.random.default_rng(0).normal(size=(10, 2)), [1] * 10)


def test_reliability_plot(tmp_path):
    logits, labels = calibrated_logit_set(0, per_level=20)
    report = calibrate(logits, labels)
    plot_reliability(report.bins_after, report.ece_after, tmp_path / "r.png", "after")
    assert (tmp_path / "r.png").stat().st_size > 0
    assert report.to_dict()["n_bins"] == 10
