from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from taprec.datapipe import CriterionKind, LabelCriterion, build_dataset
from taprec.errors import ConfigError, DataError, RunError, WrongHeadError
from taprec.evaluate import compare_strategies, evaluate_event_bundle
from taprec.eventtrain import (
    STRATEGIES,
    FeatureSource,
    TrainingStrategy,
    event_logits,
    event_loss,
    predict_event,
    probabilities_from_logits,
    train_event_head,
)
from taprec.model import BackboneConfig, HeadKind, init_random, state_digest

TINY = BackboneConfig(1, 4, 4, 2)


@pytest.fixture(scope="module")
def arrays(small_movie):
    movie, mask = small_movie
    data, manifest = build_dataset(movie, mask, 8, LabelCriterion(CriterionKind.ANY_SIZE_EITHER, 1),
                                   pairs_per_frame_pair=12, seed=0)
    return data.subset(manifest.balanced_train), data.subset(manifest.test)


def test_strategy_table():
    assert {n: (s.feature_source, s.head) for n, s in STRATEGIES.items()} == {
        "a0": (FeatureSource.TAP_PRETRAINED, HeadKind.LINEAR),
        "a1": (FeatureSource.TAP_PRETRAINED, HeadKind.RESNET),
        "b0": (FeatureSource.RANDOM_FIXED, HeadKind.LINEAR),
        "b1": (FeatureSource.RANDOM_FIXED, HeadKind.RESNET),
        "c0": (FeatureSource.RANDOM_TRAINED, HeadKind.LINEAR),
        "c1": (FeatureSource.RANDOM_TRAINED, HeadKind.RESNET),
    }
    assert all(STRATEGIES[n].name == n for n in STRATEGIES)
    assert TrainingStrategy.from_name("A1").default_epochs == 30 and STRATEGIES["b0"].default_epochs == 10
    with pytest.raises(ConfigError):
        TrainingStrategy.from_name("d0")


def test_event_loss_values():
    for label in (0, 1):
        assert abs(float(event_loss([0.0, 0.0], label)) - math.log(2)) < 1e-9
    assert float(event_loss([math.log(3), 0.0], 1)) == pytest.approx(-math.log(0.25), abs=1e-6)
    assert float(event_loss([math.log(3), 0.0], 0)) == pytest.approx(-math.log(0.75), abs=1e-6)
    assert float(event_loss([5.0, 2.0], 1)) == pytest.approx(float(event_loss([105.0, 102.0], 1)), abs=1e-9)


def test_probabilities_and_ties():
    p = probabilities_from_logits(np.array([[0.0, 0.0], [0.0, 2.0]]))
    assert p[0] == 0.5 and p[1] > 0.5
    logits = np.random.default_rng(0).normal(0, 4, (500, 2))
    assert np.array_equal(probabilities_from_logits(logits, 2.0) > 0.5, probabilities_from_logits(logits) > 0.5)


@pytest.mark.parametrize("name", ["b0", "b1"])
def test_frozen_backbone_is_untouched(arrays, name):
    train, _ = arrays
    ref = init_random(TINY, 7)
    bundle, hist = train_event_head(name, train, backbone_config=TINY, seed=7, epochs=2, head_width=4)
    assert state_digest(bundle.backbone) == state_digest(ref.backbone)
    assert bundle.provenance["strategy"] == name and len(hist) == 2


def test_pretrained_backbone_is_frozen_and_required(arrays):
    train, _ = arrays
    tap = init_random(TINY, 3)
    bundle, _ = train_event_head("a1", train, backbone_bundle=tap, epochs=1, head_width=4)
    assert state_digest(bundle.backbone) == state_digest(tap.backbone)
    with pytest.raises(ConfigError):
        train_event_head("a0", train, epochs=1)


def test_trained_backbone_changes(arrays):
    train, _ = arrays
    ref = init_random(TINY, 0)
    bundle, _ = train_event_head("c0", train, backbone_config=TINY, seed=0, epochs=1)
    assert state_digest(bundle.backbone) != state_digest(ref.backbone)


def test_zero_epochs_keep_initial_head(arrays):
    train, _ = arrays
    b1, _ = train_event_head("b0", train, backbone_config=TINY, seed=5, epochs=0)
    b2 = init_random(TINY, 5).with_head("linear", seed=6)
    assert state_digest(b1.head) == state_digest(b2.head)


def test_unlabeled_training_data_rejected(arrays):
    train, _ = arrays
    bad = train.subset(np.arange(len(train)))
    bad.labels[0] = -1
    with pytest.raises(DataError):
        train_event_head("b0", bad, backbone_config=TINY, epochs=1)


def test_predict_event_batch_order_and_errors(arrays):
    train, test = arrays
    bundle, _ = train_event_head("b0", train, backbone_config=TINY, epochs=1)
    p, y = predict_event(bundle, test)
    assert p.shape == (len(test),) and ((0 <= p) & (p <= 1)).all()
    assert np.array_equal(y, (p > 0.5).astype(int))
    rev, _ = predict_event(bundle, test.crops_t[::-1], test.crops_t1[::-1])
    assert np.allclose(rev[::-1], p, atol=1e-6)
    single, _ = predict_event(bundle, test.crops_t[0], test.crops_t1[0])
    assert float(single) == pytest.approx(p[0], abs=1e-6)
    bundle.temperature = 2.0
    assert np.array_equal(predict_event(bundle, test)[1], y)
    with pytest.raises(WrongHeadError):
        event_logits(init_random(TINY, 0), test.crops_t, test.crops_t1)


def test_compare_strategies_reuses_seeds(arrays):
    train, test = arrays
    _, runs = compare_strategies(train, test, ["b0"], n_runs=2, seeds=[4, 9], backbone_config=TINY, epochs=1)
    _, runs2 = compare_strategies(train, test, ["b0"], n_runs=2, seeds=[4, 9], backbone_config=TINY, epochs=1)
    for r1, r2 in zip(runs["b0"], runs2["b0"]):
        assert r1 == pytest.approx(r2, nan_ok=True)
    single, _ = train_event_head("b0", train, backbone_config=TINY, seed=9, epochs=1)
    assert evaluate_event_bundle(single, test).metrics == pytest.approx(runs["b0"][1], nan_ok=True)
    with pytest.raises(DataError):
        compare_strategies(train, test, ["b0"], n_runs=1)
    with pytest.raises(RunError) as err:
        compare_strategies(train, test, ["a0"], n_runs=2, epochs=1)
    assert err.value.strategy == "a0" and err.value.run_index == 0
