from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from oracles import best_disjoint_pair, brute_force_window_mean, two_hotspot_map
from taprec.attribute import AttributionMap, grad_cam, render_explanation, top_k_regions, window_means
from taprec.errors import DimensionError, WrongHeadError
from taprec.model import BackboneConfig, init_random

TINY = BackboneConfig(2, 4, 6, 2)


def _frames(seed=0, size=32):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (size, size), dtype=np.uint8), rng.integers(0, 256, (size, size), dtype=np.uint8)


def _overlap(a, b):
    return abs(a.row - b.row) < a.size and abs(a.col - b.col) < a.size


def test_k2_matches_exhaustive_pair_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        heat = two_hotspot_map(rng)
        regions = top_k_regions(heat, k=2, region_size=8)
        (p, q), best = best_disjoint_pair(heat, 8)
        assert {(r.row, r.col) for r in regions} == {p, q}
        assert sum(r.score for r in regions) == pytest.approx(best, abs=1e-12)


def test_regions_disjoint_sorted_in_bounds():
    rng = np.random.default_rng(1)
    for _ in range(30):
        h, w = rng.integers(10, 40, 2)
        heat = rng.random((h, w)) ** 4
        s = int(rng.integers(1, min(h, w) + 1))
        regions = top_k_regions(heat, k=8, region_size=s)
        assert [r.rank for r in regions] == list(range(1, len(regions) + 1))
        assert all(a.score >= b.score for a, b in zip(regions, regions[1:]))
        assert all(not _overlap(a, b) for i, a in enumerate(regions) for b in regions[i + 1:])
        assert all(0 <= r.row <= h - s and 0 <= r.col <= w - s for r in regions)
        for r in regions:
            assert r.score == pytest.approx(brute_force_window_mean(heat, r.row, r.col, s))


def test_single_pixel_and_uniform_maps():
    heat = np.zeros((20, 20))
    heat[13, 4] = 1.0
    regions = top_k_regions(heat, k=3, region_size=5)
    first = regions[0]
    assert first.row <= 13 < first.row + 5 and first.col <= 4 < first.col + 5
    assert all(r.score == 0 for r in regions[1:])
    uniform = top_k_regions(np.ones((10, 10)), k=4, region_size=5)
    assert [(r.row, r.col) for r in uniform] == [(0, 0), (0, 5), (5, 0), (5, 5)]
    assert len(top_k_regions(np.ones((10, 10)), k=8, region_size=6)) == 1


def test_region_errors():
    with pytest.raises(DimensionError):
        top_k_regions(np.ones((4, 4)), k=1, region_size=5)


def test_window_means_against_loops():
    heat = np.random.default_rng(2).random((9, 7))
    means = window_means(heat, 3)
    assert means.shape == (7, 5)
    assert means[4, 2] == pytest.approx(brute_force_window_mean(heat, 4, 2, 3))


def test_grad_cam_shape_and_non_negative():
    bundle = init_random(TINY, 0)
    a, b = _frames(0, 30)  # not a multiple of 4: padded internally
    cam = grad_cam(bundle, a, b)
    assert cam.heatmap.shape == (30, 30) and (cam.heatmap >= 0).all()
    assert cam.target["class_index"] == 0 and cam.target["layer"] == "encoder.1"
    assert grad_cam(bundle, a, b, layer="deepest").target["layer"] == "encoder.2"
    assert grad_cam(bundle, a, b, layer=0).heatmap.shape == (30, 30)
    with pytest.raises(DimensionError):
        grad_cam(bundle, a, b, layer=3)


def test_grad_cam_invariant_to_logit_offset():
    bundle = init_random(TINY, 1)
    a, b = _frames(1)
    before = grad_cam(bundle, a, b).heatmap
    with torch.no_grad():
        bundle.head.fc.bias.add_(3.7)  # the shared scorer: both logits shift equally
    after = grad_cam(bundle, a, b).heatmap
    assert np.allclose(before, after, atol=1e-6 * max(before.max(), 1e-12))


def test_zero_activations_give_zero_map():
    bundle = init_random(TINY, 2)
    with torch.no_grad():
        for p in bundle.backbone.encoder[1].parameters():
            p.zero_()
    assert not grad_cam(bundle, *_frames(2)).heatmap.any()


def test_grad_cam_needs_tap_head():
    bundle = init_random(TINY, 0, "linear")
    with pytest.raises(WrongHeadError):
        grad_cam(bundle, *_frames())


def test_render_explanation(tmp_path):
    a, b = _frames(3)
    heat = two_hotspot_map(np.random.default_rng(3))
    attribution = AttributionMap(heat, {"head": "tap"})
    regions = top_k_regions(attribution, k=2, region_size=8)
    paths = render_explanation(a, b, attribution, regions, tmp_path)
    listing = json.loads(paths["regions"].read_text())
    assert [r["rank"] for r in listing["regions"]] == [1, 2]
    assert paths["overlay"].stat().st_size > 0 and paths["strips"].stat().st_size > 0
