from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from taprec.errors import CheckpointError, ConfigError, DimensionError
from taprec.model import (
    BackboneConfig,
    HeadKind,
    ModelBundle,
    TapHead,
    build_head,
    encode,
    event_head_forward,
    init_random,
    kaiming_uniform_init,
    load_bundle,
    save_bundle,
    state_digest,
    tap_head_forward,
)

TINY = BackboneConfig(n_blocks=2, base_channels=4, feature_channels=6, downsample_factor=2)


def test_stride_and_feature_shape():
    cfg = BackboneConfig()
    assert (cfg.output_stride, cfg.input_multiple) == (4, 8)
    bundle = init_random(TINY, 0)
    z = encode(np.zeros((32, 48), np.uint8), bundle)
    assert z.shape == (6, 16, 24)


def test_encode_rejects_bad_shapes():
    bundle = init_random(TINY, 0)
    with pytest.raises(DimensionError):
        encode(np.zeros((30, 32), np.uint8), bundle)
    with pytest.raises(DimensionError):
        encode(np.zeros((2, 32, 32), np.uint8), bundle)


@pytest.mark.parametrize("field,value", [("n_blocks", 0), ("base_channels", 0), ("downsample_factor", 1)])
def test_invalid_backbone_config(field, value):
    with pytest.raises(ConfigError) as err:
        init_random(BackboneConfig(**{field: value}), 0)
    assert field in str(err.value)


def test_init_is_deterministic_per_seed():
    a, b, c = init_random(TINY, 1), init_random(TINY, 1), init_random(TINY, 2)
    assert state_digest(a.backbone) == state_digest(b.backbone)
    assert state_digest(a.head) == state_digest(b.head)
    assert state_digest(a.backbone) != state_digest(c.backbone)


def test_kaiming_bound_for_fan_in_100():
    layer = nn.Linear(100, 5000)
    kaiming_uniform_init(layer, torch.Generator().manual_seed(0))
    bound = math.sqrt(2.0) * math.sqrt(3.0 / 100)  # == sqrt(6 / 100)
    w = layer.weight.detach().abs()
    assert float(w.max()) <= bound
    assert float(w.max()) > 0.99 * bound
    assert float(layer.bias.detach().abs().max()) == 0.0


def _equivariance_deviation(n_inits=10, n_pairs=100, channels=8, size=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for init in range(n_inits):
        head = TapHead(channels, hidden=16)
        kaiming_uniform_init(head, torch.Generator().manual_seed(1000 + init))
        for p in head.parameters():  # non-zero biases too
            p.data += 0.1 * torch.randn(p.shape, generator=g)
        za = torch.randn(n_pairs, channels, size, size, generator=g)
        zb = torch.randn(n_pairs, channels, size, size, generator=g)
        with torch.no_grad():
            fwd, bwd = head(za, zb), head(zb, za)
        worst = max(worst, float((fwd - bwd.flip(-1)).abs().max()))
    return worst


def test_tap_head_swap_equivariance():
    assert _equivariance_deviation() < 1e-5


def test_tap_head_forward_unbatched():
    bundle = init_random(TINY, 0)
    z = torch.randn(6, 4, 4)
    p, q = tap_head_forward(z, z.flip(-1), bundle)
    p2, q2 = tap_head_forward(z.flip(-1), z, bundle)
    assert torch.allclose(p, q2, atol=1e-6) and torch.allclose(q, p2, atol=1e-6)


@pytest.mark.parametrize("kind", [HeadKind.LINEAR, HeadKind.RESNET])
def test_event_heads(kind):
    head = build_head(kind, 32, 8, symmetrize=True)
    za, zb = torch.randn(32, 12, 12), torch.randn(32, 12, 12)
    out = event_head_forward(za, zb, head)
    assert out.shape == (2,)
    assert torch.equal(out, event_head_forward(zb, za, head))
    nn.init.zeros_(head.fc.weight)
    nn.init.zeros_(head.fc.bias)
    assert torch.equal(event_head_forward(za, zb, head), torch.zeros(2))
    with pytest.raises(DimensionError):
        event_head_forward(za, zb[:, :10], head)


def test_tap_head_cannot_be_symmetrized():
    with pytest.raises(ConfigError):
        build_head(HeadKind.TAP, 4, symmetrize=True)


def test_backbone_is_fully_convolutional():
    bundle = init_random(TINY, 3)
    frame = np.random.default_rng(0).integers(0, 256, (128, 128), dtype=np.uint8)
    full = encode(frame, bundle)
    crop = encode(frame[32:96, 32:96], bundle)
    # stride 2: the crop covers feature cells 16..48; the receptive field
    # radius is under 24 px, so the central cells see no crop border
    assert np.allclose(full[:, 28:36, 28:36], crop[:, 12:20, 12:20], atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0, 255))
def test_forward_is_finite(seed, scale):
    bundle = init_random(TINY, seed % 7)
    rng = np.random.default_rng(seed)
    frame = np.clip(rng.random((16, 16)) * scale, 0, 255).astype(np.uint8)
    z = encode(frame, bundle)
    with torch.no_grad():
        p, q = tap_head_forward(z, z[:, ::-1].copy(), bundle)
    assert np.isfinite(z).all() and math.isfinite(float(p)) and math.isfinite(float(q))


def test_checkpoint_round_trip(tmp_path):
    bundle = init_random(TINY, 5, HeadKind.RESNET, head_width=8, symmetrize=True)
    bundle.temperature = 1.7
    bundle.provenance["strategy"] = "a1"
    save_bundle(bundle, tmp_path / "m.ckpt")
    back = load_bundle(tmp_path / "m.ckpt")
    assert back.head_kind is HeadKind.RESNET and back.symmetrize and back.temperature == 1.7
    assert back.provenance["strategy"] == "a1"
    assert state_digest(back.backbone) == state_digest(bundle.backbone)
    assert state_digest(back.head) == state_digest(bundle.head)


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_bundle(init_random(TINY, 0), path)
    raw = bytearray(path.read_bytes())

    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_bundle(tmp_path / "flip.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_bundle(tmp_path / "magic.ckpt")

    version = bytearray(raw)
    version[8] = 9
    (tmp_path / "ver.ckpt").write_bytes(bytes(version))
    with pytest.raises(CheckpointError, match="version"):
        load_bundle(tmp_path / "ver.ckpt")

    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:5]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_bundle(tmp_path / "short.ckpt")


def test_with_head_keeps_backbone():
    bundle = init_random(TINY, 0)
    ev = bundle.with_head("linear", seed=4)
    assert isinstance(ev, ModelBundle) and ev.head_kind is HeadKind.LINEAR
    assert state_digest(ev.backbone) == state_digest(bundle.backbone)
    assert ev.backbone is not bundle.backbone
