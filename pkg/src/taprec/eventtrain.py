"""Cell-event recognition heads trained on dense features under the six strategies."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .datapipe import CropPairArrays
from .errors import ConfigError, DataError, TrainingDivergenceError, WrongHeadError
from .model import BackboneConfig, HeadKind, ModelBundle, init_random, to_input

log = logging.getLogger(__name__)

NO_EVENT = 0
EVENT = 1


class FeatureSource(str, enum.Enum):
    TAP_PRETRAINED = "tap-pretrained"
    RANDOM_FIXED = "random-fixed"
    RANDOM_TRAINED = "random-trained"


@dataclass(frozen=True)
class TrainingStrategy:
    feature_source: FeatureSource
    head: HeadKind

    @property
    def name(self) -> str:
        letter = {FeatureSource.TAP_PRETRAINED: "a", FeatureSource.RANDOM_FIXED: "b",
                  FeatureSource.RANDOM_TRAINED: "c"}[self.feature_source]
        return f"{letter}{0 if self.head is HeadKind.LINEAR else 1}"

    @property
    def frozen(self) -> bool:
        return self.feature_source is not FeatureSource.RANDOM_TRAINED

    @property
    def default_epochs(self) -> int:
        return 10 if self.head is HeadKind.LINEAR else 30

    @classmethod
    def from_name(cls, name: str) -> "TrainingStrategy":
        try:
            return STRATEGIES[name.lower()]
        except KeyError:
            raise ConfigError("strategy", f"unknown strategy {name!r}; expected one of {sorted(STRATEGIES)}") from None


STRATEGIES = {
    "a0": TrainingStrategy(FeatureSource.TAP_PRETRAINED, HeadKind.LINEAR),
    "a1": TrainingStrategy(FeatureSource.TAP_PRETRAINED, HeadKind.RESNET),
    "b0": TrainingStrategy(FeatureSource.RANDOM_FIXED, HeadKind.LINEAR),
    "b1": TrainingStrategy(FeatureSource.RANDOM_FIXED, HeadKind.RESNET),
    "c0": TrainingStrategy(FeatureSource.RANDOM_TRAINED, HeadKind.LINEAR),
    "c1": TrainingStrategy(FeatureSource.RANDOM_TRAINED, HeadKind.RESNET),
}


def event_loss(logits, label) -> torch.Tensor:
    """Two-class softmax cross-entropy, ``-log softmax(logits)[label]``, batch-averaged."""
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.ndim == 1:
        logits, label = logits[None], label.reshape(1)
    return F.cross_entropy(logits, label)


def encode_crops(backbone, crops: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    backbone.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(crops), batch_size):
            out.append(backbone(to_input(crops[i:i + batch_size])))
    return torch.cat(out)


def _labels(arrays: CropPairArrays) -> torch.Tensor:
    if (arrays.labels < 0).any():
        raise DataError("training samples must be labeled")
    return torch.as_tensor(arrays.labels, dtype=torch.long)


def _prepare_bundle(strategy, backbone_bundle, backbone_config, init_seed, head_width, symmetrize):
    if strategy.feature_source is FeatureSource.TAP_PRETRAINED:
        if backbone_bundle is None:
            raise ConfigError("backbone", f"strategy {strategy.name} needs a pretrained TAP backbone")
        base = backbone_bundle
    else:
        cfg = backbone_config or (backbone_bundle.backbone_config if backbone_bundle else BackboneConfig())
        base = init_random(cfg, init_seed)
    bundle = base.with_head(strategy.head, seed=init_seed + 1, width=head_width, symmetrize=symmetrize)
    return bundle, base


def train_event_head(
    strategy: TrainingStrategy | str,
    train: CropPairArrays,
    *,
    backbone_bundle: ModelBundle | None = None,
    backbone_config: BackboneConfig | None = None,
    seed: int = 0,
    epochs: int | None = None,
    val: CropPairArrays | None = None,
    batch_size: int = 64,
    lr: float = 1e-3,
    head_width: int = 32,
    symmetrize: bool = False,
) -> tuple[ModelBundle, list[dict]]:
    """Train an event head (and, for strategies c0/c1, the backbone) with Adam at a constant rate.

    ``seed`` drives the random backbone (b/c strategies), the head
    initialization and the minibatch order. Frozen strategies encode every
    crop once up front and train the head on the cached features; their
    backbone weights are never touched.
    """
    if isinstance(strategy, str):
        strategy = TrainingStrategy.from_name(strategy)
    epochs = strategy.default_epochs if epochs is None else epochs
    bundle, base = _prepare_bundle(strategy, backbone_bundle, backbone_config, seed, head_width, symmetrize)
    y = _labels(train)
    yv = _labels(val) if val is not None else None
    rng = np.random.default_rng(seed + 2)

    if strategy.frozen:
        for p in bundle.backbone.parameters():
            p.requires_grad_(False)
        za, zb = encode_crops(bundle.backbone, train.crops_t), encode_crops(bundle.backbone, train.crops_t1)
        if val is not None:
            va, vb = encode_crops(bundle.backbone, val.crops_t), encode_crops(bundle.backbone, val.crops_t1)

        def batch_logits(idx, training=True):
            return bundle.head(za[idx], zb[idx])

        def val_logits():
            return torch.cat([bundle.head(va[i:i + 512], vb[i:i + 512]) for i in range(0, len(va), 512)])

        params = list(bundle.head.parameters())
    else:
        def batch_logits(idx, training=True):
            z = bundle.backbone(torch.cat([to_input(train.crops_t[idx]), to_input(train.crops_t1[idx])]))
            return bundle.head(z[: len(idx)], z[len(idx):])

        def val_logits():
            return event_logits(bundle, val.crops_t, val.crops_t1, as_tensor=True)

        params = list(bundle.backbone.parameters()) + list(bundle.head.parameters())

    opt = torch.optim.Adam(params, lr=lr)
    history = []
    n = len(y)
    for epoch in range(1, epochs + 1):
        bundle.head.train()
        if not strategy.frozen:
            bundle.backbone.train()
        perm = rng.permutation(n)
        total = 0.0
        for step, i in enumerate(range(0, n, batch_size)):
            idx = perm[i:i + batch_size]
            loss = event_loss(batch_logits(idx), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch, step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "split": "train", "loss": total / n})
        if val is not None:
            bundle.eval()
            with torch.no_grad():
                history.append({"epoch": epoch, "split": "val", "loss": event_loss(val_logits(), yv).item()})
        log.debug("%s epoch %d: %s", strategy.name, epoch, history[-1])

    for p in bundle.backbone.parameters():
        p.requires_grad_(True)
    bundle.eval()
    bundle.provenance = {
        "stage": "train_event_head",
        "strategy": strategy.name,
        "feature_source": strategy.feature_source.value,
        "head": strategy.head.value,
        "epochs": epochs,
        "seed": seed,
        "batch_size": batch_size,
        "lr": lr,
        "n_train": n,
        "backbone_provenance": base.provenance,
    }
    return bundle, history


def event_logits(bundle: ModelBundle, crops_t, crops_t1, batch_size: int = 256, as_tensor: bool = False):
    if not bundle.head_kind.is_event_head:
        raise WrongHeadError("bundle carries a TAP head, not an event head")
    bundle.eval()
    crops_t, crops_t1 = np.asarray(crops_t), np.asarray(crops_t1)
    single = crops_t.ndim == 2
    if single:
        crops_t, crops_t1 = crops_t[None], crops_t1[None]
    out = []
    with torch.no_grad():
        for i in range(0, len(crops_t), batch_size):
            a, b = to_input(crops_t[i:i + batch_size]), to_input(crops_t1[i:i + batch_size])
            z = bundle.backbone(torch.cat([a, b]))
            out.append(bundle.head(z[: len(a)], z[len(a):]))
    logits = torch.cat(out)
    if as_tensor:
        return logits
    logits = logits.numpy()
    return logits[0] if single else logits


def probabilities_from_logits(logits, temperature: float | None = None) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if temperature is not None:
        z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True))[..., EVENT]


def hard_labels(probabilities) -> np.ndarray:
    # a probability of exactly 0.5 is classified as no event
    return (np.asarray(probabilities) > 0.5).astype(np.int64)


def predict_event(bundle: ModelBundle, crops_t, crops_t1=None):
    """Event probability and hard label for one pair or a batch of pairs.

    Accepts ``(crops_t, crops_t1)`` arrays or a ``CropPairArrays``. The
    bundle's temperature, if set, divides the logits before the softmax.
    """
    if isinstance(crops_t, CropPairArrays):
        crops_t, crops_t1 = crops_t.crops_t, crops_t.crops_t1
    logits = event_logits(bundle, crops_t, crops_t1)
    p = probabilities_from_logits(logits, bundle.temperature)
    return p, hard_labels(p)
