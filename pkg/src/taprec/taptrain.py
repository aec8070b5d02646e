"""Time-arrow pretraining: losses, pair augmentation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

from .errors import ConfigError, DimensionError, TrainingDivergenceError
from .model import BackboneConfig, HeadKind, ModelBundle, init_random, to_input
from .synthmovie import Movie

log = logging.getLogger(__name__)

FORWARD = 0
BACKWARD = 1


@dataclass(frozen=True)
class TapLossConfig:
    lam: float = 0.01
    tau: float = 0.2

    def validate(self) -> None:
        if not self.lam >= 0:
            raise ConfigError("tap.lambda", f"must lie in [0, inf), got {self.lam}")
        if not self.tau > 0:
            raise ConfigError("tap.tau", f"must lie in (0, inf), got {self.tau}")


@dataclass(frozen=True)
class AugmentationConfig:
    flip_pair_prob: float = 0.5
    rotation_deg: tuple[float, float] = (0.0, 360.0)
    elastic_alpha: float = 1.5
    elastic_sigma: float = 3.0
    translation_px: float = 2.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 2.0
    intensity_shift: tuple[float, float] = (-8.0, 8.0)
    intensity_scale: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.flip_pair_prob <= 1.0:
            raise ConfigError("augment.flip_pair_prob", "must lie in [0, 1]")
        for name in ("rotation_deg", "scale_range", "intensity_shift", "intensity_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment.{name}", f"empty range ({lo}, {hi})")
        if self.scale_range[0] <= 0 or self.intensity_scale[0] < 0:
            raise ConfigError("augment.scale_range", "scales must be positive")
        for name in ("elastic_alpha", "translation_px", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"augment.{name}", "must be >= 0")
        if self.elastic_sigma <= 0:
            raise ConfigError("augment.elastic_sigma", "must be > 0")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentationConfig":
        """Identity augmentation; pass overrides to switch individual transforms on."""
        base = dict(flip_pair_prob=0.0, rotation_deg=(0.0, 0.0), elastic_alpha=0.0, translation_px=0.0,
                    scale_range=(1.0, 1.0), noise_sigma=0.0, intensity_shift=(0.0, 0.0),
                    intensity_scale=(1.0, 1.0))
        base.update(overrides)
        return cls(**base)


def decorrelation_loss(z: torch.Tensor, tau: float = 0.2) -> torch.Tensor:
    """Penalty on correlated channels of a feature batch ``z`` (B, C, H, W).

    Channel inner products are taken over flattened spatial positions and
    divided by the number of positions. Each row of the (C, C) product
    matrix is softmax-normalized at temperature ``tau``; the loss is the
    mean negative log of the diagonal, averaged over the batch.
    """
    if z.ndim == 3:
        z = z[None]
    c = z.shape[1]
    if c < 2:
        raise ConfigError("backbone.feature_channels", f"decorrelation needs >= 2 channels, got {c}")
    zf = z.flatten(2)
    gram = zf @ zf.transpose(1, 2) / zf.shape[-1]
    log_a = torch.log_softmax(gram / tau, dim=-1)
    return -torch.diagonal(log_a, dim1=-2, dim2=-1).mean(dim=-1).mean()


def tap_total_loss(y, logits: torch.Tensor, z: torch.Tensor, config: TapLossConfig = TapLossConfig()):
    """Softmax cross-entropy on direction logits plus ``lam`` times the decorrelation term.

    Returns ``(total, ce, decorr)``.
    """
    y = torch.as_tensor(y, dtype=torch.long)
    if logits.ndim == 1:
        logits, y = logits[None], y.reshape(1)
    if logits.shape[-1] != 2:
        raise DimensionError(f"expected 2 logits, got {logits.shape[-1]}")
    ce = F.cross_entropy(logits, y)
    dec = decorrelation_loss(z, config.tau) if config.lam > 0 else z.new_zeros(())
    return ce + config.lam * dec, ce, dec


def _warp_coords(size: int, rng: np.random.Generator, cfg: AugmentationConfig):
    """Shared rotation/scale/elastic sampling grid for one pair, or None if identity."""
    lo, hi = cfg.rotation_deg
    angle = math.radians(rng.uniform(lo, hi)) if hi > lo else math.radians(lo)
    slo, shi = cfg.scale_range
    scale = rng.uniform(slo, shi) if shi > slo else slo
    identity = lo == hi == 0.0 and scale == 1.0 and cfg.elastic_alpha == 0.0
    if identity:
        return None
    c = (size - 1) / 2.0
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    pi, pj = ii - c, jj - c
    cos, sin = math.cos(angle), math.sin(angle)
    src_i = (cos * pi - sin * pj) / scale + c
    src_j = (sin * pi + cos * pj) / scale + c
    if cfg.elastic_alpha > 0:
        for grid in (src_i, src_j):
            field = ndimage.gaussian_filter(rng.uniform(-1, 1, (size, size)), cfg.elastic_sigma, mode="reflect")
            peak = np.abs(field).max()
            if peak > 0:
                grid += cfg.elastic_alpha * field / peak
    return src_i, src_j


def augment_pair(pair, direction_label: int = FORWARD, config: AugmentationConfig = AugmentationConfig(),
                 rng: np.random.Generator | None = None):
    """Augment one crop pair; returns ``((crop_a, crop_b), label)`` as float32 in 8-bit units.

    ``pair`` is a ``(crop_a, crop_b)`` tuple or anything with ``crop_t`` and
    ``crop_t1`` attributes. Rotation, scaling and elastic warping are shared by
    both crops; translation, noise and intensity jitter are drawn per crop.
    A temporal flip swaps the crops and inverts the direction label.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if hasattr(pair, "crop_t"):
        a, b = pair.crop_t, pair.crop_t1
    else:
        a, b = pair
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"need two equal square crops, got {a.shape} and {b.shape}")
    size = a.shape[0]
    label = int(direction_label)

    coords = _warp_coords(size, rng, config)
    out = []
    for crop in (a, b):
        shift = rng.uniform(-config.translation_px, config.translation_px, 2) if config.translation_px > 0 else None
        if coords is not None or shift is not None:
            if coords is None:
                ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
                ci, cj = ii, jj
            else:
                ci, cj = coords
            if shift is not None:
                ci, cj = ci + shift[0], cj + shift[1]
            crop = ndimage.map_coordinates(crop, [ci, cj], order=1, mode="reflect").astype(np.float32)
        slo, shi = config.intensity_scale
        if shi > slo:
            crop = crop * np.float32(rng.uniform(slo, shi))
        elif slo != 1.0:
            crop = crop * np.float32(slo)
        lo, hi = config.intensity_shift
        if hi > lo:
            crop = crop + np.float32(rng.uniform(lo, hi))
        elif lo != 0.0:
            crop = crop + np.float32(lo)
        if config.noise_sigma > 0:
            crop = crop + rng.normal(0.0, config.noise_sigma, crop.shape).astype(np.float32)
        out.append(crop)

    if config.flip_pair_prob > 0 and rng.random() < config.flip_pair_prob:
        out.reverse()
        label = 1 - label
    return (out[0], out[1]), label


def _pair_batch(frames: np.ndarray, n: int, patch: int, rng: np.random.Generator):
    t_max, h, w = frames.shape[0] - 1, frames.shape[1], frames.shape[2]
    if patch > min(h, w):
        raise DimensionError(f"patch {patch} larger than frame {h}x{w}")
    if t_max < 1:
        raise DimensionError("need at least 2 frames")
    ts = rng.integers(0, t_max, n)
    rs = rng.integers(0, h - patch + 1, n)
    cs = rng.integers(0, w - patch + 1, n)
    a = np.stack([frames[t, r:r + patch, c:c + patch] for t, r, c in zip(ts, rs, cs)])
    b = np.stack([frames[t + 1, r:r + patch, c:c + patch] for t, r, c in zip(ts, rs, cs)])
    return a, b, ts


def tap_forward(bundle: ModelBundle, a: torch.Tensor, b: torch.Tensor):
    """Encode both batches in one pass; returns ``(logits, z_all)``."""
    z = bundle.backbone(torch.cat([a, b]))
    z_a, z_b = z[: len(a)], z[len(a):]
    return bundle.head(z_a, z_b), z


def _predict_direction(logits: torch.Tensor) -> torch.Tensor:
    # ties go to FORWARD
    return (logits[:, 1] > logits[:, 0]).long()


def evaluate_tap(bundle: ModelBundle, crops_a, crops_b, labels, loss_config: TapLossConfig = TapLossConfig(),
                 batch_size: int = 128) -> dict:
    """Mean total loss, decorrelation loss and accuracy on fixed pairs (8-bit crops)."""
    bundle.eval()
    labels = np.asarray(labels)
    tot = dec = 0.0
    correct = 0
    n = len(labels)
    with torch.no_grad():
        for i in range(0, n, batch_size):
            a = to_input(crops_a[i:i + batch_size])
            b = to_input(crops_b[i:i + batch_size])
            y = torch.as_tensor(labels[i:i + batch_size], dtype=torch.long)
            logits, z = tap_forward(bundle, a, b)
            total, _, d = tap_total_loss(y, logits, z, loss_config)
            k = len(y)
            tot += float(total) * k
            dec += float(d) * k
            correct += int((_predict_direction(logits) == y).sum())
    return {"total_loss": tot / n, "decorr_loss": dec / n, "accuracy": correct / n}


def fixed_tap_pairs(frames: np.ndarray, n: int, patch: int, seed: int):
    """Deterministic evaluation pairs: random crops, half of them time-flipped."""
    rng = np.random.default_rng(seed)
    a, b, ts = _pair_batch(frames, n, patch, rng)
    flip = rng.random(n) < 0.5
    a2 = np.where(flip[:, None, None], b, a)
    b2 = np.where(flip[:, None, None], a, b)
    return a2, b2, flip.astype(np.int64), ts


def pretrain_tap(
    movie: Movie,
    backbone_config: BackboneConfig = BackboneConfig(),
    loss_config: TapLossConfig = TapLossConfig(),
    aug_config: AugmentationConfig = AugmentationConfig(),
    epochs: int = 40,
    patch: int = 96,
    seed: int = 0,
    *,
    val_movie: Movie | None = None,
    val_fraction: float = 0.2,
    batch_size: int = 32,
    steps_per_epoch: int = 32,
    lr: float = 1e-3,
    lr_min: float = 1e-5,
    head_width: int = 32,
    n_val_pairs: int = 512,
) -> tuple[ModelBundle, list[dict]]:
    """Train backbone and TAP head jointly with Adam and cosine learning-rate decay.

    Crop pairs are drawn afresh every epoch. Validation uses ``val_movie`` if
    given, otherwise the last ``val_fraction`` of the frames (training then
    uses only the frames before them).

    Returns the trained bundle and a per-epoch history of
    ``{epoch, split, total_loss, decorr_loss, accuracy}`` rows.
    """
    loss_config.validate()
    aug_config.validate()
    frames = movie.frames
    if val_movie is not None:
        train_frames, val_frames = frames, val_movie.frames
    else:
        cut = int(round(len(frames) * (1 - val_fraction)))
        if cut < 2 or len(frames) - cut < 2:
            raise DimensionError("movie too short for a held-out validation frame range")
        train_frames, val_frames = frames[:cut], frames[cut:]
    m = backbone_config.input_multiple
    if patch % m:
        raise DimensionError(f"patch {patch} must be divisible by {m}")

    bundle = init_random(backbone_config, seed, HeadKind.TAP, head_width)
    params = list(bundle.backbone.parameters()) + list(bundle.head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs * steps_per_epoch, 1), eta_min=lr_min)
    rng = np.random.default_rng(seed + 1)
    aug_rng = np.random.default_rng(aug_config.seed + 7919 * seed)
    va, vb, vy, _ = fixed_tap_pairs(val_frames, n_val_pairs, patch, seed + 2)

    history: list[dict] = []
    for epoch in range(1, epochs + 1):
        bundle.backbone.train()
        bundle.head.train()
        tot = dec = 0.0
        correct = n_seen = 0
        for step in range(steps_per_epoch):
            a, b, _ = _pair_batch(train_frames, batch_size, patch, rng)
            pairs = [augment_pair((x, y), FORWARD, aug_config, aug_rng) for x, y in zip(a, b)]
            xa = torch.from_numpy(np.stack([p[0][0] for p in pairs]) / np.float32(255.0))[:, None]
            xb = torch.from_numpy(np.stack([p[0][1] for p in pairs]) / np.float32(255.0))[:, None]
            y = torch.tensor([p[1] for p in pairs], dtype=torch.long)
            logits, z = tap_forward(bundle, xa, xb)
            total, _, d = tap_total_loss(y, logits, z, loss_config)
            if not torch.isfinite(total):
                raise TrainingDivergenceError(epoch, step, float(total))
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            tot += total.item() * len(y)
            dec += d.item() * len(y)
            correct += int((_predict_direction(logits.detach()) == y).sum())
            n_seen += len(y)
        history.append({"epoch": epoch, "split": "train", "total_loss": tot / n_seen,
                        "decorr_loss": dec / n_seen, "accuracy": correct / n_seen})
        val = evaluate_tap(bundle, va, vb, vy, loss_config)
        history.append({"epoch": epoch, "split": "val", **val})
        log.info("epoch %d train loss %.4f acc %.3f | val loss %.4f acc %.3f", epoch,
                 history[-2]["total_loss"], history[-2]["accuracy"], val["total_loss"], val["accuracy"])

    bundle.eval()
    bundle.provenance = {
        "stage": "pretrain_tap", "epochs": epochs, "patch": patch, "seed": seed,
        "lambda": loss_config.lam, "tau": loss_config.tau, "batch_size": batch_size,
        "steps_per_epoch": steps_per_epoch, "lr": lr, "lr_min": lr_min,
        "init": "kaiming_uniform", "init_seed": seed,
    }
    return bundle, history


HISTORY_FIELDS = ("epoch", "split", "total_loss", "decorr_loss", "accuracy")


def write_history_csv(history: Sequence[dict], path: str | Path, fields: Sequence[str] = HISTORY_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def plot_history(history: Sequence[dict], out_dir: str | Path, prefix: str = "tap") -> list[Path]:
    """Loss, decorrelation-loss and accuracy curves per split."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    for key in ("total_loss", "decorr_loss", "accuracy"):
        fig, ax = plt.subplots(figsize=(4, 3))
        for split, color in (("train", "tab:orange"), ("val", "tab:blue")):
            rows = [r for r in history if r["split"] == split]
            ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], color=color, label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel(key)
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"{prefix}_{key}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths
