"""Crop-pair datasets: extraction, labeling criteria, splitting, balancing, storage."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .synthmovie import EventMask, Movie

DEFAULT_AREA_THRESHOLD = 40
DEFAULT_PAIRS_PER_FRAME_PAIR = 1000


@dataclass
class CropPairSample:
    crop_t: np.ndarray
    crop_t1: np.ndarray
    mask_t: np.ndarray
    mask_t1: np.ndarray
    t: int
    origin: tuple[int, int]
    label: int | None = None
    dt: int = 1

    @property
    def t1(self) -> int:
        return self.t + self.dt

    def swapped(self) -> "CropPairSample":
        return CropPairSample(self.crop_t1, self.crop_t, self.mask_t1, self.mask_t, self.t, self.origin, self.label, self.dt)


class CriterionKind(str, enum.Enum):
    ANY_SIZE_BOTH = "any-size-both"
    ANY_SIZE_EITHER = "any-size-either"
    SIZE_FILTER_EITHER = "size-filter-either"


@dataclass(frozen=True)
class LabelCriterion:
    kind: CriterionKind = CriterionKind.SIZE_FILTER_EITHER
    area_threshold: int = DEFAULT_AREA_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "kind", CriterionKind(self.kind))
        if self.kind is CriterionKind.SIZE_FILTER_EITHER and self.area_threshold <= 0:
            raise ConfigError("area_threshold", "must be > 0 for size-filter-either")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "area_threshold": int(self.area_threshold)}


@dataclass
class DatasetManifest:
    train: list[int]
    val: list[int]
    test: list[int]
    positives: dict[str, int] = field(default_factory=dict)
    criterion: dict | None = None
    crop_size: int | None = None
    dt: int = 1
    seed: int = 0
    balanced_train: list[int] | None = None
    spatial_holdout: bool = False

    def split(self, name: str) -> list[int]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def to_dict(self) -> dict:
        return {
            "train": list(map(int, self.train)),
            "val": list(map(int, self.val)),
            "test": list(map(int, self.test)),
            "balanced_train": None if self.balanced_train is None else list(map(int, self.balanced_train)),
            "positives": {k: int(v) for k, v in self.positives.items()},
            "counts": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
            "criterion": self.criterion,
            "crop_size": self.crop_size,
            "dt": self.dt,
            "seed": self.seed,
            "spatial_holdout": self.spatial_holdout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            train=d["train"], val=d["val"], test=d["test"],
            positives=d.get("positives", {}), criterion=d.get("criterion"),
            crop_size=d.get("crop_size"), dt=d.get("dt", 1), seed=d.get("seed", 0),
            balanced_train=d.get("balanced_train"), spatial_holdout=d.get("spatial_holdout", False),
        )


def extract_crop_pairs(
    movie: Movie,
    mask: EventMask,
    crop_size: int = 48,
    pairs_per_frame_pair: int = DEFAULT_PAIRS_PER_FRAME_PAIR,
    seed: int = 0,
) -> list[CropPairSample]:
    """Sample same-location crops from every consecutive frame pair.

    Crops are views into the movie arrays, so large sample lists stay cheap.
    """
    frames, masks = movie.frames, mask.masks
    if frames.shape != masks.shape:
        raise DimensionError(f"movie shape {frames.shape} != mask shape {masks.shape}")
    n, h, w = frames.shape
    if n < 2:
        raise DimensionError("movie needs at least 2 frames")
    if crop_size > min(h, w) or crop_size < 1:
        raise DimensionError(f"crop_size {crop_size} does not fit {h}x{w} frames")
    rng = np.random.default_rng(seed)
    s = crop_size
    samples = []
    for t in range(n - 1):
        rows = rng.integers(0, h - s + 1, size=pairs_per_frame_pair)
        cols = rng.integers(0, w - s + 1, size=pairs_per_frame_pair)
        for r, c in zip(rows.tolist(), cols.tolist()):
            samples.append(
                CropPairSample(
                    frames[t, r:r + s, c:c + s], frames[t + 1, r:r + s, c:c + s],
                    masks[t, r:r + s, c:c + s], masks[t + 1, r:r + s, c:c + s],
                    t, (r, c),
                )
            )
    return samples


def _label_from_areas(a_t, a_t1, criterion: LabelCriterion):
    kind = criterion.kind
    if kind is CriterionKind.ANY_SIZE_BOTH:
        return (a_t > 0) & (a_t1 > 0)
    if kind is CriterionKind.ANY_SIZE_EITHER:
        return (a_t > 0) | (a_t1 > 0)
    return np.maximum(a_t, a_t1) >= criterion.area_threshold


def apply_label_criterion(sample: CropPairSample, criterion: LabelCriterion) -> int:
    a_t = int(np.count_nonzero(sample.mask_t))
    a_t1 = int(np.count_nonzero(sample.mask_t1))
    return int(_label_from_areas(a_t, a_t1, criterion))


def label_samples(samples: Sequence[CropPairSample], criterion: LabelCriterion) -> np.ndarray:
    """Label every sample in place and return the labels as an int array."""
    labels = np.array([apply_label_criterion(s, criterion) for s in samples], dtype=np.int64)
    for s, y in zip(samples, labels.tolist()):
        s.label = y
    return labels


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios", "need three positive split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios", f"must sum to 1, got {sum(ratios)}")


def split_dataset(
    samples: Sequence[CropPairSample],
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    *,
    spatial_holdout: bool = False,
    frame_width: int | None = None,
) -> DatasetManifest:
    """Shuffle and split samples into train/val/test.

    Split sizes are ``floor(ratio * N)`` for val and test; train takes the rest.
    With ``spatial_holdout`` the frame is instead cut into vertical stripes
    (widths proportional to the ratios) and each crop goes to the stripe that
    fully contains it; crops straddling a stripe border are dropped.
    """
    _check_ratios(ratios)
    n = len(samples)
    rng = np.random.default_rng(seed)
    if spatial_holdout:
        if frame_width is None:
            raise ConfigError("frame_width", "required with spatial_holdout")
        bounds = np.cumsum([0.0, *ratios]) * frame_width
        parts: list[list[int]] = [[], [], []]
        for i, s in enumerate(samples):
            c0 = s.origin[1]
            c1 = c0 + s.crop_t.shape[1]
            for k in range(3):
                if c0 >= bounds[k] - 1e-9 and c1 <= bounds[k + 1] + 1e-9:
                    parts[k].append(i)
                    break
        train, val, test = (rng.permutation(p).tolist() for p in parts)
    else:
        perm = rng.permutation(n).tolist()
        n_train, n_val, _ = _split_sizes(n, ratios)
        train, val, test = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    manifest = DatasetManifest(train=train, val=val, test=test, seed=seed, spatial_holdout=spatial_holdout)
    if n and all(s.label is not None for s in samples):
        manifest.positives = {name: int(sum(samples[i].label for i in ids))
                              for name, ids in (("train", train), ("val", val), ("test", test))}
    if n:
        manifest.crop_size = int(samples[0].crop_t.shape[0])
        manifest.dt = samples[0].dt
    return manifest


def balance_indices(labels: Sequence[int], seed: int = 0) -> list[int]:
    """Indices (into ``labels``) of a class-balanced, shuffled subset."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError(f"cannot balance: {len(pos)} positives, {len(neg)} negatives")
    rng = np.random.default_rng(seed)
    k = min(len(pos), len(neg))
    if len(pos) > k:
        pos = rng.choice(pos, size=k, replace=False)
    if len(neg) > k:
        neg = rng.choice(neg, size=k, replace=False)
    out = np.concatenate([pos, neg])
    return rng.permutation(out).tolist()


def balance_training_set(train_samples: Sequence[CropPairSample], seed: int = 0) -> list[CropPairSample]:
    labels = [s.label for s in train_samples]
    if any(y is None for y in labels):
        raise DataError("all samples must be labeled before balancing")
    return [train_samples[i] for i in balance_indices(labels, seed)]


@dataclass
class CropPairArrays:
    """Columnar view of a sample list, the form models and storage consume."""

    crops_t: np.ndarray
    crops_t1: np.ndarray
    masks_t: np.ndarray
    masks_t1: np.ndarray
    t: np.ndarray
    origins: np.ndarray
    labels: np.ndarray  # -1 where unlabeled

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @classmethod
    def from_samples(cls, samples: Sequence[CropPairSample]) -> "CropPairArrays":
        if not samples:
            raise DataError("empty sample list")
        return cls(
            crops_t=np.stack([s.crop_t for s in samples]).astype(np.uint8),
            crops_t1=np.stack([s.crop_t1 for s in samples]).astype(np.uint8),
            masks_t=np.stack([s.mask_t for s in samples]).astype(np.uint8),
            masks_t1=np.stack([s.mask_t1 for s in samples]).astype(np.uint8),
            t=np.array([s.t for s in samples], dtype=np.int64),
            origins=np.array([s.origin for s in samples], dtype=np.int64).reshape(-1, 2),
            labels=np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64),
        )

    def subset(self, idx) -> "CropPairArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return CropPairArrays(self.crops_t[idx], self.crops_t1[idx], self.masks_t[idx], self.masks_t1[idx],
                              self.t[idx], self.origins[idx], self.labels[idx])

    def to_samples(self) -> list[CropPairSample]:
        return [
            CropPairSample(self.crops_t[i], self.crops_t1[i], self.masks_t[i], self.masks_t1[i],
                           int(self.t[i]), (int(self.origins[i, 0]), int(self.origins[i, 1])),
                           None if self.labels[i] < 0 else int(self.labels[i]))
            for i in range(len(self))
        ]


# Sample container layout (all integers little-endian):
#   magic      8 bytes  b"TAPRECDS"
#   version    u16
#   crop_size  u16
#   n_records  u32
#   meta_len   u32, followed by meta_len bytes of UTF-8 JSON metadata
#   offsets    n_records x u64, absolute byte offset of each record
#   records    each: t u32, row u32, col u32, label i8 (-1 = unlabeled),
#              then crop_t, crop_t1, mask_t, mask_t1 as crop_size^2 u8 each
DATASET_MAGIC = b"TAPRECDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sHHII")
_RECORD_HEAD = struct.Struct("<IIIb")


def write_samples(path: str | Path, arrays: CropPairArrays, meta: dict | None = None) -> None:
    n = len(arrays)
    s = arrays.crops_t.shape[1]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    rec_size = _RECORD_HEAD.size + 4 * s * s
    base = _HEADER.size + len(meta_bytes) + 8 * n
    offsets = base + rec_size * np.arange(n, dtype=np.uint64)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, s, n, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(offsets.astype("<u8").tobytes())
        for i in range(n):
            fh.write(_RECORD_HEAD.pack(int(arrays.t[i]), int(arrays.origins[i, 0]), int(arrays.origins[i, 1]),
                                       int(arrays.labels[i])))
            for a in (arrays.crops_t, arrays.crops_t1, arrays.masks_t, arrays.masks_t1):
                fh.write(np.ascontiguousarray(a[i], dtype=np.uint8).tobytes())


def read_samples(path: str | Path) -> tuple[CropPairArrays, dict]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: truncated sample container")
    magic, version, s, n, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    pos = _HEADER.size
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    offsets = np.frombuffer(buf, dtype="<u8", count=n, offset=pos)
    px = s * s
    out = {k: np.empty((n, s, s), dtype=np.uint8) for k in ("crops_t", "crops_t1", "masks_t", "masks_t1")}
    t = np.empty(n, dtype=np.int64)
    origins = np.empty((n, 2), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i, off in enumerate(offsets.tolist()):
        if off + _RECORD_HEAD.size + 4 * px > len(buf):
            raise DataError(f"{path}: record {i} out of bounds")
        t[i], origins[i, 0], origins[i, 1], labels[i] = _RECORD_HEAD.unpack_from(buf, off)
        p = off + _RECORD_HEAD.size
        for k in ("crops_t", "crops_t1", "masks_t", "masks_t1"):
            out[k][i] = np.frombuffer(buf, dtype=np.uint8, count=px, offset=p).reshape(s, s)
            p += px
    return CropPairArrays(t=t, origins=origins, labels=labels, **out), meta


def save_dataset(out_dir: str | Path, arrays: CropPairArrays, manifest: DatasetManifest) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples_path = out_dir / "samples.bin"
    manifest_path = out_dir / "manifest.json"
    write_samples(samples_path, arrays, {"crop_size": manifest.crop_size, "dt": manifest.dt})
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return {"samples": samples_path, "manifest": manifest_path}


def load_dataset(path: str | Path) -> tuple[CropPairArrays, DatasetManifest]:
    path = Path(path)
    arrays, _ = read_samples(path / "samples.bin")
    manifest = DatasetManifest.from_dict(json.loads((path / "manifest.json").read_text()))
    return arrays, manifest


def build_dataset(
    movie: Movie,
    mask: EventMask,
    crop_size: int = 48,
    criterion: LabelCriterion = LabelCriterion(),
    pairs_per_frame_pair: int = DEFAULT_PAIRS_PER_FRAME_PAIR,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    spatial_holdout: bool = False,
) -> tuple[CropPairArrays, DatasetManifest]:
    """Extract, label, split and balance in one go."""
    samples = extract_crop_pairs(movie, mask, crop_size, pairs_per_frame_pair, seed)
    labels = label_samples(samples, criterion)
    manifest = split_dataset(samples, ratios, seed + 1, spatial_holdout=spatial_holdout,
                             frame_width=movie.frames.shape[2])
    train = np.asarray(manifest.train, dtype=np.int64)
    manifest.balanced_train = train[balance_indices(labels[train], seed + 2)].tolist()
    manifest.criterion = criterion.to_dict()
    return CropPairArrays.from_samples(samples), manifest
