"""Experiment configuration: schema, defaults, validation and conversion to module configs.

Configs are YAML documents with nested sections. Every key has a default,
so an empty document is a valid config. Unknown keys are errors. The
grammar and every field are documented in ``docs/config.md``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .datapipe import CriterionKind, LabelCriterion
from .errors import ConfigError
from .eventtrain import STRATEGIES
from .model import BackboneConfig
from .synthmovie import SynthConfig
from .taptrain import AugmentationConfig, TapLossConfig

STAGES = ("synth", "build-dataset", "pretrain", "train-head", "eval", "calibrate", "explain")
INF = math.inf


@dataclass(frozen=True)
class Field:
    default: Any
    check: Callable[[Any], str | None]


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def integer(lo=-INF, hi=INF):
    def check(v):
        if not isinstance(v, int) or isinstance(v, bool):
            return f"must be an integer in {_range(lo, hi, True, True)}"
        if not lo <= v <= hi:
            return f"must lie in {_range(lo, hi, True, True)}, got {v}"
        return None

    return check


def number(lo=-INF, hi=INF, lo_open=False, hi_open=False):
    def check(v):
        rng = _range(lo, hi, not lo_open, not hi_open)
        if not _is_num(v) or math.isnan(v):
            return f"must be a number in {rng}"
        if (v < lo or (lo_open and v == lo)) or (v > hi or (hi_open and v == hi)):
            return f"must lie in {rng}, got {v}"
        return None

    return check


def _range(lo, hi, lo_closed, hi_closed):
    def fmt(x):
        return "inf" if x == INF else "-inf" if x == -INF else f"{x:g}"

    left = "[" if lo_closed and lo != -INF else "("
    right = "]" if hi_closed and hi != INF else ")"
    return f"{left}{fmt(lo)}, {fmt(hi)}{right}"


def boolean(v):
    return None if isinstance(v, bool) else "must be true or false"


def string(v):
    return None if isinstance(v, str) and v else "must be a non-empty string"


def optional(check):
    return lambda v: None if v is None else check(v)


def choice(*options):
    return lambda v: None if v in options else f"must be one of {list(options)}, got {v!r}"


def layer_name(v):
    if v in ("skip", "deepest") or (isinstance(v, int) and not isinstance(v, bool)):
        return None
    return f"must be 'skip', 'deepest' or an encoder index, got {v!r}"


def number_pair(lo=-INF, hi=INF):
    inner = number(lo, hi)

    def check(v):
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            return "must be a list of two numbers [low, high]"
        for x in v:
            msg = inner(x)
            if msg:
                return msg
        if v[0] > v[1]:
            return f"low must not exceed high, got {list(v)}"
        return None

    return check


def subset_of(options):
    def check(v):
        if not isinstance(v, list) or not v:
            return f"must be a non-empty list drawn from {list(options)}"
        bad = [x for x in v if x not in options]
        if bad:
            return f"unknown entries {bad}; allowed: {list(options)}"
        if len(set(v)) != len(v):
            return "entries must be unique"
        return None

    return check


def ratios(v):
    if not isinstance(v, (list, tuple)) or len(v) != 3 or not all(_is_num(x) for x in v):
        return "must be a list of three numbers [train, val, test]"
    if any(x < 0 for x in v):
        return "ratios must be non-negative"
    if abs(sum(v) - 1.0) > 1e-9:
        return f"ratios must sum to 1, got {sum(v):g}"
    return None


_aug = AugmentationConfig()

SCHEMA: dict[str, Any] = {
    "seed": Field(0, integer(0)),
    "deterministic": Field(True, boolean),
    "out": Field("runs/default", string),
    "stages": Field(list(STAGES), subset_of(STAGES)),
    "synth": {
        "n_frames": Field(96, integer(2)),
        "height": Field(128, integer(1)),
        "width": Field(128, integer(1)),
        "n_cells_init": Field(48, integer(0)),
        "division_rate": Field(0.02, number(0, 1)),
        "death_rate": Field(0.01, number(0, 1)),
        "drift_px": Field(0.7, number(0)),
        "noise_sigma": Field(4.0, number(0)),
        "frame_interval_minutes": Field(15.0, number(0, lo_open=True)),
        "cell_sigma_px": Field(2.5, number(0, lo_open=True)),
        "seed": Field(None, optional(integer(0))),
    },
    "dataset": {
        "crop_size": Field(48, integer(1)),
        "criterion": Field(CriterionKind.SIZE_FILTER_EITHER.value, choice(*(k.value for k in CriterionKind))),
        "threshold": Field(40, integer(0)),
        "pairs_per_frame_pair": Field(1000, integer(1)),
        "ratios": Field([0.6, 0.2, 0.2], ratios),
        "spatial_holdout": Field(False, boolean),
    },
    "backbone": {
        "n_blocks": Field(3, integer(1)),
        "base_channels": Field(32, integer(1)),
        "feature_channels": Field(32, integer(1)),
        "downsample_factor": Field(2, integer(1)),
    },
    "tap": {
        "lambda": Field(0.01, number(0)),
        "tau": Field(0.2, number(0, lo_open=True)),
        "epochs": Field(40, integer(1)),
        "patch": Field(96, integer(1)),
        "batch_size": Field(32, integer(1)),
        "steps_per_epoch": Field(32, integer(1)),
        "lr": Field(1e-3, number(0, lo_open=True)),
        "lr_min": Field(1e-5, number(0)),
        "head_width": Field(32, integer(1)),
        "val_fraction": Field(0.2, number(0, 1, lo_open=True, hi_open=True)),
        "n_val_pairs": Field(512, integer(1)),
        "augment": {
            "flip_pair_prob": Field(_aug.flip_pair_prob, number(0, 1)),
            "rotation_deg": Field(list(_aug.rotation_deg), number_pair()),
            "elastic_alpha": Field(_aug.elastic_alpha, number(0)),
            "elastic_sigma": Field(_aug.elastic_sigma, number(0, lo_open=True)),
            "translation_px": Field(_aug.translation_px, number(0)),
            "scale_range": Field(list(_aug.scale_range), number_pair(0)),
            "noise_sigma": Field(_aug.noise_sigma, number(0)),
            "intensity_shift": Field(list(_aug.intensity_shift), number_pair()),
            "intensity_scale": Field(list(_aug.intensity_scale), number_pair(0)),
        },
    },
    "event": {
        "strategies": Field(["a0", "a1", "b0"], subset_of(tuple(STRATEGIES))),
        "epochs": Field(None, optional(integer(1))),
        "batch_size": Field(64, integer(1)),
        "lr": Field(1e-3, number(0, lo_open=True)),
        "head_width": Field(32, integer(1)),
        "symmetrize": Field(False, boolean),
    },
    "evaluation": {
        "n_runs": Field(1, integer(1)),
        "content_view": Field(True, boolean),
        "content_view_runs": Field(3, integer(1)),
        "content_view_pairs": Field(1000, integer(1)),
    },
    "calibration": {
        "bins": Field(10, integer(1)),
        "objective": Field("ece", choice("ece", "nll")),
    },
    "explain": {
        "k": Field(8, integer(1)),
        "region": Field(96, integer(1)),
        "n_frames": Field(1, integer(1)),
        "layer": Field("skip", layer_name),
    },
}


def _defaults(schema) -> dict:
    return {k: _defaults(v) if isinstance(v, dict) else copy.deepcopy(v.default) for k, v in schema.items()}


def _merge(schema, raw, prefix, out, errors):
    if not isinstance(raw, dict):
        errors.append(f"{prefix or '<root>'}: must be a mapping")
        return
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            errors.append(f"{path}: unknown key")
            continue
        entry = schema[key]
        if isinstance(entry, dict):
            if value is None:
                continue
            _merge(entry, value, path, out[key], errors)
            continue
        msg = entry.check(value)
        if msg:
            errors.append(f"{path}: {msg}")
        else:
            out[key] = copy.deepcopy(value)


def _cross_checks(d: dict, errors: list[str]) -> None:
    s = d["synth"]
    if s["division_rate"] + s["death_rate"] > 1:
        errors.append("synth.death_rate: division_rate + death_rate must not exceed 1")
    crop = d["dataset"]["crop_size"]
    if crop > min(s["height"], s["width"]):
        errors.append(f"dataset.crop_size: {crop} exceeds the movie frame {s['height']}x{s['width']}")
    bb = d["backbone"]
    m = bb["downsample_factor"] ** bb["n_blocks"]
    for path, v in (("dataset.crop_size", crop), ("tap.patch", d["tap"]["patch"])):
        if v % m:
            errors.append(f"{path}: {v} must be divisible by the backbone input multiple {m}")
    if d["tap"]["patch"] > min(s["height"], s["width"]):
        errors.append(f"tap.patch: {d['tap']['patch']} exceeds the movie frame {s['height']}x{s['width']}")
    if d["tap"]["lr_min"] > d["tap"]["lr"]:
        errors.append("tap.lr_min: must not exceed tap.lr")
    if d["explain"]["region"] > min(s["height"], s["width"]):
        errors.append(f"explain.region: {d['explain']['region']} exceeds the movie frame")


@dataclass
class ExperimentConfig:
    """Fully defaulted, validated experiment configuration (nested plain dicts)."""

    data: dict = field(default_factory=lambda: _defaults(SCHEMA))

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def out(self) -> Path:
        return Path(self.data["out"])

    @property
    def deterministic(self) -> bool:
        return self.data["deterministic"]

    def stage_enabled(self, stage: str) -> bool:
        return stage in self.data["stages"]

    def with_overrides(self, **top) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d.update({k: v for k, v in top.items() if v is not None})
        return ExperimentConfig(d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    def digest(self, *sections: str) -> str:
        """SHA-256 over the canonical JSON of the named sections (all when none given)."""
        part = {k: self.data[k] for k in sections} if sections else self.data
        return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()

    # conversions to module configs

    def synth_config(self) -> SynthConfig:
        s = dict(self.data["synth"])
        seed = s.pop("seed")
        return SynthConfig(seed=self.seed if seed is None else seed, **s)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.data["backbone"])

    def label_criterion(self) -> LabelCriterion:
        d = self.data["dataset"]
        return LabelCriterion(CriterionKind(d["criterion"]), d["threshold"])

    def tap_loss_config(self) -> TapLossConfig:
        return TapLossConfig(lam=self.data["tap"]["lambda"], tau=self.data["tap"]["tau"])

    def augmentation_config(self) -> AugmentationConfig:
        a = {k: tuple(v) if isinstance(v, list) else v for k, v in self.data["tap"]["augment"].items()}
        return AugmentationConfig(seed=self.seed, **a)


def validate_config(raw_text: str) -> tuple[ExperimentConfig | None, list[str]]:
    """Parse and validate YAML text.

    Returns ``(config, [])`` on success or ``(None, violations)`` listing
    every problem found, each prefixed by its dotted key path.
    """
    try:
        raw = yaml.safe_load(raw_text) if raw_text.strip() else {}
    except yaml.YAMLError as exc:
        return None, [f"<syntax>: {exc}"]
    if raw is None:
        raw = {}
    data = _defaults(SCHEMA)
    errors: list[str] = []
    _merge(SCHEMA, raw, "", data, errors)
    # invalid values were not merged, so the cross-field checks see only valid ones
    _cross_checks(data, errors)
    return (None, errors) if errors else (ExperimentConfig(data), [])


def load_config(path: str | Path) -> ExperimentConfig:
    cfg, errors = validate_config(Path(path).read_text())
    if errors:
        raise ConfigError(str(path), "invalid config:\n  " + "\n  ".join(errors))
    return cfg


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package (``benchmark`` or ``minimal``)."""
    path = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not path.exists():
        raise ConfigError("config", f"no shipped config named {name!r}")
    return path
