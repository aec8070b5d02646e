"""End-to-end experiment orchestration with resumable, checksummed stages.

A run directory looks like::

    movie/        frames/*.tif, masks/*.tif, manifest.json
    dataset/      samples.bin, manifest.json
    models/       tap.ckpt, head_<strategy>.ckpt, head_<strategy>_calibrated.ckpt
    metrics/      CSV and JSON metrics (byte-stable in deterministic mode)
    plots/        PNG figures
    explain/      Grad-CAM overlays and region lists
    run_record.json

``run_record.json`` stores, per stage, a digest of the config sections the
stage depends on (chained with its upstream stages) and the SHA-256 of
every file it produced. On a rerun, a stage whose digest is unchanged and
whose files are intact is skipped.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attribute import grad_cam, render_explanation, top_k_regions
from .calibrate import CalibrationReport, calibrate, plot_reliability
from .config import STAGES, ExperimentConfig
from .datapipe import CropPairArrays, DatasetManifest, build_dataset, load_dataset, save_dataset
from .errors import DimensionError, StageError, TaprecError
from .evaluate import (
    compare_strategies,
    evaluate_event_bundle,
    plot_profiles,
    tap_accuracy_content_view,
    temporal_error_distribution,
    total_variation,
    write_comparison_csv,
    write_profiles_csv,
)
from .eventtrain import event_logits, train_event_head
from .model import ModelBundle, load_bundle, save_bundle
from .movieio import read_movie, sha256_file, write_movie_dir
from .synthmovie import EventMask, Movie, generate_movie
from .taptrain import plot_history, pretrain_tap, write_history_csv

log = logging.getLogger(__name__)

RECORD_NAME = "run_record.json"
LOCK_NAME = ".taprec.lock"
PROFILE_CATEGORIES = ("tp", "fp", "fn", "actual_pos")


def set_deterministic(enabled: bool, seed: int) -> None:
    """Seed torch's global RNG and switch deterministic kernels on or off."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def fmt(v) -> str:
    """Stable text form of a metric value for CSV output."""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.8g}"
    return str(v)


def write_rows_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default))


# ---------------------------------------------------------------------------
# reusable stage bodies (also used by the individual CLI subcommands)


def evaluate_and_report(bundle: ModelBundle, arrays: CropPairArrays, n_frames: int, name: str,
                        metrics_dir: Path, plots_dir: Path | None = None) -> dict:
    """Confusion matrix, per-class precision/recall and temporal profiles for one bundle."""
    ev = evaluate_event_bundle(bundle, arrays)
    profiles = [temporal_error_distribution(ev.predictions, arrays.labels, arrays.t, c, n_frames)
                for c in PROFILE_CATEGORIES]
    by_cat = {p.category: p for p in profiles}
    result = {
        "strategy": name,
        **ev.to_dict(),
        "tv_tp_vs_actual_pos": total_variation(by_cat["tp"], by_cat["actual_pos"]),
        "empty_profiles": [p.category for p in profiles if p.empty],
    }
    write_json(metrics_dir / f"eval_{name}.json", result)
    write_profiles_csv(profiles, metrics_dir / f"profiles_{name}.csv")
    if plots_dir is not None:
        plot_profiles(profiles, plots_dir / f"profiles_{name}.png", title=f"{name}: share per frame")
    return result


def calibrate_and_report(bundle: ModelBundle, arrays: CropPairArrays, val_idx, test_idx, n_bins: int,
                         objective: str, name: str, metrics_dir: Path,
                         plots_dir: Path | None = None) -> tuple[CalibrationReport, ModelBundle]:
    """Fit T on the validation pairs, report ECE on the test pairs; returns the calibrated bundle copy."""
    val, test = arrays.subset(val_idx), arrays.subset(test_idx)
    report = calibrate(event_logits(bundle, val.crops_t, val.crops_t1), val.labels,
                       event_logits(bundle, test.crops_t, test.crops_t1), test.labels,
                       n_bins=n_bins, objective=objective)
    write_json(metrics_dir / f"calibration_{name}.json", report.to_dict())
    if plots_dir is not None:
        plot_reliability(report.bins_before, report.ece_before, plots_dir / f"reliability_{name}_before.png",
                         f"{name} before scaling")
        plot_reliability(report.bins_after, report.ece_after, plots_dir / f"reliability_{name}_after.png",
                         f"{name} after scaling (T={report.temperature:.3f})")
    calibrated = bundle.copy()
    calibrated.temperature = report.temperature
    return report, calibrated


CONTENT_VIEW_GRID = ((2.0, 1.0), (1.0, 1.0), (0.5, 1.0), (1.0, 0.5), (1.0, 2.0))


def content_view_rows(bundle: ModelBundle, movie: Movie, n_runs: int, n_pairs: int, seed: int) -> list[list]:
    """TAP accuracy for each (crop factor, resolution factor) that fits the movie."""
    rows = []
    for crop_f, res_f in CONTENT_VIEW_GRID:
        try:
            r = tap_accuracy_content_view(bundle, movie, crop_f, res_f, n_runs, n_pairs=n_pairs, seed=seed)
        except DimensionError as exc:
            log.info("content view (crop x%g, res x%g) skipped: %s", crop_f, res_f, exc)
            continue
        rows.append([crop_f, res_f, r.crop_size, r.mean, r.std, n_runs])
    return rows


CONTENT_VIEW_HEADER = ["crop_factor", "resolution_factor", "crop_size", "accuracy_mean", "accuracy_std", "n_runs"]


def event_frames(mask: EventMask, n: int) -> list[int]:
    """The ``n`` frame indices t (t+1 must exist) whose pair carries the most event pixels."""
    m = mask.masks.reshape(mask.n_frames, -1).sum(axis=1).astype(np.int64)
    score = m[:-1] + m[1:]
    order = np.argsort(-score, kind="stable")
    return sorted(int(t) for t in order[:n])


def parse_layer(value: int | str) -> int | str:
    if isinstance(value, str) and value.lstrip("-").isdigit():
        return int(value)
    return value


def explain_pair(bundle: ModelBundle, frame_t, frame_t1, k: int, region: int, out_dir: Path,
                 layer: int | str = "skip") -> dict:
    attr = grad_cam(bundle, frame_t, frame_t1, layer=layer)
    region = min(region, *attr.heatmap.shape)
    regions = top_k_regions(attr, k, region)
    files = render_explanation(frame_t, frame_t1, attr, regions, out_dir)
    return {"regions": [r.to_dict() for r in regions], "files": {k: str(v) for k, v in files.items()}}


# ---------------------------------------------------------------------------
# run record


@dataclass
class StageRecord:
    name: str
    digest: str
    status: str = "pending"
    seconds: float = 0.0
    outputs: dict[str, str] = field(default_factory=dict)


@dataclass
class RunRecord:
    config_digest: str
    code_version: str
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @property
    def files(self) -> dict[str, str]:
        out = {}
        for st in self.stages.values():
            out.update(st.outputs)
        return out

    @property
    def timings(self) -> dict[str, float]:
        return {n: s.seconds for n, s in self.stages.items()}

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "code_version": self.code_version,
            "stages": {n: asdict(s) for n, s in self.stages.items()},
            "files": self.files,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["config_digest"], d["code_version"],
                   {n: StageRecord(**s) for n, s in d.get("stages", {}).items()})

    def save(self, out_dir: Path) -> None:
        write_json(out_dir / RECORD_NAME, self.to_dict())


class RunLock:
    """Exclusive ownership of a run directory for one orchestrator process."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise TaprecError(f"run directory is locked by another process ({self.path}); "
                              "remove the lock file if that process is gone") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _outputs_intact(out_dir: Path, outputs: dict[str, str]) -> bool:
    return bool(outputs) and all((out_dir / rel).is_file() and sha256_file(out_dir / rel) == digest
                                 for rel, digest in outputs.items())


def _snapshot(out_dir: Path, subdirs) -> dict[str, float]:
    found = {}
    for sub in subdirs:
        base = out_dir / sub
        if base.is_file():
            found[sub] = base.stat().st_mtime_ns
        elif base.is_dir():
            for p in base.rglob("*"):
                if p.is_file():
                    found[p.relative_to(out_dir).as_posix()] = p.stat().st_mtime_ns
    return found


# ---------------------------------------------------------------------------
# the orchestrator


class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir: str | Path | None = None):
        self.cfg = config
        self.out = Path(out_dir) if out_dir is not None else config.out
        self.metrics = self.out / "metrics"
        self.plots = self.out / "plots"
        self.models = self.out / "models"
        self._movie: tuple[Movie, EventMask] | None = None
        self._dataset: tuple[CropPairArrays, DatasetManifest] | None = None

    # stage digests chain the digests of the stages they read from
    def stage_digest(self, stage: str) -> str:
        c = self.cfg
        deps = {
            "synth": (("seed", "synth"), ()),
            "build-dataset": (("seed", "dataset"), ("synth",)),
            "pretrain": (("seed", "backbone", "tap"), ("synth",)),
            "train-head": (("seed", "backbone", "event"), ("build-dataset", "pretrain")),
            "eval": (("seed", "evaluation", "event", "backbone"), ("train-head",)),
            "calibrate": (("calibration",), ("train-head",)),
            "explain": (("explain",), ("pretrain",)),
        }[stage]
        parts = [c.digest(*deps[0]), str(c.deterministic), __version__]
        parts += [self.stage_digest(u) for u in deps[1]]
        import hashlib

        return hashlib.sha256("|".join([stage] + parts).encode()).hexdigest()

    # lazily loaded upstream artifacts
    def movie(self) -> tuple[Movie, EventMask]:
        if self._movie is None:
            movie, mask = read_movie(self.out / "movie")
            self._movie = (movie, mask)
        return self._movie

    def dataset(self) -> tuple[CropPairArrays, DatasetManifest]:
        if self._dataset is None:
            self._dataset = load_dataset(self.out / "dataset")
        return self._dataset

    def tap_bundle(self) -> ModelBundle:
        return load_bundle(self.models / "tap.ckpt")

    def _strategies(self) -> list[str]:
        return list(self.cfg["event"]["strategies"])

    # stage bodies; each returns the list of paths (relative to out) it owns
    def run_synth(self) -> list[str]:
        movie, mask = generate_movie(self.cfg.synth_config())
        write_movie_dir(self.out / "movie", movie, mask, asdict(self.cfg.synth_config()))
        self._movie = None
        return ["movie"]

    def run_build_dataset(self) -> list[str]:
        movie, mask = self.movie()
        d = self.cfg["dataset"]
        arrays, manifest = build_dataset(movie, mask, d["crop_size"], self.cfg.label_criterion(),
                                         d["pairs_per_frame_pair"], tuple(d["ratios"]), self.cfg.seed,
                                         d["spatial_holdout"])
        save_dataset(self.out / "dataset", arrays, manifest)
        self._dataset = None
        labels = arrays.labels
        rows = [[name, len(idx), int(labels[np.asarray(idx, dtype=np.int64)].sum()) if len(idx) else 0]
                for name, idx in (("train", manifest.train), ("val", manifest.val), ("test", manifest.test),
                                  ("balanced_train", manifest.balanced_train or []))]
        write_rows_csv(self.metrics / "dataset_counts.csv", ["split", "n", "positives"], rows)
        return ["dataset", "metrics/dataset_counts.csv"]

    def run_pretrain(self) -> list[str]:
        movie, _ = self.movie()
        t = self.cfg["tap"]
        bundle, history = pretrain_tap(
            movie, self.cfg.backbone_config(), self.cfg.tap_loss_config(), self.cfg.augmentation_config(),
            epochs=t["epochs"], patch=t["patch"], seed=self.cfg.seed, val_fraction=t["val_fraction"],
            batch_size=t["batch_size"], steps_per_epoch=t["steps_per_epoch"], lr=t["lr"], lr_min=t["lr_min"],
            head_width=t["head_width"], n_val_pairs=t["n_val_pairs"],
        )
        save_bundle(bundle, self.models / "tap.ckpt")
        write_history_csv(history, self.metrics / "pretrain_history.csv")
        plots = plot_history(history, self.plots, prefix="tap")
        return ["models/tap.ckpt", "metrics/pretrain_history.csv"] + [p.relative_to(self.out).as_posix()
                                                                     for p in plots]

    def _train_kwargs(self) -> dict:
        e = self.cfg["event"]
        needs_tap = any(s.startswith("a") for s in self._strategies())
        return {
            "backbone_bundle": self.tap_bundle() if needs_tap else None,
            "backbone_config": self.cfg.backbone_config(),
            "epochs": e["epochs"], "batch_size": e["batch_size"], "lr": e["lr"],
            "head_width": e["head_width"], "symmetrize": e["symmetrize"],
        }

    def run_train_head(self) -> list[str]:
        arrays, manifest = self.dataset()
        train, val = arrays.subset(manifest.balanced_train), arrays.subset(manifest.val)
        kwargs = self._train_kwargs()
        owned = []
        for name in self._strategies():
            bundle, history = train_event_head(name, train, val=val, seed=self.cfg.seed, **kwargs)
            save_bundle(bundle, self.models / f"head_{name}.ckpt")
            write_rows_csv(self.metrics / f"head_{name}_history.csv", ["epoch", "split", "loss"],
                           [[h["epoch"], h["split"], h["loss"]] for h in history])
            owned += [f"models/head_{name}.ckpt", f"metrics/head_{name}_history.csv"]
        return owned

    def run_eval(self) -> list[str]:
        arrays, manifest = self.dataset()
        movie, _ = self.movie()
        test = arrays.subset(manifest.test)
        ev = self.cfg["evaluation"]
        owned, rows = [], []
        for name in self._strategies():
            res = evaluate_and_report(load_bundle(self.models / f"head_{name}.ckpt"), test, movie.n_frames,
                                      name, self.metrics, self.plots)
            cm, m = res["confusion"], res["metrics"]
            rows.append([name, cm["tn"], cm["fp"], cm["fn"], cm["tp"], m["prec0"], m["rec0"], m["prec1"],
                         m["rec1"], res["tv_tp_vs_actual_pos"]])
            owned += [f"metrics/eval_{name}.json", f"metrics/profiles_{name}.csv", f"plots/profiles_{name}.png"]
        write_rows_csv(self.metrics / "event_metrics.csv",
                       ["strategy", "tn", "fp", "fn", "tp", "prec0", "rec0", "prec1", "rec1", "tv_tp_actual"], rows)
        owned.append("metrics/event_metrics.csv")
        if ev["n_runs"] >= 2:
            train = arrays.subset(manifest.balanced_train)
            seeds = [self.cfg.seed + i for i in range(ev["n_runs"])]
            table, runs = compare_strategies(train, test, self._strategies(), ev["n_runs"], seeds,
                                             **self._train_kwargs())
            write_comparison_csv(table, self.metrics / "comparison.csv")
            write_json(self.metrics / "comparison_runs.json", {"seeds": seeds, "runs": runs})
            owned += ["metrics/comparison.csv", "metrics/comparison_runs.json"]
        if ev["content_view"] and (self.models / "tap.ckpt").exists():
            t = self.cfg["tap"]
            cut = int(round(movie.n_frames * (1 - t["val_fraction"])))
            held_out = Movie(movie.frames[cut:], movie.frame_interval_minutes)
            rows = content_view_rows(self.tap_bundle(), held_out, ev["content_view_runs"],
                                     ev["content_view_pairs"], self.cfg.seed)
            write_rows_csv(self.metrics / "content_view.csv", CONTENT_VIEW_HEADER, rows)
            owned.append("metrics/content_view.csv")
        return owned

    def run_calibrate(self) -> list[str]:
        arrays, manifest = self.dataset()
        c = self.cfg["calibration"]
        owned, rows = [], []
        for name in self._strategies():
            report, calibrated = calibrate_and_report(
                load_bundle(self.models / f"head_{name}.ckpt"), arrays, manifest.val, manifest.test,
                c["bins"], c["objective"], name, self.metrics, self.plots)
            save_bundle(calibrated, self.models / f"head_{name}_calibrated.ckpt")
            rows.append([name, report.temperature, report.ece_before, report.ece_after, report.degenerate])
            owned += [f"models/head_{name}_calibrated.ckpt", f"metrics/calibration_{name}.json",
                      f"plots/reliability_{name}_before.png", f"plots/reliability_{name}_after.png"]
        write_rows_csv(self.metrics / "calibration.csv",
                       ["strategy", "temperature", "ece_before", "ece_after", "degenerate"], rows)
        return owned + ["metrics/calibration.csv"]

    def run_explain(self) -> list[str]:
        movie, mask = self.movie()
        x = self.cfg["explain"]
        bundle = self.tap_bundle()
        summary = {}
        for t in event_frames(mask, x["n_frames"]):
            summary[str(t)] = explain_pair(bundle, movie.frames[t], movie.frames[t + 1], x["k"], x["region"],
                                           self.out / "explain" / f"frame_{t:04d}", parse_layer(x["layer"]))
        write_json(self.out / "explain" / "summary.json", summary)
        return ["explain"]

    BODIES = {
        "synth": run_synth,
        "build-dataset": run_build_dataset,
        "pretrain": run_pretrain,
        "train-head": run_train_head,
        "eval": run_eval,
        "calibrate": run_calibrate,
        "explain": run_explain,
    }

    def run(self) -> RunRecord:
        self.out.mkdir(parents=True, exist_ok=True)
        for d in (self.metrics, self.plots, self.models):
            d.mkdir(exist_ok=True)
        with RunLock(self.out):
            previous = None
            if (self.out / RECORD_NAME).exists():
                try:
                    previous = RunRecord.from_dict(json.loads((self.out / RECORD_NAME).read_text()))
                except (ValueError, KeyError):
                    previous = None
            record = RunRecord(self.cfg.digest(), __version__)
            (self.out / "config.yaml").write_text(self.cfg.to_yaml())
            set_deterministic(self.cfg.deterministic, self.cfg.seed)
            for stage in STAGES:
                if not self.cfg.stage_enabled(stage):
                    continue
                digest = self.stage_digest(stage)
                old = previous.stages.get(stage) if previous else None
                if old and old.digest == digest and old.status in ("done", "skipped") \
                        and _outputs_intact(self.out, old.outputs):
                    record.stages[stage] = StageRecord(stage, digest, "skipped", 0.0, old.outputs)
                    log.info("stage %s: unchanged, skipped", stage)
                    continue
                st = StageRecord(stage, digest, "running")
                record.stages[stage] = st
                start = time.perf_counter()
                # reseed per stage so a resumed run matches a fresh one
                set_deterministic(self.cfg.deterministic, self.cfg.seed)
                try:
                    owned = self.BODIES[stage](self)
                except Exception as exc:
                    st.status = "failed"
                    st.seconds = time.perf_counter() - start
                    record.save(self.out)
                    raise StageError(stage, exc) from exc
                st.seconds = time.perf_counter() - start
                st.outputs = {rel: sha256_file(self.out / rel) for rel in sorted(_snapshot(self.out, owned))}
                st.status = "done"
                record.save(self.out)
                log.info("stage %s: done in %.1fs", stage, st.seconds)
            record.save(self.out)
            return record


def run_pipeline(config: ExperimentConfig, out_dir: str | Path | None = None) -> RunRecord:
    """Run every enabled stage in order, skipping stages whose inputs and outputs are unchanged."""
    return Pipeline(config, out_dir).run()
