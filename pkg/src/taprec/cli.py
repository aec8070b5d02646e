"""Command-line entry point: ``taprec <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--deterministic/--no-deterministic``
and ``--out``. Exit status is 0 on success, 2 on invalid configuration or
arguments, and 1 when a stage fails (the message names the stage).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import tifffile

from . import __version__
from .config import ExperimentConfig, load_config, validate_config
from .datapipe import CriterionKind, LabelCriterion, build_dataset, load_dataset, save_dataset
from .errors import ConfigError, StageError, TaprecError
from .evaluate import compare_strategies, write_comparison_csv
from .eventtrain import STRATEGIES, train_event_head
from .model import load_bundle, save_bundle
from .movieio import read_movie, read_stack, write_movie_dir
from .pipeline import (
    CONTENT_VIEW_HEADER,
    calibrate_and_report,
    evaluate_and_report,
    explain_pair,
    parse_layer,
    run_pipeline,
    set_deterministic,
    write_json,
    write_rows_csv,
)
from .synthmovie import Movie, generate_movie
from .taptrain import plot_history, pretrain_tap, write_history_csv

log = logging.getLogger("taprec")


def _base_config(path: str | None) -> ExperimentConfig:
    if path is None:
        cfg, _ = validate_config("")
        return cfg
    return load_config(path)


def _set(cfg: ExperimentConfig, section: str, key: str, value) -> None:
    if value is not None:
        cfg.data[section][key] = value


def _revalidate(cfg: ExperimentConfig) -> ExperimentConfig:
    import yaml

    checked, errors = validate_config(yaml.safe_dump(cfg.data))
    if errors:
        raise ConfigError("arguments", "; ".join(errors))
    return checked


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_synth(args) -> None:
    cfg = _base_config(args.config)
    if args.seed is not None:
        cfg.data["synth"]["seed"] = args.seed
    synth = cfg.synth_config()
    movie, mask = generate_movie(synth)
    path = write_movie_dir(args.out, movie, mask, asdict(synth))
    print(f"wrote {movie.n_frames} frames ({len(movie.events)} events) to {args.out}; manifest {path}")


def cmd_build_dataset(args) -> None:
    movie, mask = read_movie(args.frames, masks=args.masks)
    if mask is None:
        raise ConfigError("masks", "no mask directory given or found next to the frames")
    criterion = LabelCriterion(CriterionKind(args.criterion), args.threshold)
    arrays, manifest = build_dataset(movie, mask, args.crop_size, criterion, args.pairs_per_frame_pair,
                                     tuple(args.ratios), args.seed or 0, args.spatial_holdout)
    save_dataset(args.out, arrays, manifest)
    counts = manifest.to_dict()["counts"]
    print(f"wrote {len(arrays)} pairs to {args.out}: {counts}, balanced train {len(manifest.balanced_train)}")


def cmd_pretrain(args) -> None:
    cfg = _base_config(args.config)
    for key in ("epochs", "patch", "tau", "batch_size", "steps_per_epoch", "lr", "head_width"):
        _set(cfg, "tap", key, getattr(args, key))
    _set(cfg, "tap", "lambda", args.lam)
    for key in ("n_blocks", "base_channels", "feature_channels", "downsample_factor"):
        _set(cfg, "backbone", key, getattr(args, key))
    frames = read_stack(args.frames)
    cfg.data["synth"]["height"], cfg.data["synth"]["width"] = map(int, frames.shape[1:])
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    cfg = _revalidate(cfg)
    t = cfg["tap"]
    val = Movie(read_stack(args.val_frames)) if args.val_frames else None
    bundle, history = pretrain_tap(
        Movie(frames), cfg.backbone_config(), cfg.tap_loss_config(), cfg.augmentation_config(),
        epochs=t["epochs"], patch=t["patch"], seed=cfg.seed, val_movie=val, val_fraction=t["val_fraction"],
        batch_size=t["batch_size"], steps_per_epoch=t["steps_per_epoch"], lr=t["lr"], lr_min=t["lr_min"],
        head_width=t["head_width"], n_val_pairs=t["n_val_pairs"],
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    write_history_csv(history, metrics)
    if args.plots:
        Path(args.plots).mkdir(parents=True, exist_ok=True)
        plot_history(history, args.plots)
    last = history[-1]
    print(f"saved {out}; final val accuracy {last['accuracy']:.4f}; history {metrics}")


def _backbone_args(args):
    cfg = _base_config(args.config)
    backbone = load_bundle(args.backbone) if args.backbone else None
    e = cfg["event"]
    return cfg, {
        "backbone_bundle": backbone,
        "backbone_config": backbone.backbone_config if backbone else cfg.backbone_config(),
        "epochs": args.epochs if args.epochs is not None else e["epochs"],
        "batch_size": e["batch_size"], "lr": e["lr"], "head_width": e["head_width"],
        "symmetrize": args.symmetrize or e["symmetrize"],
    }


def cmd_train_head(args) -> None:
    arrays, manifest = load_dataset(args.dataset)
    _, kwargs = _backbone_args(args)
    bundle, history = train_event_head(args.strategy, arrays.subset(manifest.balanced_train),
                                       val=arrays.subset(manifest.val), seed=args.seed or 0, **kwargs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    write_rows_csv(metrics, ["epoch", "split", "loss"], [[h["epoch"], h["split"], h["loss"]] for h in history])
    print(f"saved {out}; history {metrics}")


def cmd_eval(args) -> None:
    arrays, manifest = load_dataset(args.dataset)
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subset = arrays.subset(manifest.split(args.split))
    n_frames = args.n_frames or int(arrays.t.max()) + 2
    name = args.name or bundle.provenance.get("strategy", "model")
    res = evaluate_and_report(bundle, subset, n_frames, name, out, out)
    m = res["metrics"]
    print(f"{name}: " + ", ".join(f"{k}={v:.3f}" for k, v in m.items()) + f"  confusion={res['confusion']}")


def cmd_compare(args) -> None:
    arrays, manifest = load_dataset(args.dataset)
    _, kwargs = _backbone_args(args)
    seed = args.seed or 0
    seeds = [seed + i for i in range(args.n_runs)]
    table, runs = compare_strategies(arrays.subset(manifest.balanced_train), arrays.subset(manifest.test),
                                     args.strategies, args.n_runs, seeds, **kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(table, out / "comparison.csv")
    write_json(out / "comparison_runs.json", {"seeds": seeds, "runs": runs})
    for name, stats in table.items():
        print(name + ": " + ", ".join(f"{k}={m:.3f}±{s:.3f}" for k, (m, s) in stats.items()))


def cmd_tap_eval(args) -> None:
    from .evaluate import tap_accuracy_content_view

    bundle = load_bundle(args.bundle)
    movie = Movie(read_stack(args.frames))
    rows = []
    for cf in args.crop_factor:
        for rf in args.resolution_factor:
            r = tap_accuracy_content_view(bundle, movie, cf, rf, args.n_runs, training_crop=args.training_crop,
                                          n_pairs=args.n_pairs, seed=args.seed or 0)
            rows.append([cf, rf, r.crop_size, r.mean, r.std, args.n_runs])
            print(f"crop x{cf:g} (size {r.crop_size}), resolution x{rf:g}: accuracy {r.mean:.4f} ± {r.std:.4f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out, CONTENT_VIEW_HEADER, rows)


def cmd_calibrate(args) -> None:
    arrays, manifest = load_dataset(args.dataset)
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    metrics_dir = out.parent
    metrics_dir.mkdir(parents=True, exist_ok=True)
    name = out.stem
    report, calibrated = calibrate_and_report(bundle, arrays, manifest.val, manifest.test, args.bins,
                                              args.objective, name, metrics_dir, metrics_dir)
    (metrics_dir / f"calibration_{name}.json").rename(out)
    target = Path(args.calibrated_out) if args.calibrated_out else Path(args.bundle)
    save_bundle(calibrated, target)
    print(f"T={report.temperature:.4f}  ECE {report.ece_before:.4f} -> {report.ece_after:.4f}; "
          f"report {out}; calibrated bundle {target}")


def cmd_explain(args) -> None:
    bundle = load_bundle(args.bundle)
    ft, ft1 = tifffile.imread(args.frame_t), tifffile.imread(args.frame_t1)
    res = explain_pair(bundle, np.asarray(ft), np.asarray(ft1), args.k, args.region, Path(args.out),
                       parse_layer(args.layer))
    for r in res["regions"]:
        print(f"#{r['rank']}: row {r['row']} col {r['col']} size {r['size']} score {r['score']:.5g}")
    print(f"outputs in {args.out}")


def cmd_run(args) -> None:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, deterministic=args.deterministic)
    record = run_pipeline(cfg)
    for name, st in record.stages.items():
        print(f"{name:14s} {st.status:8s} {st.seconds:8.1f}s  {len(st.outputs)} files")
    print(f"run record: {cfg.out / 'run_record.json'}")


def cmd_check_config(args) -> None:
    _, errors = validate_config(Path(args.config).read_text())
    if errors:
        raise ConfigError(args.config, "\n  " + "\n  ".join(errors))
    print(f"{args.config}: valid")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global random seed")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="deterministic kernels and single-threaded torch (default on)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    p = argparse.ArgumentParser(prog="taprec", description="Time-arrow pretraining and cell-event recognition.",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"taprec {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.set_defaults(func=func)
        return sp

    s = add("synth", cmd_synth, "render a synthetic movie with event masks to TIFF files")
    s.add_argument("--config", help="experiment config; its synth section is used")
    s.add_argument("--out", required=True, help="output movie directory")

    s = add("build-dataset", cmd_build_dataset, "extract, label, split and balance crop pairs")
    s.add_argument("--frames", required=True, help="frame TIFF directory (or movie directory)")
    s.add_argument("--masks", help="mask TIFF directory (default: masks/ next to the frames)")
    s.add_argument("--crop-size", type=int, default=48)
    s.add_argument("--criterion", choices=[k.value for k in CriterionKind], default="size-filter-either")
    s.add_argument("--threshold", type=int, default=40, help="event-area threshold in pixels")
    s.add_argument("--pairs-per-frame-pair", type=int, default=1000)
    s.add_argument("--ratios", type=float, nargs=3, default=[0.6, 0.2, 0.2], metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--spatial-holdout", action="store_true", help="split by vertical image stripes")
    s.add_argument("--out", required=True, help="output dataset directory")

    s = add("pretrain", cmd_pretrain, "self-supervised time-arrow pretraining of the backbone")
    s.add_argument("--frames", required=True)
    s.add_argument("--val-frames", help="held-out movie for validation (default: last frames)")
    s.add_argument("--config", help="experiment config supplying backbone/tap defaults")
    s.add_argument("--epochs", type=int)
    s.add_argument("--patch", type=int)
    s.add_argument("--lambda", dest="lam", type=float, help="decorrelation weight")
    s.add_argument("--tau", type=float, help="decorrelation temperature")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--steps-per-epoch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--head-width", type=int)
    s.add_argument("--n-blocks", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--feature-channels", type=int)
    s.add_argument("--downsample-factor", type=int)
    s.add_argument("--metrics", help="history CSV path (default: next to the checkpoint)")
    s.add_argument("--plots", help="directory for loss/accuracy curves")
    s.add_argument("--out", required=True, help="output checkpoint")

    s = add("train-head", cmd_train_head, "train an event head under one strategy")
    s.add_argument("--strategy", required=True, choices=sorted(STRATEGIES))
    s.add_argument("--dataset", required=True)
    s.add_argument("--backbone", help="pretrained TAP checkpoint (needed by a0/a1)")
    s.add_argument("--config", help="experiment config supplying event-training defaults")
    s.add_argument("--epochs", type=int, help="default: 10 for linear heads, 30 for ResNet heads")
    s.add_argument("--symmetrize", action="store_true", help="average the head over both input orders")
    s.add_argument("--metrics", help="per-epoch loss CSV path")
    s.add_argument("--out", required=True, help="output checkpoint")

    s = add("eval", cmd_eval, "confusion matrix, precision/recall and temporal profiles")
    s.add_argument("--bundle", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--n-frames", type=int, help="movie length for the temporal profiles")
    s.add_argument("--name", help="label for output files (default: the bundle's strategy)")
    s.add_argument("--out", required=True, help="output directory")

    s = add("compare", cmd_compare, "repeated train+test runs per strategy, mean and std")
    s.add_argument("--dataset", required=True)
    s.add_argument("--strategies", nargs="+", choices=sorted(STRATEGIES), default=["a0", "a1", "b0"])
    s.add_argument("--n-runs", type=int, default=10)
    s.add_argument("--backbone", help="pretrained TAP checkpoint (needed by a0/a1)")
    s.add_argument("--config", help="experiment config supplying event-training defaults")
    s.add_argument("--epochs", type=int)
    s.add_argument("--symmetrize", action="store_true")
    s.add_argument("--out", required=True, help="output directory")

    s = add("tap-eval", cmd_tap_eval, "TAP accuracy under changed crop size or resolution")
    s.add_argument("--bundle", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--crop-factor", type=float, nargs="+", default=[1.0], choices=[0.5, 1.0, 2.0])
    s.add_argument("--resolution-factor", type=float, nargs="+", default=[1.0], choices=[0.5, 1.0, 2.0])
    s.add_argument("--n-runs", type=int, default=3)
    s.add_argument("--n-pairs", type=int, default=1000)
    s.add_argument("--training-crop", type=int, help="default: the patch recorded in the checkpoint")
    s.add_argument("--out", required=True, help="output CSV")

    s = add("calibrate", cmd_calibrate, "fit a temperature on the validation split and report ECE")
    s.add_argument("--bundle", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--objective", choices=["ece", "nll"], default="ece")
    s.add_argument("--calibrated-out", help="where to save the bundle with T (default: overwrite --bundle)")
    s.add_argument("--out", required=True, help="output report (JSON)")

    s = add("explain", cmd_explain, "Grad-CAM heatmap and top-k regions for one frame pair")
    s.add_argument("--bundle", required=True, help="TAP checkpoint")
    s.add_argument("--frame-t", required=True)
    s.add_argument("--frame-t1", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--region", type=int, default=96)
    s.add_argument("--layer", default="skip",
                   help="Grad-CAM target: 'skip' (encoder block merged by the decoder), 'deepest' or an index")
    s.add_argument("--out", required=True, help="output directory")

    s = add("run", cmd_run, "full pipeline from a config file (resumable)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="run directory (default: the config's out)")

    s = add("check-config", cmd_check_config, "validate a config file and list every violation")
    s.add_argument("--config", required=True)

    # the top-level help lists every subcommand with all of its flags
    lines = ["subcommand flags:"]
    for name, sp in sub.choices.items():
        flags = [o for a in sp._actions if a.dest != "help" for o in a.option_strings if o.startswith("--")]
        lines.append(f"  {name}: " + " ".join(flags))
    p.epilog = "\n".join(lines)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "run":
        set_deterministic(args.deterministic is not False, args.seed or 0)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error [{args.command}]: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except (TaprecError, OSError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
