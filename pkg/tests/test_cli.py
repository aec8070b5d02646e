from __future__ import annotations

import json

import pytest
import tifffile

from taprec.cli import build_parser, main

SPEC_FLAGS = {
    "synth": ["--config", "--out"],
    "build-dataset": ["--frames", "--masks", "--crop-size", "--criterion", "--threshold", "--out"],
    "pretrain": ["--frames", "--val-frames", "--epochs", "--patch", "--lambda", "--tau", "--out"],
    "train-head": ["--strategy", "--dataset", "--backbone", "--out"],
    "eval": ["--bundle", "--dataset", "--out"],
    "compare": ["--dataset", "--out"],
    "tap-eval": ["--bundle", "--frames", "--out"],
    "calibrate": ["--bundle", "--dataset", "--bins", "--out"],
    "explain": ["--bundle", "--frame-t", "--frame-t1", "--k", "--region", "--out"],
    "run": ["--config", "--out"],
}


def test_help_lists_every_subcommand_and_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for sub, flags in SPEC_FLAGS.items():
        line = next(l for l in text.splitlines() if l.strip().startswith(f"{sub}:"))
        for flag in flags + ["--seed", "--deterministic"]:
            assert flag in line.split(), (sub, flag)


def test_parser_defaults():
    args = build_parser().parse_args(["explain", "--bundle", "b", "--frame-t", "a", "--frame-t1", "c", "--out", "o"])
    assert (args.k, args.region, args.layer) == (8, 96, "skip")


MINI = """
synth: {n_frames: 10, height: 32, width: 32, n_cells_init: 8, division_rate: 0.1, death_rate: 0.02, seed: 1}
dataset: {crop_size: 16}
backbone: {n_blocks: 1, base_channels: 4, feature_channels: 4}
tap: {epochs: 1, patch: 16, batch_size: 4, steps_per_epoch: 2, head_width: 4, n_val_pairs: 16}
event: {head_width: 4}
explain: {region: 8}
"""


def test_subcommands_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(MINI)
    movie, ds = tmp_path / "movie", tmp_path / "ds"
    assert main(["synth", "--config", str(cfg), "--out", str(movie)]) == 0
    assert len(list((movie / "frames").glob("frame_*.tif"))) == 10
    assert main(["build-dataset", "--frames", str(movie), "--crop-size", "16", "--threshold", "5",
                 "--pairs-per-frame-pair", "20", "--out", str(ds)]) == 0
    tap = tmp_path / "tap.ckpt"
    assert main(["pretrain", "--frames", str(movie / "frames"), "--config", str(cfg), "--out", str(tap)]) == 0
    head = tmp_path / "a0.ckpt"
    assert main(["train-head", "--strategy", "a0", "--dataset", str(ds), "--backbone", str(tap),
                 "--epochs", "2", "--out", str(head)]) == 0
    assert main(["eval", "--bundle", str(head), "--dataset", str(ds), "--out", str(tmp_path / "ev")]) == 0
    assert main(["compare", "--dataset", str(ds), "--strategies", "b0", "--n-runs", "2", "--epochs", "1",
                 "--config", str(cfg), "--out", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "comparison.csv").exists()
    assert main(["tap-eval", "--bundle", str(tap), "--frames", str(movie), "--crop-factor", "1", "2",
                 "--n-pairs", "16", "--out", str(tmp_path / "cv.csv")]) == 0
    assert (tmp_path / "cv.csv").read_text().count("\n") == 3
    assert main(["calibrate", "--bundle", str(head), "--dataset", str(ds), "--out", str(tmp_path / "cal.json")]) == 0
    assert "temperature" in json.loads((tmp_path / "cal.json").read_text())
    frames = sorted((movie / "frames").glob("*.tif"))
    assert main(["explain", "--bundle", str(tap), "--frame-t", str(frames[3]), "--frame-t1", str(frames[4]),
                 "--k", "2", "--region", "8", "--out", str(tmp_path / "ex")]) == 0
    assert len(json.loads((tmp_path / "ex" / "regions.json").read_text())["regions"]) == 2
    assert tifffile.imread(frames[0]).dtype.name == "uint8"


def test_errors_give_nonzero_exit(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("tap:\n  lambda: -1\n")
    assert main(["check-config", "--config", str(bad)]) == 2
    assert "tap.lambda" in capsys.readouterr().err
    assert main(["eval", "--bundle", str(tmp_path / "missing.ckpt"), "--dataset", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    assert "error [eval]" in capsys.readouterr().err
