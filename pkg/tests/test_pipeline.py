from __future__ import annotations

import json

import pytest

from taprec.config import load_config, shipped_config
from taprec.errors import StageError, TaprecError
from taprec.movieio import sha256_file
from taprec.pipeline import LOCK_NAME, RECORD_NAME, run_pipeline


@pytest.fixture(scope="module")
def minimal():
    return load_config(shipped_config("minimal")).with_overrides(deterministic=True)


def _metrics(out):
    return {p.name: p.read_bytes() for p in sorted((out / "metrics").glob("*.csv"))}


def test_fresh_run_records_every_file(tmp_path, minimal):
    record = run_pipeline(minimal, tmp_path / "run")
    out = tmp_path / "run"
    assert [s.status for s in record.stages.values()] == ["done"] * 7
    files = record.files
    assert "models/tap.ckpt" in files and "metrics/event_metrics.csv" in files
    for rel, digest in files.items():
        assert sha256_file(out / rel) == digest
    saved = json.loads((out / RECORD_NAME).read_text())
    assert saved["config_digest"] == minimal.digest()
    assert not (out / LOCK_NAME).exists()


def test_rerun_skips_and_repairs(tmp_path, minimal):
    out = tmp_path / "run"
    run_pipeline(minimal, out)
    before = _metrics(out)
    again = run_pipeline(minimal, out)
    assert all(s.status == "skipped" for s in again.stages.values())
    (out / "models" / "tap.ckpt").write_bytes(b"garbage")
    repaired = run_pipeline(minimal, out)
    assert repaired.stages["synth"].status == "skipped"
    assert repaired.stages["pretrain"].status == "done"
    assert _metrics(out) == before


def test_changed_section_reruns_downstream_only(tmp_path, minimal):
    out = tmp_path / "run"
    run_pipeline(minimal, out)
    changed = minimal.with_overrides()
    changed.data["calibration"]["bins"] = 5
    record = run_pipeline(changed, out)
    status = {k: s.status for k, s in record.stages.items()}
    assert status["train-head"] == "skipped" and status["calibrate"] == "done"


def test_identical_runs_give_identical_metrics(tmp_path, minimal):
    run_pipeline(minimal, tmp_path / "a")
    run_pipeline(minimal, tmp_path / "b")
    a, b = _metrics(tmp_path / "a"), _metrics(tmp_path / "b")
    assert a and a == b


def test_stage_failure_names_stage_and_keeps_outputs(tmp_path, minimal):
    cfg = minimal.with_overrides(stages=["synth", "build-dataset", "train-head"])
    out = tmp_path / "run"
    with pytest.raises(StageError) as err:
        run_pipeline(cfg, out)
    assert err.value.stage == "train-head"
    assert (out / "movie" / "manifest.json").exists()
    record = json.loads((out / RECORD_NAME).read_text())
    assert record["stages"]["train-head"]["status"] == "failed"
    assert not (out / LOCK_NAME).exists()


def test_locked_directory_is_refused(tmp_path, minimal):
    out = tmp_path / "run"
    out.mkdir()
    (out / LOCK_NAME).write_text("12345")
    with pytest.raises(TaprecError, match="locked"):
        run_pipeline(minimal, out)
