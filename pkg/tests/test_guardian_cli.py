from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from conftest import PROJECT_ROOT
from fleet_guardian.config import ARTIFACT_ROOT_ENV, CONFIG_PATH_ENV
from fleet_guardian.numerics import table7_fixture, write_trace_file
from fleet_guardian.partuner import load_calibration
from fleet_guardian.training_health import collapse_profile, simulate_rank_timings
import guardian

CONFIGS = PROJECT_ROOT / "configs"


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.delenv(ARTIFACT_ROOT_ENV, raising=False)
    monkeypatch.delenv(CONFIG_PATH_ENV, raising=False)
    path = tmp_path / "guardian.yaml"
    path.write_text(
        f"artifact_root: {tmp_path / 'artifacts'}\nlog_dir: {tmp_path / 'logs'}\n",
        encoding="utf-8",
    )
    return str(path)


def test_tune_writes_ranking(config_file, tmp_path):
    calibration = load_calibration(str(CONFIGS / "calibration_16acc.yaml"))
    out = tmp_path / "ranking.csv"
    code = guardian.main(
        [
            "--config", config_file,
            "tune",
            "--gbs", str(64 * calibration.model.seq_len),
            "--calibration", str(CONFIGS / "calibration_16acc.yaml"),
            "--constraints", str(CONFIGS / "constraints.yaml"),
            "--top", "3",
            "--out", str(out),
        ]
    )
    assert code == 0
    with out.open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["rank"] for r in rows] == ["1", "2", "3"]
    assert all(int(r["tp"]) <= 2 and int(r["ep"]) >= 2 for r in rows)


def test_tune_rejects_token_count_that_is_not_whole_samples(config_file, tmp_path):
    code = guardian.main(
        ["--config", config_file, "tune", "--gbs", "1000", "--calibration", str(CONFIGS / "calibration_16acc.yaml")]
    )
    assert code == 1
    errors = (tmp_path / "logs" / "errors.jsonl").read_text(encoding="utf-8").splitlines()
    assert json.loads(errors[-1])["error_type"] == "NonDivisible"


def test_validate_traces_flags_abnormal_modules(config_file, tmp_path):
    reference, candidate = table7_fixture()
    write_trace_file(str(tmp_path / "ref.fgtrace"), reference, backend="reference")
    write_trace_file(str(tmp_path / "cand.fgtrace"), candidate, backend="candidate")
    out = tmp_path / "report.json"
    code = guardian.main(
        [
            "--config", config_file,
            "validate-traces", str(tmp_path / "ref.fgtrace"), str(tmp_path / "cand.fgtrace"),
            "--csv", str(tmp_path / "report.csv"),
            "--out", str(out),
        ]
    )
    assert code == 2
    record = json.loads(out.read_text(encoding="utf-8"))
    assert record["passed"] is False
    flagged = {(e["module"], e["kind"]) for e in record["entries"] if e["abnormal"]}
    assert ("Attention", "parameters") in flagged
    assert (tmp_path / "report.csv").exists()

    same = guardian.main(
        ["--config", config_file, "validate-traces", str(tmp_path / "ref.fgtrace"), str(tmp_path / "ref.fgtrace"), "--out", str(out)]
    )
    assert same == 0


def test_health_reports_valleys_and_stragglers(config_file, tmp_path):
    rng = np.random.default_rng(0)
    norms = tmp_path / "norms.csv"
    with norms.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "layer", "value"])
        for it in range(0, 1000, 100):
            profile = collapse_profile(24, it, onset=550, rng=rng, growth=1.0)
            for layer, value in enumerate(profile.norms, start=1):
                writer.writerow([it, layer, value])

    durations = simulate_rank_timings(8, 120, rng)
    durations[5] *= 1.2
    timings = tmp_path / "timings.csv"
    with timings.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "step", "duration"])
        for rank, row in enumerate(durations):
            for step, value in enumerate(row):
                writer.writerow([rank, step, value])

    out = tmp_path / "health.json"
    code = guardian.main(
        [
            "--config", config_file,
            "health", "--norms", str(norms), "--timings", str(timings),
            "--tokens-per-step", "4096", "--out", str(out),
        ]
    )
    assert code == 0
    record = json.loads(out.read_text(encoding="utf-8"))
    assert record["collapse_alarm_iteration"] == 800
    assert len(record["valleys"]) == 10
    assert [(s["rank"], s["pattern"]) for s in record["stragglers"]] == [(5, "persistent")]
    assert 0.0 < record["throughput"]["min_over_peak"] <= 1.0


def test_health_needs_an_input(config_file):
    assert guardian.main(["--config", config_file, "health"]) == 1


def test_simulate_then_report(config_file, tmp_path):
    out = tmp_path / "run"
    assert guardian.main(["--config", config_file, "simulate", str(PROJECT_ROOT / "scenarios" / "trivial.yaml"), "--out", str(out)]) == 0
    assert guardian.main(["--config", config_file, "simulate", str(PROJECT_ROOT / "scenarios" / "trivial.yaml"), "--out", str(out)]) == 1

    kpi = tmp_path / "kpi-half-even"
    code = guardian.main(["--config", config_file, "report", str(out / "events.jsonl"), "--rounding", "half-even", "--out", str(kpi)])
    assert code == 0
    header = (kpi / "utilization.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "metric (rounding=half-even),2025-03"
    assert (out / "kpi" / "utilization.csv").read_text(encoding="utf-8").splitlines()[1:] == (
        kpi / "utilization.csv"
    ).read_text(encoding="utf-8").splitlines()[1:]


def test_replay_of_missing_bundle_fails(config_file, tmp_path):
    (tmp_path / "empty").mkdir()
    assert guardian.main(["--config", config_file, "replay", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]) == 1
