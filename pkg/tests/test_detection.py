from __future__ import annotations

import numpy as np
import pytest

from conftest import numeric_window
from fleet_guardian.detection import (
    KpiBaseline,
    TemporalHistory,
    detect_job_anomaly,
    match_rules,
    robust_z,
    score_metric,
    spatial_scores,
    temporal_scores,
)
from fleet_guardian.knowledge_base import KnowledgeBase
from fleet_guardian.models import (
    DetectionError,
    EmptyBaseline,
    RuleRuntimeError,
    TelemetrySample,
    TooFewPeers,
    UnusableBaseline,
)
from fleet_guardian.rules import Rule
from fleet_guardian.telemetry import TelemetryWindow


def test_robust_z_uses_scaled_mad():
    assert robust_z(3.0, 1.0, 1.0) == pytest.approx(2.0 / 1.4826, rel=1e-6)
    # zero spread still yields a finite, very large score
    assert robust_z(1.0, 0.0, 0.0) == pytest.approx(1e9)


def test_spatial_scores_single_out_the_outlier():
    rng = np.random.default_rng(0)
    data = 0.9 + 0.01 * rng.standard_normal((10, 6))
    data[:, 4] = 0.2
    nodes = [f"node-{i:03d}" for i in range(6)]
    scores = spatial_scores(nodes, data)
    assert max(scores, key=scores.get) == "node-004"
    others = [v for k, v in scores.items() if k != "node-004"]
    assert scores["node-004"] > 10 * max(others)


def test_spatial_scores_need_three_peers():
    with pytest.raises(TooFewPeers):
        spatial_scores(["a", "b"], np.ones((4, 2)))


def test_temporal_scores():
    rng = np.random.default_rng(1)
    base = 100 + rng.standard_normal(200)
    assert temporal_scores([100.0, 100.2], base) < 1.0
    assert temporal_scores([80.0, 81.0], base) > 6.0
    assert temporal_scores([], base) == 0.0
    with pytest.raises(EmptyBaseline):
        temporal_scores([1.0], [])


def test_job_anomaly_against_family_baseline():
    rng = np.random.default_rng(2)
    baseline = KpiBaseline.fit("fam", 32, {"throughput_per_accel": 900 + 5 * rng.standard_normal(100)})
    assert baseline.usable
    healthy = detect_job_anomaly({"throughput_per_accel": [901.0, 899.0]}, baseline)
    assert not healthy.flagged
    slow = detect_job_anomaly({"throughput_per_accel": [450.0, 440.0]}, baseline)
    assert slow.flagged
    assert slow.deviations["throughput_per_accel"] > 6.0
    low, high = baseline.band("throughput_per_accel", 6.0)
    assert low < 900 < high


def test_job_anomaly_rejects_thin_baseline_and_empty_window():
    thin = KpiBaseline.fit("fam", 32, {"throughput_per_accel": [900.0] * 5})
    with pytest.raises(UnusableBaseline):
        detect_job_anomaly({"throughput_per_accel": [1.0]}, thin)
    usable = KpiBaseline.fit("fam", 32, {"throughput_per_accel": [900.0] * 40})
    with pytest.raises(DetectionError):
        detect_job_anomaly({"throughput_per_accel": []}, usable)


def test_score_metric_spatial_and_temporal():
    healthy = numeric_window({f"n{i}": [0.9, 0.91, 0.89, 0.9] for i in range(5)})
    history = TemporalHistory.from_window(healthy)
    current = numeric_window({"n0": [0.9, 0.9], "n1": [0.9, 0.91], "n2": [0.1, 0.12], "n3": [0.9, 0.89], "n4": [0.9, 0.9]})
    scores = {s.node_id: s for s in score_metric(current, "accel_utilization", history=history)}
    assert max(scores.values(), key=lambda s: s.spatial).node_id == "n2"
    assert scores["n2"].temporal > scores["n0"].temporal
    assert scores["n2"].combined == max(scores["n2"].spatial, scores["n2"].temporal)
    assert score_metric(current, "ib_bandwidth") == []


def test_temporal_history_falls_back_to_pooled_series():
    history = TemporalHistory.from_window(numeric_window({"a": [1.0, 2.0], "b": [3.0, 4.0], "c": [5.0, 6.0]}))
    assert history.baseline("accel_utilization", "a").tolist() == [1.0, 2.0]
    assert sorted(history.baseline("accel_utilization", "never-seen").tolist()) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert history.baseline("ib_bandwidth", "a") is None


def test_score_metric_counts_log_lines():
    window = numeric_window({f"n{i}": [0.9, 0.9, 0.9] for i in range(4)})
    samples = list(window.samples)
    samples += [TelemetrySample("dmesg", t * 60_000, "n3", line="xid 79") for t in range(3)]
    scores = {s.node_id: s.spatial for s in score_metric(TelemetryWindow(samples, 0, 180_000), "dmesg")}
    assert max(scores, key=scores.get) == "n3"


def test_match_rules_is_order_independent_and_quarantines_failures():
    kb = KnowledgeBase()
    kb.commit(Rule.from_text("z-low-util", "when mean(accel_utilization, 600) < 0.5 implicate matching"))
    kb.commit(Rule.from_text("a-any-util", "when max(accel_utilization, 600) > 0 implicate argmin mean(accel_utilization, 600)"))
    window = numeric_window({"n0": [0.9, 0.9], "n1": [0.2, 0.1], "n2": [0.9, 0.9]})
    matches = match_rules(kb, window)
    assert [(m.rule_id, m.node_id) for m in matches] == [("a-any-util", "n1"), ("z-low-util", "n1")]

    kb.commit(Rule.from_text("b-dram", "when max(dram_bandwidth, 600) > 0 implicate matching"))
    broken = list(window.samples) + [TelemetrySample("dram_bandwidth", 60_000, "n0", value=float("inf"))]
    bad_window = TelemetryWindow(broken, 0, 120_000)
    matches = match_rules(kb, bad_window)
    assert kb.is_quarantined("b-dram")
    assert [m.rule_id for m in matches] == ["a-any-util", "z-low-util"]
    assert [r.rule_id for r in kb.active_rules()] == ["a-any-util", "z-low-util"]


def test_match_rules_strict_reraises():
    kb = KnowledgeBase()
    kb.commit(Rule.from_text("r1", "when mean(accel_utilization, 600) > 0 implicate matching"))
    window = TelemetryWindow([TelemetrySample("accel_utilization", 0, "n0", value=float("nan"))], 0, 60_000)
    with pytest.raises(RuleRuntimeError):
        match_rules(kb, window, strict=True)
    assert kb.is_quarantined("r1")


@pytest.mark.parametrize("seed", range(20))
def test_spatial_scores_ignore_units_and_column_order(seed):
    rng = np.random.default_rng(seed)
    nodes = [f"node-{i:03d}" for i in range(int(rng.integers(5, 13)))]
    data = rng.normal(0.9, 0.02, size=(int(rng.integers(1, 10)), len(nodes)))
    data[:, int(rng.integers(len(nodes)))] *= 0.5
    scores = spatial_scores(nodes, data)

    scale, shift = float(rng.uniform(1.0, 100.0)), float(rng.uniform(-5.0, 5.0))
    rescaled = spatial_scores(nodes, scale * data + shift)
    assert rescaled == pytest.approx(scores, rel=1e-5)

    order = rng.permutation(len(nodes))
    shuffled = spatial_scores([nodes[i] for i in order], data[:, order])
    assert shuffled == pytest.approx(scores, rel=1e-12)
