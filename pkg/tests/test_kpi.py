from __future__ import annotations

import json
from decimal import Decimal

import pytest

from fleet_guardian.kpi import (
    Calendar,
    IncidentRecord,
    UtilizationLedger,
    automation_ratio,
    compute_kpis,
    incidents_from_events,
    ledger_from_events,
    load_events,
    recovery_time,
    recycle_breakdown,
    round_value,
    time_to_failure,
    ttf_from_events,
    utilization,
)
from fleet_guardian.models import MS_PER_HOUR, KpiError

H = MS_PER_HOUR


def _event(t_ms, kind, node_id=None, job_id=None, **detail):
    return {"t_ms": int(t_ms), "kind": kind, "node_id": node_id, "job_id": job_id, "detail": detail}


def _incident(i, t_fault=0, detected_h=None, recovered_h=None, available_h=None, automated=False):
    def at(hours):
        return None if hours is None else t_fault + round(hours * H)

    return IncidentRecord(f"inc-{i}", "node-000", "job-a", t_fault, at(detected_h), at(recovered_h), at(available_h), automated)


def test_rounding_conventions():
    assert round_value(10 / 23 * 100, "truncate") == Decimal("43.47")
    assert round_value(10 / 23 * 100, "half-even") == Decimal("43.48")
    assert round_value(45 / 46 * 100, "half-even") == Decimal("97.83")
    assert round_value(45 / 46 * 100, "truncate") == Decimal("97.82")
    with pytest.raises(KpiError):
        round_value(1.0, "banker")


def test_calendar_months():
    calendar = Calendar("2025-03-01")
    march = 31 * 24 * H
    assert calendar.period(0) == 0
    assert calendar.period(march - 1) == 0
    assert calendar.period(march) == 1
    assert calendar.label(4) == "2025-07"
    assert calendar.split(march - H, march + 2 * H) == [(0, H), (1, 2 * H)]


def test_time_to_failure():
    summary = time_to_failure([])
    assert summary.median_h is None
    events = [
        _event(0, "job_training", job_id="job-a"),
        _event(5 * H, "job_interrupted", job_id="job-a", fault_id="f-1"),
        _event(6 * H, "job_training", job_id="job-a"),
        _event(7 * H, "job_completed", job_id="job-a"),
    ]
    records = ttf_from_events(events)
    assert [r.hours for r in records] == [5.0]
    summary = time_to_failure(records)
    assert summary.median_h == summary.max_h == 5.0
    assert summary.max_by_period == {0: 5.0}


def test_disruption_without_fault_is_not_a_failure():
    events = [_event(0, "job_training", job_id="j"), _event(H, "job_interrupted", job_id="j")]
    assert ttf_from_events(events) == []


def test_recovery_time_means_and_exclusions():
    assert recovery_time([_incident(1, detected_h=0.1, recovered_h=0.5)]).mean_h_by_period == {0: pytest.approx(0.5)}
    report = recovery_time(
        [
            _incident(1, detected_h=0.05, recovered_h=0.1),
            _incident(2, detected_h=0.05, recovered_h=0.3),
            _incident(3, detected_h=0.05),
        ]
    )
    assert report.mean_h_by_period[0] == pytest.approx(0.2)
    assert report.excluded == 1


def test_recycle_breakdown_adds_up():
    rows = recycle_breakdown([_incident(1, detected_h=26.79, available_h=26.79 + 28.75)])
    assert rows[0].detection_h == pytest.approx(26.79)
    assert rows[0].validation_h == pytest.approx(28.75)
    assert rows[0].total_h == pytest.approx(55.54)

    zero_latency = recycle_breakdown([_incident(2, detected_h=0.0, available_h=3.0)])
    assert zero_latency[0].total_h == zero_latency[0].validation_h == 3.0


def test_utilization_shares():
    assert utilization(UtilizationLedger(100, 100, 100, 100)) == (100.0, 100.0, 100.0)
    available, allocated, effective = utilization(UtilizationLedger(10000, 9782, 9454, 9445))
    assert (available, allocated, effective) == (97.82, 94.54, 94.45)
    with pytest.raises(KpiError):
        UtilizationLedger(10, 5, 6, 1)


def test_automation_ratio():
    zero = [_incident(i, detected_h=0.1) for i in range(23)]
    assert automation_ratio(zero) == {0: 0.0}
    some = [_incident(i, detected_h=0.1, automated=i < 10) for i in range(23)]
    assert round_value(automation_ratio(some)[0], "truncate") == Decimal("43.47")


def test_incident_timestamps_must_be_ordered():
    with pytest.raises(KpiError):
        IncidentRecord("x", None, None, t_fault=10, t_detected=5)
    with pytest.raises(KpiError):
        IncidentRecord("x", None, None, t_fault=0, t_detected=10, t_recovered=5)


def _incident_events():
    return [
        _event(0, "job_loading", job_id="job-a", nodes=["node-000", "node-001"]),
        _event(0, "job_training", job_id="job-a"),
        _event(2 * H, "fault", node_id="node-001", fault_id="f-1"),
        _event(3 * H, "job_interrupted", job_id="job-a", fault_id="f-1"),
        _event(3 * H + 60_000, "detected", node_id="node-001", job_id="job-a", incident_id="inc-1", fault_id="f-1", automated=True),
        _event(3 * H + 60_000, "node_state", node_id="node-001", **{"from": "Allocated", "to": "Suspect"}),
        _event(3 * H + 60_000, "job_released", job_id="job-a", nodes=["node-001"]),
        _event(4 * H, "job_resumed", job_id="job-a", incidents=["inc-1"]),
        _event(6 * H, "node_state", node_id="node-001", **{"from": "Validating", "to": "Available"}),
        _event(6 * H, "node_recycled", node_id="node-001", incidents=["inc-1"]),
    ]


def test_incidents_join_fault_disruption_and_recovery():
    (incident,) = incidents_from_events(_incident_events())
    assert incident.incident_id == "inc-1"
    assert incident.t_fault == 3 * H  # the disruption, not the silent fault
    assert incident.t_detected == 3 * H + 60_000
    assert incident.t_recovered == 4 * H
    assert incident.t_node_available == 6 * H
    assert incident.automated


def test_ledger_sweep():
    ledgers = ledger_from_events(_incident_events(), ["node-000", "node-001"], 10 * H)
    ledger = ledgers[0]
    assert ledger.total_h == pytest.approx(20.0)
    # node-001 is out of service between 3h01m and 6h
    assert ledger.available_h == pytest.approx(20.0 - (3 * H - 60_000) / H)
    assert ledger.busy_h <= ledger.allocated_h <= ledger.available_h


def test_compute_kpis_writes_tables(tmp_path):
    events = _incident_events()
    path = tmp_path / "events.jsonl"
    path.write_text("".join(json.dumps(e) + "\n" for e in events) + "\n", encoding="utf-8")
    loaded = load_events(str(path))
    assert len(loaded) == len(events)

    report = compute_kpis(loaded, ["node-000", "node-001"], 10 * H, rounding="half-even")
    written = report.write_tables(str(tmp_path / "kpi"))
    names = sorted(p.split("/")[-1] for p in written)
    assert names == [
        "automation_ratio.csv",
        "max_ttf.csv",
        "recovery_time.csv",
        "recycle_breakdown.csv",
        "summary.json",
        "utilization.csv",
    ]
    header = (tmp_path / "kpi" / "max_ttf.csv").read_text(encoding="utf-8").splitlines()
    assert header[0] == "metric (rounding=half-even),2025-03"
    assert header[1] == "max job time-to-failure (h),3.00"
    summary = json.loads((tmp_path / "kpi" / "summary.json").read_text(encoding="utf-8"))
    assert summary["incidents"] == summary["automated_incidents"] == 1
    assert summary["automation_pct"] == {"2025-03": 100.0}

    with pytest.raises(KpiError):
        compute_kpis(loaded, [], 0, rounding="nearest")
    path.write_text("{broken\n", encoding="utf-8")
    with pytest.raises(KpiError):
        load_events(str(path))


def test_recycle_table_total_is_sum_of_reported_parts(tmp_path):
    events = [
        _event(0, "fault", node_id="n", fault_id="f"),
        _event(round(26.79 * H), "detected", node_id="n", incident_id="i", fault_id="f"),
        _event(round(55.54 * H), "node_recycled", node_id="n", incidents=["i"]),
    ]
    report = compute_kpis(events, ["n"], 60 * H)
    report.write_tables(str(tmp_path))
    rows = (tmp_path / "recycle_breakdown.csv").read_text(encoding="utf-8").splitlines()
    assert rows[1:] == ["detection (h),26.79", "validation (h),28.75", "total (h),55.54"]
