"""Operational KPIs recomputed from the simulator event log.

Every function here is pure over the log: the same events always give the same
tables. Periods are calendar months counted from a configured start date.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from decimal import ROUND_DOWN, ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from dateutil import parser as date_parser
from dateutil.relativedelta import relativedelta

from .models import MS_PER_HOUR, KpiError, NodeState

logger = logging.getLogger(__name__)

ROUNDING = {"truncate": ROUND_DOWN, "half-even": ROUND_HALF_EVEN}
DISRUPTION_KINDS = ("job_interrupted", "job_hung", "job_degraded")
HEALTHY_STATES = (NodeState.AVAILABLE.value, NodeState.ALLOCATED.value)


def load_events(path: str) -> List[Dict[str, Any]]:
    events: List[Dict[str, Any]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise KpiError(f"{path}:{number} is not a JSON record: {exc}") from exc
    return events


def _records(events: Iterable[Any]) -> List[Dict[str, Any]]:
    out = [e.to_record() if hasattr(e, "to_record") else dict(e) for e in events]
    return sorted(out, key=lambda e: int(e["t_ms"]))


class Calendar:
    """Maps simulated milliseconds to calendar-month periods."""

    def __init__(self, start: str = "2025-03-01"):
        self.start: datetime = date_parser.isoparse(start)

    def _boundary_ms(self, index: int) -> int:
        edge = self.start + relativedelta(months=index)
        return int((edge - self.start).total_seconds() * 1000)

    def period(self, t_ms: int) -> int:
        index = 0
        while self._boundary_ms(index + 1) <= t_ms:
            index += 1
        return index

    def label(self, index: int) -> str:
        return (self.start + relativedelta(months=index)).strftime("%Y-%m")

    def split(self, t0: int, t1: int) -> List[Tuple[int, int]]:
        """(period, duration_ms) pieces of [t0, t1)."""
        pieces = []
        t = t0
        while t < t1:
            index = self.period(t)
            edge = min(t1, self._boundary_ms(index + 1))
            pieces.append((index, edge - t))
            t = edge
        return pieces


def round_value(value: float, mode: str = "truncate", places: int = 2) -> Decimal:
    if mode not in ROUNDING:
        raise KpiError(f"unknown rounding convention {mode!r}")
    quantum = Decimal(1).scaleb(-places)
    return Decimal(repr(float(value))).quantize(quantum, rounding=ROUNDING[mode])


def _percent(part: float, whole: float) -> float:
    if whole <= 0:
        return 0.0
    return float(Decimal(repr(float(part))) * 100 / Decimal(repr(float(whole))))


# -- incidents -------------------------------------------------------------


@dataclass
class IncidentRecord:
    incident_id: str
    node_id: Optional[str]
    job_id: Optional[str]
    t_fault: int
    t_detected: Optional[int] = None
    t_recovered: Optional[int] = None
    t_node_available: Optional[int] = None
    automated: bool = False

    def __post_init__(self) -> None:
        ordered = [t for t in (self.t_fault, self.t_detected) if t is not None]
        later = [t for t in (self.t_recovered, self.t_node_available) if t is not None]
        if ordered != sorted(ordered) or (later and self.t_detected is not None and min(later) < self.t_detected):
            raise KpiError(f"incident {self.incident_id} has timestamps out of order")


def incidents_from_events(events: Iterable[Any]) -> List[IncidentRecord]:
    """One record per ``detected`` event, joined to its fault, job resumption and node recycling."""
    records = _records(events)
    fault_t: Dict[str, int] = {}
    disruption_t: Dict[str, int] = {}
    resumed: Dict[str, int] = {}
    recycled: Dict[str, int] = {}
    for e in records:
        detail = e.get("detail") or {}
        kind = e["kind"]
        if kind == "fault":
            fault_t.setdefault(detail["fault_id"], int(e["t_ms"]))
        elif kind in DISRUPTION_KINDS and detail.get("fault_id"):
            disruption_t.setdefault(detail["fault_id"], int(e["t_ms"]))
        elif kind == "job_resumed":
            for incident in detail.get("incidents", []):
                resumed.setdefault(incident, int(e["t_ms"]))
        elif kind == "node_recycled":
            for incident in detail.get("incidents", []):
                recycled.setdefault(incident, int(e["t_ms"]))

    incidents: List[IncidentRecord] = []
    for e in records:
        if e["kind"] != "detected":
            continue
        detail = e.get("detail") or {}
        incident_id = detail["incident_id"]
        t_detected = int(e["t_ms"])
        fault_id = detail.get("fault_id")
        t_fault = disruption_t.get(fault_id, fault_t.get(fault_id, t_detected)) if fault_id else t_detected
        incidents.append(
            IncidentRecord(
                incident_id,
                e.get("node_id"),
                e.get("job_id"),
                min(t_fault, t_detected),
                t_detected,
                resumed.get(incident_id),
                recycled.get(incident_id),
                bool(detail.get("automated", False)),
            )
        )
    return incidents


def _by_period(items: Iterable[Tuple[int, float]]) -> Dict[int, List[float]]:
    grouped: Dict[int, List[float]] = {}
    for period, value in items:
        grouped.setdefault(period, []).append(value)
    return grouped


# -- time to failure -------------------------------------------------------


@dataclass(frozen=True)
class TtfRecord:
    job_id: str
    t_start: int
    t_fault: int

    @property
    def hours(self) -> float:
        return (self.t_fault - self.t_start) / MS_PER_HOUR


@dataclass
class TtfSummary:
    records: List[TtfRecord]
    median_h: Optional[float]
    max_h: Optional[float]
    max_by_period: Dict[int, float] = field(default_factory=dict)


def ttf_from_events(events: Iterable[Any]) -> List[TtfRecord]:
    """Run segments from training start to the first fault-caused disruption."""
    started: Dict[str, int] = {}
    out: List[TtfRecord] = []
    for e in _records(events):
        job_id = e.get("job_id")
        if not job_id:
            continue
        kind = e["kind"]
        if kind == "job_training":
            started[job_id] = int(e["t_ms"])
        elif kind in DISRUPTION_KINDS and job_id in started:
            if (e.get("detail") or {}).get("fault_id"):
                out.append(TtfRecord(job_id, started[job_id], int(e["t_ms"])))
            del started[job_id]
        elif kind in ("job_completed", "job_recovering") and job_id in started:
            del started[job_id]
    return out


def time_to_failure(records: Sequence[TtfRecord], calendar: Optional[Calendar] = None) -> TtfSummary:
    calendar = calendar or Calendar()
    if not records:
        return TtfSummary([], None, None, {})
    hours = np.array([r.hours for r in records])
    by_period = _by_period((calendar.period(r.t_fault), r.hours) for r in records)
    return TtfSummary(
        list(records),
        float(np.median(hours)),
        float(hours.max()),
        {p: max(v) for p, v in sorted(by_period.items())},
    )


# -- recovery and recycling ------------------------------------------------


@dataclass
class RecoveryReport:
    mean_h_by_period: Dict[int, float]
    excluded: int


def recovery_time(incidents: Sequence[IncidentRecord], calendar: Optional[Calendar] = None) -> RecoveryReport:
    """Mean hours from disruption to job resumption per period; incomplete incidents are counted, not used."""
    calendar = calendar or Calendar()
    complete = [i for i in incidents if i.t_recovered is not None and i.job_id]
    excluded = sum(1 for i in incidents if i.job_id and i.t_recovered is None)
    grouped = _by_period((calendar.period(i.t_fault), (i.t_recovered - i.t_fault) / MS_PER_HOUR) for i in complete)
    return RecoveryReport({p: float(np.mean(v)) for p, v in sorted(grouped.items())}, excluded)


@dataclass(frozen=True)
class RecycleRow:
    detection_h: float
    validation_h: float
    count: int

    @property
    def total_h(self) -> float:
        return self.detection_h + self.validation_h


def recycle_breakdown(incidents: Sequence[IncidentRecord], calendar: Optional[Calendar] = None) -> Dict[int, RecycleRow]:
    calendar = calendar or Calendar()
    grouped: Dict[int, List[IncidentRecord]] = {}
    for incident in incidents:
        if incident.t_detected is None or incident.t_node_available is None:
            continue
        grouped.setdefault(calendar.period(incident.t_fault), []).append(incident)
    rows: Dict[int, RecycleRow] = {}
    for period, items in sorted(grouped.items()):
        detection = sum(i.t_detected - i.t_fault for i in items) / len(items) / MS_PER_HOUR
        validation = sum(i.t_node_available - i.t_detected for i in items) / len(items) / MS_PER_HOUR
        rows[period] = RecycleRow(detection, validation, len(items))
    return rows


def automation_ratio(incidents: Sequence[IncidentRecord], calendar: Optional[Calendar] = None) -> Dict[int, float]:
    calendar = calendar or Calendar()
    grouped = _by_period((calendar.period(i.t_fault), 1.0 if i.automated else 0.0) for i in incidents)
    return {p: float(Decimal(int(sum(v))) * 100 / Decimal(len(v))) for p, v in sorted(grouped.items())}


# -- utilization -----------------------------------------------------------


@dataclass
class UtilizationLedger:
    total_h: float = 0.0
    available_h: float = 0.0
    allocated_h: float = 0.0
    busy_h: float = 0.0

    def __post_init__(self) -> None:
        tolerance = 1e-9 * max(1.0, self.total_h)
        if not (
            self.busy_h <= self.allocated_h + tolerance
            and self.allocated_h <= self.available_h + tolerance
            and self.available_h <= self.total_h + tolerance
        ):
            raise KpiError(
                f"ledger breaks busy <= allocated <= available <= total: "
                f"{self.busy_h}, {self.allocated_h}, {self.available_h}, {self.total_h}"
            )


def utilization(ledger: UtilizationLedger) -> Tuple[float, float, float]:
    """(available %, allocated %, effective %) of total node-hours."""
    return (
        _percent(ledger.available_h, ledger.total_h),
        _percent(ledger.allocated_h, ledger.total_h),
        _percent(ledger.busy_h, ledger.total_h),
    )


def ledger_from_events(
    events: Iterable[Any],
    nodes: Sequence[str],
    t_end: int,
    calendar: Optional[Calendar] = None,
) -> Dict[int, UtilizationLedger]:
    """Sweep node and job state over [0, t_end) and accumulate node-hours per period."""
    calendar = calendar or Calendar()
    healthy = {n: True for n in nodes}
    holder: Dict[str, Optional[str]] = {n: None for n in nodes}
    busy_jobs: Dict[str, bool] = {}
    sums: Dict[int, List[float]] = {}

    def accumulate(t0: int, t1: int) -> None:
        if t1 <= t0:
            return
        n_healthy = sum(1 for n in nodes if healthy[n])
        n_alloc = sum(1 for n in nodes if healthy[n] and holder[n])
        n_busy = sum(1 for n in nodes if healthy[n] and holder[n] and busy_jobs.get(holder[n] or "", False))
        for period, ms in calendar.split(t0, t1):
            acc = sums.setdefault(period, [0.0, 0.0, 0.0, 0.0])
            hours = ms / MS_PER_HOUR
            acc[0] += hours * len(nodes)
            acc[1] += hours * n_healthy
            acc[2] += hours * n_alloc
            acc[3] += hours * n_busy

    t_prev = 0
    for e in _records(events):
        t = min(int(e["t_ms"]), t_end)
        accumulate(t_prev, t)
        t_prev = max(t_prev, t)
        kind = e["kind"]
        detail = e.get("detail") or {}
        node_id, job_id = e.get("node_id"), e.get("job_id")
        if kind == "node_state" and node_id in healthy:
            healthy[node_id] = detail.get("to") in HEALTHY_STATES
            if detail.get("from") == NodeState.ALLOCATED.value:
                holder[node_id] = None
        elif kind == "job_loading":
            for n in detail.get("nodes", []):
                if n in holder:
                    holder[n] = job_id
            busy_jobs[job_id] = False
        elif kind == "job_released":
            for n in detail.get("nodes", []):
                if n in holder and holder[n] == job_id:
                    holder[n] = None
        elif kind in ("job_training", "job_healthy", "job_degraded"):
            busy_jobs[job_id] = True
        elif kind in ("job_interrupted", "job_hung", "job_recovering", "job_completed"):
            busy_jobs[job_id] = False
    accumulate(t_prev, t_end)
    return {p: UtilizationLedger(*acc) for p, acc in sorted(sums.items())}


# -- reports ---------------------------------------------------------------


@dataclass
class KpiReport:
    calendar: Calendar
    rounding: str
    ttf: TtfSummary
    recovery: RecoveryReport
    recycle: Dict[int, RecycleRow]
    ledgers: Dict[int, UtilizationLedger]
    automation: Dict[int, float]
    incidents: List[IncidentRecord]

    @property
    def periods(self) -> List[int]:
        keys = set(self.ledgers) | set(self.recovery.mean_h_by_period) | set(self.automation) | set(self.ttf.max_by_period) | set(self.recycle)
        return sorted(keys)

    def fmt(self, value: Optional[float]) -> str:
        return "" if value is None else str(round_value(value, self.rounding))

    def write_tables(self, out_dir: str) -> List[str]:
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        periods = self.periods
        labels = [self.calendar.label(p) for p in periods]
        written = []

        def table(name: str, rows: List[Tuple[str, List[Optional[float]]]]) -> None:
            path = target / name
            with path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([f"metric (rounding={self.rounding})", *labels])
                for title, values in rows:
                    writer.writerow([title, *[self.fmt(v) for v in values]])
            written.append(str(path))

        table("max_ttf.csv", [("max job time-to-failure (h)", [self.ttf.max_by_period.get(p) for p in periods])])
        table("recovery_time.csv", [("mean job recovery time (h)", [self.recovery.mean_h_by_period.get(p) for p in periods])])

        detection, validation, total = [], [], []
        for p in periods:
            row = self.recycle.get(p)
            if row is None:
                detection.append(None)
                validation.append(None)
                total.append(None)
                continue
            # total is the sum of the reported parts so each row re-adds exactly
            det = round_value(row.detection_h, self.rounding)
            val = round_value(row.validation_h, self.rounding)
            detection.append(float(det))
            validation.append(float(val))
            total.append(float(det + val))
        table("recycle_breakdown.csv", [("detection (h)", detection), ("validation (h)", validation), ("total (h)", total)])

        shares = [utilization(self.ledgers[p]) if p in self.ledgers else (None, None, None) for p in periods]
        table(
            "utilization.csv",
            [
                ("available utilization (%)", [s[0] for s in shares]),
                ("allocated utilization (%)", [s[1] for s in shares]),
                ("effective utilization (%)", [s[2] for s in shares]),
            ],
        )
        table("automation_ratio.csv", [("automation recovery ratio (%)", [self.automation.get(p) for p in periods])])

        summary_path = target / "summary.json"
        summary_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(str(summary_path))
        return written

    def summary(self) -> Dict[str, Any]:
        return {
            "rounding": self.rounding,
            "periods": [self.calendar.label(p) for p in self.periods],
            "incidents": len(self.incidents),
            "automated_incidents": sum(1 for i in self.incidents if i.automated),
            "recovery_excluded": self.recovery.excluded,
            "ttf_median_h": self.ttf.median_h,
            "ttf_max_h": self.ttf.max_h,
            "failures": len(self.ttf.records),
            "recovery_h": {self.calendar.label(p): v for p, v in self.recovery.mean_h_by_period.items()},
            "automation_pct": {self.calendar.label(p): v for p, v in self.automation.items()},
            "utilization_pct": {
                self.calendar.label(p): dict(zip(("available", "allocated", "effective"), utilization(l)))
                for p, l in self.ledgers.items()
            },
        }


def compute_kpis(
    events: Iterable[Any],
    nodes: Sequence[str],
    t_end: int,
    rounding: str = "truncate",
    calendar_start: str = "2025-03-01",
) -> KpiReport:
    if rounding not in ROUNDING:
        raise KpiError(f"unknown rounding convention {rounding!r}")
    records = _records(events)
    calendar = Calendar(calendar_start)
    incidents = incidents_from_events(records)
    report = KpiReport(
        calendar,
        rounding,
        time_to_failure(ttf_from_events(records), calendar),
        recovery_time(incidents, calendar),
        recycle_breakdown(incidents, calendar),
        ledger_from_events(records, nodes, t_end, calendar),
        automation_ratio(incidents, calendar),
        incidents,
    )
    logger.info("KPIs over %d periods from %d events (%d incidents)", len(report.periods), len(records), len(incidents))
    return report


def nodes_from_events(events: Iterable[Mapping[str, Any]]) -> List[str]:
    return sorted({e["node_id"] for e in events if e.get("node_id")})
