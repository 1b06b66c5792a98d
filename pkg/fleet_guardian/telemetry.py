"""Declarative collectors, an in-memory telemetry store, and windowed views."""

from __future__ import annotations

import bisect
import csv
import logging
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .models import (
    NonFiniteValue,
    ParseError,
    TelemetrySample,
    UnknownCollector,
    UnknownMetric,
    ValidationError,
)

logger = logging.getLogger(__name__)

SOURCES = ("driver-log", "os-log", "accelerator", "pcie", "interconnect", "job-kpi")
LOG_SOURCES = ("driver-log", "os-log")
AGG_OPS = ("mean", "max", "min", "count", "rate")

# Hypothesis groups explored by diagnosis, in ladder order.
METRIC_GROUPS: Dict[str, Tuple[str, ...]] = {
    "job-kpi": ("throughput_per_accel",),
    "accelerator": ("accel_utilization", "dram_bandwidth", "hbm_ecc_errors"),
    "interconnect": ("ib_bandwidth", "pcie_bandwidth"),
    "host-os": ("dmesg",),
    "logs": ("job_log",),
}


@dataclass(frozen=True)
class CollectorSpec:
    name: str
    source: str
    metrics: Tuple[str, ...] = ()
    interval_s: float = 60.0
    labels: Mapping[str, str] = field(default_factory=dict)

    @property
    def is_log(self) -> bool:
        return self.source in LOG_SOURCES

    @property
    def channels(self) -> Tuple[str, ...]:
        """Series names this collector produces."""
        return (self.name,) if self.is_log else tuple(self.metrics)


def load_collectors(document: str) -> List[CollectorSpec]:
    """Parse and validate a collector configuration document."""
    try:
        data = yaml.safe_load(document) if document else None
    except yaml.YAMLError as exc:
        raise ParseError(f"collector document is not valid YAML: {exc}") from exc
    if data is None:
        return []
    if not isinstance(data, dict):
        raise ParseError("collector document must be a mapping with a `collectors` list")
    raw = data.get("collectors") or []
    if not isinstance(raw, list):
        raise ParseError("`collectors` must be a list")

    specs: List[CollectorSpec] = []
    seen = set()
    for index, entry in enumerate(raw):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ParseError(f"collector #{index} must be a mapping with a name")
        name = str(entry["name"])
        if name in seen:
            raise ValidationError(f"duplicate collector name {name!r}")
        seen.add(name)
        source = str(entry.get("source", ""))
        if source not in SOURCES:
            raise ValidationError(f"collector {name!r}: unknown source {source!r}")
        interval = entry.get("interval_s", 60)
        try:
            interval = float(interval)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"collector {name!r}: interval_s must be a number") from exc
        if interval <= 0:
            raise ValidationError(f"collector {name!r}: interval_s must be positive")
        metrics = tuple(str(m) for m in (entry.get("metrics") or []))
        if source in LOG_SOURCES and metrics:
            raise ValidationError(f"log collector {name!r} cannot declare metrics")
        if source not in LOG_SOURCES and not metrics:
            raise ValidationError(f"collector {name!r} declares no metrics")
        labels = {str(k): str(v) for k, v in (entry.get("labels") or {}).items()}
        specs.append(CollectorSpec(name, source, metrics, interval, labels))
    return specs


def load_collectors_file(path: str) -> List[CollectorSpec]:
    return load_collectors(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TelemetrySchema:
    metrics: FrozenSet[str]
    log_channels: FrozenSet[str]

    @classmethod
    def from_collectors(cls, collectors: Iterable[CollectorSpec]) -> "TelemetrySchema":
        metrics, channels = set(), set()
        for spec in collectors:
            if spec.is_log:
                channels.add(spec.name)
            else:
                metrics.update(spec.metrics)
        return cls(frozenset(metrics), frozenset(channels))

    def sample_window(self, nodes: int = 3, ticks: int = 3, interval_s: float = 60.0) -> "TelemetryWindow":
        """Schema-conformant synthetic window, used to dry-run rule predicates."""
        samples: List[TelemetrySample] = []
        step = int(interval_s * 1000)
        for tick in range(ticks):
            t = tick * step
            for n in range(nodes):
                node_id = f"sample-{n}"
                for metric in sorted(self.metrics):
                    samples.append(TelemetrySample(metric, t, node_id, value=float(n + tick)))
                for channel in sorted(self.log_channels):
                    samples.append(TelemetrySample(channel, t, node_id, line="sample line 0x0"))
        return TelemetryWindow(samples, 0, ticks * step)


@dataclass(frozen=True)
class SeriesQuery:
    metric: str
    t0: int
    t1: int
    nodes: Optional[FrozenSet[str]] = None
    job_id: Optional[str] = None
    group_by: str = "node"  # node | job | none

    def __post_init__(self) -> None:
        if self.t0 >= self.t1:
            raise ValueError("query range needs t0 < t1")
        if self.group_by not in ("node", "job", "none"):
            raise ValueError(f"unknown group_by {self.group_by!r}")


def _sample_t(sample: TelemetrySample) -> int:
    return sample.t


class TelemetryStore:
    """Thread-safe in-memory store of metric and log series keyed by (metric, node)."""

    def __init__(
        self,
        collectors: Optional[Sequence[CollectorSpec]] = None,
        max_samples_per_series: Optional[int] = None,
    ):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.max_samples_per_series = max_samples_per_series
        self._lock = threading.RLock()
        self._series: Dict[Tuple[str, str], List[TelemetrySample]] = {}
        self._known: set = set()
        self._routes: Dict[str, CollectorSpec] = {}
        self.collectors: Tuple[CollectorSpec, ...] = ()
        self.reload(collectors or [])

    def reload(self, collectors: Sequence[CollectorSpec]) -> None:
        """Atomically replace the active collector set; stored history is kept."""
        routes: Dict[str, CollectorSpec] = {}
        for spec in collectors:
            for channel in spec.channels:
                routes[channel] = spec
        with self._lock:
            self.collectors = tuple(collectors)
            self._routes = routes
            self._known.update(routes)
        self.logger.info("Active collectors: %s", ", ".join(s.name for s in collectors) or "(none)")

    def reload_document(self, document: str) -> List[CollectorSpec]:
        specs = load_collectors(document)
        self.reload(specs)
        return specs

    @property
    def schema(self) -> TelemetrySchema:
        return TelemetrySchema.from_collectors(self.collectors)

    def metrics(self) -> List[str]:
        with self._lock:
            return sorted(self._known)

    def ingest(self, samples: Iterable[TelemetrySample]) -> int:
        """Validate a batch, then commit it as one unit."""
        batch = list(samples)
        with self._lock:
            routes = self._routes
            prepared: List[TelemetrySample] = []
            for sample in batch:
                spec = routes.get(sample.metric)
                if spec is None or spec.is_log != sample.is_log:
                    raise UnknownCollector(f"no active collector for {sample.metric!r}")
                if sample.value is not None and not math.isfinite(sample.value):
                    raise NonFiniteValue(f"{sample.metric} on {sample.node_id} at {sample.t}: {sample.value}")
                if spec.labels:
                    sample = replace(sample, labels={**spec.labels, **sample.labels})
                prepared.append(sample)
            for sample in prepared:
                key = (sample.metric, sample.node_id)
                series = self._series.setdefault(key, [])
                if not series or series[-1].t <= sample.t:
                    series.append(sample)
                else:
                    bisect.insort_right(series, sample, key=_sample_t)
                limit = self.max_samples_per_series
                if limit and len(series) > limit:
                    del series[: len(series) - limit]
        return len(prepared)

    def query(self, q: SeriesQuery) -> Dict[str, List[TelemetrySample]]:
        """Time-ascending samples per group; empty groups are omitted."""
        with self._lock:
            if q.metric not in self._known:
                raise UnknownMetric(q.metric)
            picked: List[TelemetrySample] = []
            for (metric, node_id), series in self._series.items():
                if metric != q.metric or (q.nodes is not None and node_id not in q.nodes):
                    continue
                lo = bisect.bisect_left(series, q.t0, key=_sample_t)
                hi = bisect.bisect_left(series, q.t1, key=_sample_t)
                picked.extend(series[lo:hi])
        if q.job_id is not None:
            picked = [s for s in picked if s.job_id == q.job_id]
        picked.sort(key=lambda s: (s.t, s.node_id))
        groups: Dict[str, List[TelemetrySample]] = {}
        for sample in picked:
            if q.group_by == "node":
                key = sample.node_id
            elif q.group_by == "job":
                key = sample.job_id or ""
            else:
                key = "all"
            groups.setdefault(key, []).append(sample)
        return groups

    def snapshot(self, t0: int, t1: int, nodes: Optional[Iterable[str]] = None) -> List[TelemetrySample]:
        """Every sample of every series in [t0, t1), optionally limited to nodes."""
        wanted = set(nodes) if nodes is not None else None
        out: List[TelemetrySample] = []
        with self._lock:
            for (_, node_id), series in self._series.items():
                if wanted is not None and node_id not in wanted:
                    continue
                lo = bisect.bisect_left(series, t0, key=_sample_t)
                hi = bisect.bisect_left(series, t1, key=_sample_t)
                out.extend(series[lo:hi])
        out.sort(key=lambda s: (s.t, s.node_id, s.metric))
        return out

    def window(self, t0: int, t1: int, nodes: Optional[Iterable[str]] = None) -> "TelemetryWindow":
        return TelemetryWindow(self.snapshot(t0, t1, nodes), t0, t1)

    def export_csv(self, path: str, metric: str) -> int:
        with self._lock:
            rows = [s for (m, _), series in self._series.items() if m == metric for s in series]
        rows.sort(key=lambda s: (s.t, s.node_id))
        return write_samples_csv(path, rows)


CSV_COLUMNS = ["t_ms", "node_id", "job_id", "metric", "value", "line"]


def write_samples_csv(path: str, samples: Sequence[TelemetrySample]) -> int:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in samples:
            writer.writerow([
                s.t,
                s.node_id,
                s.job_id or "",
                s.metric,
                "" if s.value is None else repr(float(s.value)),
                "" if s.line is None else s.line,
            ])
    return len(samples)


def read_samples_csv(path: str) -> List[TelemetrySample]:
    samples: List[TelemetrySample] = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ParseError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for row in reader:
            value = float(row["value"]) if row["value"] != "" else None
            samples.append(
                TelemetrySample(
                    metric=row["metric"],
                    t=int(row["t_ms"]),
                    node_id=row["node_id"],
                    value=value,
                    line=row["line"] if value is None else None,
                    job_id=row["job_id"] or None,
                )
            )
    return samples


def aggregate(
    series: Sequence[TelemetrySample],
    window: float,
    op: str,
    t0: Optional[int] = None,
) -> List[Tuple[int, float]]:
    """Tumbling [start, start + window) aggregation; one point per non-empty window.

    `rate` is the finite difference between the first and last sample of each
    window per second; single-sample windows report 0.0.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if op not in AGG_OPS:
        raise ValueError(f"unknown aggregate op {op!r}")
    if not series:
        return []
    ordered = sorted(series, key=_sample_t)
    width = int(round(window * 1000))
    origin = ordered[0].t if t0 is None else int(t0)
    buckets: Dict[int, List[TelemetrySample]] = {}
    for sample in ordered:
        if sample.t < origin:
            continue
        start = origin + ((sample.t - origin) // width) * width
        buckets.setdefault(start, []).append(sample)

    out: List[Tuple[int, float]] = []
    for start in sorted(buckets):
        members = buckets[start]
        if op == "count":
            out.append((start, float(len(members))))
            continue
        if any(m.value is None for m in members):
            raise ValueError(f"op {op!r} needs numeric samples")
        values = np.array([m.value for m in members], dtype=float)
        if op == "mean":
            out.append((start, float(values.mean())))
        elif op == "max":
            out.append((start, float(values.max())))
        elif op == "min":
            out.append((start, float(values.min())))
        else:
            span_s = (members[-1].t - members[0].t) / 1000.0
            out.append((start, float((values[-1] - values[0]) / span_s) if span_s > 0 else 0.0))
    return out


class TelemetryWindow:
    """Immutable per-node view over a sample list for [t0, t1)."""

    def __init__(self, samples: Iterable[TelemetrySample], t0: Optional[int] = None, t1: Optional[int] = None):
        ordered = sorted(samples, key=lambda s: (s.t, s.node_id, s.metric))
        if t0 is None:
            t0 = ordered[0].t if ordered else 0
        if t1 is None:
            t1 = ordered[-1].t + 1 if ordered else t0 + 1
        self.t0 = int(t0)
        self.t1 = int(t1)
        self.samples: Tuple[TelemetrySample, ...] = tuple(s for s in ordered if self.t0 <= s.t < self.t1)
        self._numeric: Dict[Tuple[str, str], List[Tuple[int, float]]] = {}
        self._logs: Dict[Tuple[str, str], List[Tuple[int, str]]] = {}
        nodes, ticks, metrics, channels = set(), set(), set(), set()
        for s in self.samples:
            nodes.add(s.node_id)
            if s.is_log:
                channels.add(s.metric)
                self._logs.setdefault((s.metric, s.node_id), []).append((s.t, s.line))
            else:
                ticks.add(s.t)
                metrics.add(s.metric)
                self._numeric.setdefault((s.metric, s.node_id), []).append((s.t, float(s.value)))
        self.nodes: Tuple[str, ...] = tuple(sorted(nodes))
        self.ticks: Tuple[int, ...] = tuple(sorted(ticks))
        self.metrics: FrozenSet[str] = frozenset(metrics)
        self.log_channels: FrozenSet[str] = frozenset(channels)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def span_s(self) -> float:
        return (self.t1 - self.t0) / 1000.0

    def restrict(self, t0: int, t1: int, nodes: Optional[Iterable[str]] = None) -> "TelemetryWindow":
        wanted = set(nodes) if nodes is not None else None
        picked = [s for s in self.samples if wanted is None or s.node_id in wanted]
        return TelemetryWindow(picked, t0, t1)

    def values(self, metric: str, node_id: str, since: Optional[int] = None) -> np.ndarray:
        points = self._numeric.get((metric, node_id), [])
        return np.array([v for t, v in points if since is None or t >= since], dtype=float)

    def points(self, metric: str, node_id: str, since: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        pts = [(t, v) for t, v in self._numeric.get((metric, node_id), []) if since is None or t >= since]
        times = np.array([t for t, _ in pts], dtype=np.int64)
        return times, np.array([v for _, v in pts], dtype=float)

    def lines(self, channel: str, node_id: str, since: Optional[int] = None) -> List[str]:
        points = self._logs.get((channel, node_id), [])
        return [line for t, line in points if since is None or t >= since]

    def matrix(self, metric: str, nodes: Optional[Sequence[str]] = None) -> Tuple[Tuple[str, ...], np.ndarray]:
        """Ticks x nodes matrix over timestamps every listed node reported."""
        node_ids = tuple(nodes) if nodes is not None else tuple(
            n for n in self.nodes if (metric, n) in self._numeric
        )
        if not node_ids:
            return (), np.empty((0, 0))
        per_node = [dict(self._numeric.get((metric, n), [])) for n in node_ids]
        common = set(per_node[0])
        for points in per_node[1:]:
            common &= set(points)
        ticks = sorted(common)
        data = np.array([[points[t] for points in per_node] for t in ticks], dtype=float)
        return node_ids, data.reshape(len(ticks), len(node_ids))

    def log_counts(self, channel: str, nodes: Optional[Sequence[str]] = None, pattern: Optional[str] = None) -> Tuple[Tuple[str, ...], np.ndarray]:
        """Ticks x nodes matrix of log line counts on the numeric tick grid."""
        node_ids = tuple(nodes) if nodes is not None else self.nodes
        ticks = list(self.ticks) or sorted({t for pts in self._logs.values() for t, _ in pts})
        if not ticks or not node_ids:
            return node_ids, np.zeros((len(ticks), len(node_ids)))
        index = {t: i for i, t in enumerate(ticks)}
        data = np.zeros((len(ticks), len(node_ids)))
        for j, node_id in enumerate(node_ids):
            for t, line in self._logs.get((channel, node_id), []):
                if pattern is not None and pattern not in line:
                    continue
                i = index.get(t)
                if i is None:
                    i = max(0, bisect.bisect_right(ticks, t) - 1)
                data[i, j] += 1
        return node_ids, data

    def has_metric(self, name: str) -> bool:
        return name in self.metrics or name in self.log_channels
