"""Job-level anomaly triggers, robust spatial/temporal node scoring and signature matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .models import (
    DetectionError,
    EmptyBaseline,
    RuleRuntimeError,
    TooFewPeers,
    UnusableBaseline,
)
from .telemetry import TelemetryWindow

logger = logging.getLogger(__name__)

EPS = 1e-9
MAD_SCALE = 1.4826


def robust_z(x: float, median: float, mad: float) -> float:
    return abs(float(x) - median) / (MAD_SCALE * mad + EPS)


def median_mad(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


@dataclass(frozen=True)
class KpiStat:
    median: float
    mad: float
    count: int


@dataclass
class KpiBaseline:
    """Healthy-run KPI statistics of one job family, normalised per accelerator."""

    family: str
    scale: int
    stats: Dict[str, KpiStat] = field(default_factory=dict)
    min_samples: int = 30

    @classmethod
    def fit(
        cls,
        family: str,
        scale: int,
        samples: Mapping[str, Sequence[float]],
        min_samples: int = 30,
    ) -> "KpiBaseline":
        stats: Dict[str, KpiStat] = {}
        for kpi, values in samples.items():
            arr = np.asarray(values, dtype=float)
            arr = arr[np.isfinite(arr)]
            if arr.size == 0:
                continue
            med, mad = median_mad(arr)
            stats[kpi] = KpiStat(med, mad, int(arr.size))
        return cls(family, int(scale), stats, min_samples)

    @property
    def usable(self) -> bool:
        return bool(self.stats) and all(s.count >= self.min_samples for s in self.stats.values())

    def band(self, kpi: str, threshold: float) -> Tuple[float, float]:
        stat = self.stats[kpi]
        half = threshold * (MAD_SCALE * stat.mad + EPS)
        return stat.median - half, stat.median + half

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "scale": self.scale,
            "min_samples": self.min_samples,
            "stats": {k: {"median": s.median, "mad": s.mad, "count": s.count} for k, s in sorted(self.stats.items())},
        }


@dataclass(frozen=True)
class JobAnomaly:
    flagged: bool
    deviations: Dict[str, float]


def detect_job_anomaly(
    kpis: Mapping[str, Sequence[float]],
    baseline: KpiBaseline,
    threshold: float = 6.0,
) -> JobAnomaly:
    """Flag a job when any KPI window mean sits ``threshold`` robust z away from its baseline."""
    if not baseline.usable:
        raise UnusableBaseline(
            f"baseline {baseline.family} needs {baseline.min_samples} samples per KPI"
        )
    deviations: Dict[str, float] = {}
    for kpi, values in kpis.items():
        if kpi not in baseline.stats:
            continue
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            continue
        stat = baseline.stats[kpi]
        deviations[kpi] = robust_z(float(arr.mean()), stat.median, stat.mad)
    if not deviations:
        raise DetectionError("job KPI window is empty")
    return JobAnomaly(any(z >= threshold for z in deviations.values()), deviations)


@dataclass(frozen=True)
class AnomalyScore:
    node_id: str
    metric: str
    spatial: float
    temporal: float
    window: Tuple[int, int]

    @property
    def combined(self) -> float:
        return max(self.spatial, self.temporal)


def spatial_scores(node_ids: Sequence[str], matrix: Any) -> Dict[str, float]:
    """Mean over ticks of each node's robust z against the per-tick peer median.

    ``matrix`` is ticks x nodes, column order matching ``node_ids``.
    """
    data = np.asarray(matrix, dtype=float)
    if data.ndim == 1:
        data = data.reshape(1, -1)
    if len(node_ids) < 3 or data.shape[1] < 3:
        raise TooFewPeers(f"spatial scoring needs at least 3 nodes, got {len(node_ids)}")
    if data.shape[0] == 0:
        return {n: 0.0 for n in node_ids}
    med = np.median(data, axis=1, keepdims=True)
    mad = np.median(np.abs(data - med), axis=1, keepdims=True)
    z = np.abs(data - med) / (MAD_SCALE * mad + EPS)
    per_node = z.mean(axis=0)
    return {node_id: float(score) for node_id, score in zip(node_ids, per_node)}


def temporal_scores(current: Sequence[float], baseline: Sequence[float]) -> float:
    """Robust z of the current window mean against a historical series of the same workload."""
    base = np.asarray(baseline, dtype=float)
    if base.size == 0:
        raise EmptyBaseline("temporal scoring needs a non-empty baseline")
    cur = np.asarray(current, dtype=float)
    if cur.size == 0:
        return 0.0
    med, mad = median_mad(base)
    return robust_z(float(cur.mean()), med, mad)


class TemporalHistory:
    """Per-node healthy history with a pooled fallback for nodes never seen before."""

    def __init__(self) -> None:
        self._per_node: Dict[Tuple[str, str], np.ndarray] = {}
        self._pooled: Dict[str, np.ndarray] = {}

    @classmethod
    def from_window(cls, window: TelemetryWindow) -> "TemporalHistory":
        history = cls()
        history.absorb(window)
        return history

    def absorb(self, window: TelemetryWindow) -> None:
        for metric in sorted(window.metrics):
            pooled = [self._pooled.get(metric, np.empty(0))]
            for node_id in window.nodes:
                values = window.values(metric, node_id)
                if values.size == 0:
                    continue
                key = (metric, node_id)
                self._per_node[key] = np.concatenate([self._per_node.get(key, np.empty(0)), values])
                pooled.append(values)
            self._pooled[metric] = np.concatenate(pooled)
        for channel in sorted(window.log_channels):
            nodes, counts = window.log_counts(channel)
            if counts.size:
                key = f"log:{channel}"
                self._pooled[key] = np.concatenate([self._pooled.get(key, np.empty(0)), counts.ravel()])

    def baseline(self, metric: str, node_id: str) -> Optional[np.ndarray]:
        series = self._per_node.get((metric, node_id))
        if series is not None and series.size:
            return series
        pooled = self._pooled.get(metric)
        return pooled if pooled is not None and pooled.size else None

    def __bool__(self) -> bool:
        return bool(self._pooled)


def score_metric(
    window: TelemetryWindow,
    metric: str,
    nodes: Optional[Sequence[str]] = None,
    history: Optional[TemporalHistory] = None,
) -> List[AnomalyScore]:
    """Spatial and temporal scores of one metric or log channel over ``window``."""
    if metric in window.log_channels:
        node_ids = tuple(nodes) if nodes is not None else window.nodes
        node_ids, data = window.log_counts(metric, node_ids)
        history_key = f"log:{metric}"
    elif metric in window.metrics:
        node_ids, data = window.matrix(metric, nodes)
        history_key = metric
    else:
        return []
    if len(node_ids) < 3 or data.shape[0] == 0:
        return []
    spatial = spatial_scores(node_ids, data)
    scores: List[AnomalyScore] = []
    for j, node_id in enumerate(node_ids):
        temporal = 0.0
        if history:
            base = history.baseline(history_key, node_id)
            if base is not None:
                temporal = temporal_scores(data[:, j], base)
        scores.append(AnomalyScore(node_id, metric, spatial[node_id], temporal, (window.t0, window.t1)))
    return scores


@dataclass(frozen=True)
class RuleMatch:
    rule_id: str
    node_id: str
    evidence: Dict[str, float]


def match_rules(kb, window: TelemetryWindow, nodes: Optional[Iterable[str]] = None, strict: bool = False) -> List[RuleMatch]:
    """Run every active rule over ``window``; failing rules are quarantined.

    The result is sorted by (rule_id, node_id) so rule order never matters.
    """
    wanted = list(nodes) if nodes is not None else None
    matches: List[RuleMatch] = []
    for rule in kb.active_rules():
        try:
            hits = rule.evaluate(window, wanted)
        except RuleRuntimeError as exc:
            logger.warning("Quarantining %s: %s", exc.rule_id, exc)
            kb.quarantine_rule(exc.rule_id, str(exc))
            if strict:
                raise
            continue
        for node_id, evidence in hits:
            matches.append(RuleMatch(rule.rule_id, node_id, evidence))
    matches.sort(key=lambda m: (m.rule_id, m.node_id))
    return matches
