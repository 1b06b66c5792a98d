"""Iterative isolation of a faulty node: propose a metric group, score, refine."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

from .config import DetectionSettings
from .detection import KpiBaseline, TemporalHistory, robust_z, score_metric
from .models import JobState, NodeState
from .simulator import KPI_METRIC
from .telemetry import METRIC_GROUPS, TelemetryWindow

logger = logging.getLogger(__name__)

LADDER = ("job-kpi", "accelerator", "interconnect", "host-os", "logs")
COMBINED = "combined"

CONFIRMED = "confirmed"
AMBIGUOUS = "ambiguous"
EXONERATED = "exonerated"
NO_DATA = "no-data"


@dataclass
class DiagnosisIteration:
    hypothesis: str
    metrics: List[str]
    scores: Dict[str, float]
    leaders: List[Optional[str]]
    verdict: str
    node_id: Optional[str] = None
    onset: Dict[str, int] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "hypothesis": self.hypothesis,
            "metrics": self.metrics,
            "scores": {k: round(v, 6) for k, v in sorted(self.scores.items())},
            "leaders": self.leaders,
            "verdict": self.verdict,
            "node_id": self.node_id,
            "onset": dict(sorted(self.onset.items())),
        }


@dataclass
class DiagnosisSession:
    job_id: str
    nodes: Optional[List[str]] = None
    max_iterations: int = 8
    iterations: List[DiagnosisIteration] = field(default_factory=list)
    status: str = "Running"  # Running | Confirmed | Inconclusive
    confirmed_node: Optional[str] = None
    trigger: Dict[str, Any] = field(default_factory=dict)

    @property
    def tried(self) -> List[str]:
        return [it.hypothesis for it in self.iterations]

    def to_record(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "status": self.status,
            "confirmed_node": self.confirmed_node,
            "max_iterations": self.max_iterations,
            "trigger": self.trigger,
            "iterations": [it.to_record() for it in self.iterations],
        }

    def write_report(self, path: str) -> None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.to_record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


class DiagnosisStrategy(Protocol):
    def next_hypothesis(self, session: DiagnosisSession, available: Sequence[str]) -> Optional[str]:
        ...


class DiagnosisAdvisor(Protocol):
    """Port for an external advisor (e.g. a language model endpoint) that proposes hypotheses."""

    def advise(self, session_record: Dict[str, Any], available: Sequence[str]) -> Optional[str]:
        ...


class LadderStrategy:
    """Walk the fixed hypothesis ladder, then retry once on the union of ambiguous groups."""

    def __init__(self, ladder: Sequence[str] = LADDER):
        self.ladder = tuple(ladder)

    def next_hypothesis(self, session: DiagnosisSession, available: Sequence[str]) -> Optional[str]:
        tried = set(session.tried)
        for group in self.ladder:
            if group in available and group not in tried:
                return group
        ambiguous = [it.hypothesis for it in session.iterations if it.verdict == AMBIGUOUS and it.hypothesis != "job-kpi"]
        if COMBINED not in tried and len(ambiguous) >= 2:
            return COMBINED
        return None


class AdvisorStrategy:
    """Adapts a ``DiagnosisAdvisor`` and falls back to the ladder when it has nothing to say."""

    def __init__(self, advisor: DiagnosisAdvisor, fallback: Optional[DiagnosisStrategy] = None):
        self.advisor = advisor
        self.fallback = fallback or LadderStrategy()

    def next_hypothesis(self, session: DiagnosisSession, available: Sequence[str]) -> Optional[str]:
        proposal = self.advisor.advise(session.to_record(), available)
        if proposal in available and proposal not in session.tried:
            return proposal
        return self.fallback.next_hypothesis(session, available)


def _group_metrics(group: str, session: DiagnosisSession) -> List[str]:
    if group != COMBINED:
        return list(METRIC_GROUPS.get(group, ()))
    metrics: List[str] = []
    for it in session.iterations:
        if it.verdict == AMBIGUOUS and it.hypothesis != "job-kpi":
            metrics.extend(m for m in it.metrics if m not in metrics)
    return metrics


def _sub_windows(window: TelemetryWindow, ticks_per_window: int) -> List[Tuple[int, int]]:
    ticks = list(window.ticks)
    if not ticks:
        ticks = sorted({s.t for s in window.samples})
    if not ticks:
        return []
    edges = ticks[::max(1, ticks_per_window)]
    bounds = []
    for i, start in enumerate(edges):
        end = edges[i + 1] if i + 1 < len(edges) else window.t1
        bounds.append((start, end))
    return bounds


def _dominant(scores: Dict[str, float], factor: float, min_score: float) -> Optional[str]:
    if not scores:
        return None
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    top_node, top = ranked[0]
    second = ranked[1][1] if len(ranked) > 1 else 0.0
    if top < min_score:
        return None
    return top_node if top >= factor * second else None


def evaluate_hypothesis(
    window: TelemetryWindow,
    group: str,
    metrics: Sequence[str],
    settings: DetectionSettings,
    nodes: Optional[Sequence[str]] = None,
    history: Optional[TemporalHistory] = None,
) -> DiagnosisIteration:
    present = [m for m in metrics if window.has_metric(m)]
    if not present:
        return DiagnosisIteration(group, list(metrics), {}, [], NO_DATA)

    leaders: List[Optional[str]] = []
    totals: Dict[str, float] = {}
    onset: Dict[str, int] = {}
    streak_node: Optional[str] = None
    streak = 0
    confirmed: Optional[str] = None
    any_high = False
    for start, end in _sub_windows(window, settings.window_ticks):
        sub = window.restrict(start, end, nodes)
        combined: Dict[str, float] = {}
        for metric in present:
            for score in score_metric(sub, metric, nodes, history):
                combined[score.node_id] = max(combined.get(score.node_id, 0.0), score.combined)
        for node_id, value in combined.items():
            totals[node_id] = max(totals.get(node_id, 0.0), value)
            if value >= settings.min_score:
                any_high = True
                onset.setdefault(node_id, start)
        leader = _dominant(combined, settings.dominance_factor, settings.min_score)
        leaders.append(leader)
        if leader is not None and leader == streak_node:
            streak += 1
        else:
            streak_node, streak = leader, (1 if leader else 0)
        if confirmed is None and streak_node is not None and streak >= settings.persistence_windows:
            confirmed = streak_node

    if not leaders:
        return DiagnosisIteration(group, present, {}, [], NO_DATA)
    if confirmed is not None:
        verdict = CONFIRMED
    elif any_high:
        verdict = AMBIGUOUS
    else:
        verdict = EXONERATED
    return DiagnosisIteration(group, present, totals, leaders, verdict, confirmed, onset)


def diagnose(
    session: DiagnosisSession,
    window: TelemetryWindow,
    strategy: Optional[DiagnosisStrategy] = None,
    settings: Optional[DetectionSettings] = None,
    history: Optional[TemporalHistory] = None,
) -> DiagnosisSession:
    """Run the hypothesis loop to a terminal state; a pure function of its inputs."""
    settings = settings or DetectionSettings()
    strategy = strategy or LadderStrategy()
    session.max_iterations = min(session.max_iterations, settings.max_iterations)
    available = list(METRIC_GROUPS)
    while len(session.iterations) < session.max_iterations:
        group = strategy.next_hypothesis(session, available + [COMBINED])
        if group is None:
            break
        metrics = _group_metrics(group, session)
        iteration = evaluate_hypothesis(window, group, metrics, settings, session.nodes, history)
        session.iterations.append(iteration)
        logger.info("Diagnosis %s: %s -> %s", session.job_id, group, iteration.verdict)
        if iteration.verdict == CONFIRMED:
            session.status = "Confirmed"
            session.confirmed_node = iteration.node_id
            return session
    session.status = "Inconclusive"
    return session


def confirm_by_isolation(
    controller,
    node_id: str,
    job_id: str,
    baseline: KpiBaseline,
    settings: Optional[DetectionSettings] = None,
    cause: str = "diagnosis",
    incidents: Sequence[str] = (),
) -> bool:
    """Cordon the suspect, restart the job on spares and soak-test its KPI.

    Raises NoSpareCapacity when the job cannot be restarted.
    """
    settings = settings or DetectionSettings()
    sim = controller.sim
    node = sim.node(node_id)
    if node.state in (NodeState.AVAILABLE, NodeState.ALLOCATED):
        controller.cordon(node_id, cause, incidents)
    else:
        controller.attach_incidents(node_id, incidents)
    job = sim.job(job_id)
    if job.state not in (JobState.TRAINING, JobState.LOADING):
        controller.recover_job(job_id, incidents)
    stat = baseline.stats.get(KPI_METRIC)
    step_s = sim.config.telemetry_interval
    healthy = (JobState.TRAINING, JobState.LOADING)
    for _ in range(settings.soak_windows):
        sim.advance(step_s, stop_when=lambda s: s.job(job_id).state not in healthy)
        job = sim.job(job_id)
        if job.state not in healthy:
            logger.info("Soak of %s failed: job %s is %s", node_id, job_id, job.state.value)
            return False
        if job.state == JobState.LOADING:
            continue
        per_accel = sim.job_throughput(job) / job.spec.requested_accelerators
        if stat is not None and robust_z(per_accel, stat.median, stat.mad) >= settings.job_z_threshold:
            return False
    return sim.job(job_id).state == JobState.TRAINING
