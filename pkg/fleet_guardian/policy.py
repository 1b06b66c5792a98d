"""Online operations policy: rule matching, job KPI watch, diagnosis, rule learning and the human fallback."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .audit_logger import AuditLogger
from .config import GuardianSettings
from .detection import KpiBaseline, RuleMatch, TemporalHistory, detect_job_anomaly, match_rules
from .diagnosis import DiagnosisSession, confirm_by_isolation, diagnose
from .knowledge_base import KnowledgeBase, LabeledIncident, contextual_data_selection
from .models import (
    HARD_COMPONENT_CLASSES,
    MS_PER_HOUR,
    ComponentClass,
    IncidentLabel,
    JobState,
    KnowledgeBaseError,
    NodeState,
    NoSpareCapacity,
    RemediationError,
    RuleAction,
    UnusableBaseline,
)
from .remediation import LifecycleController
from .rule_generation import generate_rule
from .rules import Rule
from .simulator import DISRUPTED_STATES, ECC_METRIC, KPI_METRIC, ClusterSimulator
from .telemetry import TelemetryStore, TelemetryWindow

POLICIES = ("manual", "rules-only", "rules+diagnosis", "full")
IN_SERVICE = (NodeState.AVAILABLE, NodeState.ALLOCATED)


@dataclass
class Incident:
    incident_id: str
    t_detected: int
    source: str  # rule id | diagnosis | operator
    automated: bool
    node_id: Optional[str] = None
    job_id: Optional[str] = None
    fault_class: Optional[str] = None
    fault_id: Optional[str] = None
    iterations: int = 0

    def to_record(self) -> Dict[str, Any]:
        return {
            "incident_id": self.incident_id,
            "fault_id": self.fault_id,
            "automated": self.automated,
            "source": self.source,
            "fault_class": self.fault_class,
            "iterations": self.iterations,
        }


@dataclass(order=True)
class OperatorTask:
    due_ms: int
    seq: int
    job_id: str = field(compare=False)
    reason: str = field(compare=False, default="")


def _keep_latest(items: List[Any], limit: int) -> None:
    # 0 means unbounded
    if limit and len(items) > limit:
        del items[: len(items) - limit]


def action_for(fault_class: ComponentClass) -> RuleAction:
    return RuleAction.TICKET if fault_class in HARD_COMPONENT_CLASSES else RuleAction.REBOOT


def infer_fault_class(
    session: DiagnosisSession,
    window: TelemetryWindow,
    node_id: str,
    job_state: JobState,
) -> ComponentClass:
    """Map the confirming hypothesis and the node's readings to a playbook class."""
    hypothesis = session.iterations[-1].hypothesis if session.iterations else ""
    if hypothesis == "interconnect":
        return ComponentClass.INTERCONNECT
    if hypothesis in ("host-os", "logs"):
        return ComponentClass.HOST_OS
    ecc = window.values(ECC_METRIC, node_id)
    if ecc.size and float(ecc.max()) > 0:
        return ComponentClass.ACCELERATOR_MEMORY
    if job_state == JobState.HUNG:
        return ComponentClass.SILENT_HANG
    if job_state == JobState.DEGRADED:
        return ComponentClass.THROUGHPUT_DEGRADATION
    # a crash without memory errors gets the reboot playbook, which escalates if the fault survives
    return ComponentClass.HOST_OS


class FleetGuardian:
    """Reacts to each telemetry tick according to the policy in force.

    ``manual`` hands every disruption to an operator after an exponential delay;
    ``rules-only`` adds signature matching; ``rules+diagnosis`` adds the
    isolation loop for unknown faults; ``full`` also learns rules from them.
    """

    def __init__(
        self,
        sim: ClusterSimulator,
        store: TelemetryStore,
        controller: LifecycleController,
        kb: KnowledgeBase,
        baselines: Dict[str, KpiBaseline],
        history: Optional[TemporalHistory] = None,
        settings: Optional[GuardianSettings] = None,
        policy: Union[str, Callable[[int], str]] = "full",
        audit: Optional[AuditLogger] = None,
        artifact_dir: Optional[str] = None,
        negatives: Sequence[LabeledIncident] = (),
    ):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.sim = sim
        self.store = store
        self.controller = controller
        self.kb = kb
        self.baselines = dict(baselines)
        self.history = history
        self.settings = settings or GuardianSettings()
        if isinstance(policy, str):
            if policy not in POLICIES:
                raise ValueError(f"unknown policy {policy!r}")
            fixed = policy
            self.policy_at: Callable[[int], str] = lambda _t: fixed
        else:
            self.policy_at = policy
        self.audit = audit
        self.artifact_dir = Path(artifact_dir) if artifact_dir else None

        self.incidents: List[Incident] = []
        self.sessions: List[DiagnosisSession] = []
        self.positives: List[LabeledIncident] = []
        self.negatives: List[LabeledIncident] = list(negatives)
        self.generation_traces: Dict[str, Dict[str, Any]] = {}
        self._tasks: List[OperatorTask] = []
        self._task_seq = 0
        self._awaiting_operator: Set[str] = set()
        self._waiting_capacity: Dict[str, List[str]] = {}
        self._triggers: Dict[str, int] = {}
        self._recycled_at: Dict[str, int] = {}
        self._event_cursor = 0
        self._last_snapshot: Optional[int] = None
        self._snapshot_seq = 0
        self._warned_baseline: Set[str] = set()

    # -- clock helpers ---------------------------------------------------

    @property
    def tick_ms(self) -> int:
        return self.sim.tick_ms

    @property
    def lookback_ms(self) -> int:
        return self.settings.policy.lookback_ticks * self.tick_ms

    @property
    def evidence_ms(self) -> int:
        return self.settings.policy.evidence_ticks * self.tick_ms

    # -- main loop -------------------------------------------------------

    def step(self) -> None:
        """Process everything observable at the current simulated time."""
        now = self.sim.now
        policy = self.policy_at(now)
        self._scan_events()
        self._retry_recoveries()
        self._run_operator_tasks(now)
        if policy != "manual":
            self._match_rules(now)
        self._watch_jobs(now, policy)
        if policy == "full":
            self._maybe_snapshot(now)

    def _scan_events(self) -> None:
        events = self.sim.events
        for event in events[self._event_cursor:]:
            if event.kind == "node_recycled" and event.node_id:
                self._recycled_at[event.node_id] = event.t_ms
        self._event_cursor = len(events)

    # -- incidents -------------------------------------------------------

    def _fault_on(self, node_id: Optional[str]):
        """Ground-truth fault behind an incident, kept for KPI bookkeeping only."""
        if node_id is None:
            return None
        node = self.sim.node(node_id)
        active = node.active_faults(self.sim.now) or node.faults
        return active[0] if active else None

    def _open(
        self,
        source: str,
        automated: bool,
        node_id: Optional[str],
        job_id: Optional[str],
        fault_class: Optional[ComponentClass],
        iterations: int = 0,
    ) -> Incident:
        fault = self._fault_on(node_id)
        incident = Incident(
            f"INC-{len(self.incidents) + 1:05d}",
            self.sim.now,
            source,
            automated,
            node_id,
            job_id,
            fault_class.value if fault_class else None,
            fault.fault_id if fault else None,
            iterations,
        )
        self.incidents.append(incident)
        detail = incident.to_record()
        detail["policy"] = self.policy_at(self.sim.now)
        self.sim.record_event("detected", node_id, job_id, detail)
        if self.audit:
            self.audit.log_system_event("incident_opened", f"{incident.incident_id} via {source}", detail)
        self.logger.info(
            "Incident %s on %s (job %s) via %s, automated=%s",
            incident.incident_id, node_id, job_id, source, automated,
        )
        return incident

    def _take_node(self, node_id: str, cause: str, incidents: Sequence[str]) -> None:
        if self.sim.node(node_id).state in IN_SERVICE:
            self.controller.cordon(node_id, cause, incidents)
        else:
            self.controller.attach_incidents(node_id, incidents)

    def _recover(self, job_id: str, incidents: Sequence[str]) -> None:
        self._triggers.pop(job_id, None)
        job = self.sim.job(job_id)
        if job.state not in DISRUPTED_STATES:
            return
        try:
            self.controller.recover_job(job_id, incidents)
        except NoSpareCapacity:
            waiting = self._waiting_capacity.setdefault(job_id, [])
            waiting.extend(i for i in incidents if i not in waiting)

    def _retry_recoveries(self) -> None:
        for job_id in sorted(self._waiting_capacity):
            job = self.sim.job(job_id)
            if job.state not in DISRUPTED_STATES:
                self._waiting_capacity.pop(job_id)
                continue
            try:
                self.controller.recover_job(job_id, self._waiting_capacity[job_id])
            except NoSpareCapacity:
                continue
            self._waiting_capacity.pop(job_id)

    def _playbook(self, node_id: str, fault_class: ComponentClass, diagnostics: Dict[str, Any]) -> None:
        if self.sim.node(node_id).state != NodeState.CORDONED:
            return
        try:
            self.controller.run_playbook(node_id, fault_class, diagnostics)
        except RemediationError as exc:
            self.logger.error("Playbook %s on %s failed: %s", fault_class.value, node_id, exc)
            if self.audit:
                self.audit.log_error(type(exc).__name__, str(exc), {"node_id": node_id})

    # -- signature matching ----------------------------------------------

    def _match_rules(self, now: int) -> None:
        if not self.kb.active_rules():
            return
        candidates = [
            node_id
            for node_id, node in self.sim.nodes.items()
            if node.state in IN_SERVICE and now - self._recycled_at.get(node_id, -self.lookback_ms) >= self.lookback_ms
        ]
        if not candidates:
            return
        window = self.store.window(now - self.lookback_ms + 1, now + 1, candidates)
        handled: Set[str] = set()
        for match in match_rules(self.kb, window, candidates):
            if match.node_id in handled or self.sim.node(match.node_id).state not in IN_SERVICE:
                continue
            handled.add(match.node_id)
            self._act_on_rule(self.kb.get(match.rule_id), match)

    def _act_on_rule(self, rule: Rule, match: RuleMatch) -> None:
        node = self.sim.node(match.node_id)
        job_id = node.job_id
        fault_class = rule.fault_class or (
            ComponentClass.HOST_OS if rule.action == RuleAction.REBOOT else ComponentClass.ACCELERATOR_MEMORY
        )
        incident = self._open(rule.rule_id, True, node.node_id, job_id, fault_class)
        if rule.action == RuleAction.RECOVER_JOB_ONLY:
            if job_id:
                self._recover(job_id, [incident.incident_id])
            # the node stays in service; mute it for one lookback
            self._recycled_at[node.node_id] = self.sim.now
            return
        self._take_node(node.node_id, f"rule {rule.rule_id}", [incident.incident_id])
        if job_id:
            self._recover(job_id, [incident.incident_id])
        self._playbook(
            node.node_id,
            fault_class,
            {"rule_id": rule.rule_id, "evidence": {k: round(v, 6) for k, v in sorted(match.evidence.items())}},
        )

    # -- job watch -------------------------------------------------------

    def _kpi_anomalous(self, job, now: int) -> bool:
        if job.state == JobState.INTERRUPTED:
            return True
        if job.state not in (JobState.TRAINING, JobState.DEGRADED, JobState.HUNG):
            return False
        baseline = self.baselines.get(job.spec.family)
        if baseline is None:
            if job.spec.family not in self._warned_baseline:
                self._warned_baseline.add(job.spec.family)
                self.logger.warning("No KPI baseline for family %s; job watch relies on state only", job.spec.family)
            return job.state != JobState.TRAINING
        window = self.store.window(now - self.tick_ms + 1, now + 1, job.assigned_nodes)
        values = [window.values(KPI_METRIC, n) for n in window.nodes]
        values = [v for v in values if v.size]
        if not values:
            return False
        try:
            anomaly = detect_job_anomaly(
                {KPI_METRIC: np.concatenate(values)}, baseline, self.settings.detection.job_z_threshold
            )
        except UnusableBaseline as exc:
            if job.spec.family not in self._warned_baseline:
                self._warned_baseline.add(job.spec.family)
                self.logger.warning("%s", exc)
            return job.state != JobState.TRAINING
        return anomaly.flagged

    def _watch_jobs(self, now: int, policy: str) -> None:
        for job_id in sorted(self.sim.jobs):
            job = self.sim.jobs[job_id]
            if job_id in self._waiting_capacity or job_id in self._awaiting_operator:
                continue
            if not self._kpi_anomalous(job, now):
                self._triggers.pop(job_id, None)
                continue
            first = self._triggers.setdefault(job_id, now)
            if policy in ("manual", "rules-only"):
                self._dispatch_operator(job_id, now, f"job {job.state.value.lower()}")
                continue
            if now - first < self.evidence_ms:
                continue
            self._diagnose(job_id, first, now, policy)

    # -- human fallback --------------------------------------------------

    def _dispatch_operator(self, job_id: str, now: int, reason: str) -> None:
        delay_h = float(self.sim.policy_rng.exponential(self.settings.policy.operator_delay_h))
        self._task_seq += 1
        self._tasks.append(OperatorTask(now + int(round(delay_h * MS_PER_HOUR)), self._task_seq, job_id, reason))
        self._tasks.sort()
        self._awaiting_operator.add(job_id)
        self._triggers.pop(job_id, None)
        self.logger.info("Operator paged for %s (%s), responds in %.2fh", job_id, reason, delay_h)

    def _run_operator_tasks(self, now: int) -> None:
        while self._tasks and self._tasks[0].due_ms <= now:
            task = self._tasks.pop(0)
            self._awaiting_operator.discard(task.job_id)
            self._operator_handle(task)

    def _operator_handle(self, task: OperatorTask) -> None:
        job = self.sim.job(task.job_id)
        culprit: Optional[str] = None
        fault = None
        for node_id in sorted(job.assigned_nodes):
            fault = self._fault_on(node_id)
            if fault is not None:
                culprit = node_id
                break
        if culprit is None and job.state not in DISRUPTED_STATES:
            self.logger.info("Operator found %s healthy again; nothing to do", task.job_id)
            return
        fault_class = fault.model.component_class if fault is not None else None
        incident = self._open("operator", False, culprit, task.job_id, fault_class)
        if culprit is not None:
            self._take_node(culprit, "operator", [incident.incident_id])
        self._recover(task.job_id, [incident.incident_id])
        if culprit is not None and fault_class is not None:
            self._playbook(culprit, fault_class, {"source": "operator", "reason": task.reason})

    # -- diagnosis and learning ------------------------------------------

    def _diagnose(self, job_id: str, first: int, now: int, policy: str) -> None:
        job = self.sim.job(job_id)
        nodes = sorted(job.assigned_nodes)
        self._triggers.pop(job_id, None)
        window = self.store.window(first - self.lookback_ms, now + 1, nodes)
        session = DiagnosisSession(
            job_id,
            nodes=nodes,
            max_iterations=self.settings.detection.max_iterations,
            trigger={"t_ms": first, "job_state": job.state.value},
        )
        diagnose(session, window, settings=self.settings.detection, history=self.history)
        self.sessions.append(session)
        report_name = f"diagnosis-{len(self.sessions):04d}.json"

        if session.status != "Confirmed":
            self._write_report(report_name, session)
            self._dispatch_operator(job_id, now, "diagnosis inconclusive")
            return

        node_id = session.confirmed_node
        job_state = job.state
        fault_class = infer_fault_class(session, window, node_id, job_state)
        incident = self._open("diagnosis", True, node_id, job_id, fault_class, len(session.iterations))
        session.trigger["incident_id"] = incident.incident_id
        self._write_report(report_name, session)

        positive: Optional[LabeledIncident] = None
        if policy == "full":
            positive = LabeledIncident(
                incident.incident_id,
                self.store.window(now - self.lookback_ms + 1, now + 1),
                IncidentLabel.HARDWARE_FAULT,
                node_id=node_id,
                job_id=job_id,
            )

        baseline = self.baselines.get(job.spec.family) or KpiBaseline(job.spec.family, job.spec.requested_accelerators)
        soaked: Optional[bool] = None
        try:
            soaked = confirm_by_isolation(
                self.controller,
                node_id,
                job_id,
                baseline,
                self.settings.detection,
                cause=f"diagnosis {incident.incident_id}",
                incidents=[incident.incident_id],
            )
        except NoSpareCapacity:
            self._waiting_capacity.setdefault(job_id, []).append(incident.incident_id)
        if soaked is False:
            self.logger.warning("Isolation soak of %s did not clear job %s", node_id, job_id)
        self._playbook(
            node_id,
            fault_class,
            {"diagnosis": session.status, "hypothesis": session.iterations[-1].hypothesis},
        )
        if positive is not None and soaked is not False:
            self.learn(positive, fault_class)

    def learn(self, positive: LabeledIncident, fault_class: ComponentClass) -> Optional[Rule]:
        """Add a confirmed incident to the corpus and try to teach the KB its signature."""
        self.positives.append(positive)
        _keep_latest(self.positives, self.settings.policy.max_positives)
        if not self.negatives:
            self.logger.warning("No healthy snapshots yet; %s kept for later learning", positive.incident_id)
            return None
        corpus = self.positives + self.negatives
        rule_id = f"learned-{fault_class.value}"
        previous = self.kb.get(rule_id) if rule_id in self.kb.rule_ids() else None
        try:
            contrast = contextual_data_selection(positive, corpus, top_k=3)
            candidate = generate_rule(
                positive,
                contrast,
                corpus,
                self.store.schema,
                settings=self.settings.kb,
                kb=self.kb,
                rule_id=rule_id,
                fault_class=fault_class,
                action=action_for(fault_class),
                previous=previous,
                window_s=self.evidence_ms / 1000.0,
            )
        except KnowledgeBaseError as exc:
            self.logger.warning("Rule learning from %s failed: %s", positive.incident_id, exc)
            return None
        self.generation_traces[positive.incident_id] = candidate.to_record()
        self._write_json(Path("generation") / f"{positive.incident_id}.json", candidate.to_record())
        if candidate.accepted:
            self.logger.info("Learned %s from %s: %s", rule_id, positive.incident_id, candidate.rule.text)
        return candidate.rule

    def _maybe_snapshot(self, now: int) -> None:
        every_ms = int(self.settings.policy.snapshot_every_h * MS_PER_HOUR)
        if self._last_snapshot is not None and now - self._last_snapshot < every_ms:
            return
        if now < self.lookback_ms or self._triggers or self._awaiting_operator or self._waiting_capacity:
            return
        if any(job.state != JobState.TRAINING for job in self.sim.jobs.values() if job.state != JobState.COMPLETED):
            return
        self._last_snapshot = now
        self._snapshot_seq += 1
        self.negatives.append(
            LabeledIncident(
                f"HS-{self._snapshot_seq:05d}",
                self.store.window(now - self.lookback_ms + 1, now + 1),
                IncidentLabel.HEALTHY,
            )
        )
        _keep_latest(self.negatives, self.settings.policy.max_negatives)

    # -- artifacts -------------------------------------------------------

    def _write_report(self, name: str, session: DiagnosisSession) -> None:
        if self.artifact_dir is not None:
            session.write_report(str(self.artifact_dir / "diagnoses" / name))

    def _write_json(self, relative: Path, data: Dict[str, Any]) -> None:
        if self.artifact_dir is None:
            return
        target = self.artifact_dir / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def pending(self) -> Tuple[int, int, int]:
        """(operator tasks, jobs waiting for capacity, open triggers)."""
        return len(self._tasks), len(self._waiting_capacity), len(self._triggers)
