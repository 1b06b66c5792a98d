"""Closed-loop node lifecycle: cordon, job recovery, playbooks, repair tickets and re-validation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .audit_logger import AuditLogger
from .config import RemediationSettings
from .models import (
    ActionRecord,
    ClientUnavailable,
    ComponentClass,
    IllegalTransition,
    InsufficientCapacity,
    LifecycleTransition,
    NodeState,
    NoSpareCapacity,
    RecoveryResult,
    StaleValidation,
    Ticket,
    TicketStatus,
    UnknownFaultClass,
    seconds_to_ms,
)
from .simulator import ClusterSimulator
from .ticket_client import TicketClient

EDGES: Dict[NodeState, Tuple[NodeState, ...]] = {
    NodeState.AVAILABLE: (NodeState.ALLOCATED, NodeState.SUSPECT),
    NodeState.ALLOCATED: (NodeState.AVAILABLE, NodeState.SUSPECT),
    NodeState.SUSPECT: (NodeState.CORDONED,),
    # Cordoned -> Validating serves in-place validation after a reboot playbook.
    NodeState.CORDONED: (NodeState.IN_REPAIR, NodeState.VALIDATING),
    NodeState.IN_REPAIR: (NodeState.MIGRATED,),
    NodeState.MIGRATED: (NodeState.VALIDATING,),
    NodeState.VALIDATING: (NodeState.AVAILABLE, NodeState.CORDONED),
}

ACTIONS = ("reboot", "open-ticket", "validate-quick", "validate-comprehensive")

DEFAULT_PLAYBOOKS: Dict[str, List[str]] = {
    ComponentClass.HOST_OS.value: ["reboot", "validate-quick"],
    ComponentClass.SILENT_HANG.value: ["reboot", "validate-quick"],
    ComponentClass.THROUGHPUT_DEGRADATION.value: ["reboot", "validate-comprehensive"],
    ComponentClass.ACCELERATOR_MEMORY.value: ["open-ticket", "validate-comprehensive"],
    ComponentClass.INTERCONNECT.value: ["open-ticket", "validate-comprehensive"],
}


@dataclass
class ValidationReport:
    node_id: str
    mode: str  # quick | comprehensive
    passed: bool
    checks: Dict[str, bool]
    readings: Dict[str, Any]
    t_ms: int

    def to_record(self) -> Dict[str, Any]:
        return {
            "node_id": self.node_id,
            "mode": self.mode,
            "passed": self.passed,
            "checks": dict(sorted(self.checks.items())),
            "readings": dict(sorted(self.readings.items())),
            "t_ms": self.t_ms,
        }


@dataclass
class _NodeRecord:
    cordon_mark: Optional[Tuple[int, int]] = None
    validation_mark: Optional[Tuple[int, int]] = None
    incidents: List[str] = field(default_factory=list)
    tickets: List[str] = field(default_factory=list)
    cordon_cause: str = ""


class LifecycleController:
    """Single writer of node lifecycle state; owns the ticket ledger.

    With ``defer=True`` validations take simulated time (scheduled on the
    simulator queue); otherwise every step completes at the current clock.
    """

    def __init__(
        self,
        sim: ClusterSimulator,
        ticket_client: TicketClient,
        settings: Optional[RemediationSettings] = None,
        audit: Optional[AuditLogger] = None,
        defer: bool = False,
    ):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.sim = sim
        self.tickets_port = ticket_client
        self.settings = settings or RemediationSettings()
        self.audit = audit
        self.defer = defer
        self.transitions: List[LifecycleTransition] = []
        self.actions: Dict[str, List[ActionRecord]] = {}
        self.validations: List[ValidationReport] = []
        self.tickets: Dict[str, Ticket] = {}
        self._records: Dict[str, _NodeRecord] = {}
        self._marks = itertools.count()
        self.playbooks = dict(DEFAULT_PLAYBOOKS)
        for fault_class, actions in (self.settings.playbooks or {}).items():
            unknown = [a for a in actions if a not in ACTIONS]
            if unknown:
                raise UnknownFaultClass(f"playbook {fault_class} names unknown actions {unknown}")
            self.playbooks[fault_class] = list(actions)

    # -- transitions -----------------------------------------------------

    def _record(self, node_id: str) -> _NodeRecord:
        return self._records.setdefault(node_id, _NodeRecord())

    def _mark(self) -> Tuple[int, int]:
        return (self.sim.now, next(self._marks))

    def transition(self, node_id: str, target: NodeState, cause: str) -> LifecycleTransition:
        node = self.sim.node(node_id)
        current = node.state
        if target not in EDGES.get(current, ()):
            raise IllegalTransition(f"{node_id}: {current.value} -> {target.value} is not a lifecycle edge")
        self.sim.set_node_state(node_id, target, cause)
        record = LifecycleTransition(node_id, current, target, cause, self.sim.now)
        self.transitions.append(record)
        if self.audit:
            self.audit.log_transition(record.to_record())
        self.logger.info("%s: %s -> %s (%s)", node_id, current.value, target.value, cause)
        return record

    def cordon(self, node_id: str, cause: str, incidents: Iterable[str] = ()) -> LifecycleTransition:
        """Take a node out of scheduling via Suspect; an Allocated node interrupts its job."""
        self.transition(node_id, NodeState.SUSPECT, cause)
        record = self.transition(node_id, NodeState.CORDONED, cause)
        state = self._record(node_id)
        state.cordon_mark = self._mark()
        state.cordon_cause = cause
        state.incidents.extend(i for i in incidents if i not in state.incidents)
        return record

    def attach_incidents(self, node_id: str, incidents: Iterable[str]) -> None:
        state = self._record(node_id)
        state.incidents.extend(i for i in incidents if i not in state.incidents)

    def uncordon(self, node_id: str) -> LifecycleTransition:
        """Return a validated node to service; needs a pass newer than the last cordon."""
        node = self.sim.node(node_id)
        if node.state not in (NodeState.VALIDATING, NodeState.CORDONED):
            raise IllegalTransition(f"{node_id} is {node.state.value}; only cordoned or validating nodes uncordon")
        state = self._record(node_id)
        fresh = state.validation_mark is not None and (
            state.cordon_mark is None or state.validation_mark > state.cordon_mark
        )
        if not fresh or node.state == NodeState.CORDONED:
            raise StaleValidation(f"{node_id} has no passed validation since it was cordoned")
        record = self.transition(node_id, NodeState.AVAILABLE, "validation passed")
        for ticket_id in state.tickets:
            self._close_ticket(ticket_id)
        cordon_t = state.cordon_mark[0] if state.cordon_mark else None
        self.sim.record_event(
            "node_recycled",
            node_id,
            detail={
                "incidents": sorted(state.incidents),
                "cordon_t_ms": cordon_t,
                "tickets": list(state.tickets),
            },
        )
        if self.audit:
            self.audit.log_system_event("node_recycled", f"{node_id} back in service", {"incidents": sorted(state.incidents)})
        self._records[node_id] = _NodeRecord()
        return record

    # -- jobs ------------------------------------------------------------

    def recover_job(self, job_id: str, incidents: Iterable[str] = ()) -> RecoveryResult:
        try:
            result = self.sim.restart_job(job_id, incidents)
        except InsufficientCapacity as exc:
            self.logger.warning("Cannot recover %s: %s", job_id, exc)
            raise NoSpareCapacity(str(exc)) from exc
        self.logger.info(
            "Recovered %s at step %.0f (lost %.0f steps, down %.1fs)",
            job_id, result.resumed_at_step, result.lost_steps, result.downtime_s,
        )
        return result

    # -- playbooks -------------------------------------------------------

    def _log_action(self, node_id: str, action: str, outcome: str, **detail: Any) -> ActionRecord:
        record = ActionRecord(action, outcome, self.sim.now, detail)
        self.actions.setdefault(node_id, []).append(record)
        if self.audit:
            self.audit.log_system_event("playbook_action", f"{node_id}: {action} -> {outcome}", detail or None)
        return record

    def run_playbook(
        self,
        node_id: str,
        fault_class: ComponentClass | str,
        diagnostics: Optional[Dict[str, Any]] = None,
    ) -> List[ActionRecord]:
        key = fault_class.value if isinstance(fault_class, ComponentClass) else str(fault_class)
        actions = self.playbooks.get(key)
        if actions is None:
            raise UnknownFaultClass(f"no playbook for fault class {key!r}")
        node = self.sim.node(node_id)
        if node.state != NodeState.CORDONED:
            raise IllegalTransition(f"playbooks run on cordoned nodes; {node_id} is {node.state.value}")
        diagnostics = dict(diagnostics or {})
        diagnostics.setdefault("fault_class", key)
        start = len(self.actions.get(node_id, []))
        for action in actions:
            if action == "reboot":
                survivors = self.sim.reboot_node(node_id)
                if survivors:
                    self._log_action(node_id, "reboot", "faults persist", faults=[f.fault_id for f in survivors])
                    self._request_ticket(node_id, diagnostics)
                    break
                self._log_action(node_id, "reboot", "clean")
            elif action == "open-ticket":
                self._request_ticket(node_id, diagnostics)
                # validation resumes once the host has been migrated
                break
            else:
                mode = action.split("-", 1)[1]
                self._validate_and_finish(node_id, mode, diagnostics)
                break
        return self.actions.get(node_id, [])[start:]

    def _request_ticket(self, node_id: str, diagnostics: Dict[str, Any]) -> None:
        try:
            ticket = self.open_ticket(node_id, diagnostics)
            self._log_action(node_id, "open-ticket", "opened", ticket_id=ticket.ticket_id)
        except ClientUnavailable as exc:
            # retries are already on the simulator queue
            self._log_action(node_id, "open-ticket", "client unavailable", error=str(exc))

    # -- validation ------------------------------------------------------

    def validate_node(self, node_id: str, mode: str = "quick") -> ValidationReport:
        """Run the benchmark battery. A cordoned node moves to Validating first; failure re-cordons it."""
        if mode not in ("quick", "comprehensive"):
            raise ValueError(f"unknown validation mode {mode!r}")
        node = self.sim.node(node_id)
        if node.state == NodeState.CORDONED:
            self.transition(node_id, NodeState.VALIDATING, f"validate-{mode}")
        readings = self.sim.node_health(node_id)
        checks = {
            "health_probe": bool(readings["responsive"]),
            "short_compute": readings["compute"] >= self.settings.compute_min,
        }
        if mode == "comprehensive":
            checks["sustained_throughput"] = readings["compute"] >= self.settings.sustained_min
            checks["interconnect_loopback"] = readings["loopback"] >= self.settings.loopback_min
            checks["memory_stress"] = bool(readings["memory_ok"])
        passed = all(checks.values())
        report = ValidationReport(node_id, mode, passed, checks, dict(readings), self.sim.now)
        self.validations.append(report)
        self.sim.record_event("node_validated", node_id, detail={"mode": mode, "passed": passed})
        if passed:
            self.sim.mark_validated(node_id)
            self._record(node_id).validation_mark = self._mark()
        elif self.sim.node(node_id).state == NodeState.VALIDATING:
            self.transition(node_id, NodeState.CORDONED, f"validate-{mode} failed")
            self._record(node_id).cordon_mark = self._mark()
        self.logger.info("Validation %s of %s: %s", mode, node_id, "pass" if passed else "fail")
        return report

    def _validate_and_finish(self, node_id: str, mode: str, diagnostics: Dict[str, Any]) -> None:
        def finish() -> None:
            report = self.validate_node(node_id, mode)
            self._log_action(node_id, f"validate-{mode}", "pass" if report.passed else "fail")
            if report.passed:
                self.uncordon(node_id)
            else:
                failed = sorted(k for k, ok in report.checks.items() if not ok)
                self._request_ticket(node_id, {**diagnostics, "failed_checks": failed})

        if not self.defer:
            finish()
            return
        if self.sim.node(node_id).state == NodeState.CORDONED:
            self.transition(node_id, NodeState.VALIDATING, f"validate-{mode}")
        hours = self.settings.quick_validation_h if mode == "quick" else self.settings.comprehensive_validation_h
        self.sim.schedule(self.sim.now + seconds_to_ms(hours * 3600.0), finish)

    # -- tickets ---------------------------------------------------------

    def open_ticket(self, node_id: str, diagnostics: Dict[str, Any]) -> Ticket:
        """Create one ticket per cordon epoch.

        A client failure is re-raised and the node stays Cordoned; the
        remaining attempts run on the simulated clock, attempt ``k`` waiting
        ``ticket_backoff_s * 2**k`` after the one before it.
        """
        try:
            return self._create_ticket(node_id, diagnostics)
        except ClientUnavailable as exc:
            self._ticket_failed(node_id, diagnostics, 0, exc)
            raise

    def _ticket_failed(self, node_id: str, diagnostics: Dict[str, Any], attempt: int, exc: ClientUnavailable) -> None:
        attempts = max(1, self.settings.ticket_retries)
        if attempt + 1 < attempts:
            backoff_s = self.settings.ticket_backoff_s * (2 ** attempt)
            self.logger.warning(
                "Ticket create for %s failed (attempt %d/%d, retry in %.0fs): %s",
                node_id, attempt + 1, attempts, backoff_s, exc,
            )
            self.sim.schedule(
                self.sim.now + seconds_to_ms(backoff_s),
                lambda: self._retry_ticket(node_id, diagnostics, attempt + 1),
            )
            return
        self.logger.error("Ticket for %s not created after %d attempts: %s", node_id, attempts, exc)
        self._log_action(node_id, "open-ticket", "gave up", attempts=attempts)
        if self.audit:
            self.audit.log_error("ClientUnavailable", str(exc), {"node_id": node_id, "attempts": attempts})
        if self.defer:
            # start a fresh round once the service had time to come back
            delay_s = self.settings.ticket_backoff_s * (2 ** attempts)
            self.sim.schedule(self.sim.now + seconds_to_ms(delay_s), lambda: self._retry_ticket(node_id, diagnostics, 0))

    def _epoch_key(self, node_id: str) -> str:
        state = self._record(node_id)
        cordon_t = state.cordon_mark[0] if state.cordon_mark else self.sim.now
        return f"{node_id}@{cordon_t}"

    def _retry_ticket(self, node_id: str, diagnostics: Dict[str, Any], attempt: int) -> None:
        if self.sim.node(node_id).state != NodeState.CORDONED:
            return
        key = self._epoch_key(node_id)
        if any(self.tickets[t].idempotency_key == key for t in self._record(node_id).tickets):
            return
        try:
            ticket = self._create_ticket(node_id, diagnostics)
        except ClientUnavailable as exc:
            self._ticket_failed(node_id, diagnostics, attempt, exc)
            return
        self._log_action(node_id, "open-ticket", "opened", ticket_id=ticket.ticket_id, attempt=attempt + 1)

    def _create_ticket(self, node_id: str, diagnostics: Dict[str, Any]) -> Ticket:
        node = self.sim.node(node_id)
        if node.state != NodeState.CORDONED:
            raise IllegalTransition(f"tickets are opened for cordoned nodes; {node_id} is {node.state.value}")
        state = self._record(node_id)
        cordon_t = state.cordon_mark[0] if state.cordon_mark else self.sim.now
        key = f"{node_id}@{cordon_t}"
        payload = {"node_id": node_id, "cordon_t_ms": cordon_t, "incidents": sorted(state.incidents), **diagnostics}
        ticket_id = self.tickets_port.create(key, node_id, payload, self.sim.now)
        ticket = self.tickets.get(ticket_id)
        if ticket is None:
            ticket = Ticket(ticket_id, node_id, key, payload)
            ticket.timestamps[TicketStatus.OPEN.value] = self.sim.now
            self.tickets[ticket_id] = ticket
            # an earlier epoch's ticket is superseded by this one
            for previous in state.tickets:
                self._close_ticket(previous)
            state.tickets.append(ticket_id)
            self.sim.record_event("ticket_opened", node_id, detail={"ticket_id": ticket_id, "key": key})
            if self.audit:
                self.audit.log_system_event("ticket_created", f"{ticket_id} for {node_id}", {"key": key})
        return ticket

    def _close_ticket(self, ticket_id: str) -> None:
        ticket = self.tickets.get(ticket_id)
        if ticket is None or ticket.status == TicketStatus.CLOSED:
            return
        ticket.advance_to(TicketStatus.CLOSED, self.sim.now)
        self.tickets_port.close(ticket_id, self.sim.now)
        if self.audit:
            self.audit.log_system_event("ticket_closed", f"{ticket_id} closed", {"node_id": ticket.node_id})

    def poll_tickets(self) -> None:
        """Turn ticket status changes into InRepair and Migrated transitions."""
        for ticket_id in sorted(self.tickets):
            ticket = self.tickets[ticket_id]
            if ticket.status == TicketStatus.CLOSED:
                continue
            try:
                status = self.tickets_port.poll(ticket_id, self.sim.now)
            except ClientUnavailable as exc:
                self.logger.warning("Poll of %s failed: %s", ticket_id, exc)
                continue
            if status.rank > ticket.status.rank:
                ticket.advance_to(status, self.sim.now)
            current = self._record(ticket.node_id).tickets
            if not current or current[-1] != ticket_id:
                continue
            node = self.sim.node(ticket.node_id)
            if status.rank >= TicketStatus.HOST_DEALLOCATED.rank and node.state == NodeState.CORDONED:
                self.transition(ticket.node_id, NodeState.IN_REPAIR, f"ticket {ticket_id} host deallocated")
            if status.rank >= TicketStatus.MIGRATED.rank and node.state == NodeState.IN_REPAIR:
                self.transition(ticket.node_id, NodeState.MIGRATED, f"ticket {ticket_id} migrated")
                self.sim.replace_hardware(ticket.node_id)
                self.on_migration_detected(ticket.node_id)

    def start_polling(self, interval_s: Optional[float] = None) -> None:
        interval_ms = seconds_to_ms(interval_s or self.settings.ticket_poll_s)

        def tick() -> None:
            self.poll_tickets()
            self.sim.schedule(self.sim.now + interval_ms, tick)

        self.sim.schedule(self.sim.now + interval_ms, tick)

    def on_migration_detected(self, node_id: str) -> None:
        """A migrated host is re-validated with the comprehensive battery before it rejoins."""
        node = self.sim.node(node_id)
        if node.state != NodeState.MIGRATED:
            raise IllegalTransition(f"{node_id} is {node.state.value}, not Migrated")
        self.transition(node_id, NodeState.VALIDATING, "migration detected")
        self._validate_and_finish(node_id, "comprehensive", {"reason": "post-migration validation failed"})

    # -- introspection ---------------------------------------------------

    def incidents_of(self, node_id: str) -> List[str]:
        return list(self._record(node_id).incidents)

    def out_of_service(self) -> List[str]:
        return sorted(
            n for n, node in self.sim.nodes.items() if node.state not in (NodeState.AVAILABLE, NodeState.ALLOCATED)
        )
