"""Seedable discrete-event simulator of nodes, component faults and synchronous training jobs."""

from __future__ import annotations

import heapq
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .models import (
    KPI_STATES,
    MS_PER_HOUR,
    ComponentClass,
    FaultModel,
    InsufficientCapacity,
    JobSpec,
    JobState,
    NodeState,
    RecoveryResult,
    SimEvent,
    SimulationError,
    TelemetrySample,
    UnknownJob,
    UnknownNode,
    seconds_to_ms,
)
from .telemetry import CollectorSpec

RUNNING_STATES = (JobState.TRAINING, JobState.DEGRADED)
DISRUPTED_STATES = (JobState.INTERRUPTED, JobState.HUNG, JobState.DEGRADED)


@dataclass(frozen=True)
class MetricModel:
    busy: float
    idle: float
    sigma: float


# Healthy operating points; values are fractions of nominal capacity.
METRIC_MODELS: Dict[str, MetricModel] = {
    "accel_utilization": MetricModel(0.90, 0.05, 0.02),
    "dram_bandwidth": MetricModel(0.80, 0.02, 0.02),
    "ib_bandwidth": MetricModel(0.85, 0.01, 0.02),
    "pcie_bandwidth": MetricModel(0.60, 0.01, 0.02),
}
GENERIC_METRIC = MetricModel(1.0, 0.0, 0.02)
ECC_METRIC = "hbm_ecc_errors"
KPI_METRIC = "throughput_per_accel"
KPI_NOISE = 0.01


@dataclass
class SimConfig:
    seed: int
    node_count: int
    accelerators_per_node: int = 8
    fault_models: List[FaultModel] = field(default_factory=list)
    telemetry_interval: float = 60.0
    job_templates: List[JobSpec] = field(default_factory=list)
    collectors: List[CollectorSpec] = field(default_factory=list)
    prevalidated: bool = True
    compute_share: float = 0.8

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise SimulationError("node_count must be at least 1")
        if self.telemetry_interval <= 0:
            raise SimulationError("telemetry_interval must be positive")
        if self.accelerators_per_node < 1:
            raise SimulationError("accelerators_per_node must be at least 1")
        if not 0.0 < self.compute_share <= 1.0:
            raise SimulationError("compute_share must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], collectors: Sequence[CollectorSpec] = ()) -> "SimConfig":
        if "seed" not in data:
            raise SimulationError("a simulation config needs a seed")
        return cls(
            seed=int(data["seed"]),
            node_count=int(data.get("node_count", 1)),
            accelerators_per_node=int(data.get("accelerators_per_node", 8)),
            fault_models=[FaultModel.from_dict(f) for f in data.get("fault_models") or []],
            telemetry_interval=float(data.get("telemetry_interval", 60.0)),
            job_templates=[JobSpec.from_dict(j) for j in data.get("job_templates") or []],
            collectors=list(collectors),
            prevalidated=bool(data.get("prevalidated", True)),
            compute_share=float(data.get("compute_share", 0.8)),
        )


@dataclass
class ActiveFault:
    fault_id: str
    model: FaultModel
    onset_ms: int

    def active_at(self, t_ms: int) -> bool:
        if not self.model.intermittent:
            return t_ms >= self.onset_ms
        on = seconds_to_ms(self.model.duty_on_s)
        period = on + seconds_to_ms(self.model.duty_off_s)
        return t_ms >= self.onset_ms and (t_ms - self.onset_ms) % period < on

    @property
    def kind(self) -> str:
        return self.model.manifestation.kind


@dataclass
class Node:
    node_id: str
    state: NodeState = NodeState.AVAILABLE
    component_rates: Dict[str, float] = field(default_factory=dict)
    last_validation: Optional[int] = None
    faults: List[ActiveFault] = field(default_factory=list)
    job_id: Optional[str] = None

    def active_faults(self, t_ms: int) -> List[ActiveFault]:
        return [f for f in self.faults if f.active_at(t_ms)]


@dataclass
class Job:
    job_id: str
    spec: JobSpec
    assigned_nodes: List[str] = field(default_factory=list)
    state: JobState = JobState.PENDING
    progress: float = 0.0
    last_accrual_ms: int = 0
    training_start_ms: Optional[int] = None
    interrupted_ms: Optional[int] = None
    last_throughput: float = 0.0
    kpi_stream: List[Tuple[int, float]] = field(default_factory=list)
    placement: int = 0


class ClusterSimulator:
    """Single-threaded event loop; every random draw flows from ``config.seed``."""

    KPI_STREAM_LIMIT = 2048

    def __init__(
        self,
        config: SimConfig,
        sink: Optional[Callable[[List[TelemetrySample]], Any]] = None,
    ):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.config = config
        self.sink = sink
        self.now = 0
        self.events: List[SimEvent] = []
        self.last_samples: List[TelemetrySample] = []
        self._queue: List[Tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._event_seq = itertools.count()
        self._fault_ids = itertools.count(1)
        self._job_ids = itertools.count(1)
        self._tick_index = 0

        fault_seq, telemetry_seq, policy_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.fault_rng = np.random.default_rng(fault_seq)
        self.telemetry_rng = np.random.default_rng(telemetry_seq)
        self.policy_rng = np.random.default_rng(policy_seq)

        width = max(3, len(str(config.node_count - 1)))
        self.nodes: Dict[str, Node] = {}
        for index in range(config.node_count):
            node_id = f"node-{index:0{width}d}"
            rates: Dict[str, float] = {}
            for model in config.fault_models:
                key = model.component_class.value
                rates[key] = rates.get(key, 0.0) + model.rate
            self.nodes[node_id] = Node(
                node_id,
                component_rates=rates,
                last_validation=0 if config.prevalidated else None,
            )
        self.jobs: Dict[str, Job] = {}

        for node_id in self.nodes:
            for model in config.fault_models:
                if model.rate > 0:
                    self._schedule_arrival(node_id, model)
        if config.collectors:
            self.schedule(self.tick_ms, self._on_tick)

    # -- clock and queue -------------------------------------------------

    @property
    def tick_ms(self) -> int:
        return seconds_to_ms(self.config.telemetry_interval)

    def schedule(self, at_ms: int, callback: Callable[[], None]) -> None:
        if at_ms < self.now:
            raise SimulationError(f"cannot schedule at {at_ms} before clock {self.now}")
        heapq.heappush(self._queue, (int(at_ms), next(self._seq), callback))

    def advance(self, duration: float, stop_when: Optional[Callable[["ClusterSimulator"], bool]] = None) -> List[SimEvent]:
        """Run the event loop for ``duration`` seconds and return the events it produced."""
        if duration <= 0:
            raise SimulationError("advance needs a positive duration")
        first = len(self.events)
        end = self.now + seconds_to_ms(duration)
        stopped = False
        while self._queue and self._queue[0][0] <= end:
            t_ms, _, callback = heapq.heappop(self._queue)
            self.now = t_ms
            callback()
            if stop_when is not None and stop_when(self):
                stopped = True
                break
        if not stopped:
            self.now = end
        for job in self.jobs.values():
            self._accrue(job)
        return self.events[first:]

    def record_event(
        self,
        kind: str,
        node_id: Optional[str] = None,
        job_id: Optional[str] = None,
        detail: Optional[Dict[str, Any]] = None,
    ) -> SimEvent:
        event = SimEvent(self.now, next(self._event_seq), kind, node_id, job_id, dict(detail or {}))
        self.events.append(event)
        return event

    def write_event_log(self, path: str) -> int:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event.to_record(), sort_keys=True) + "\n")
        return len(self.events)

    # -- lookups ---------------------------------------------------------

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def job(self, job_id: str) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(job_id) from None

    def schedulable_nodes(self) -> List[str]:
        return [
            n.node_id
            for n in self.nodes.values()
            if n.state == NodeState.AVAILABLE and n.last_validation is not None
        ]

    def nodes_needed(self, spec: JobSpec) -> int:
        per_node = self.config.accelerators_per_node
        if spec.requested_accelerators <= 0 or spec.requested_accelerators % per_node:
            raise SimulationError(
                f"requested_accelerators {spec.requested_accelerators} is not a multiple of {per_node}"
            )
        return spec.requested_accelerators // per_node

    # -- faults ----------------------------------------------------------

    def _schedule_arrival(self, node_id: str, model: FaultModel) -> None:
        mean_ms = MS_PER_HOUR / model.rate
        gap = max(1, int(round(self.fault_rng.exponential(mean_ms))))

        def arrive() -> None:
            self._apply_fault(node_id, model)
            self._schedule_arrival(node_id, model)

        self.schedule(self.now + gap, arrive)

    def inject_fault(self, node_id: str, fault: FaultModel, at: Optional[int] = None) -> SimEvent:
        """Schedule ``fault`` on ``node_id`` at simulated time ``at`` (ms)."""
        self.node(node_id)
        at_ms = self.now if at is None else int(at)
        if at_ms < self.now:
            raise SimulationError(f"fault time {at_ms} lies before clock {self.now}")
        event = self.record_event(
            "fault_scheduled",
            node_id,
            detail={"at_ms": at_ms, "component_class": fault.component_class.value,
                    "manifestation": fault.manifestation.to_dict()},
        )
        if at_ms == self.now:
            self._apply_fault(node_id, fault)
        else:
            self.schedule(at_ms, lambda: self._apply_fault(node_id, fault))
        return event

    def _apply_fault(self, node_id: str, model: FaultModel) -> ActiveFault:
        node = self.nodes[node_id]
        active = ActiveFault(f"F{next(self._fault_ids):05d}", model, self.now)
        node.faults.append(active)
        self.record_event(
            "fault",
            node_id,
            node.job_id,
            {
                "fault_id": active.fault_id,
                "component_class": model.component_class.value,
                "manifestation": model.manifestation.to_dict(),
                "known": model.known,
                "signature_id": model.signature_id,
            },
        )
        if model.intermittent:
            self._schedule_duty_toggle(node_id, active, self.now + seconds_to_ms(model.duty_on_s))
        if node.job_id:
            self._refresh_job(self.jobs[node.job_id])
        return active

    def _schedule_duty_toggle(self, node_id: str, active: ActiveFault, at_ms: int) -> None:
        def toggle() -> None:
            node = self.nodes[node_id]
            if active not in node.faults:
                return
            if node.job_id:
                self._refresh_job(self.jobs[node.job_id])
            on = seconds_to_ms(active.model.duty_on_s)
            off = seconds_to_ms(active.model.duty_off_s)
            step = off if not active.active_at(self.now) else on
            self._schedule_duty_toggle(node_id, active, self.now + step)

        self.schedule(at_ms, toggle)

    def clear_faults(self, node_id: str, persistent_too: bool = False, cause: str = "reboot") -> List[ActiveFault]:
        node = self.node(node_id)
        cleared = [f for f in node.faults if persistent_too or not f.model.persistent]
        node.faults = [f for f in node.faults if f not in cleared]
        for fault in cleared:
            self.record_event("fault_cleared", node_id, detail={"fault_id": fault.fault_id, "cause": cause})
        if node.job_id:
            self._refresh_job(self.jobs[node.job_id])
        return cleared

    def reboot_node(self, node_id: str) -> List[ActiveFault]:
        """Reboot clears soft faults; returns the faults that survive it."""
        self.clear_faults(node_id, persistent_too=False, cause="reboot")
        self.record_event("node_rebooted", node_id)
        return list(self.nodes[node_id].faults)

    def replace_hardware(self, node_id: str) -> None:
        """Migration to a new host: every fault goes and validation must be redone."""
        self.clear_faults(node_id, persistent_too=True, cause="migration")
        self.nodes[node_id].last_validation = None
        self.record_event("hardware_replaced", node_id)

    def node_speed(self, node_id: str, t_ms: Optional[int] = None) -> float:
        """Effective step speed of a node relative to healthy (1.0)."""
        t = self.now if t_ms is None else t_ms
        active = self.nodes[node_id].active_faults(t)
        if any(f.kind in ("crash", "hang") for f in active):
            return 0.0
        factors = [f.model.manifestation.factor for f in active if f.kind == "degrade"]
        if not factors:
            return 1.0
        c = self.config.compute_share
        return 1.0 / (c / min(factors) + 1.0 - c)

    def node_health(self, node_id: str) -> Dict[str, Any]:
        """Micro-check readings consumed by the validation battery."""
        active = self.node(node_id).active_faults(self.now)
        stalled = any(f.kind in ("crash", "hang") for f in active)
        factors = [f.model.manifestation.factor for f in active if f.kind == "degrade"]
        compute = 0.0 if stalled else (min(factors) if factors else 1.0)
        link_faults = [f for f in active if f.model.component_class == ComponentClass.INTERCONNECT]
        if stalled and link_faults:
            loopback = 0.0
        else:
            link_factors = [f.model.manifestation.factor for f in link_faults if f.kind == "degrade"]
            loopback = min(link_factors) if link_factors else (0.0 if link_faults else 1.0)
        memory_ok = not any(f.model.component_class == ComponentClass.ACCELERATOR_MEMORY for f in active)
        return {
            "responsive": not stalled,
            "compute": compute,
            "loopback": loopback,
            "memory_ok": memory_ok,
        }

    # -- nodes -----------------------------------------------------------

    def set_node_state(self, node_id: str, state: NodeState, cause: str = "manual") -> None:
        """Raw state write; the lifecycle controller owns edge legality."""
        node = self.node(node_id)
        previous = node.state
        if previous == state:
            return
        node.state = state
        self.record_event("node_state", node_id, node.job_id, {"from": previous.value, "to": state.value, "cause": cause})
        if previous == NodeState.ALLOCATED and node.job_id:
            job = self.jobs[node.job_id]
            node.job_id = None
            if node_id in job.assigned_nodes:
                job.assigned_nodes.remove(node_id)
            if job.state in KPI_STATES or job.state == JobState.LOADING:
                self.interrupt_job(job.job_id, cause=f"node {node_id} left service")

    def mark_validated(self, node_id: str) -> None:
        self.node(node_id).last_validation = self.now

    # -- jobs ------------------------------------------------------------

    def submit_job(self, spec: JobSpec) -> str:
        needed = self.nodes_needed(spec)
        free = self.schedulable_nodes()
        if len(free) < needed:
            raise InsufficientCapacity(f"job needs {needed} validated nodes, {len(free)} available")
        job_id = spec.job_id or f"job-{next(self._job_ids):03d}"
        if job_id in self.jobs:
            raise SimulationError(f"duplicate job id {job_id}")
        job = Job(job_id, spec, last_accrual_ms=self.now)
        self.jobs[job_id] = job
        self.record_event("job_submitted", job_id=job_id, detail={"nodes_needed": needed, "family": spec.family})
        self._place(job, free[:needed])
        return job_id

    def _place(self, job: Job, node_ids: Sequence[str]) -> None:
        for node_id in node_ids:
            node = self.nodes[node_id]
            node.state = NodeState.ALLOCATED
            node.job_id = job.job_id
        job.assigned_nodes = list(node_ids)
        job.state = JobState.LOADING
        job.placement += 1
        self.record_event("job_loading", job_id=job.job_id, detail={"nodes": list(node_ids)})
        if job.spec.loading_s > 0:
            placement = job.placement
            self.schedule(self.now + seconds_to_ms(job.spec.loading_s), lambda: self._start_training(job, placement))
        else:
            self._start_training(job, job.placement)

    def _start_training(self, job: Job, placement: int) -> None:
        # stale timer from an earlier placement
        if job.state != JobState.LOADING or job.placement != placement:
            return
        job.state = JobState.TRAINING
        job.last_accrual_ms = self.now
        job.training_start_ms = self.now
        self.record_event("job_training", job_id=job.job_id, detail={"progress": job.progress})
        self._refresh_job(job)

    def _accrue(self, job: Job) -> None:
        if job.state in RUNNING_STATES:
            elapsed_s = (self.now - job.last_accrual_ms) / 1000.0
            if elapsed_s > 0:
                job.progress += elapsed_s / job.spec.step_time * self.job_speed(job)
        job.last_accrual_ms = self.now
        total = job.spec.total_steps
        if total is not None and job.state in RUNNING_STATES and job.progress >= total:
            job.progress = float(total)
            job.state = JobState.COMPLETED
            self.record_event("job_completed", job_id=job.job_id, detail={"progress": job.progress})
            self._release(job)

    def job_speed(self, job: Job) -> float:
        if job.state == JobState.HUNG or not job.assigned_nodes:
            return 0.0
        return min(self.node_speed(n) for n in job.assigned_nodes)

    def job_throughput(self, job: Job) -> float:
        if job.state not in KPI_STATES:
            return 0.0
        return job.spec.peak_throughput * self.job_speed(job)

    def _refresh_job(self, job: Job) -> None:
        """Re-derive the job state from the faults active on its nodes (weakest link)."""
        if job.state not in KPI_STATES:
            return
        self._accrue(job)
        if job.state not in KPI_STATES:
            return
        worst: Dict[str, Tuple[str, ActiveFault]] = {}
        for node_id in job.assigned_nodes:
            for fault in self.nodes[node_id].active_faults(self.now):
                worst.setdefault(fault.kind, (node_id, fault))
        if "crash" in worst:
            node_id, fault = worst["crash"]
            self.interrupt_job(job.job_id, cause="crash", node_id=node_id, fault_id=fault.fault_id)
            return
        if "hang" in worst:
            target = JobState.HUNG
        elif "degrade" in worst:
            target = JobState.DEGRADED
        else:
            target = JobState.TRAINING
        if target != job.state:
            previous = job.state
            job.state = target
            detail: Dict[str, Any] = {"from": previous.value}
            if target == JobState.TRAINING:
                job.interrupted_ms = None
                kind = "job_healthy"
            else:
                key = "hang" if target == JobState.HUNG else "degrade"
                node_id, fault = worst[key]
                detail.update(node=node_id, fault_id=fault.fault_id)
                if job.interrupted_ms is None:
                    job.interrupted_ms = self.now
                kind = f"job_{target.value.lower()}"
            self.record_event(kind, job_id=job.job_id, detail=detail)

    def interrupt_job(
        self,
        job_id: str,
        cause: str = "manual",
        node_id: Optional[str] = None,
        fault_id: Optional[str] = None,
    ) -> None:
        job = self.job(job_id)
        if job.state in (JobState.INTERRUPTED, JobState.COMPLETED, JobState.PENDING):
            return
        self._accrue(job)
        previous = job.state
        job.state = JobState.INTERRUPTED
        # A hung or degraded job has been disrupted since its first bad event.
        if job.interrupted_ms is None:
            job.interrupted_ms = self.now
        detail: Dict[str, Any] = {"cause": cause, "from": previous.value, "progress": job.progress}
        if node_id:
            detail["node"] = node_id
        if fault_id:
            detail["fault_id"] = fault_id
        self.record_event("job_interrupted", node_id, job_id, detail)

    def _release(self, job: Job) -> None:
        released = []
        for node_id in job.assigned_nodes:
            node = self.nodes[node_id]
            if node.state == NodeState.ALLOCATED and node.job_id == job.job_id:
                node.state = NodeState.AVAILABLE
                node.job_id = None
                released.append(node_id)
        job.assigned_nodes = []
        if released:
            self.record_event("job_released", job_id=job.job_id, detail={"nodes": released})

    def restart_job(self, job_id: str, incidents: Iterable[str] = ()) -> RecoveryResult:
        """Roll back to the last checkpoint and restart on validated nodes."""
        job = self.job(job_id)
        if job.state not in DISRUPTED_STATES:
            raise SimulationError(f"job {job_id} is {job.state.value}, nothing to recover")
        if job.state != JobState.INTERRUPTED:
            self.interrupt_job(job_id, cause="recovery")
        needed = self.nodes_needed(job.spec)
        held = [n for n in job.assigned_nodes if self.nodes[n].state == NodeState.ALLOCATED]
        if len(self.schedulable_nodes()) + len(held) < needed:
            raise InsufficientCapacity(f"job {job_id} needs {needed} nodes to restart")

        interval = job.spec.checkpoint_interval
        resumed_at = float(np.floor(job.progress / interval) * interval) if interval > 0 else job.progress
        lost = job.progress - resumed_at
        downtime_s = (self.now - (job.interrupted_ms if job.interrupted_ms is not None else self.now)) / 1000.0

        job.state = JobState.RECOVERING
        self.record_event("job_recovering", job_id=job_id)
        self._release(job)
        chosen = self.schedulable_nodes()[:needed]
        job.progress = resumed_at
        job.interrupted_ms = None
        self.record_event(
            "job_resumed",
            job_id=job_id,
            detail={
                "resumed_at_step": resumed_at,
                "lost_steps": lost,
                "downtime_s": downtime_s,
                "nodes": chosen,
                "incidents": sorted(incidents),
            },
        )
        self._place(job, chosen)
        return RecoveryResult(job_id, resumed_at, lost, downtime_s, list(chosen))

    # -- telemetry -------------------------------------------------------

    def _on_tick(self) -> None:
        self._tick_index += 1
        for job in list(self.jobs.values()):
            self._accrue(job)
        samples = self.emit_telemetry()
        if self.sink is not None and samples:
            self.sink(samples)
        self.schedule(self.now + self.tick_ms, self._on_tick)

    def _collector_due(self, spec: CollectorSpec) -> bool:
        every = max(1, int(round(spec.interval_s / self.config.telemetry_interval)))
        return self._tick_index % every == 0

    def emit_telemetry(self) -> List[TelemetrySample]:
        """One sample per due collector and node at the current clock."""
        samples: List[TelemetrySample] = []
        rng = self.telemetry_rng
        for spec in self.config.collectors:
            if not self._collector_due(spec):
                continue
            if spec.source == "job-kpi":
                samples.extend(self._kpi_samples(spec))
                continue
            for node in self.nodes.values():
                active = node.active_faults(self.now)
                if spec.is_log:
                    for fault in active:
                        text = fault.model.log_text or (
                            fault.model.manifestation.text if fault.kind == "log-pattern" else None
                        )
                        if text and fault.model.log_channel == spec.name:
                            samples.append(
                                TelemetrySample(spec.name, self.now, node.node_id, line=text, job_id=node.job_id)
                            )
                    continue
                for metric in spec.metrics:
                    value = self._metric_value(metric, node, active, rng)
                    samples.append(TelemetrySample(metric, self.now, node.node_id, value=value, job_id=node.job_id))
        self.last_samples = samples
        return samples

    def _metric_value(self, metric: str, node: Node, active: List[ActiveFault], rng: np.random.Generator) -> float:
        if metric == ECC_METRIC:
            if any(f.model.component_class == ComponentClass.ACCELERATOR_MEMORY for f in active):
                return float(1 + rng.poisson(3.0))
            return 0.0
        model = METRIC_MODELS.get(metric, GENERIC_METRIC)
        busy = node.state == NodeState.ALLOCATED
        value = (model.busy if busy else model.idle) + model.sigma * rng.standard_normal()
        if any(f.kind in ("crash", "hang") for f in active):
            return 0.0
        factors = [f.model.manifestation.factor for f in active if f.kind == "degrade"]
        if factors:
            value *= min(factors)
        return max(0.0, float(value))

    def _kpi_samples(self, spec: CollectorSpec) -> List[TelemetrySample]:
        out: List[TelemetrySample] = []
        for job in self.jobs.values():
            if job.state not in KPI_STATES:
                continue
            per_accel = self.job_throughput(job) / job.spec.requested_accelerators
            job.last_throughput = per_accel
            job.kpi_stream.append((self.now, per_accel))
            if len(job.kpi_stream) > self.KPI_STREAM_LIMIT:
                del job.kpi_stream[: -self.KPI_STREAM_LIMIT]
            # one job-wide reading per tick, replicated to every assigned node
            noisy = per_accel * (1.0 + KPI_NOISE * self.telemetry_rng.standard_normal())
            for metric in spec.metrics:
                for node_id in job.assigned_nodes:
                    out.append(
                        TelemetrySample(metric, self.now, node_id, value=max(0.0, float(noisy)), job_id=job.job_id)
                    )
        return out


def sample_job_ttf(node_mtbf_h: float, nodes: int, trials: int, seed: int) -> np.ndarray:
    """Job time-to-failure in hours: minimum of per-node exponential lifetimes."""
    rng = np.random.default_rng(seed)
    return rng.exponential(node_mtbf_h, size=(trials, nodes)).min(axis=1)
