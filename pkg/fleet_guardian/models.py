from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional

MS_PER_SECOND = 1_000
MS_PER_HOUR = 3_600_000
MS_PER_DAY = 24 * MS_PER_HOUR


def seconds_to_ms(seconds: float) -> int:
    return int(round(float(seconds) * MS_PER_SECOND))


class GuardianError(Exception):
    """Base class of every domain error raised by fleet_guardian."""


class ConfigError(GuardianError):
    """Raised when a configuration or scenario document is unusable."""


class SimulationError(GuardianError):
    """Raised when a simulator call violates its preconditions."""


class InsufficientCapacity(SimulationError):
    """Raised when too few validated Available nodes exist for a job."""


class UnknownNode(SimulationError):
    """Raised for a node id the simulator does not know."""


class UnknownJob(SimulationError):
    """Raised for a job id the simulator does not know."""


class TelemetryError(GuardianError):
    """Base class of telemetry store errors."""


class ParseError(TelemetryError):
    """Raised when a collector document is not valid YAML of the expected shape."""


class ValidationError(TelemetryError):
    """Raised when a collector document parses but breaks an invariant."""


class UnknownCollector(TelemetryError):
    """Raised when a sample does not belong to any active collector."""


class NonFiniteValue(TelemetryError):
    """Raised when a numeric sample is NaN or infinite."""


class UnknownMetric(TelemetryError):
    """Raised when a query names a metric the store never saw."""


class DetectionError(GuardianError):
    """Base class of anomaly detection errors."""


class UnusableBaseline(DetectionError):
    """Raised when a KPI baseline has fewer samples than required."""


class TooFewPeers(DetectionError):
    """Raised when spatial scoring gets fewer than three nodes."""


class EmptyBaseline(DetectionError):
    """Raised when temporal scoring gets an empty baseline."""


class RuleRuntimeError(DetectionError):
    """Raised when a rule predicate fails on malformed telemetry."""

    def __init__(self, rule_id: str, message: str):
        super().__init__(f"rule {rule_id}: {message}")
        self.rule_id = rule_id


class KnowledgeBaseError(GuardianError):
    """Base class of signature knowledge base errors."""


class UnknownRule(KnowledgeBaseError):
    """Raised for a rule id absent from the knowledge base."""


class RuleSyntaxError(KnowledgeBaseError):
    """Raised when rule text does not parse or does not fit the telemetry schema."""


class EmptySet(KnowledgeBaseError):
    """Raised when contrastive selection receives an empty incident set."""


class NoContrastAvailable(KnowledgeBaseError):
    """Raised when the corpus holds no incident with a differing label."""


class ValidationCorpusDegenerate(KnowledgeBaseError):
    """Raised when a validation corpus carries a single label."""


class SchemaError(KnowledgeBaseError):
    """Raised when an incident bundle does not follow the bundle layout."""


class RemediationError(GuardianError):
    """Base class of node lifecycle errors."""


class IllegalTransition(RemediationError):
    """Raised for a lifecycle edge outside the transition graph."""


class StaleValidation(RemediationError):
    """Raised when uncordon is attempted without a validation newer than the cordon."""


class NoSpareCapacity(RemediationError):
    """Raised when a job cannot be restarted for lack of validated spares."""


class UnknownFaultClass(RemediationError):
    """Raised when no playbook exists for a fault class."""


class ClientUnavailable(RemediationError):
    """Raised by a ticket client when the upstream incident system is down."""


class NumericsError(GuardianError):
    """Base class of numerical validation errors."""


class LengthMismatch(NumericsError):
    """Raised when compared vectors differ in length."""


class NonFinite(NumericsError):
    """Raised when a compared vector holds NaN or infinity."""


class SchemaMismatch(NumericsError):
    """Raised when reference and candidate traces cover different entries."""


class HealthError(GuardianError):
    """Base class of training health errors."""


class DegenerateProfile(HealthError):
    """Raised when a norm profile has fewer than three layers."""


class TooFewRanks(HealthError):
    """Raised when straggler analysis gets fewer than three ranks."""


class TunerError(GuardianError):
    """Base class of parallelism tuner errors."""


class NonDivisible(TunerError):
    """Raised when DP or gradient accumulation is not integral."""


class NoFeasibleConfig(TunerError):
    """Raised when no configuration fits the memory model."""


class KpiError(GuardianError):
    """Raised when KPI inputs break their invariants."""


class NodeState(str, Enum):
    AVAILABLE = "Available"
    ALLOCATED = "Allocated"
    SUSPECT = "Suspect"
    CORDONED = "Cordoned"
    IN_REPAIR = "InRepair"
    MIGRATED = "Migrated"
    VALIDATING = "Validating"


class JobState(str, Enum):
    PENDING = "Pending"
    LOADING = "Loading"
    TRAINING = "Training"
    HUNG = "Hung"
    DEGRADED = "Degraded"
    INTERRUPTED = "Interrupted"
    RECOVERING = "Recovering"
    COMPLETED = "Completed"


# States in which a job reports KPI samples.
KPI_STATES = (JobState.TRAINING, JobState.DEGRADED, JobState.HUNG)


class ComponentClass(str, Enum):
    ACCELERATOR_MEMORY = "accelerator-memory"
    INTERCONNECT = "interconnect"
    HOST_OS = "host-os"
    SILENT_HANG = "silent-hang"
    THROUGHPUT_DEGRADATION = "throughput-degradation"


HARD_COMPONENT_CLASSES = (ComponentClass.ACCELERATOR_MEMORY, ComponentClass.INTERCONNECT)


class IncidentLabel(str, Enum):
    HARDWARE_FAULT = "hardware-fault"
    USER_ERROR = "user-error"
    HEALTHY = "healthy"


class RuleAction(str, Enum):
    RECOVER_JOB_ONLY = "recover-job-only"
    REBOOT = "reboot"
    TICKET = "ticket"


class TicketStatus(str, Enum):
    OPEN = "Open"
    HOST_DEALLOCATED = "HostDeallocated"
    MIGRATED = "Migrated"
    CLOSED = "Closed"

    @property
    def rank(self) -> int:
        return _TICKET_ORDER.index(self)


_TICKET_ORDER = [
    TicketStatus.OPEN,
    TicketStatus.HOST_DEALLOCATED,
    TicketStatus.MIGRATED,
    TicketStatus.CLOSED,
]


@dataclass(frozen=True)
class Manifestation:
    kind: str  # crash | hang | degrade | log-pattern
    factor: Optional[float] = None
    text: Optional[str] = None

    KINDS = ("crash", "hang", "degrade", "log-pattern")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown manifestation kind {self.kind!r}")
        if self.kind == "degrade":
            if self.factor is None or not 0.0 < float(self.factor) < 1.0:
                raise ValueError("degrade factor must lie in (0, 1)")
        if self.kind == "log-pattern" and not self.text:
            raise ValueError("log-pattern manifestation needs text")

    @classmethod
    def crash(cls) -> "Manifestation":
        return cls("crash")

    @classmethod
    def hang(cls) -> "Manifestation":
        return cls("hang")

    @classmethod
    def degrade(cls, factor: float) -> "Manifestation":
        return cls("degrade", factor=float(factor))

    @classmethod
    def log_pattern(cls, text: str) -> "Manifestation":
        return cls("log-pattern", text=text)

    @classmethod
    def from_dict(cls, data: Any) -> "Manifestation":
        if isinstance(data, str):
            return cls(data)
        return cls(str(data["kind"]), factor=data.get("factor"), text=data.get("text"))

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.factor is not None:
            out["factor"] = self.factor
        if self.text is not None:
            out["text"] = self.text
        return out


@dataclass(frozen=True)
class FaultModel:
    component_class: ComponentClass
    rate: float  # failures per node-hour
    manifestation: Manifestation
    known: bool = False
    signature_id: Optional[str] = None
    log_text: Optional[str] = None
    log_channel: str = "dmesg"
    persistent: Optional[bool] = None
    duty_on_s: Optional[float] = None
    duty_off_s: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "component_class", ComponentClass(self.component_class))
        if self.rate < 0:
            raise ValueError("fault rate must be non-negative")
        if self.known and not self.signature_id:
            raise ValueError("a known fault model needs a signature_id")
        if (self.duty_on_s is None) != (self.duty_off_s is None):
            raise ValueError("duty_on_s and duty_off_s go together")
        if self.persistent is None:
            object.__setattr__(
                self, "persistent", self.component_class in HARD_COMPONENT_CLASSES
            )

    @property
    def intermittent(self) -> bool:
        return self.duty_on_s is not None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FaultModel":
        return cls(
            component_class=ComponentClass(data["component_class"]),
            rate=float(data.get("rate", 0.0)),
            manifestation=Manifestation.from_dict(data["manifestation"]),
            known=bool(data.get("known", False)),
            signature_id=data.get("signature_id"),
            log_text=data.get("log_text"),
            log_channel=str(data.get("log_channel", "dmesg")),
            persistent=data.get("persistent"),
            duty_on_s=data.get("duty_on_s"),
            duty_off_s=data.get("duty_off_s"),
        )


@dataclass
class JobSpec:
    requested_accelerators: int
    checkpoint_interval: int = 500
    step_time: float = 1.0
    peak_throughput: float = 1_000_000.0
    job_id: Optional[str] = None
    family: str = "default"
    loading_s: float = 0.0
    total_steps: Optional[int] = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "JobSpec":
        return cls(
            requested_accelerators=int(data["requested_accelerators"]),
            checkpoint_interval=int(data.get("checkpoint_interval", 500)),
            step_time=float(data.get("step_time", 1.0)),
            peak_throughput=float(data.get("peak_throughput", 1_000_000.0)),
            job_id=data.get("job_id"),
            family=str(data.get("family", "default")),
            loading_s=float(data.get("loading_s", 0.0)),
            total_steps=data.get("total_steps"),
        )


@dataclass(frozen=True)
class SimEvent:
    t_ms: int
    seq: int
    kind: str
    node_id: Optional[str] = None
    job_id: Optional[str] = None
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "t_ms": self.t_ms,
            "kind": self.kind,
            "node_id": self.node_id,
            "job_id": self.job_id,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class TelemetrySample:
    metric: str
    t: int
    node_id: str
    value: Optional[float] = None
    line: Optional[str] = None
    job_id: Optional[str] = None
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.value is None) == (self.line is None):
            raise ValueError("a sample carries exactly one of value or line")
        if not self.node_id:
            raise ValueError("a sample needs a node_id")

    @property
    def is_log(self) -> bool:
        return self.line is not None


@dataclass(frozen=True)
class LifecycleTransition:
    node_id: str
    from_state: NodeState
    to_state: NodeState
    cause: str
    t: int

    def to_record(self) -> Dict[str, Any]:
        return {
            "node_id": self.node_id,
            "from": self.from_state.value,
            "to": self.to_state.value,
            "cause": self.cause,
            "t_ms": self.t,
        }


@dataclass
class Ticket:
    ticket_id: str
    node_id: str
    idempotency_key: str
    diagnostics: Dict[str, Any]
    status: TicketStatus = TicketStatus.OPEN
    timestamps: Dict[str, int] = field(default_factory=dict)

    def advance_to(self, status: TicketStatus, t_ms: int) -> bool:
        """Move forward along the status order; never backwards."""
        if status.rank <= self.status.rank:
            return False
        self.status = status
        self.timestamps[status.value] = t_ms
        return True


@dataclass
class ActionRecord:
    action: str
    outcome: str
    t: int
    detail: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RecoveryResult:
    job_id: str
    resumed_at_step: float
    lost_steps: float
    downtime_s: float
    nodes: List[str] = field(default_factory=list)
