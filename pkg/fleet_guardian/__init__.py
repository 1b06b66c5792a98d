from .diagnosis import DiagnosisSession, diagnose
from .knowledge_base import KnowledgeBase, LabeledIncident
from .policy import FleetGuardian
from .remediation import LifecycleController
from .scenario import Scenario, ScenarioRunner, run_scenario
from .simulator import ClusterSimulator, SimConfig
from .telemetry import TelemetryStore, TelemetryWindow

__all__ = [
    "ClusterSimulator",
    "DiagnosisSession",
    "FleetGuardian",
    "KnowledgeBase",
    "LabeledIncident",
    "LifecycleController",
    "Scenario",
    "ScenarioRunner",
    "SimConfig",
    "TelemetryStore",
    "TelemetryWindow",
    "diagnose",
    "run_scenario",
]
