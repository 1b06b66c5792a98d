from __future__ import annotations

import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from fleet_guardian.knowledge_base import LabeledIncident
from fleet_guardian.models import FaultModel, IncidentLabel, JobSpec, Manifestation, TelemetrySample
from fleet_guardian.numerics import table7_fixture
from fleet_guardian.replay import case_one_corpus, case_two_incident
from fleet_guardian.simulator import SimConfig
from fleet_guardian.telemetry import CollectorSpec, TelemetryWindow, load_collectors_file

COLLECTORS_PATH = PROJECT_ROOT / "configs" / "collectors.yaml"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long statistical or end-to-end runs")


@pytest.fixture
def collectors() -> List[CollectorSpec]:
    return load_collectors_file(str(COLLECTORS_PATH))


@pytest.fixture
def make_config(collectors):
    """Factory for small clusters: one job over ``job_nodes`` nodes, default collectors."""

    def build(
        node_count: int = 6,
        job_nodes: Optional[int] = 4,
        seed: int = 0,
        fault_models: Sequence[FaultModel] = (),
        interval: float = 60.0,
        with_collectors: bool = True,
        **job_kwargs,
    ) -> SimConfig:
        jobs = []
        if job_nodes:
            jobs.append(JobSpec(requested_accelerators=8 * job_nodes, job_id="job-a", family="fam-a", **job_kwargs))
        return SimConfig(
            seed=seed,
            node_count=node_count,
            fault_models=list(fault_models),
            telemetry_interval=interval,
            job_templates=jobs,
            collectors=list(collectors) if with_collectors else [],
        )

    return build


@pytest.fixture
def crash_fault() -> FaultModel:
    return FaultModel("accelerator-memory", 0.0, Manifestation.crash(), log_text="Memory access fault by Node-9 (Agent handle: 0x1)")


@pytest.fixture
def hang_fault() -> FaultModel:
    return FaultModel("silent-hang", 0.0, Manifestation.hang())


@pytest.fixture
def degrade_fault() -> FaultModel:
    return FaultModel("throughput-degradation", 0.0, Manifestation.degrade(0.5))


def numeric_window(values: dict, metric: str = "accel_utilization", tick_ms: int = 60_000) -> TelemetryWindow:
    """Window from {node_id: [v_tick0, v_tick1, ...]}."""
    samples = [
        TelemetrySample(metric, i * tick_ms, node_id, value=float(v))
        for node_id, series in values.items()
        for i, v in enumerate(series)
    ]
    ticks = max(len(s) for s in values.values())
    return TelemetryWindow(samples, 0, ticks * tick_ms)


def labeled(
    incident_id: str,
    label: IncidentLabel,
    rng: np.random.Generator,
    culprit: Optional[str] = None,
    nodes: int = 5,
    ticks: int = 6,
    log: Optional[str] = None,
) -> LabeledIncident:
    """Small incident: the culprit's utilization collapses and it logs ``log`` on dmesg."""
    samples = []
    for tick in range(ticks):
        t = tick * 60_000
        for n in range(nodes):
            node_id = f"node-{n:03d}"
            util = 0.9 + 0.02 * rng.standard_normal()
            if node_id == culprit and label == IncidentLabel.HARDWARE_FAULT:
                util = 0.1 + 0.02 * rng.standard_normal()
            samples.append(TelemetrySample("accel_utilization", t, node_id, value=max(0.0, util)))
            samples.append(TelemetrySample("throughput_per_accel", t, node_id, value=900.0))
            if node_id == culprit and log:
                samples.append(TelemetrySample("dmesg", t, node_id, line=log))
    node_id = culprit if label == IncidentLabel.HARDWARE_FAULT else None
    return LabeledIncident(incident_id, TelemetryWindow(samples, 0, ticks * 60_000), label, node_id=node_id)


@pytest.fixture
def case_one():
    return case_one_corpus(seed=0)


@pytest.fixture
def case_two():
    return case_two_incident(seed=0)


@pytest.fixture
def table7():
    return table7_fixture()
