"""Offline replay of recorded incident bundles, plus builders for the two bundled case corpora."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import GuardianSettings
from .diagnosis import DiagnosisSession, diagnose
from .knowledge_base import KnowledgeBase, LabeledIncident, contextual_data_selection, read_corpus
from .models import ComponentClass, IncidentLabel, JobState, TelemetrySample
from .policy import action_for, infer_fault_class
from .rule_generation import RuleCandidate, generate_rule
from .simulator import ECC_METRIC, KPI_METRIC
from .telemetry import TelemetrySchema, TelemetryWindow

logger = logging.getLogger(__name__)

MEMORY_FAULT_LINE = "Memory access fault by Node-9 (Agent handle: 0x55d1c0) on address 0x7f3a0000. Reason: Unknown."
NAN_LINE = "found NaN in local forward loss calculation"
TICK_MS = 60_000


@dataclass
class ReplayResult:
    incident: LabeledIncident
    session: DiagnosisSession
    candidate: Optional[RuleCandidate] = None


def window_schema(window: TelemetryWindow) -> TelemetrySchema:
    return TelemetrySchema(frozenset(window.metrics), frozenset(window.log_channels))


def replay_bundle(
    bundle: str,
    out_dir: str,
    corpus_dir: Optional[str] = None,
    settings: Optional[GuardianSettings] = None,
    fault_class: Optional[ComponentClass] = None,
) -> ReplayResult:
    """Diagnose a recorded snapshot and, given a corpus, generate a rule for it.

    Raises SchemaError for a malformed or empty bundle.
    """
    settings = settings or GuardianSettings()
    incident = LabeledIncident.read_bundle(bundle)
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)

    session = DiagnosisSession(
        incident.job_id or incident.incident_id,
        max_iterations=settings.detection.max_iterations,
        trigger={"bundle": incident.incident_id, "t_ms": incident.window.t0},
    )
    diagnose(session, incident.window, settings=settings.detection)
    session.write_report(str(target / "diagnosis.json"))
    logger.info("Replay %s: diagnosis %s (%s)", incident.incident_id, session.status, session.confirmed_node)
    result = ReplayResult(incident, session)

    if corpus_dir is None or not incident.positive:
        return result
    corpus = [i for i in read_corpus(corpus_dir) if i.incident_id != incident.incident_id]
    corpus.append(incident)
    if fault_class is None and session.status == "Confirmed":
        fault_class = infer_fault_class(session, incident.window, session.confirmed_node, JobState.TRAINING)
    kb = KnowledgeBase(str(target / "kb"))
    contrast = contextual_data_selection(incident, corpus, top_k=3)
    candidate = generate_rule(
        incident,
        contrast,
        corpus,
        window_schema(incident.window),
        settings=settings.kb,
        kb=kb,
        fault_class=fault_class,
        action=action_for(fault_class) if fault_class else action_for(ComponentClass.HOST_OS),
    )
    (target / "generation.json").write_text(json.dumps(candidate.to_record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result.candidate = candidate
    return result


# -- bundled cases ---------------------------------------------------------


def _node_ids(count: int) -> List[str]:
    return [f"node-{i:03d}" for i in range(count)]


def _numeric(metric: str, t: int, node_id: str, value: float, job_id: Optional[str]) -> TelemetrySample:
    return TelemetrySample(metric, t, node_id, value=max(0.0, float(value)), job_id=job_id)


def memory_fault_incident(
    incident_id: str,
    label: IncidentLabel,
    culprit: Optional[str],
    rng: np.random.Generator,
    nodes: int = 6,
    ticks: int = 8,
    onset: int = 4,
) -> LabeledIncident:
    """One snapshot of a job on ``nodes`` nodes.

    A hardware fault logs the memory access fault on its node and shows HBM ECC
    errors with collapsing DRAM bandwidth; a user error logs the same line with
    healthy counters; a healthy snapshot logs nothing.
    """
    job_id = "job-case1"
    samples: List[TelemetrySample] = []
    hit = label == IncidentLabel.HARDWARE_FAULT and culprit is not None
    for tick in range(ticks):
        t = tick * TICK_MS
        kpi = 950.0 * (0.3 if hit and tick >= onset else 1.0) * (1 + 0.01 * rng.standard_normal())
        for node_id in _node_ids(nodes):
            faulty = node_id == culprit and tick >= onset
            hardware = faulty and label == IncidentLabel.HARDWARE_FAULT
            util = 0.9 + 0.02 * rng.standard_normal()
            dram = 0.8 + 0.02 * rng.standard_normal()
            if hardware:
                util *= 0.3
                dram *= 0.25
            samples.append(_numeric("accel_utilization", t, node_id, util, job_id))
            samples.append(_numeric("dram_bandwidth", t, node_id, dram, job_id))
            samples.append(_numeric(ECC_METRIC, t, node_id, float(2 + rng.poisson(3.0)) if hardware else 0.0, job_id))
            samples.append(_numeric(KPI_METRIC, t, node_id, kpi, job_id))
            if faulty:
                samples.append(TelemetrySample("dmesg", t, node_id, line=MEMORY_FAULT_LINE, job_id=job_id))
    node_id = culprit if label == IncidentLabel.HARDWARE_FAULT else None
    return LabeledIncident(incident_id, TelemetryWindow(samples, 0, ticks * TICK_MS), label, node_id=node_id, job_id=job_id)


def case_one_corpus(seed: int = 0) -> List[LabeledIncident]:
    """Memory access fault corpus: hardware faults, look-alike user errors and healthy snapshots."""
    rng = np.random.default_rng(seed)
    nodes = _node_ids(6)
    corpus: List[LabeledIncident] = []
    for k, culprit in enumerate(("node-002", "node-004", "node-001", "node-005")):
        corpus.append(memory_fault_incident(f"C1-HW-{k + 1:02d}", IncidentLabel.HARDWARE_FAULT, culprit, rng))
    for k, culprit in enumerate(("node-003", "node-000", "node-004")):
        corpus.append(memory_fault_incident(f"C1-USER-{k + 1:02d}", IncidentLabel.USER_ERROR, culprit, rng))
    for k in range(4):
        corpus.append(memory_fault_incident(f"C1-OK-{k + 1:02d}", IncidentLabel.HEALTHY, None, rng))
    logger.debug("Memory-fault corpus over %s: %d incidents", ", ".join(nodes), len(corpus))
    return corpus


def case_two_incident(seed: int = 0, nodes: int = 8, culprit: str = "node-003", ticks: int = 10) -> LabeledIncident:
    """Loss-NaN snapshot: the culprit's compute drops two ticks before seven peers follow it."""
    rng = np.random.default_rng(seed)
    ids = _node_ids(nodes)
    followers = [n for n in ids if n != culprit][: max(0, nodes - 2)]
    job_id = "job-case2"
    samples: List[TelemetrySample] = []
    first, spread = 4, 6
    for tick in range(ticks):
        t = tick * TICK_MS
        kpi = 0.0 if tick >= first else 950.0 * (1 + 0.01 * rng.standard_normal())
        for node_id in ids:
            down = (node_id == culprit and tick >= first) or (node_id in followers and tick >= spread)
            util = 0.9 + 0.02 * rng.standard_normal()
            dram = 0.8 + 0.02 * rng.standard_normal()
            if down:
                util *= 0.05
                dram *= 0.1
            ecc = float(1 + rng.poisson(2.0)) if node_id == culprit and tick >= first else 0.0
            samples.append(_numeric("accel_utilization", t, node_id, util, job_id))
            samples.append(_numeric("dram_bandwidth", t, node_id, dram, job_id))
            samples.append(_numeric(ECC_METRIC, t, node_id, ecc, job_id))
            samples.append(_numeric(KPI_METRIC, t, node_id, kpi, job_id))
            if node_id == culprit and tick >= first:
                samples.append(TelemetrySample("dmesg", t, node_id, line="amdgpu: HBM uncorrectable error on channel 3", job_id=job_id))
            if down and tick >= spread:
                samples.append(TelemetrySample("job_log", t, node_id, line=NAN_LINE, job_id=job_id))
    return LabeledIncident(
        "C2-NAN-01",
        TelemetryWindow(samples, 0, ticks * TICK_MS),
        IncidentLabel.HARDWARE_FAULT,
        node_id=culprit,
        job_id=job_id,
        notes="loss NaN spreading from one node",
    )


def write_case_bundles(root: str, seed: int = 0) -> Dict[str, Sequence[str]]:
    """Lay out ``case1/corpus``, ``case1/focal`` and ``case2`` bundles under ``root``."""
    base = Path(root)
    corpus = case_one_corpus(seed)
    focal = memory_fault_incident("C1-HW-FOCAL", IncidentLabel.HARDWARE_FAULT, "node-003", np.random.default_rng(seed + 1))
    written = {
        "case1/corpus": [str(i.write_bundle(str(base / "case1" / "corpus"))) for i in corpus],
        "case1/focal": [str(focal.write_bundle(str(base / "case1")))],
        "case2": [str(case_two_incident(seed).write_bundle(str(base / "case2")))],
    }
    return written
