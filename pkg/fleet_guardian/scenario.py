"""Scenario documents and the end-to-end runner that produces a deterministic artifact directory."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .audit_logger import AuditLogger
from .config import GuardianSettings
from .detection import KpiBaseline, TemporalHistory
from .knowledge_base import KnowledgeBase, LabeledIncident, write_corpus
from .kpi import KpiReport, compute_kpis
from .models import MS_PER_DAY, MS_PER_HOUR, ConfigError, FaultModel, IncidentLabel
from .policy import POLICIES, FleetGuardian
from .remediation import LifecycleController
from .rules import Rule
from .simulator import KPI_METRIC, ClusterSimulator, SimConfig
from .telemetry import CollectorSpec, TelemetryStore, load_collectors, load_collectors_file
from .ticket_client import FileJournalTicketClient

logger = logging.getLogger(__name__)

OUTPUTS = ("events", "kpis", "diagnoses", "kb", "corpus")
DEFAULT_COLLECTORS = Path(__file__).resolve().parent.parent / "configs" / "collectors.yaml"


@dataclass(frozen=True)
class ScheduledFault:
    node_id: str
    at_ms: int
    model: FaultModel


@dataclass
class Scenario:
    name: str
    seed: int
    sim: SimConfig
    duration_days: float
    policy_schedule: List[Tuple[float, str]]
    settings: GuardianSettings = field(default_factory=GuardianSettings)
    rules: List[Dict[str, Any]] = field(default_factory=list)
    faults: List[ScheduledFault] = field(default_factory=list)
    outputs: Tuple[str, ...] = OUTPUTS
    calendar_start: str = "2025-03-01"

    @classmethod
    def load(cls, path: str) -> "Scenario":
        source = Path(path)
        try:
            data = yaml.safe_load(source.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"无法读取场景文件 {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"场景文件 {path} 不是合法的 YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"场景文件 {path} 顶层需要是一个对象。")
        return cls.from_dict(data, source.parent)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Optional[Path] = None) -> "Scenario":
        if "seed" not in data:
            raise ConfigError("场景缺少 seed。")
        seed = int(data["seed"])
        collectors = _collectors(data.get("collectors"), base_dir)
        cluster = dict(data.get("cluster") or {})
        cluster["seed"] = seed
        try:
            sim = SimConfig.from_dict(cluster, collectors)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cluster 配置无效: {exc}") from exc

        if "policy_schedule" in data:
            schedule = []
            for entry in data.get("policy_schedule") or []:
                if not isinstance(entry, dict) or "policy" not in entry:
                    raise ConfigError("policy_schedule 的每一项需要 day 与 policy。")
                schedule.append((float(entry.get("day", 0)), str(entry["policy"])))
        else:
            schedule = [(0.0, str(data.get("policy", "full")))]
        schedule.sort(key=lambda item: item[0])
        unknown = [p for _, p in schedule if p not in POLICIES]
        if unknown or not schedule:
            raise ConfigError(f"未知的策略 {unknown}; 可选: {', '.join(POLICIES)}")
        if schedule[0][0] > 0:
            raise ConfigError("policy_schedule 需要从第 0 天开始。")

        faults = []
        for entry in data.get("faults") or []:
            try:
                faults.append(
                    ScheduledFault(
                        str(entry["node"]),
                        int(round(float(entry.get("at_h", 0.0)) * MS_PER_HOUR)),
                        FaultModel.from_dict(entry["model"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"faults 配置无效: {exc}") from exc

        outputs = tuple(data.get("outputs") or OUTPUTS)
        bad_outputs = [o for o in outputs if o not in OUTPUTS]
        if bad_outputs:
            raise ConfigError(f"未知的输出项 {bad_outputs}")
        duration = float(data.get("duration_days", 1.0))
        if duration <= 0:
            raise ConfigError("duration_days 必须为正数。")
        rules = [dict(r) for r in data.get("rules") or []]
        for raw in rules:
            Rule.from_dict(raw)
        return cls(
            name=str(data.get("name", "scenario")),
            seed=seed,
            sim=sim,
            duration_days=duration,
            policy_schedule=schedule,
            settings=GuardianSettings.from_config(data.get("settings") or {}),
            rules=rules,
            faults=faults,
            outputs=outputs,
            calendar_start=str(data.get("calendar_start", "2025-03-01")),
        )

    def policy_at(self, t_ms: int) -> str:
        current = self.policy_schedule[0][1]
        for day, policy in self.policy_schedule:
            if t_ms >= day * MS_PER_DAY:
                current = policy
        return current


def _collectors(value: Any, base_dir: Optional[Path]) -> List[CollectorSpec]:
    if value is None:
        return load_collectors_file(str(DEFAULT_COLLECTORS))
    if isinstance(value, list):
        return load_collectors(yaml.safe_dump({"collectors": value}))
    path = Path(str(value))
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if not path.exists():
        raise ConfigError(f"找不到采集器配置 {path}")
    return load_collectors_file(str(path))


@dataclass
class HealthyHistory:
    baselines: Dict[str, KpiBaseline]
    history: TemporalHistory
    negatives: List[LabeledIncident]


def healthy_history(config: SimConfig, settings: GuardianSettings) -> HealthyHistory:
    """Fault-free run of the same cluster and jobs: KPI baselines, temporal history, healthy snapshots."""
    quiet = replace(config, fault_models=[])
    store = TelemetryStore(quiet.collectors)
    sim = ClusterSimulator(quiet, sink=store.ingest)
    job_ids = [sim.submit_job(spec) for spec in quiet.job_templates]
    sim.advance(settings.policy.history_h * 3600.0)

    baselines: Dict[str, KpiBaseline] = {}
    job_nodes: List[str] = []
    for job_id in job_ids:
        job = sim.job(job_id)
        window = store.window(0, sim.now + 1, job.assigned_nodes)
        values = [window.values(KPI_METRIC, n) for n in job.assigned_nodes]
        series = np.concatenate(values) if values else np.empty(0)
        baselines.setdefault(
            job.spec.family,
            KpiBaseline.fit(
                job.spec.family,
                job.spec.requested_accelerators,
                {KPI_METRIC: series},
                settings.detection.min_baseline_samples,
            ),
        )
        job_nodes.extend(n for n in job.assigned_nodes if n not in job_nodes)
    history = TemporalHistory.from_window(store.window(0, sim.now + 1, sorted(job_nodes)))

    span = settings.policy.lookback_ticks * sim.tick_ms
    negatives: List[LabeledIncident] = []
    t = span
    while t <= sim.now and len(negatives) < settings.policy.max_negatives:
        negatives.append(
            LabeledIncident(f"HS-H{len(negatives) + 1:03d}", store.window(t - span + 1, t + 1), IncidentLabel.HEALTHY)
        )
        t += span
    logger.info("Healthy history: %d baselines, %d snapshots over %.1fh", len(baselines), len(negatives), sim.now / MS_PER_HOUR)
    return HealthyHistory(baselines, history, negatives)


@dataclass
class RunSummary:
    out_dir: Path
    incidents: int
    automated: int
    t_end_ms: int
    report: Optional[KpiReport] = None
    rules_learned: List[str] = field(default_factory=list)


class ScenarioRunner:
    """Runs one scenario into one artifact directory; the seed fixes every byte it writes."""

    def __init__(self, scenario: Scenario, out_dir: str, overwrite: bool = False):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.scenario = scenario
        self.out_dir = Path(out_dir)
        self.overwrite = overwrite

    def _prepare(self) -> None:
        if self.out_dir.exists() and any(self.out_dir.iterdir()):
            if not self.overwrite:
                raise ConfigError(f"产物目录 {self.out_dir} 非空; 使用 --overwrite 覆盖。")
            shutil.rmtree(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def run(self) -> RunSummary:
        scenario = self.scenario
        settings = scenario.settings
        self._prepare()
        self.logger.info("Running %s (seed %d) for %.1f days", scenario.name, scenario.seed, scenario.duration_days)

        history = healthy_history(scenario.sim, settings)
        store = TelemetryStore(scenario.sim.collectors, settings.telemetry.max_samples_per_series)
        sim = ClusterSimulator(scenario.sim, sink=store.ingest)

        def clock() -> int:
            return sim.now

        audit = AuditLogger(str(self.out_dir / "logs"), clock=clock)
        kb_dir = self.out_dir / "kb" if "kb" in scenario.outputs else None
        kb = KnowledgeBase(str(kb_dir) if kb_dir else None, audit=AuditLogger(str(kb_dir), clock=clock) if kb_dir else audit)
        for raw in scenario.rules:
            kb.commit(Rule.from_dict(raw))

        remediation = settings.remediation
        tickets = FileJournalTicketClient(
            str(self.out_dir / "tickets.jsonl"),
            deallocate_after_h=remediation.deallocate_after_h,
            migrate_after_h=remediation.migrate_after_h,
        )
        controller = LifecycleController(sim, tickets, remediation, audit, defer=True)
        controller.start_polling()

        for spec in scenario.sim.job_templates:
            sim.submit_job(spec)
        for fault in scenario.faults:
            sim.inject_fault(fault.node_id, fault.model, at=fault.at_ms)

        guardian = FleetGuardian(
            sim,
            store,
            controller,
            kb,
            history.baselines,
            history.history,
            settings,
            policy=scenario.policy_at,
            audit=audit,
            artifact_dir=str(self.out_dir) if "diagnoses" in scenario.outputs else None,
            negatives=history.negatives,
        )

        end = int(round(scenario.duration_days * MS_PER_DAY))
        tick = sim.tick_ms
        while sim.now < end:
            boundary = min(end, (sim.now // tick + 1) * tick)
            sim.advance((boundary - sim.now) / 1000.0)
            guardian.step()

        return self._write(sim, guardian, kb)

    def _write(self, sim: ClusterSimulator, guardian: FleetGuardian, kb: KnowledgeBase) -> RunSummary:
        scenario = self.scenario
        records = [e.to_record() for e in sim.events]
        if "events" in scenario.outputs:
            sim.write_event_log(str(self.out_dir / "events.jsonl"))
        report: Optional[KpiReport] = None
        if "kpis" in scenario.outputs:
            report = compute_kpis(
                records, sorted(sim.nodes), sim.now, scenario.settings.kpi.rounding, scenario.calendar_start
            )
            report.write_tables(str(self.out_dir / "kpi"))
        if "corpus" in scenario.outputs and guardian.positives:
            write_corpus(str(self.out_dir / "corpus"), guardian.positives)

        learned = [rid for rid in kb.rule_ids() if kb.get(rid).provenance == "generated"]
        manifest = {
            "scenario": scenario.name,
            "seed": scenario.seed,
            "nodes": sorted(sim.nodes),
            "t_end_ms": sim.now,
            "calendar_start": scenario.calendar_start,
            "rounding": scenario.settings.kpi.rounding,
            "policy_schedule": [{"day": d, "policy": p} for d, p in scenario.policy_schedule],
            "incidents": [i.to_record() for i in guardian.incidents],
            "rules_learned": learned,
            "out_of_service": guardian.controller.out_of_service(),
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        automated = sum(1 for i in guardian.incidents if i.automated)
        self.logger.info(
            "%s finished: %d incidents (%d automated), %d learned rules",
            scenario.name, len(guardian.incidents), automated, len(learned),
        )
        return RunSummary(self.out_dir, len(guardian.incidents), automated, sim.now, report, learned)


def run_scenario(path: str, out_dir: str, overwrite: bool = False) -> RunSummary:
    return ScenarioRunner(Scenario.load(path), out_dir, overwrite).run()


def scenario_nodes(manifest_path: str) -> Tuple[List[str], int, str, str]:
    """(nodes, t_end_ms, calendar_start, rounding) recorded next to an event log."""
    data = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    return list(data["nodes"]), int(data["t_end_ms"]), str(data["calendar_start"]), str(data["rounding"])
