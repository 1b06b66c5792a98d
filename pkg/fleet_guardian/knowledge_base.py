"""Versioned failure-signature knowledge base, labeled incident corpus and rule evaluation."""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .audit_logger import AuditLogger
from .detection import EPS, spatial_scores
from .models import (
    EmptySet,
    IncidentLabel,
    NoContrastAvailable,
    ParseError,
    RuleRuntimeError,
    SchemaError,
    UnknownRule,
)
from .rules import Rule
from .simulator import KPI_METRIC
from .telemetry import TelemetryWindow, read_samples_csv, write_samples_csv

logger = logging.getLogger(__name__)

KPI_SUMMARY_KEYS = ("kpi_mean", "kpi_min", "kpi_std")
_RULE_FILE = re.compile(r"^(?P<rule_id>.+)\.v(?P<version>\d+)\.yaml$")


@dataclass
class LabeledIncident:
    incident_id: str
    window: TelemetryWindow
    label: IncidentLabel
    node_id: Optional[str] = None
    job_id: Optional[str] = None
    kpi_profile: Optional[Dict[str, float]] = None
    notes: str = ""

    def __post_init__(self) -> None:
        self.label = IncidentLabel(self.label)

    @property
    def positive(self) -> bool:
        return self.label == IncidentLabel.HARDWARE_FAULT

    def kpi_summary(self) -> Dict[str, float]:
        """KPI profile used for similarity search: mean, min and std of per-accelerator throughput."""
        if self.kpi_profile is not None:
            return {k: float(self.kpi_profile.get(k, 0.0)) for k in KPI_SUMMARY_KEYS}
        values = np.array(
            [s.value for s in self.window.samples if s.metric == KPI_METRIC and s.value is not None],
            dtype=float,
        )
        if values.size == 0:
            return {k: 0.0 for k in KPI_SUMMARY_KEYS}
        return {"kpi_mean": float(values.mean()), "kpi_min": float(values.min()), "kpi_std": float(values.std())}

    def write_bundle(self, root: str) -> Path:
        target = Path(root) / self.incident_id
        target.mkdir(parents=True, exist_ok=True)
        write_samples_csv(str(target / "telemetry.csv"), list(self.window.samples))
        manifest: Dict[str, Any] = {
            "incident_id": self.incident_id,
            "label": self.label.value,
            "node_id": self.node_id,
            "job_id": self.job_id,
            "t0_ms": self.window.t0,
            "t1_ms": self.window.t1,
        }
        if self.kpi_profile is not None:
            manifest["kpi_summary"] = dict(self.kpi_profile)
        if self.notes:
            manifest["notes"] = self.notes
        with (target / "manifest.yaml").open("w", encoding="utf-8") as fh:
            yaml.safe_dump(manifest, fh, sort_keys=True, allow_unicode=True)
        return target

    @classmethod
    def read_bundle(cls, path: str) -> "LabeledIncident":
        bundle = Path(path)
        manifest_path = bundle / "manifest.yaml"
        csv_path = bundle / "telemetry.csv"
        if not manifest_path.exists() or not csv_path.exists():
            raise SchemaError(f"{bundle}: a bundle needs manifest.yaml and telemetry.csv")
        try:
            manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8")) or {}
            samples = read_samples_csv(str(csv_path))
        except (yaml.YAMLError, ParseError, ValueError, KeyError) as exc:
            raise SchemaError(f"{bundle}: {exc}") from exc
        if not isinstance(manifest, dict) or "label" not in manifest:
            raise SchemaError(f"{bundle}: manifest needs a label")
        if not samples:
            raise SchemaError(f"{bundle}: telemetry.csv holds no samples")
        try:
            label = IncidentLabel(manifest["label"])
        except ValueError as exc:
            raise SchemaError(f"{bundle}: {exc}") from exc
        if label == IncidentLabel.HARDWARE_FAULT and not manifest.get("node_id"):
            raise SchemaError(f"{bundle}: a hardware-fault incident names its node")
        window = TelemetryWindow(samples, manifest.get("t0_ms"), manifest.get("t1_ms"))
        return cls(
            incident_id=str(manifest.get("incident_id") or bundle.name),
            window=window,
            label=label,
            node_id=manifest.get("node_id"),
            job_id=manifest.get("job_id"),
            kpi_profile=manifest.get("kpi_summary"),
            notes=str(manifest.get("notes", "")),
        )


def write_corpus(root: str, incidents: Iterable[LabeledIncident]) -> List[Path]:
    return [incident.write_bundle(root) for incident in incidents]


def read_corpus(root: str) -> List[LabeledIncident]:
    base = Path(root)
    if not base.is_dir():
        raise SchemaError(f"{root} is not a corpus directory")
    return [LabeledIncident.read_bundle(str(p)) for p in sorted(base.iterdir()) if p.is_dir()]


class KnowledgeBase:
    """Rule versions plus a quarantine list, optionally persisted as a directory."""

    def __init__(self, kb_dir: Optional[str] = None, audit: Optional[AuditLogger] = None):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.kb_dir = Path(kb_dir) if kb_dir else None
        self._versions: Dict[str, List[Rule]] = {}
        self._quarantine: Dict[str, str] = {}
        self._lock = threading.RLock()
        self.audit = audit
        if self.audit is None and self.kb_dir is not None:
            self.audit = AuditLogger(str(self.kb_dir))
        if self.kb_dir is not None and self.kb_dir.exists():
            self._load()

    def _load(self) -> None:
        for path in sorted(self.kb_dir.glob("*.yaml")):
            match = _RULE_FILE.match(path.name)
            if not match:
                continue
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            rule = Rule.from_dict(data)
            self._versions.setdefault(rule.rule_id, []).append(rule)
        for versions in self._versions.values():
            versions.sort(key=lambda r: r.version)
        quarantine = self.kb_dir / "quarantine.yaml"
        if quarantine.exists():
            self._quarantine = dict(yaml.safe_load(quarantine.read_text(encoding="utf-8")) or {})
        self.logger.info("Loaded %d rules from %s", len(self._versions), self.kb_dir)

    def _persist_quarantine(self) -> None:
        if self.kb_dir is None:
            return
        self.kb_dir.mkdir(parents=True, exist_ok=True)
        with (self.kb_dir / "quarantine.yaml").open("w", encoding="utf-8") as fh:
            yaml.safe_dump(dict(sorted(self._quarantine.items())), fh, sort_keys=True, allow_unicode=True)

    def commit(self, rule: Rule) -> Rule:
        """Store ``rule`` as the next version of its id; a commit lifts any quarantine."""
        with self._lock:
            versions = self._versions.setdefault(rule.rule_id, [])
            rule.version = (versions[-1].version if versions else 0) + 1
            versions.append(rule)
            if self.kb_dir is not None:
                self.kb_dir.mkdir(parents=True, exist_ok=True)
                path = self.kb_dir / f"{rule.rule_id}.v{rule.version}.yaml"
                with path.open("w", encoding="utf-8") as fh:
                    yaml.safe_dump(rule.to_dict(), fh, sort_keys=True, allow_unicode=True)
            if self._quarantine.pop(rule.rule_id, None) is not None:
                self._persist_quarantine()
            if self.audit:
                self.audit.log_rule_audit(rule.rule_id, "commit", f"v{rule.version} {rule.provenance}")
        self.logger.info("Committed %s v%d", rule.rule_id, rule.version)
        return rule

    def get(self, rule_id: str) -> Rule:
        with self._lock:
            versions = self._versions.get(rule_id)
            if not versions:
                raise UnknownRule(rule_id)
            return versions[-1]

    def versions(self, rule_id: str) -> List[Rule]:
        with self._lock:
            if rule_id not in self._versions:
                raise UnknownRule(rule_id)
            return list(self._versions[rule_id])

    def rule_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._versions)

    def __len__(self) -> int:
        return len(self._versions)

    def active_rules(self) -> List[Rule]:
        with self._lock:
            return [v[-1] for rid, v in sorted(self._versions.items()) if rid not in self._quarantine]

    def is_quarantined(self, rule_id: str) -> bool:
        return rule_id in self._quarantine

    def quarantine_rule(self, rule_id: str, reason: str) -> "KnowledgeBase":
        with self._lock:
            if rule_id not in self._versions:
                raise UnknownRule(rule_id)
            if rule_id in self._quarantine:
                return self
            self._quarantine[rule_id] = reason
            self._persist_quarantine()
            if self.audit:
                self.audit.log_rule_audit(rule_id, "quarantine", reason)
        self.logger.warning("Rule %s quarantined: %s", rule_id, reason)
        return self

    def reaccept(self, rule_id: str, corpus: Sequence[LabeledIncident], precision_floor: float = 0.95) -> bool:
        """Lift a quarantine once the rule runs cleanly and clears the precision floor on ``corpus``."""
        rule = self.get(rule_id)
        report = evaluate_rules([rule], corpus)
        score = report.per_rule[rule_id]
        if score.errors or score.precision < precision_floor:
            return False
        with self._lock:
            self._quarantine.pop(rule_id, None)
            self._persist_quarantine()
            if self.audit:
                self.audit.log_rule_audit(rule_id, "reaccept", f"precision {score.precision:.4f}")
        return True


@dataclass
class RuleScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    errors: int = 0
    misclassified: List[str] = field(default_factory=list)

    @property
    def precision(self) -> float:
        # a rule that never fires is vacuously precise
        fired = self.tp + self.fp
        return self.tp / fired if fired else 1.0

    @property
    def recall(self) -> float:
        positives = self.tp + self.fn
        return self.tp / positives if positives else 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "precision": self.precision, "recall": self.recall,
        }


@dataclass
class EvaluationReport:
    per_rule: Dict[str, RuleScore]
    confusion: RuleScore


def tally(score: RuleScore, incident: LabeledIncident, implicated: Iterable[str], fired: bool) -> None:
    correct = fired and incident.positive and incident.node_id in set(implicated)
    if correct:
        score.tp += 1
        return
    if fired:
        score.fp += 1
        score.misclassified.append(incident.incident_id)
    if incident.positive:
        score.fn += 1
        if not fired:
            score.misclassified.append(incident.incident_id)
    elif not fired:
        score.tn += 1


def evaluate_rules(rules: Any, corpus: Sequence[LabeledIncident]) -> EvaluationReport:
    """Per-rule and union confusion counts; a firing counts only if it names the true node."""
    rule_list: List[Rule] = rules.active_rules() if isinstance(rules, KnowledgeBase) else list(rules)
    per_rule = {rule.rule_id: RuleScore() for rule in rule_list}
    union = RuleScore()
    for incident in corpus:
        union_nodes: set = set()
        union_fired = False
        for rule in rule_list:
            try:
                hits = rule.evaluate(incident.window)
            except RuleRuntimeError:
                per_rule[rule.rule_id].errors += 1
                hits = []
            implicated = [node_id for node_id, _ in hits]
            tally(per_rule[rule.rule_id], incident, implicated, bool(hits))
            union_nodes.update(implicated)
            union_fired = union_fired or bool(hits)
        tally(union, incident, union_nodes, union_fired)
    return EvaluationReport(per_rule, union)


@dataclass(frozen=True)
class FeatureScore:
    name: str
    kind: str  # metric | log
    d: float


def incident_feature(incident: LabeledIncident, name: str, kind: str) -> float:
    """Per-incident summary of one feature: strongest node deviation, or most log lines on one node."""
    window = incident.window
    if kind == "log":
        _, counts = window.log_counts(name)
        return float(counts.sum(axis=0).max()) if counts.size else 0.0
    node_ids = tuple(n for n in window.nodes if window.values(name, n).size)
    if len(node_ids) < 3:
        return 0.0
    means = np.array([[window.values(name, n).mean() for n in node_ids]])
    return float(max(spatial_scores(node_ids, means).values()))


def _features(incidents: Iterable[LabeledIncident]) -> List[Tuple[str, str]]:
    metrics, channels = set(), set()
    for incident in incidents:
        metrics.update(incident.window.metrics)
        channels.update(incident.window.log_channels)
    return sorted((m, "metric") for m in metrics) + sorted((c, "log") for c in channels)


def _pooled_sigma(a: np.ndarray, b: np.ndarray) -> float:
    dof = a.size + b.size - 2
    if dof > 0:
        pooled = ((a.size - 1) * (a.var(ddof=1) if a.size > 1 else 0.0)
                  + (b.size - 1) * (b.var(ddof=1) if b.size > 1 else 0.0)) / dof
    else:
        pooled = float(np.concatenate([a, b]).var())
    return max(float(np.sqrt(pooled)), EPS)


def contrastive_feature_selection(
    anomalous: Sequence[LabeledIncident],
    normal: Sequence[LabeledIncident],
    top_k: int = 4,
) -> List[FeatureScore]:
    """Rank features by |mean_a - mean_n| / pooled sigma of their per-incident summaries."""
    if not anomalous or not normal:
        raise EmptySet("contrastive selection needs both incident sets")
    scores: List[FeatureScore] = []
    for name, kind in _features(list(anomalous) + list(normal)):
        a = np.array([incident_feature(i, name, kind) for i in anomalous], dtype=float)
        n = np.array([incident_feature(i, name, kind) for i in normal], dtype=float)
        d = abs(float(a.mean()) - float(n.mean())) / _pooled_sigma(a, n)
        scores.append(FeatureScore(name, kind, d))
    scores.sort(key=lambda s: (-s.d, s.name))
    return scores[:top_k]


def contextual_data_selection(
    incident: LabeledIncident,
    history: Sequence[LabeledIncident],
    top_k: int = 3,
) -> List[LabeledIncident]:
    """Nearest differently-labeled incidents by min-max normalised KPI profile distance."""
    if not history:
        raise EmptySet("contextual selection needs a corpus")
    others = [h for h in history if h.label != incident.label and h.incident_id != incident.incident_id]
    if not others:
        raise NoContrastAvailable(f"no incident with a label other than {incident.label.value}")
    profiles = np.array(
        [[p[k] for k in KPI_SUMMARY_KEYS] for p in [incident.kpi_summary()] + [o.kpi_summary() for o in others]],
        dtype=float,
    )
    lo = profiles.min(axis=0)
    span = profiles.max(axis=0) - lo
    span[span == 0] = 1.0
    normed = (profiles - lo) / span
    distances = np.linalg.norm(normed[1:] - normed[0], axis=1)
    order = sorted(range(len(others)), key=lambda i: (distances[i], others[i].incident_id))
    return [others[i] for i in order[:top_k]]
