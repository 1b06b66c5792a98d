"""Offline signature learning: propose rule drafts, repair them against the schema, review on a hold-out set."""

from __future__ import annotations

import difflib
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import KbSettings
from .knowledge_base import (
    FeatureScore,
    KnowledgeBase,
    LabeledIncident,
    RuleScore,
    contrastive_feature_selection,
    evaluate_rules,
    tally,
)
from .models import (
    ComponentClass,
    KnowledgeBaseError,
    RuleAction,
    RuleRuntimeError,
    RuleSyntaxError,
    ValidationCorpusDegenerate,
)
from .rules import MAX_TERMS, Agg, AggTerm, CompiledRule, CountTerm, Selector, Term, compile_rule, derive_log_pattern, Rule
from .telemetry import TelemetrySchema

logger = logging.getLogger(__name__)

BEAM_WIDTH = 6
MAX_REPAIR_ATTEMPTS = 25


@dataclass
class TraceEntry:
    iteration: int
    rule_text: Optional[str]
    precision: float
    recall: float
    accepted: bool
    diff: str = ""
    misclassified: List[str] = field(default_factory=list)
    note: str = ""

    def to_record(self) -> Dict[str, object]:
        return {
            "iteration": self.iteration,
            "rule": self.rule_text,
            "precision": self.precision,
            "recall": self.recall,
            "accepted": self.accepted,
            "diff": self.diff,
            "misclassified": self.misclassified,
            "note": self.note,
        }


@dataclass
class RuleCandidate:
    rule: Optional[Rule]
    accepted: bool
    trace: List[TraceEntry] = field(default_factory=list)
    validation: Optional[RuleScore] = None

    def to_record(self) -> Dict[str, object]:
        return {
            "accepted": self.accepted,
            "rule": self.rule.to_dict() if self.rule else None,
            "validation": self.validation.to_dict() if self.validation else None,
            "trace": [t.to_record() for t in self.trace],
        }


def holdout_split(corpus: Sequence[LabeledIncident], seed: int = 0) -> Tuple[List[LabeledIncident], List[LabeledIncident]]:
    """Seeded 50/50 split stratified by label; a label with one incident lands in both halves."""
    rng = np.random.default_rng(seed)
    by_label: Dict[str, List[LabeledIncident]] = {}
    for incident in sorted(corpus, key=lambda i: i.incident_id):
        by_label.setdefault(incident.label.value, []).append(incident)
    train: List[LabeledIncident] = []
    holdout: List[LabeledIncident] = []
    for label in sorted(by_label):
        members = by_label[label]
        if len(members) == 1:
            train.extend(members)
            holdout.extend(members)
            continue
        order = rng.permutation(len(members))
        half = len(members) // 2
        train.extend(members[i] for i in order[:half])
        holdout.extend(members[i] for i in order[half:])
    return train, holdout


def review(
    score: RuleScore,
    best: Optional[RuleScore],
    floor: float,
    holdout_positives: int,
) -> Tuple[bool, str]:
    """Accept a draft's hold-out score, or name why it is turned down."""
    if score.errors:
        return False, "runtime errors"
    if best is not None and (score.precision < best.precision or score.recall < best.recall):
        return False, "regression"
    # precision is vacuously 1.0 for a rule that never fires
    if holdout_positives and score.tp == 0:
        return False, "no hold-out fault caught"
    if score.precision < floor:
        return False, "below precision floor"
    return True, "accepted"


@dataclass(frozen=True)
class _TermSpec:
    feature: str
    kind: str  # metric | log
    cmp: str
    threshold: float
    pattern: str = ""

    def to_term(self, window_s: float) -> Term:
        if self.kind == "log":
            return CountTerm(self.feature, self.pattern, window_s, self.cmp, self.threshold)
        return AggTerm(Agg("mean", self.feature, window_s), self.cmp, self.threshold)

    def holds(self, value: float) -> bool:
        if self.cmp == ">=":
            return value >= self.threshold
        if self.cmp == ">":
            return value > self.threshold
        if self.cmp == "<":
            return value < self.threshold
        return value <= self.threshold


class _FeatureTable:
    """Per-incident, per-node feature values computed with rule semantics."""

    def __init__(self, incidents: Sequence[LabeledIncident], window_s: float):
        self.window_s = window_s
        self.incidents = list(incidents)
        self.values: Dict[Tuple[str, str], Dict[str, Dict[str, float]]] = {}

    def add(self, feature: str, kind: str, pattern: str = "") -> Dict[str, Dict[str, float]]:
        key = (feature, pattern if kind == "log" else "")
        if key in self.values:
            return self.values[key]
        table: Dict[str, Dict[str, float]] = {}
        for incident in self.incidents:
            per_node: Dict[str, float] = {}
            for node_id in incident.window.nodes:
                if kind == "log":
                    term = CountTerm(feature, pattern, self.window_s, ">=", 0)
                    per_node[node_id] = term.value(incident.window, node_id)
                else:
                    value = Agg("mean", feature, self.window_s).value(incident.window, node_id)
                    if value is not None:
                        per_node[node_id] = value
            table[incident.incident_id] = per_node
        self.values[key] = table
        return table

    def lookup(self, spec: _TermSpec) -> Dict[str, Dict[str, float]]:
        return self.values[(spec.feature, spec.pattern if spec.kind == "log" else "")]


def _selector_for(specs: Sequence[_TermSpec], window_s: float) -> Selector:
    for spec in specs:
        if spec.kind == "metric":
            kind = "argmin" if spec.cmp in ("<", "<=") else "argmax"
            return Selector(kind, Agg("mean", spec.feature, window_s))
    return Selector("matching")


def _score_specs(specs: Tuple[_TermSpec, ...], table: _FeatureTable, incidents: Sequence[LabeledIncident]) -> RuleScore:
    score = RuleScore()
    selector = _selector_for(specs, table.window_s)
    sel_values = None
    if selector.agg is not None:
        sel_values = table.add(selector.agg.metric, "metric")
    lookups = [table.lookup(s) for s in specs]
    for incident in incidents:
        matching = []
        for node_id in incident.window.nodes:
            ok = True
            for spec, lookup in zip(specs, lookups):
                value = lookup[incident.incident_id].get(node_id)
                if value is None or not spec.holds(value):
                    ok = False
                    break
            if ok:
                matching.append(node_id)
        implicated = matching
        if sel_values is not None and matching:
            ranked = [(sel_values[incident.incident_id][n], n) for n in matching if n in sel_values[incident.incident_id]]
            if ranked:
                if selector.kind == "argmax":
                    implicated = [min(ranked, key=lambda r: (-r[0], r[1]))[1]]
                else:
                    implicated = [min(ranked, key=lambda r: (r[0], r[1]))[1]]
            else:
                implicated = []
        tally(score, incident, implicated, bool(implicated))
    return score


def _truth_and_rest(values: Dict[str, Dict[str, float]], incidents: Sequence[LabeledIncident]) -> Tuple[np.ndarray, np.ndarray]:
    truth, rest = [], []
    for incident in incidents:
        for node_id, value in values[incident.incident_id].items():
            if incident.positive and node_id == incident.node_id:
                truth.append(value)
            else:
                rest.append(value)
    return np.asarray(truth, dtype=float), np.asarray(rest, dtype=float)


def _term_options(
    feature: FeatureScore,
    focal: LabeledIncident,
    table: _FeatureTable,
    train: Sequence[LabeledIncident],
    quantiles: Sequence[float],
) -> List[_TermSpec]:
    if feature.kind == "log":
        lines = focal.window.lines(feature.name, focal.node_id) or [
            line for node_id in focal.window.nodes for line in focal.window.lines(feature.name, node_id)
        ]
        if not lines:
            return []
        pattern = derive_log_pattern(Counter(lines).most_common(1)[0][0])
        values = table.add(feature.name, "log", pattern)
        truth, _ = _truth_and_rest(values, train)
        thresholds = {1.0}
        positive = truth[truth >= 1]
        if positive.size:
            thresholds.update(float(np.floor(q)) for q in np.percentile(positive, quantiles) if q >= 1)
        return [_TermSpec(feature.name, "log", ">=", t, pattern) for t in sorted(thresholds)]

    values = table.add(feature.name, "metric")
    truth, rest = _truth_and_rest(values, train)
    if truth.size == 0 or rest.size == 0:
        return []
    cmp = "<" if truth.mean() < rest.mean() else ">"
    pooled = np.concatenate([truth, rest])
    thresholds = {float(q) for q in np.percentile(pooled, quantiles)}
    if cmp == "<" and truth.max() < rest.min():
        thresholds.add(float((truth.max() + rest.min()) / 2.0))
    if cmp == ">" and truth.min() > rest.max():
        thresholds.add(float((truth.min() + rest.max()) / 2.0))
    return [_TermSpec(feature.name, "metric", cmp, round(t, 6)) for t in sorted(thresholds)]


def _rank_key(item: Tuple[Tuple[_TermSpec, ...], RuleScore], floor: float):
    specs, score = item
    return (
        -(score.precision >= floor),
        -score.recall,
        -score.precision,
        len(specs),
        tuple((s.feature, s.cmp, s.threshold) for s in specs),
    )


def _compile(specs: Sequence[_TermSpec], window_s: float) -> CompiledRule:
    terms = tuple(s.to_term(window_s) for s in specs)
    return CompiledRule(terms, _selector_for(specs, window_s))


def repair(compiled: CompiledRule, schema: TelemetrySchema) -> Optional[CompiledRule]:
    """Drop terms outside the schema, then execute on schema-shaped sample data; None if unusable."""
    terms = []
    for term in compiled.terms:
        name = term.channel if isinstance(term, CountTerm) else term.agg.metric
        known = schema.log_channels if isinstance(term, CountTerm) else schema.metrics
        if name in known:
            terms.append(term)
    selector = compiled.selector
    if selector.agg is not None and selector.agg.metric not in schema.metrics:
        selector = Selector("matching")
    if not terms:
        return None
    fixed = CompiledRule(tuple(terms), selector)
    try:
        fixed = compile_rule(fixed.text, schema)
        fixed.evaluate(schema.sample_window())
    except (RuleSyntaxError, RuleRuntimeError) as exc:
        logger.info("Discarding draft %r: %s", fixed.text, exc)
        return None
    return fixed


def _diff(previous: Optional[str], current: str) -> str:
    before = (previous or "").replace(" and ", "\n and ").splitlines()
    after = current.replace(" and ", "\n and ").splitlines()
    return "\n".join(difflib.unified_diff(before, after, "best", "candidate", lineterm=""))


def generate_rule(
    incident: LabeledIncident,
    contrast: Sequence[LabeledIncident],
    corpus: Sequence[LabeledIncident],
    schema: TelemetrySchema,
    budget: Optional[int] = None,
    *,
    settings: Optional[KbSettings] = None,
    kb: Optional[KnowledgeBase] = None,
    rule_id: Optional[str] = None,
    fault_class: Optional[ComponentClass] = None,
    action: RuleAction = RuleAction.TICKET,
    previous: Optional[Rule] = None,
    window_s: Optional[float] = None,
    seed: Optional[int] = None,
) -> RuleCandidate:
    """Search rule drafts over the top contrastive features; commit the first one that passes review."""
    settings = settings or KbSettings()
    budget = settings.budget if budget is None else budget
    labels = {i.positive for i in corpus}
    if labels != {True, False}:
        raise ValidationCorpusDegenerate("validation corpus needs hardware-fault and other incidents")
    if not incident.positive or not incident.node_id:
        raise KnowledgeBaseError("rule generation starts from a hardware-fault incident with a known node")
    window_s = window_s or incident.window.span_s
    floor = settings.precision_floor
    train, holdout = holdout_split(corpus, settings.holdout_seed if seed is None else seed)
    holdout_positives = sum(1 for i in holdout if i.positive)

    seen = set()
    anomalous = [i for i in [incident, *train] if i.positive and not (i.incident_id in seen or seen.add(i.incident_id))]
    normal = [i for i in [*contrast, *train] if not i.positive and not (i.incident_id in seen or seen.add(i.incident_id))]
    if not normal:
        normal = [i for i in holdout if not i.positive]
    features = contrastive_feature_selection(anomalous, normal, settings.top_features)
    logger.info("Top features for %s: %s", incident.incident_id, ", ".join(f"{f.name}={f.d:.3g}" for f in features))

    search_set = list({i.incident_id: i for i in [incident, *train, *contrast]}.values())
    table = _FeatureTable(search_set + [i for i in holdout if i.incident_id not in {s.incident_id for s in search_set}], window_s)
    options: Dict[str, List[_TermSpec]] = {
        f.name: _term_options(f, incident, table, search_set, settings.quantiles) for f in features
    }
    options = {name: opts for name, opts in options.items() if opts}

    rule_id = rule_id or f"gen-{(fault_class.value if fault_class else 'unknown')}-{incident.incident_id}"
    best_text: Optional[str] = None
    best_score: Optional[RuleScore] = None
    if previous is not None:
        best_text = previous.text
        best_score = evaluate_rules([previous], holdout).per_rule[previous.rule_id]

    trace: List[TraceEntry] = []
    level: List[Tuple[Tuple[_TermSpec, ...], RuleScore]] = []
    for iteration in range(1, budget + 1):
        if iteration == 1:
            drafts = [(spec,) for opts in options.values() for spec in opts]
        elif iteration <= MAX_TERMS:
            drafts = []
            seen_drafts = set()
            for specs, _ in level[:BEAM_WIDTH]:
                used = {s.feature for s in specs}
                for name, opts in options.items():
                    if name in used:
                        continue
                    for spec in opts:
                        combo = tuple(sorted(specs + (spec,), key=lambda s: (s.feature, s.cmp, s.threshold)))
                        if combo not in seen_drafts:
                            seen_drafts.add(combo)
                            drafts.append(combo)
        else:
            drafts = [specs for specs, _ in level]
        if not drafts:
            trace.append(TraceEntry(iteration, None, 0.0, 0.0, False, note="no drafts left"))
            break
        level = sorted(((d, _score_specs(d, table, search_set)) for d in drafts), key=lambda item: _rank_key(item, floor))

        proposal: Optional[CompiledRule] = None
        for specs, _ in level[:MAX_REPAIR_ATTEMPTS]:
            proposal = repair(_compile(specs, window_s), schema)
            if proposal is not None and proposal.text != best_text:
                break
            proposal = None
        if proposal is None:
            trace.append(TraceEntry(iteration, None, 0.0, 0.0, False, note="no executable draft"))
            continue

        draft = Rule(
            rule_id=rule_id,
            name=rule_id,
            predicate=proposal.predicate_text,
            implicates=proposal.selector.render(),
            action=action,
            provenance="generated",
            fault_class=fault_class,
            description=f"learned from {incident.incident_id}",
        )
        score = evaluate_rules([draft], holdout).per_rule[rule_id]
        accepted, note = review(score, best_score, floor, holdout_positives)
        trace.append(
            TraceEntry(
                iteration,
                proposal.text,
                score.precision,
                score.recall,
                accepted,
                diff=_diff(best_text, proposal.text),
                misclassified=sorted(set(score.misclassified)),
                note=note,
            )
        )
        logger.info("Iteration %d: %s precision=%.3f recall=%.3f accepted=%s", iteration, proposal.text, score.precision, score.recall, accepted)
        if accepted:
            if kb is not None:
                kb.commit(draft)
            return RuleCandidate(draft, True, trace, score)
    return RuleCandidate(None, False, trace, None)
