"""Failure signature rules: a small closed DSL compiled into per-node predicates.

    when TERM (and TERM)* implicate (matching | argmax AGG | argmin AGG)

    TERM := AGG CMP number | count(channel, "pattern", window) CMP number
    AGG  := op(metric, window)          op in mean, max, min, count, rate

Windows are seconds counted back from the end of the evaluated telemetry window.
"""

from __future__ import annotations

import math
import operator
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

from .models import ComponentClass, RuleAction, RuleRuntimeError, RuleSyntaxError
from .telemetry import TelemetrySchema, TelemetryWindow

AGG_OPS = ("mean", "max", "min", "count", "rate")
MAX_TERMS = 4
CMP_OPS: Dict[str, Callable[[float, float], bool]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
}

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<string>"(?:[^"\\]|\\.)*")
      | (?P<number>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
      | (?P<cmp>>=|<=|>|<)
      | (?P<punct>[(),])
      | (?P<name>[A-Za-z_][A-Za-z0-9_.\-:]*)
    )""",
    re.VERBOSE,
)


def _fmt(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class Agg:
    op: str
    metric: str
    window_s: float

    def render(self) -> str:
        return f"{self.op}({self.metric}, {_fmt(self.window_s)})"

    def value(self, window: TelemetryWindow, node_id: str) -> Optional[float]:
        since = window.t1 - int(round(self.window_s * 1000))
        times, values = window.points(self.metric, node_id, since)
        if values.size == 0:
            return None
        if self.op == "mean":
            return float(values.mean())
        if self.op == "max":
            return float(values.max())
        if self.op == "min":
            return float(values.min())
        if self.op == "count":
            return float(values.size)
        span_s = (times[-1] - times[0]) / 1000.0
        return float((values[-1] - values[0]) / span_s) if span_s > 0 else 0.0


@dataclass(frozen=True)
class AggTerm:
    agg: Agg
    cmp: str
    threshold: float

    @property
    def feature(self) -> str:
        return self.agg.metric

    def render(self) -> str:
        return f"{self.agg.render()} {self.cmp} {_fmt(self.threshold)}"

    def value(self, window: TelemetryWindow, node_id: str) -> Optional[float]:
        return self.agg.value(window, node_id)


@dataclass(frozen=True)
class CountTerm:
    channel: str
    pattern: str
    window_s: float
    cmp: str
    threshold: float

    @property
    def feature(self) -> str:
        return self.channel

    def render(self) -> str:
        escaped = self.pattern.replace("\\", "\\\\").replace('"', '\\"')
        return f'count({self.channel}, "{escaped}", {_fmt(self.window_s)}) {self.cmp} {_fmt(self.threshold)}'

    def value(self, window: TelemetryWindow, node_id: str) -> Optional[float]:
        since = window.t1 - int(round(self.window_s * 1000))
        return float(sum(1 for line in window.lines(self.channel, node_id, since) if self.pattern in line))


Term = Union[AggTerm, CountTerm]


@dataclass(frozen=True)
class Selector:
    kind: str  # matching | argmax | argmin
    agg: Optional[Agg] = None

    def render(self) -> str:
        return self.kind if self.agg is None else f"{self.kind} {self.agg.render()}"


@dataclass(frozen=True)
class CompiledRule:
    terms: Tuple[Term, ...]
    selector: Selector

    @property
    def predicate_text(self) -> str:
        return " and ".join(t.render() for t in self.terms)

    @property
    def text(self) -> str:
        return f"when {self.predicate_text} implicate {self.selector.render()}"

    def referenced(self) -> Tuple[FrozenSet[str], FrozenSet[str]]:
        """(numeric metrics, log channels) the rule reads."""
        metrics = {t.agg.metric for t in self.terms if isinstance(t, AggTerm)}
        if self.selector.agg is not None:
            metrics.add(self.selector.agg.metric)
        channels = {t.channel for t in self.terms if isinstance(t, CountTerm)}
        return frozenset(metrics), frozenset(channels)

    def check_schema(self, schema: TelemetrySchema) -> None:
        metrics, channels = self.referenced()
        unknown = sorted((metrics - schema.metrics) | (channels - schema.log_channels))
        if unknown:
            raise RuleSyntaxError(f"rule reads series outside the schema: {', '.join(unknown)}")

    def evaluate(self, window: TelemetryWindow, nodes: Optional[Sequence[str]] = None, rule_id: str = "") -> List[Tuple[str, Dict[str, float]]]:
        """Implicated nodes with per-term evidence; empty when the predicate holds nowhere."""
        wanted = None if nodes is None else set(nodes)
        candidates = [n for n in window.nodes if wanted is None or n in wanted]
        matching: List[Tuple[str, Dict[str, float]]] = []
        for node_id in candidates:
            evidence: Dict[str, float] = {}
            holds = True
            for term in self.terms:
                value = term.value(window, node_id)
                if value is None:
                    holds = False
                    break
                if not math.isfinite(value):
                    raise RuleRuntimeError(rule_id, f"{term.render()} is {value} on {node_id}")
                evidence[term.render()] = value
                if not CMP_OPS[term.cmp](value, term.threshold):
                    holds = False
                    break
            if holds:
                matching.append((node_id, evidence))
        if not matching or self.selector.kind == "matching":
            return matching
        ranked: List[Tuple[float, str, Dict[str, float]]] = []
        for node_id, evidence in matching:
            value = self.selector.agg.value(window, node_id)
            if value is None:
                continue
            if not math.isfinite(value):
                raise RuleRuntimeError(rule_id, f"{self.selector.render()} is {value} on {node_id}")
            ranked.append((value, node_id, evidence))
        if not ranked:
            return []
        if self.selector.kind == "argmax":
            best = min(ranked, key=lambda r: (-r[0], r[1]))
        else:
            best = min(ranked, key=lambda r: (r[0], r[1]))
        evidence = dict(best[2])
        evidence[self.selector.render()] = best[0]
        return [(best[1], evidence)]


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: List[Tuple[str, str]] = []
        pos = 0
        stripped = text.rstrip()
        while pos < len(stripped):
            m = _TOKEN.match(stripped, pos)
            if not m or m.end() == pos:
                raise RuleSyntaxError(f"unexpected input at {pos}: {stripped[pos:pos + 20]!r}")
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind)))
            pos = m.end()
        self.i = 0

    def peek(self) -> Tuple[str, str]:
        return self.tokens[self.i] if self.i < len(self.tokens) else ("eof", "")

    def take(self, kind: str, value: Optional[str] = None) -> str:
        tok_kind, tok_value = self.peek()
        if tok_kind != kind or (value is not None and tok_value != value):
            expected = value or kind
            raise RuleSyntaxError(f"expected {expected!r}, found {tok_value or 'end of rule'!r} in {self.text!r}")
        self.i += 1
        return tok_value

    def number(self) -> float:
        return float(self.take("number"))

    def agg(self, op: str) -> Agg:
        if op not in AGG_OPS:
            raise RuleSyntaxError(f"unknown aggregate {op!r}")
        self.take("punct", "(")
        metric = self.take("name")
        self.take("punct", ",")
        window_s = self.number()
        self.take("punct", ")")
        if window_s <= 0:
            raise RuleSyntaxError("aggregate window must be positive")
        return Agg(op, metric, window_s)

    def term(self) -> Term:
        op = self.take("name")
        if op == "count" and len(self.tokens) > self.i + 3 and self.tokens[self.i + 3][0] == "string":
            self.take("punct", "(")
            channel = self.take("name")
            self.take("punct", ",")
            raw = self.take("string")[1:-1]
            pattern = re.sub(r"\\(.)", r"\1", raw)
            self.take("punct", ",")
            window_s = self.number()
            self.take("punct", ")")
            cmp = self.take("cmp")
            if not pattern:
                raise RuleSyntaxError("log pattern must not be empty")
            return CountTerm(channel, pattern, window_s, cmp, self.number())
        agg = self.agg(op)
        cmp = self.take("cmp")
        return AggTerm(agg, cmp, self.number())

    def rule(self) -> CompiledRule:
        self.take("name", "when")
        terms = [self.term()]
        while self.peek() == ("name", "and"):
            self.take("name", "and")
            terms.append(self.term())
        if len(terms) > MAX_TERMS:
            raise RuleSyntaxError(f"a rule holds at most {MAX_TERMS} terms")
        self.take("name", "implicate")
        kind = self.take("name")
        if kind == "matching":
            selector = Selector("matching")
        elif kind in ("argmax", "argmin"):
            selector = Selector(kind, self.agg(self.take("name")))
        else:
            raise RuleSyntaxError(f"unknown implicate clause {kind!r}")
        if self.peek()[0] != "eof":
            raise RuleSyntaxError(f"trailing input {self.peek()[1]!r}")
        return CompiledRule(tuple(terms), selector)


def compile_rule(text: str, schema: Optional[TelemetrySchema] = None) -> CompiledRule:
    compiled = _Parser(text).rule()
    if schema is not None:
        compiled.check_schema(schema)
    return compiled


def derive_log_pattern(line: str) -> str:
    """Constant prefix of a log line: the tokens before the first one holding a digit."""
    prefix: List[str] = []
    for token in line.split():
        if any(ch.isdigit() for ch in token):
            break
        prefix.append(token)
    return " ".join(prefix) if prefix else line.strip()


@dataclass
class Rule:
    rule_id: str
    name: str
    predicate: str
    implicates: str
    severity: str = "high"
    action: RuleAction = RuleAction.TICKET
    provenance: str = "manual"  # manual | generated
    version: int = 0
    fault_class: Optional[ComponentClass] = None
    description: str = ""
    _compiled: Optional[CompiledRule] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.action = RuleAction(self.action)
        if self.fault_class is not None:
            self.fault_class = ComponentClass(self.fault_class)
        if self.provenance not in ("manual", "generated"):
            raise RuleSyntaxError(f"unknown provenance {self.provenance!r}")

    @property
    def text(self) -> str:
        return f"when {self.predicate} implicate {self.implicates}"

    @property
    def compiled(self) -> CompiledRule:
        if self._compiled is None:
            self._compiled = compile_rule(self.text)
        return self._compiled

    def evaluate(self, window: TelemetryWindow, nodes: Optional[Sequence[str]] = None) -> List[Tuple[str, Dict[str, float]]]:
        return self.compiled.evaluate(window, nodes, self.rule_id)

    @classmethod
    def from_text(cls, rule_id: str, text: str, **kwargs: Any) -> "Rule":
        compiled = compile_rule(text)
        return cls(rule_id=rule_id, name=kwargs.pop("name", rule_id), predicate=compiled.predicate_text,
                   implicates=compiled.selector.render(), **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "name": self.name,
            "version": self.version,
            "when": self.predicate,
            "implicate": self.implicates,
            "severity": self.severity,
            "action": self.action.value,
            "provenance": self.provenance,
            "fault_class": self.fault_class.value if self.fault_class else None,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Rule":
        try:
            rule = cls(
                rule_id=str(data["rule_id"]),
                name=str(data.get("name") or data["rule_id"]),
                predicate=str(data["when"]),
                implicates=str(data["implicate"]),
                severity=str(data.get("severity", "high")),
                action=data.get("action", RuleAction.TICKET.value),
                provenance=str(data.get("provenance", "manual")),
                version=int(data.get("version", 0)),
                fault_class=data.get("fault_class"),
                description=str(data.get("description", "")),
            )
        except (KeyError, ValueError) as exc:
            raise RuleSyntaxError(f"malformed rule document: {exc}") from exc
        _ = rule.compiled
        return rule
