"""Cross-backend numerical validation of module traces (outputs, parameters, gradients)."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .models import LengthMismatch, NonFinite, NumericsError, SchemaMismatch

logger = logging.getLogger(__name__)

KINDS = ("outputs", "parameters", "gradients")
TRACE_MAGIC = b"FGTRACE1"


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity with exactly rounded sums.

    Two zero vectors are identical (1.0); a single zero vector is unrelated (0.0).
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise LengthMismatch(f"vectors differ in length: {x.size} vs {y.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise NonFinite("cosine needs finite entries")
    dot = math.fsum((x * y).tolist())
    nx = math.sqrt(math.fsum((x * x).tolist()))
    ny = math.sqrt(math.fsum((y * y).tolist()))
    if nx == 0.0 and ny == 0.0:
        return 1.0
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, dot / nx / ny)))


def flatten_tensors(tensors: Iterable[Tuple[str, np.ndarray]]) -> Tuple[np.ndarray, List[Dict[str, object]]]:
    """Row-major concatenation in the declared order; returns the vector and its layout."""
    parts = []
    layout: List[Dict[str, object]] = []
    offset = 0
    for name, tensor in tensors:
        arr = np.asarray(tensor, dtype=np.float64)
        parts.append(arr.ravel(order="C"))
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    vector = np.concatenate(parts) if parts else np.empty(0)
    return vector, layout


@dataclass
class ModuleTrace:
    module: str
    kind: str
    steps: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SchemaMismatch(f"unknown trace kind {self.kind!r}")
        self.steps = [np.asarray(s, dtype=np.float64).ravel() for s in self.steps]
        lengths = {s.size for s in self.steps}
        if len(lengths) > 1:
            raise LengthMismatch(f"{self.module}/{self.kind}: vector length changes across steps {sorted(lengths)}")
        for step in self.steps:
            if not np.isfinite(step).all():
                raise NonFinite(f"{self.module}/{self.kind} contains non-finite entries")

    @property
    def length(self) -> int:
        return self.steps[0].size if self.steps else 0


class TraceSet:
    """Traces of one backend keyed by (module, kind), keeping module declaration order."""

    def __init__(self, traces: Iterable[ModuleTrace] = ()):
        self.traces: Dict[Tuple[str, str], ModuleTrace] = {}
        self.modules: List[str] = []
        for trace in traces:
            self.add(trace)

    def add(self, trace: ModuleTrace) -> None:
        key = (trace.module, trace.kind)
        if key in self.traces:
            raise SchemaMismatch(f"duplicate trace {trace.module}/{trace.kind}")
        if trace.module not in self.modules:
            self.modules.append(trace.module)
        self.traces[key] = trace

    def keys(self) -> List[Tuple[str, str]]:
        order = {m: i for i, m in enumerate(self.modules)}
        return sorted(self.traces, key=lambda k: (order[k[0]], KINDS.index(k[1])))

    def __getitem__(self, key: Tuple[str, str]) -> ModuleTrace:
        return self.traces[key]

    def __len__(self) -> int:
        return len(self.traces)


@dataclass(frozen=True)
class ComparisonEntry:
    module: str
    kind: str
    min_similarity: float
    per_step: Tuple[float, ...]
    threshold: float

    @property
    def abnormal(self) -> bool:
        return self.min_similarity < self.threshold


@dataclass
class ComparisonReport:
    entries: List[ComparisonEntry]
    threshold: float
    steps: int

    @property
    def passed(self) -> bool:
        return not any(e.abnormal for e in self.entries)

    @property
    def flagged(self) -> List[ComparisonEntry]:
        return [e for e in self.entries if e.abnormal]

    def get(self, module: str, kind: str) -> Optional[ComparisonEntry]:
        for entry in self.entries:
            if entry.module == module and entry.kind == kind:
                return entry
        return None

    def write_csv(self, path: str) -> None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["module", "kind", "min_cosine", "threshold", "abnormal"])
            for e in self.entries:
                writer.writerow([e.module, e.kind, f"{e.min_similarity:.6f}", e.threshold, int(e.abnormal)])

    def to_record(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "threshold": self.threshold,
            "steps": self.steps,
            "entries": [
                {
                    "module": e.module,
                    "kind": e.kind,
                    "min_cosine": e.min_similarity,
                    "threshold": e.threshold,
                    "abnormal": e.abnormal,
                }
                for e in self.entries
            ],
        }


def compare_traces(
    reference: TraceSet,
    candidate: TraceSet,
    steps: int = 10,
    threshold: float = 0.99,
    overrides: Optional[Mapping[str, float]] = None,
) -> ComparisonReport:
    """Minimum cosine over the first ``steps`` optimizer steps for every (module, kind).

    ``overrides`` maps a module name to its own threshold. Flagged entries come first.
    """
    if set(reference.traces) != set(candidate.traces):
        missing = sorted(set(reference.traces) ^ set(candidate.traces))
        raise SchemaMismatch(f"trace sets differ in module/kind entries: {missing}")
    overrides = dict(overrides or {})
    entries: List[ComparisonEntry] = []
    for key in reference.keys():
        ref, cand = reference[key], candidate[key]
        if ref.length != cand.length:
            raise SchemaMismatch(f"{key[0]}/{key[1]}: length {ref.length} vs {cand.length}")
        count = min(steps, len(ref.steps), len(cand.steps))
        if count == 0:
            raise SchemaMismatch(f"{key[0]}/{key[1]} has no steps")
        if len(ref.steps) != len(cand.steps):
            logger.warning("%s/%s step counts differ; comparing the first %d", key[0], key[1], count)
        sims = tuple(cosine(ref.steps[i], cand.steps[i]) for i in range(count))
        limit = float(overrides.get(key[0], threshold))
        entries.append(ComparisonEntry(key[0], key[1], min(sims), sims, limit))
    flagged = [e for e in entries if e.abnormal]
    clean = [e for e in entries if not e.abnormal]
    report = ComparisonReport(flagged + clean, threshold, steps)
    logger.info("Compared %d traces, %d flagged", len(entries), len(flagged))
    return report


def synthetic_pair(target: float, length: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Two random vectors whose cosine similarity is ``target``."""
    if not -1.0 <= target <= 1.0:
        raise NumericsError(f"target cosine {target} outside [-1, 1]")
    if length < 2:
        raise NumericsError("synthetic pairs need at least two dimensions")
    a = rng.standard_normal(length)
    noise = rng.standard_normal(length)
    a_hat = a / np.linalg.norm(a)
    ortho = noise - np.dot(noise, a_hat) * a_hat
    ortho /= np.linalg.norm(ortho)
    scale = float(np.linalg.norm(a)) * float(rng.uniform(0.5, 2.0))
    b = scale * (target * a_hat + math.sqrt(max(0.0, 1.0 - target * target)) * ortho)
    return a, b


# Minimum similarities observed when porting a MoE model between software stacks.
MODULE_TABLE: Dict[str, Dict[str, Optional[float]]] = {
    "Attention": {"outputs": 0.9998, "parameters": 0.1626, "gradients": 0.5815},
    "Bias-Dropout-Add": {"outputs": 0.9309, "parameters": None, "gradients": 0.9000},
    "Embedding": {"outputs": 0.8995, "parameters": 0.9993, "gradients": 0.9142},
    "MoE (EP=8)": {"outputs": 0.9998, "parameters": 0.9994, "gradients": 0.9484},
}


def table7_fixture(steps: int = 10, length: int = 64, seed: int = 0) -> Tuple[TraceSet, TraceSet]:
    """Reference/candidate trace sets whose per-entry minimum reproduces ``MODULE_TABLE``.

    The minimum is hit at the last step; earlier steps sit between it and 1.
    """
    rng = np.random.default_rng(seed)
    reference, candidate = TraceSet(), TraceSet()
    for module, row in MODULE_TABLE.items():
        for kind in KINDS:
            floor = row.get(kind)
            if floor is None:
                continue
            ref_steps, cand_steps = [], []
            for step in range(steps):
                target = floor if step == steps - 1 else floor + (1.0 - floor) * (0.5 + 0.4 * step / max(1, steps))
                a, b = synthetic_pair(target, length, rng)
                ref_steps.append(a)
                cand_steps.append(b)
            reference.add(ModuleTrace(module, kind, ref_steps))
            candidate.add(ModuleTrace(module, kind, cand_steps))
    return reference, candidate


def write_trace_file(path: str, traces: TraceSet, backend: str = "") -> None:
    """Binary container: magic, uint32-LE header length, JSON header, little-endian float32 payload."""
    entries = []
    payload = bytearray()
    for module, kind in traces.keys():
        trace = traces[(module, kind)]
        for step, vector in enumerate(trace.steps, start=1):
            data = np.asarray(vector, dtype="<f4").tobytes()
            entries.append({"module": module, "kind": kind, "step": step, "length": int(vector.size), "offset": len(payload)})
            payload.extend(data)
    header = json.dumps({"backend": backend, "modules": traces.modules, "entries": entries}, sort_keys=True).encode("utf-8")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def read_trace_file(path: str) -> TraceSet:
    raw = Path(path).read_bytes()
    if raw[: len(TRACE_MAGIC)] != TRACE_MAGIC:
        raise SchemaMismatch(f"{path} is not a trace file")
    start = len(TRACE_MAGIC)
    if len(raw) < start + 4:
        raise SchemaMismatch(f"{path} is truncated")
    (header_len,) = struct.unpack("<I", raw[start : start + 4])
    body = start + 4 + header_len
    try:
        header = json.loads(raw[start + 4 : body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"{path} has a corrupt header: {exc}") from exc
    grouped: Dict[Tuple[str, str], List[Tuple[int, np.ndarray]]] = {}
    for entry in header.get("entries", []):
        try:
            module, kind, step = str(entry["module"]), entry["kind"], int(entry["step"])
            offset = body + int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"{path} has a malformed entry {entry!r}") from exc
        if kind not in KINDS:
            raise SchemaMismatch(f"{path}: unknown trace kind {kind!r}")
        end = offset + 4 * length
        if end > len(raw):
            raise SchemaMismatch(f"{path}: payload for {module}/{kind} is truncated")
        vector = np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64)
        grouped.setdefault((module, kind), []).append((step, vector))
    traces = TraceSet()
    order = {m: i for i, m in enumerate(header.get("modules", []))}
    for module, kind in sorted(grouped, key=lambda k: (order.get(k[0], len(order)), k[0], KINDS.index(k[1]))):
        steps = [v for _, v in sorted(grouped[(module, kind)], key=lambda sv: sv[0])]
        traces.add(ModuleTrace(module, kind, steps))
    return traces
