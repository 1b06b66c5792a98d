"""Pruned parallelism tuning over (TP, CP, EP, PP, VPP, MBS) with a calibrated additive cost model."""

from __future__ import annotations

import csv
import itertools
import logging
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import yaml

from .models import ConfigError, NoFeasibleConfig, NonDivisible, TunerError

logger = logging.getLogger(__name__)

DIMENSIONS = ("tp", "cp", "ep", "pp", "vpp", "mbs")
GIB = 1024**3


def derive_dp(n: int, tp: int, cp: int, pp: int, gbs_samples: int, mbs: int) -> Tuple[int, int]:
    """Data parallelism and gradient-accumulation steps implied by the other dimensions."""
    for name, value in (("N", n), ("TP", tp), ("CP", cp), ("PP", pp), ("GBS", gbs_samples), ("MBS", mbs)):
        if int(value) <= 0:
            raise NonDivisible(f"{name} must be positive, got {value}")
    model = tp * cp * pp
    if n % model:
        raise NonDivisible(f"{n} accelerators do not split into TP*CP*PP = {model}")
    dp = n // model
    if gbs_samples % (dp * mbs):
        raise NonDivisible(f"GBS {gbs_samples} is not a multiple of DP*MBS = {dp * mbs}")
    return dp, gbs_samples // (dp * mbs)


def tokens_to_samples(gbs_tokens: int, seq_len: int) -> int:
    if seq_len <= 0 or gbs_tokens % seq_len:
        raise NonDivisible(f"GBS of {gbs_tokens} tokens is not a whole number of {seq_len}-token samples")
    return gbs_tokens // seq_len


@dataclass(frozen=True)
class ParallelismConfig:
    tp: int
    cp: int
    ep: int
    pp: int
    vpp: int
    mbs: int
    dp: int
    accum: int
    stage_layers: Optional[Tuple[int, ...]] = None

    @property
    def label(self) -> str:
        base = f"TP{self.tp}-CP{self.cp}-EP{self.ep}-PP{self.pp}"
        return base + (f"-VPP{self.vpp}" if self.vpp > 1 else "")

    @property
    def full_label(self) -> str:
        return f"{self.label}-MBS{self.mbs}"

    def value(self, name: str) -> int:
        return int(getattr(self, name))

    @classmethod
    def build(
        cls,
        n: int,
        gbs_samples: int,
        layers: int,
        tp: int = 1,
        cp: int = 1,
        ep: int = 1,
        pp: int = 1,
        vpp: int = 1,
        mbs: int = 1,
        stage_layers: Optional[Sequence[int]] = None,
    ) -> "ParallelismConfig":
        dp, accum = derive_dp(n, tp, cp, pp, gbs_samples, mbs)
        if dp % ep:
            raise NonDivisible(f"EP {ep} does not divide DP {dp}")
        if stage_layers is not None:
            stage_layers = tuple(int(x) for x in stage_layers)
            if len(stage_layers) != pp or sum(stage_layers) != layers:
                raise NonDivisible(f"stage layers {stage_layers} do not cover {layers} layers in {pp} stages")
            stages = stage_layers
        else:
            if layers % pp:
                raise NonDivisible(f"{layers} layers do not split into {pp} stages")
            stages = (layers // pp,) * pp
        if any(s % vpp for s in stages):
            raise NonDivisible(f"VPP {vpp} does not divide the layers of every stage {sorted(set(stages))}")
        return cls(tp, cp, ep, pp, vpp, mbs, dp, accum, tuple(stage_layers) if stage_layers else None)


@dataclass
class ModelDescription:
    layers: int
    seq_len: int
    dense_bytes_per_layer: float
    expert_bytes_per_layer: float
    embedding_bytes: float = 0.0


@dataclass
class MemoryModel:
    capacity_bytes: float
    optimizer_multiplier: float = 6.0
    activation_bytes_per_sample_layer: float = 0.0
    recompute_factor: float = 1.0

    def __post_init__(self) -> None:
        for name in ("capacity_bytes", "optimizer_multiplier", "activation_bytes_per_sample_layer", "recompute_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"memory model field {name} must be non-negative")


@dataclass
class CostModel:
    """Per-operator timings measured at small scale, in seconds.

    Communication tables are keyed by subgroup size; a size larger than any
    measured one uses the largest measured entry.
    """

    compute_per_sample_layer: float
    launch_overhead_per_layer: float = 0.0
    tp_comm: Dict[int, float] = field(default_factory=dict)
    cp_comm: Dict[int, float] = field(default_factory=dict)
    ep_comm: Dict[int, float] = field(default_factory=dict)
    pp_p2p: float = 0.0
    dp_allreduce_per_gib: Dict[int, float] = field(default_factory=dict)

    @staticmethod
    def lookup(table: Mapping[int, float], size: int) -> float:
        if size <= 1 or not table:
            return 0.0
        keys = sorted(k for k in table if k <= size)
        if not keys:
            return float(table[min(table)])
        return float(table[keys[-1]])

    def without_communication(self) -> "CostModel":
        return CostModel(self.compute_per_sample_layer, self.launch_overhead_per_layer)


@dataclass
class Calibration:
    model: ModelDescription
    memory: MemoryModel
    cost: CostModel
    accelerators: int = 16


def load_calibration(path: str) -> Calibration:
    try:
        with Path(path).open("r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read calibration {path}: {exc}") from exc
    return calibration_from_dict(data)


def calibration_from_dict(data: Mapping[str, Any]) -> Calibration:
    try:
        model = data["model"]
        memory = data["memory"]
        timings = data["timings"]
        description = ModelDescription(
            layers=int(model["layers"]),
            seq_len=int(model.get("seq_len", 4096)),
            dense_bytes_per_layer=float(model["dense_bytes_per_layer"]),
            expert_bytes_per_layer=float(model.get("expert_bytes_per_layer", 0.0)),
            embedding_bytes=float(model.get("embedding_bytes", 0.0)),
        )
        memory_model = MemoryModel(
            capacity_bytes=float(memory["capacity_gib"]) * GIB,
            optimizer_multiplier=float(memory.get("optimizer_multiplier", 6.0)),
            activation_bytes_per_sample_layer=float(memory.get("activation_bytes_per_sample_layer", 0.0)),
            recompute_factor=float(memory.get("recompute_factor", 1.0)),
        )

        def table(key: str) -> Dict[int, float]:
            return {int(k): float(v) for k, v in (timings.get(key) or {}).items()}

        cost = CostModel(
            compute_per_sample_layer=float(timings["compute_per_sample_layer"]),
            launch_overhead_per_layer=float(timings.get("launch_overhead_per_layer", 0.0)),
            tp_comm=table("tp_comm"),
            cp_comm=table("cp_comm"),
            ep_comm=table("ep_comm"),
            pp_p2p=float(timings.get("pp_p2p", 0.0)),
            dp_allreduce_per_gib=table("dp_allreduce_per_gib"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"calibration is missing or has a bad field: {exc}") from exc
    return Calibration(description, memory_model, cost, int(data.get("accelerators", 16)))


@dataclass(frozen=True)
class Estimate:
    step_time: float
    memory_bytes: float
    feasible: bool
    bubble: float

    def time_per_sample(self, config: ParallelismConfig) -> float:
        return self.step_time / (config.dp * config.mbs * config.accum)


def bubble_fraction(pp: int, vpp: int, microbatches: int) -> float:
    return (pp - 1) / (pp * vpp * microbatches)


def estimate(config: ParallelismConfig, cost: CostModel, memory: MemoryModel, model: ModelDescription) -> Estimate:
    """1F1B step time with interleaving bubble, plus per-accelerator memory and its feasibility."""
    stages = config.stage_layers or (model.layers // config.pp,) * config.pp
    slowest = max(stages)
    first = stages[0]

    per_layer = (
        config.mbs * cost.compute_per_sample_layer / (config.tp * config.cp)
        + config.mbs * cost.lookup(cost.tp_comm, config.tp)
        + config.mbs * cost.lookup(cost.cp_comm, config.cp)
        + config.mbs * cost.lookup(cost.ep_comm, config.ep)
        + cost.launch_overhead_per_layer
    )
    microbatch = slowest * per_layer
    if config.pp > 1:
        microbatch += cost.pp_p2p * config.vpp
    bubble = bubble_fraction(config.pp, config.vpp, config.accum)
    pipeline = config.accum * microbatch * (1.0 + bubble)

    param_bytes = first * (
        model.dense_bytes_per_layer / config.tp + model.expert_bytes_per_layer / (config.ep * config.tp)
    ) + model.embedding_bytes / config.tp
    allreduce = cost.lookup(cost.dp_allreduce_per_gib, config.dp) * param_bytes / GIB
    step_time = pipeline + allreduce

    in_flight = min(config.pp, config.accum)
    activations = (
        memory.activation_bytes_per_sample_layer
        * config.mbs
        * first
        * in_flight
        * memory.recompute_factor
        / (config.tp * config.cp)
    )
    total = param_bytes * (1.0 + memory.optimizer_multiplier) + activations
    return Estimate(step_time, total, total <= memory.capacity_bytes, bubble)


def enumerate_space(
    options: Mapping[str, Sequence[int]],
    n: int,
    gbs_samples: int,
    layers: int,
) -> List[ParallelismConfig]:
    """Every combination of the option lists that divides cleanly; order follows the option lists."""
    lists = [list(options.get(dim, [1])) for dim in DIMENSIONS]
    space: List[ParallelismConfig] = []
    for values in itertools.product(*lists):
        kwargs = dict(zip(DIMENSIONS, values))
        try:
            space.append(ParallelismConfig.build(n, gbs_samples, layers, **kwargs))
        except NonDivisible:
            continue
    logger.info("Enumerated %d configurations for %d accelerators", len(space), n)
    return space


_OPS: Dict[str, Callable[[int, int], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    ">=": operator.ge,
    "<=": operator.le,
    ">": operator.gt,
    "<": operator.lt,
}
_CONSTRAINT = re.compile(r"^\s*(tp|cp|ep|pp|vpp|mbs|dp|accum)\s*(==|!=|>=|<=|>|<)\s*(\d+)\s*$")

Constraint = Callable[[ParallelismConfig], bool]


@dataclass(frozen=True)
class FieldConstraint:
    text: str
    name: str
    op: str
    bound: int

    def __call__(self, config: ParallelismConfig) -> bool:
        return _OPS[self.op](config.value(self.name), self.bound)


def parse_constraint(text: str) -> FieldConstraint:
    match = _CONSTRAINT.match(text)
    if not match:
        raise TunerError(f"cannot parse constraint {text!r}; expected e.g. 'tp == 1'")
    name, op, bound = match.groups()
    return FieldConstraint(text.strip(), name, op, int(bound))


@dataclass
class MemoryConstraint:
    memory: MemoryModel
    cost: CostModel
    model: ModelDescription

    def __call__(self, config: ParallelismConfig) -> bool:
        return estimate(config, self.cost, self.memory, self.model).feasible


def load_constraints(path: str) -> Tuple[List[FieldConstraint], Dict[str, List[int]]]:
    """Constraint file: ``constraints`` (list of expressions) and optional ``options`` per dimension."""
    try:
        with Path(path).open("r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read constraints {path}: {exc}") from exc
    constraints = [parse_constraint(str(c)) for c in data.get("constraints") or []]
    options = {str(k): [int(v) for v in vals] for k, vals in (data.get("options") or {}).items()}
    unknown = set(options) - set(DIMENSIONS)
    if unknown:
        raise ConfigError(f"unknown option dimensions {sorted(unknown)}")
    return constraints, options


def prune(space: Iterable[ParallelismConfig], constraints: Sequence[Constraint] = ()) -> List[ParallelismConfig]:
    return [config for config in space if all(check(config) for check in constraints)]


@dataclass(frozen=True)
class RankedConfig:
    config: ParallelismConfig
    estimate: Estimate


def _rank_key(item: RankedConfig) -> Tuple[float, int, int, str]:
    return (item.estimate.step_time, item.config.pp, -item.config.mbs, item.config.full_label)


def search(
    space: Sequence[ParallelismConfig],
    calibration: Calibration,
    top_k: int = 5,
) -> List[RankedConfig]:
    """Feasible configurations by ascending step time; ties prefer fewer stages, then larger MBS."""
    ranked = []
    for config in space:
        est = estimate(config, calibration.cost, calibration.memory, calibration.model)
        if est.feasible:
            ranked.append(RankedConfig(config, est))
    if not ranked:
        raise NoFeasibleConfig(f"none of {len(space)} configurations fits in memory")
    ranked.sort(key=_rank_key)
    return ranked[: max(1, top_k)]


def write_ranking_csv(path: str, ranking: Sequence[RankedConfig]) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "config", "tp", "cp", "ep", "pp", "vpp", "mbs", "dp", "accum", "step_time_s", "memory_gib", "bubble"])
        for i, item in enumerate(ranking, start=1):
            c, e = item.config, item.estimate
            writer.writerow(
                [i, c.full_label, c.tp, c.cp, c.ep, c.pp, c.vpp, c.mbs, c.dp, c.accum,
                 f"{e.step_time:.6f}", f"{e.memory_bytes / GIB:.3f}", f"{e.bubble:.6f}"]
            )
