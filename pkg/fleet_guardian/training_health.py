"""Training-health analytics: layer-norm valley detection and straggler/noise analysis."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .detection import EPS, MAD_SCALE, median_mad
from .models import DegenerateProfile, HealthError, TooFewRanks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormProfile:
    iteration: int
    norms: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "norms", tuple(float(n) for n in self.norms))
        if len(self.norms) < 3:
            raise DegenerateProfile(f"a norm profile needs at least 3 layers, got {len(self.norms)}")
        if any(not np.isfinite(n) or n <= 0 for n in self.norms):
            raise DegenerateProfile(f"profile at iteration {self.iteration} has non-positive norms")


@dataclass(frozen=True)
class ValleyReport:
    iteration: int
    depth: float
    layer: Optional[int]  # 1-based, None when there is no valley
    flagged: bool


def valley_score(profile: NormProfile, threshold: float = 0.25) -> ValleyReport:
    """Deepest dip of an interior layer below both its shallower and deeper maxima, over the mean norm."""
    n = np.asarray(profile.norms, dtype=float)
    left = np.maximum.accumulate(n)
    right = np.maximum.accumulate(n[::-1])[::-1]
    # interior j compares against max over i < j and max over k > j
    walls = np.minimum(left[:-2], right[2:])
    dips = np.clip(walls - n[1:-1], 0.0, None)
    best = int(np.argmax(dips))
    depth = float(dips[best] / n.mean())
    layer = best + 2 if dips[best] > 0 else None
    return ValleyReport(profile.iteration, depth, layer, depth > threshold)


def monitor_collapse(
    profiles: Iterable[NormProfile],
    persistence: int = 3,
    threshold: float = 0.25,
) -> Optional[int]:
    """Iteration of the first alarm: ``persistence`` consecutive flagged profiles."""
    streak = 0
    for profile in profiles:
        report = valley_score(profile, threshold)
        streak = streak + 1 if report.flagged else 0
        if streak >= persistence:
            logger.warning("Norm valley persisted %d profiles; alarm at iteration %d", streak, profile.iteration)
            return profile.iteration
    return None


def collapse_profile(layers: int, iteration: int, onset: int, rng: np.random.Generator, growth: float = 0.15) -> NormProfile:
    """Synthetic profile that grows with depth and develops a mid-depth valley after ``onset``."""
    depth_axis = np.linspace(1.0, 2.0, layers)
    norms = depth_axis * (1.0 + 0.02 * rng.standard_normal(layers))
    if iteration >= onset:
        severity = min(0.9, 0.45 + growth * (iteration - onset) / max(onset, 1))
        centre = (layers - 1) / 2.0
        width = max(1.0, layers / 6.0)
        bump = np.exp(-((np.arange(layers) - centre) ** 2) / (2 * width**2))
        norms = norms * (1.0 - severity * bump)
    return NormProfile(iteration, tuple(np.abs(norms) + EPS))


@dataclass(frozen=True)
class StragglerSuspect:
    rank: int
    pattern: str  # persistent | periodic
    evidence: Dict[str, float] = field(default_factory=dict)


def _autocorrelation(series: np.ndarray, max_lag: int) -> np.ndarray:
    x = series - series.mean()
    denom = float(np.dot(x, x))
    if denom <= 0:
        return np.zeros(max_lag + 1)
    return np.array([float(np.dot(x[: x.size - lag], x[lag:])) / denom for lag in range(max_lag + 1)])


def straggler_detect(
    durations: Sequence[Sequence[float]],
    threshold: float = 0.05,
    window: Optional[int] = None,
    min_spikes: int = 3,
    acf_floor: float = 0.5,
) -> List[StragglerSuspect]:
    """Find ranks that are persistently slow or carry a periodic spike train.

    ``durations`` is ranks x steps; ``window`` keeps only the last steps.
    """
    data = np.asarray(durations, dtype=float)
    if data.ndim != 2:
        raise HealthError("rank timings must be a ranks x steps matrix")
    if data.shape[0] < 3:
        raise TooFewRanks(f"straggler detection needs at least 3 ranks, got {data.shape[0]}")
    if window:
        data = data[:, -int(window):]
    if data.shape[1] == 0 or (data <= 0).any():
        raise HealthError("rank timings must be positive and non-empty")

    medians = np.median(data, axis=1)
    suspects: List[StragglerSuspect] = []
    step_median = np.median(data, axis=0)
    for rank in range(data.shape[0]):
        peers = np.delete(medians, rank)
        ratio = float(medians[rank] / np.median(peers) - 1.0)
        if ratio > threshold:
            suspects.append(StragglerSuspect(rank, "persistent", {"median_slowdown": ratio}))
            continue

        residual = data[rank] - step_median
        centre, mad = median_mad(residual)
        cutoff = 3.0 * (MAD_SCALE * mad + EPS)
        excess = residual - centre
        spikes = int(np.count_nonzero(excess > cutoff))
        if spikes < min_spikes or residual.size < 6:
            continue
        # Only the excursions carry the period; the noise floor swamps small pauses.
        spike_train = np.where(excess > cutoff, excess, 0.0)
        acf = _autocorrelation(spike_train, residual.size // 2)
        # Harmonics score nearly as high as the period itself; keep the fundamental.
        tail = acf[2:]
        lag = int(np.flatnonzero(tail >= 0.8 * tail.max())[0] + 2)
        if acf[lag] > acf_floor:
            suspects.append(
                StragglerSuspect(rank, "periodic", {"lag": float(lag), "autocorrelation": float(acf[lag]), "spikes": float(spikes)})
            )
    return suspects


@dataclass(frozen=True)
class ThroughputStats:
    min_over_peak: float
    avg_over_peak: float
    std: float
    peak: float

    def to_record(self) -> Dict[str, float]:
        return {
            "min_over_peak": self.min_over_peak,
            "avg_over_peak": self.avg_over_peak,
            "std": self.std,
            "peak": self.peak,
        }


def throughput_stats(series: Sequence[float], peak: Optional[float] = None) -> ThroughputStats:
    """Min and mean as fractions of peak, plus the population standard deviation."""
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        raise HealthError("throughput series is empty")
    peak = float(arr.max()) if peak is None else float(peak)
    if peak <= 0:
        raise HealthError("peak throughput must be positive")
    return ThroughputStats(float(arr.min() / peak), float(arr.mean() / peak), float(arr.std(ddof=0)), peak)


def simulate_rank_timings(
    ranks: int,
    steps: int,
    rng: np.random.Generator,
    base_s: float = 1.0,
    noise: float = 0.002,
    gc_rank: Optional[int] = None,
    gc_period: int = 50,
    gc_pause_s: float = 0.3,
    page_cache_rank: Optional[int] = None,
    page_cache_prob: float = 0.7,
    page_cache_max_s: float = 0.3,
) -> np.ndarray:
    """Per-rank step durations with optional noise archetypes.

    The GC archetype pauses one rank every ``gc_period`` steps; the page-cache
    archetype randomly interrupts one rank on most steps.
    """
    data = base_s * (1.0 + noise * rng.standard_normal((ranks, steps)))
    if gc_rank is not None:
        data[gc_rank, gc_period - 1 :: gc_period] += gc_pause_s
    if page_cache_rank is not None:
        hits = rng.random(steps) < page_cache_prob
        data[page_cache_rank] += hits * rng.uniform(0.0, page_cache_max_s, steps)
    return np.abs(data)


def step_throughput(durations: Sequence[Sequence[float]], tokens_per_step: float) -> np.ndarray:
    """Synchronous training runs at the pace of the slowest rank each step."""
    data = np.asarray(durations, dtype=float)
    return tokens_per_step / data.max(axis=0)


def load_norm_profiles(path: str) -> List[NormProfile]:
    """CSV with columns iteration,layer,value (layer is 1-based)."""
    rows: Dict[int, Dict[int, float]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for record in csv.DictReader(fh):
            try:
                iteration, layer, value = int(record["iteration"]), int(record["layer"]), float(record["value"])
            except (KeyError, TypeError, ValueError) as exc:
                raise HealthError(f"{path}: bad norm row {record}: {exc}") from exc
            rows.setdefault(iteration, {})[layer] = value
    return [NormProfile(it, tuple(v for _, v in sorted(layers.items()))) for it, layers in sorted(rows.items())]


def load_rank_timings(path: str) -> np.ndarray:
    """CSV with columns rank,step,duration; returns a ranks x steps matrix."""
    cells: Dict[Tuple[int, int], float] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for record in csv.DictReader(fh):
            try:
                cells[(int(record["rank"]), int(record["step"]))] = float(record["duration"])
            except (KeyError, TypeError, ValueError) as exc:
                raise HealthError(f"{path}: bad timing row {record}: {exc}") from exc
    if not cells:
        raise HealthError(f"{path} has no timing rows")
    ranks = sorted({r for r, _ in cells})
    steps = sorted({s for _, s in cells})
    if len(cells) != len(ranks) * len(steps):
        raise HealthError(f"{path}: timings are not rectangular")
    return np.array([[cells[(r, s)] for s in steps] for r in ranks])
