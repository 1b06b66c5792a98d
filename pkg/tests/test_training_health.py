from __future__ import annotations

import numpy as np
import pytest

from fleet_guardian.models import DegenerateProfile, HealthError, TooFewRanks
from fleet_guardian.training_health import (
    NormProfile,
    collapse_profile,
    load_norm_profiles,
    load_rank_timings,
    monitor_collapse,
    simulate_rank_timings,
    step_throughput,
    straggler_detect,
    throughput_stats,
    valley_score,
)


def test_valley_depth_and_layer():
    report = valley_score(NormProfile(10, (3, 1, 1, 4, 5)))
    assert report.depth == pytest.approx(2 / 2.8)
    assert report.layer == 2
    assert report.flagged

    flat = valley_score(NormProfile(11, (1, 2, 3, 4)))
    assert flat.depth == 0.0
    assert flat.layer is None
    assert not flat.flagged


def test_degenerate_profiles():
    with pytest.raises(DegenerateProfile):
        NormProfile(0, (1.0, 2.0))
    with pytest.raises(DegenerateProfile):
        NormProfile(0, (1.0, 0.0, 2.0))


def test_monitor_alarms_after_persistent_valley():
    rng = np.random.default_rng(0)
    profiles = [collapse_profile(24, it, onset=550, rng=rng, growth=1.0) for it in range(0, 1000, 100)]
    assert not any(valley_score(p).flagged for p in profiles[:6])
    assert all(valley_score(p).flagged for p in profiles[6:])
    assert monitor_collapse(profiles, persistence=3) == 800
    assert monitor_collapse(profiles[:8], persistence=3) is None


def test_persistent_straggler():
    rng = np.random.default_rng(1)
    data = simulate_rank_timings(8, 120, rng)
    data[5] *= 1.2
    suspects = straggler_detect(data)
    assert [(s.rank, s.pattern) for s in suspects] == [(5, "persistent")]
    assert suspects[0].evidence["median_slowdown"] == pytest.approx(0.2, abs=0.01)


def test_periodic_gc_pauses_are_found():
    rng = np.random.default_rng(2)
    data = simulate_rank_timings(8, 200, rng, gc_rank=3, gc_period=50)
    suspects = straggler_detect(data)
    assert [(s.rank, s.pattern) for s in suspects] == [(3, "periodic")]
    assert suspects[0].evidence["lag"] == 50.0
    assert suspects[0].evidence["spikes"] >= 4.0


def test_window_and_input_checks():
    rng = np.random.default_rng(3)
    data = simulate_rank_timings(4, 100, rng)
    data[0, :50] *= 1.5
    assert straggler_detect(data, window=40) == []
    with pytest.raises(TooFewRanks):
        straggler_detect(data[:2])
    with pytest.raises(HealthError):
        straggler_detect([1.0, 2.0, 3.0])
    bad = data.copy()
    bad[1, 3] = 0.0
    with pytest.raises(HealthError):
        straggler_detect(bad)


def test_slowest_rank_sets_the_pace():
    durations = [[1.0, 1.0], [1.0, 2.0], [0.5, 1.0]]
    assert step_throughput(durations, 100.0).tolist() == [100.0, 50.0]


def test_throughput_stats():
    stats = throughput_stats([50.0, 100.0, 75.0], peak=100.0)
    assert stats.min_over_peak == 0.5
    assert stats.avg_over_peak == 0.75
    assert stats.std == pytest.approx(np.sqrt(1250 / 3))
    assert throughput_stats([2.0, 4.0]).peak == 4.0
    with pytest.raises(HealthError):
        throughput_stats([])
    with pytest.raises(HealthError):
        throughput_stats([1.0], peak=0)


def test_csv_loaders(tmp_path):
    norms = tmp_path / "norms.csv"
    norms.write_text(
        "iteration,layer,value\n" + "".join(f"{it},{layer},{v}\n" for it in (2, 1) for layer, v in zip((3, 1, 2), (5, 3, 1))),
        encoding="utf-8",
    )
    profiles = load_norm_profiles(str(norms))
    assert [p.iteration for p in profiles] == [1, 2]
    assert profiles[0].norms == (3.0, 1.0, 5.0)

    timings = tmp_path / "timings.csv"
    timings.write_text("rank,step,duration\n0,0,1.0\n0,1,1.1\n1,0,0.9\n1,1,1.0\n", encoding="utf-8")
    assert load_rank_timings(str(timings)).tolist() == [[1.0, 1.1], [0.9, 1.0]]

    timings.write_text("rank,step,duration\n0,0,1.0\n1,1,1.0\n", encoding="utf-8")
    with pytest.raises(HealthError):
        load_rank_timings(str(timings))
    norms.write_text("iteration,layer,value\nx,1,2\n", encoding="utf-8")
    with pytest.raises(HealthError):
        load_norm_profiles(str(norms))


@pytest.mark.slow
def test_small_gc_pauses_are_found_at_their_period():
    # pauses of 10 ms sit only a few noise sigmas above the other ranks
    found = 0
    for seed in range(100):
        data = simulate_rank_timings(8, 1000, np.random.default_rng(seed), gc_rank=3, gc_period=50, gc_pause_s=0.010)
        suspects = {s.rank: s for s in straggler_detect(data)}
        hit = suspects.get(3)
        if hit is not None and hit.pattern == "periodic" and hit.evidence["lag"] == 50.0:
            found += 1
    assert found >= 95


def test_noise_alone_is_not_periodic():
    for seed in range(20):
        data = simulate_rank_timings(8, 1000, np.random.default_rng(seed))
        assert straggler_detect(data) == []


def _brute_force_depth(norms):
    best = 0.0
    for j in range(1, len(norms) - 1):
        wall = min(max(norms[:j]), max(norms[j + 1 :]))
        best = max(best, wall - norms[j])
    return best / (sum(norms) / len(norms))


def test_increasing_profiles_are_never_flagged():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        layers = int(rng.integers(3, 40))
        norms = np.cumsum(rng.uniform(0.01, 1.0, layers))
        report = valley_score(NormProfile(0, norms))
        assert report.depth == 0.0
        assert not report.flagged


@pytest.mark.parametrize("seed", range(5))
def test_valley_depth_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        norms = rng.uniform(0.1, 2.0, int(rng.integers(3, 30))).tolist()
        report = valley_score(NormProfile(0, norms))
        assert report.depth == pytest.approx(_brute_force_depth(norms), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_page_cache_rank_is_persistent_and_drives_throughput_noise(seed):
    rng = np.random.default_rng(seed)
    data = simulate_rank_timings(8, 500, rng, page_cache_rank=6)
    suspects = straggler_detect(data)
    assert [(s.rank, s.pattern) for s in suspects] == [(6, "persistent")]

    noisy = throughput_stats(step_throughput(data, 4096.0))
    quiet = throughput_stats(step_throughput(np.delete(data, 6, axis=0), 4096.0))
    assert noisy.std >= 5 * quiet.std


@pytest.mark.parametrize("seed", range(10))
def test_straggler_ranks_follow_a_permutation(seed):
    rng = np.random.default_rng(seed)
    data = simulate_rank_timings(8, 300, rng, gc_rank=2, gc_period=30)
    data[5] *= 1.15
    perm = rng.permutation(8)
    before = {(s.rank, s.pattern): s.evidence for s in straggler_detect(data)}
    after = {(s.rank, s.pattern): s.evidence for s in straggler_detect(data[perm])}
    # row i of the permuted matrix is original rank perm[i]
    remapped = {(int(perm[rank]), pattern): evidence for (rank, pattern), evidence in after.items()}
    assert set(remapped) == set(before) == {(2, "periodic"), (5, "persistent")}
    for key, evidence in before.items():
        assert remapped[key] == pytest.approx(evidence)
