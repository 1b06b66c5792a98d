from __future__ import annotations

import numpy as np
import pytest

from conftest import PROJECT_ROOT
from fleet_guardian.models import ConfigError, NoFeasibleConfig, NonDivisible, TunerError
from fleet_guardian.partuner import (
    MemoryModel,
    ParallelismConfig,
    bubble_fraction,
    calibration_from_dict,
    derive_dp,
    enumerate_space,
    estimate,
    load_calibration,
    load_constraints,
    parse_constraint,
    prune,
    search,
    tokens_to_samples,
    write_ranking_csv,
)

GRID = {"tp": [1, 2, 4], "cp": [1, 2], "ep": [1, 2, 4, 8], "pp": [1, 2, 4], "vpp": [1, 2], "mbs": [1, 2]}


def _calibration(capacity_gib=1.0):
    return calibration_from_dict(
        {
            "accelerators": 16,
            "model": {"layers": 8, "seq_len": 1024, "dense_bytes_per_layer": 1e6, "expert_bytes_per_layer": 4e6},
            "memory": {"capacity_gib": capacity_gib, "activation_bytes_per_sample_layer": 1e5},
            "timings": {
                "compute_per_sample_layer": 0.01,
                "launch_overhead_per_layer": 0.001,
                "tp_comm": {2: 0.002, 4: 0.003},
                "cp_comm": {2: 0.002},
                "ep_comm": {2: 0.001, 4: 0.002},
                "pp_p2p": 0.0005,
                "dp_allreduce_per_gib": {2: 0.1, 8: 0.2},
            },
        }
    )


def test_derive_dp():
    assert derive_dp(2048, 1, 1, 8, 512, 1) == (256, 2)
    assert derive_dp(16, 2, 1, 2, 64, 2) == (4, 8)
    with pytest.raises(NonDivisible):
        derive_dp(2048, 3, 1, 1, 512, 1)
    with pytest.raises(NonDivisible):
        derive_dp(16, 1, 1, 1, 24, 1)
    with pytest.raises(NonDivisible):
        derive_dp(16, 0, 1, 1, 16, 1)
    assert tokens_to_samples(64 * 4096, 4096) == 64
    with pytest.raises(NonDivisible):
        tokens_to_samples(1000, 4096)


def test_build_checks_ep_vpp_and_stage_layers():
    baseline = ParallelismConfig.build(2048, 512, 64, ep=8, pp=8)
    assert baseline.label == "TP1-CP1-EP8-PP8"
    assert baseline.dp * baseline.tp * baseline.cp * baseline.pp == 2048
    assert baseline.dp * baseline.mbs * baseline.accum == 512
    assert ParallelismConfig.build(16, 64, 8, pp=2, vpp=2).full_label == "TP1-CP1-EP1-PP2-VPP2-MBS1"

    with pytest.raises(NonDivisible):
        ParallelismConfig.build(16, 64, 8, tp=4, pp=2, ep=4)  # dp 2
    with pytest.raises(NonDivisible):
        ParallelismConfig.build(16, 64, 6, pp=2, vpp=2)
    with pytest.raises(NonDivisible):
        ParallelismConfig.build(16, 64, 8, pp=2, stage_layers=[3, 4])
    uneven = ParallelismConfig.build(16, 64, 8, pp=2, stage_layers=[3, 5])
    assert uneven.stage_layers == (3, 5)


def test_every_enumerated_config_divides_exactly():
    space = enumerate_space(GRID, 16, 64, 8)
    assert space
    for config in space:
        assert config.tp * config.cp * config.pp * config.dp == 16
        assert config.dp * config.mbs * config.accum == 64
        assert config.dp % config.ep == 0
        assert (8 // config.pp) % config.vpp == 0


def test_bubble_shrinks_with_virtual_stages():
    cal = _calibration()
    plain = estimate(ParallelismConfig.build(16, 64, 8, pp=2), cal.cost, cal.memory, cal.model)
    interleaved = estimate(ParallelismConfig.build(16, 64, 8, pp=2, vpp=2), cal.cost, cal.memory, cal.model)
    assert plain.bubble == bubble_fraction(2, 1, 8)
    assert interleaved.bubble < plain.bubble
    assert estimate(ParallelismConfig.build(16, 64, 8), cal.cost, cal.memory, cal.model).bubble == 0.0


def test_larger_micro_batches_amortize_launch_overhead():
    cal = _calibration()
    cost = cal.cost.without_communication()
    small = ParallelismConfig.build(16, 32, 8, pp=2, mbs=1)
    large = ParallelismConfig.build(16, 64, 8, pp=2, mbs=2)
    assert small.accum == large.accum
    t_small = estimate(small, cost, cal.memory, cal.model).time_per_sample(small)
    t_large = estimate(large, cost, cal.memory, cal.model).time_per_sample(large)
    assert t_large <= t_small


def test_memory_gate_ignores_speed():
    cal = _calibration()
    config = ParallelismConfig.build(16, 64, 8)
    assert estimate(config, cal.cost, cal.memory, cal.model).feasible
    tiny = MemoryModel(capacity_bytes=1.0)
    result = estimate(config, cal.cost, tiny, cal.model)
    assert not result.feasible
    assert result.step_time > 0
    with pytest.raises(ConfigError):
        MemoryModel(capacity_bytes=-1.0)


def test_prune_keeps_exactly_the_matching_configs():
    space = enumerate_space(GRID, 16, 64, 8)
    assert prune(space) == space
    constraints = [parse_constraint("tp == 1"), parse_constraint("ep == 8")]
    kept = prune(space, constraints)
    assert kept
    assert all(c.tp == 1 and c.ep == 8 for c in kept)
    assert kept == [c for c in space if c.tp == 1 and c.ep == 8]

    half = len(space) // 2
    assert prune(space[:half], constraints) + prune(space[half:], constraints) == kept


def test_constraint_parsing():
    assert parse_constraint(" mbs >= 2 ")(ParallelismConfig.build(16, 64, 8, mbs=2))
    assert not parse_constraint("dp < 16")(ParallelismConfig.build(16, 64, 8))
    for bad in ("tp = 1", "gpus == 8", "tp == one"):
        with pytest.raises(TunerError):
            parse_constraint(bad)


def test_search_matches_brute_force():
    cal = _calibration()
    space = enumerate_space(GRID, 16, 64, 8)
    assert len(space) <= 200
    ranking = search(space, cal, top_k=len(space))

    def key(config):
        est = estimate(config, cal.cost, cal.memory, cal.model)
        return (est.step_time, config.pp, -config.mbs, config.full_label)

    brute = sorted((c for c in space if estimate(c, cal.cost, cal.memory, cal.model).feasible), key=key)
    assert [r.config for r in ranking] == brute
    assert len(search(space, cal, top_k=3)) == 3
    assert [r.config for r in search(space[:1], cal)] == space[:1]


def test_search_without_feasible_configs():
    with pytest.raises(NoFeasibleConfig):
        search(enumerate_space(GRID, 16, 64, 8), _calibration(capacity_gib=0.0))


def test_shipped_calibration_and_constraints(tmp_path):
    cal = load_calibration(str(PROJECT_ROOT / "configs" / "calibration_16acc.yaml"))
    assert cal.accelerators == 16
    assert cal.model.layers == 64
    constraints, options = load_constraints(str(PROJECT_ROOT / "configs" / "constraints.yaml"))
    assert [c.text for c in constraints] == ["tp <= 2", "ep >= 2"]
    space = prune(enumerate_space(options, cal.accelerators, 64, cal.model.layers), constraints)
    ranking = search(space, cal, top_k=5)
    times = [r.estimate.step_time for r in ranking]
    assert times == sorted(times)
    assert all(r.estimate.feasible for r in ranking)

    out = tmp_path / "tune" / "ranking.csv"
    write_ranking_csv(str(out), ranking)
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("rank,config,tp")
    assert lines[1].startswith(f"1,{ranking[0].config.full_label},")


def test_bad_calibration_files(tmp_path):
    with pytest.raises(ConfigError):
        calibration_from_dict({"model": {"layers": 8}})
    with pytest.raises(ConfigError):
        load_calibration(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "constraints.yaml"
    bad.write_text("options:\n  gpus: [1]\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_constraints(str(bad))


@pytest.mark.parametrize("seed", range(50))
def test_search_equals_exhaustive_ranking_on_random_spaces(seed):
    rng = np.random.default_rng(seed)
    options = {
        dim: sorted(int(v) for v in rng.choice(values, size=int(rng.integers(1, len(values) + 1)), replace=False))
        for dim, values in GRID.items()
    }
    cal = _calibration(capacity_gib=float(rng.uniform(0.02, 1.0)))
    space = enumerate_space(options, 16, 64, 8)
    assert len(space) <= 200

    estimates = {c.full_label: estimate(c, cal.cost, cal.memory, cal.model) for c in space}
    feasible = [c for c in space if estimates[c.full_label].feasible]
    if not feasible:
        with pytest.raises(NoFeasibleConfig):
            search(space, cal)
        return
    brute = sorted(
        feasible,
        key=lambda c: (estimates[c.full_label].step_time, c.pp, -c.mbs, c.full_label),
    )
    ranking = search(space, cal, top_k=len(space))
    assert [r.config for r in ranking] == brute
    fastest = min(estimates[c.full_label].step_time for c in feasible)
    assert ranking[0].estimate.step_time == fastest
