from __future__ import annotations

import numpy as np
import pytest

from fleet_guardian.models import (
    FaultModel,
    InsufficientCapacity,
    JobSpec,
    JobState,
    Manifestation,
    NodeState,
    SimulationError,
)
from fleet_guardian.simulator import ClusterSimulator, SimConfig, sample_job_ttf
from fleet_guardian.telemetry import CollectorSpec


def test_one_tick_yields_one_sample_per_node():
    collector = CollectorSpec("accelerator", "accelerator", ("accel_utilization",), 60.0)
    sim = ClusterSimulator(SimConfig(seed=1, node_count=4, collectors=[collector]))
    sim.advance(60)
    assert len(sim.last_samples) == 4
    assert sorted(s.node_id for s in sim.last_samples) == ["node-000", "node-001", "node-002", "node-003"]
    assert all(s.metric == "accel_utilization" for s in sim.last_samples)


def test_degraded_node_utilization_halves(make_config, degrade_fault):
    collector = CollectorSpec("accelerator", "accelerator", ("accel_utilization",), 60.0)
    config = make_config(node_count=4, job_nodes=4)
    config.collectors = [collector]
    received = []
    sim = ClusterSimulator(config, sink=received.extend)
    sim.submit_job(config.job_templates[0])
    sim.inject_fault("node-001", degrade_fault)
    sim.advance(1000 * 60)

    faulty = np.array([s.value for s in received if s.node_id == "node-001"])
    healthy = np.array([s.value for s in received if s.node_id != "node-001"])
    assert faulty.size == 1000
    assert faulty.mean() / healthy.mean() == pytest.approx(0.5, abs=0.01)
    assert sim.job("job-a").state == JobState.DEGRADED


def test_crash_interrupts_job_on_weakest_link(make_config, crash_fault):
    config = make_config(node_count=6, job_nodes=4)
    sim = ClusterSimulator(config)
    sim.submit_job(config.job_templates[0])
    sim.advance(120)
    sim.inject_fault("node-002", crash_fault)

    job = sim.job("job-a")
    assert job.state == JobState.INTERRUPTED
    interrupted = [e for e in sim.events if e.kind == "job_interrupted"]
    assert interrupted[-1].detail["node"] == "node-002"
    assert interrupted[-1].detail["cause"] == "crash"


def test_hang_and_degrade_states(make_config, hang_fault, degrade_fault):
    config = make_config(node_count=4, job_nodes=4)
    sim = ClusterSimulator(config)
    sim.submit_job(config.job_templates[0])
    sim.inject_fault("node-000", degrade_fault)
    assert sim.job("job-a").state == JobState.DEGRADED
    sim.inject_fault("node-003", hang_fault)
    assert sim.job("job-a").state == JobState.HUNG
    assert sim.job_throughput(sim.job("job-a")) == 0.0


def test_degrade_speed_uses_compute_share(make_config, degrade_fault):
    config = make_config(node_count=4, job_nodes=4)
    sim = ClusterSimulator(config)
    sim.inject_fault("node-000", degrade_fault)
    # 1 / (0.8 / 0.5 + 0.2)
    assert sim.node_speed("node-000") == pytest.approx(1 / 1.8)

    plain = ClusterSimulator(SimConfig(seed=0, node_count=3, compute_share=1.0))
    plain.inject_fault("node-000", degrade_fault)
    assert plain.node_speed("node-000") == pytest.approx(0.5)


def test_reboot_clears_soft_faults_only(make_config, crash_fault, hang_fault):
    sim = ClusterSimulator(make_config(job_nodes=None))
    sim.inject_fault("node-000", crash_fault)
    sim.inject_fault("node-000", hang_fault)
    survivors = sim.reboot_node("node-000")
    assert [f.model.component_class.value for f in survivors] == ["accelerator-memory"]
    sim.replace_hardware("node-000")
    assert sim.node("node-000").faults == []
    assert sim.node("node-000").last_validation is None


def test_restart_rolls_back_to_checkpoint(make_config, crash_fault):
    config = make_config(node_count=6, job_nodes=4, checkpoint_interval=100, step_time=1.0)
    sim = ClusterSimulator(config)
    sim.submit_job(config.job_templates[0])
    sim.advance(250)
    sim.inject_fault("node-000", crash_fault)
    sim.set_node_state("node-000", NodeState.CORDONED, cause="test")

    result = sim.restart_job("job-a")
    assert result.resumed_at_step == pytest.approx(200.0)
    assert result.lost_steps == pytest.approx(50.0)
    assert "node-000" not in result.nodes
    assert sim.job("job-a").state in (JobState.LOADING, JobState.TRAINING)


def test_submit_without_capacity_raises(make_config):
    sim = ClusterSimulator(make_config(node_count=2, job_nodes=None))
    with pytest.raises(InsufficientCapacity):
        sim.submit_job(JobSpec(requested_accelerators=24))


def test_schedule_in_the_past_raises():
    sim = ClusterSimulator(SimConfig(seed=0, node_count=3))
    sim.advance(10)
    with pytest.raises(SimulationError):
        sim.schedule(0, lambda: None)


def test_intermittent_fault_follows_duty_cycle(make_config):
    flaky = FaultModel("interconnect", 0.0, Manifestation.degrade(0.5), duty_on_s=60, duty_off_s=120)
    sim = ClusterSimulator(make_config(job_nodes=None))
    sim.inject_fault("node-001", flaky)
    fault = sim.node("node-001").faults[0]
    assert fault.active_at(0)
    assert not fault.active_at(90_000)
    assert fault.active_at(180_000)


def test_same_seed_same_events(make_config):
    models = [FaultModel("host-os", 0.05, Manifestation.hang())]

    def run():
        config = make_config(node_count=6, job_nodes=4, seed=11, fault_models=models)
        sim = ClusterSimulator(config)
        sim.submit_job(config.job_templates[0])
        sim.advance(24 * 3600)
        return [e.to_record() for e in sim.events]

    assert run() == run()


def test_telemetry_does_not_perturb_fault_arrivals(make_config):
    models = [FaultModel("host-os", 0.02, Manifestation.hang())]

    def arrivals(with_collectors: bool):
        sim = ClusterSimulator(make_config(job_nodes=None, seed=5, fault_models=models, with_collectors=with_collectors))
        sim.advance(48 * 3600)
        return [(e.t_ms, e.node_id) for e in sim.events if e.kind == "fault"]

    assert arrivals(True) == arrivals(False)


def test_event_log_is_sorted_jsonl(tmp_path, make_config, crash_fault):
    config = make_config()
    sim = ClusterSimulator(config)
    sim.submit_job(config.job_templates[0])
    sim.inject_fault("node-000", crash_fault, at=60_000)
    sim.advance(120)
    path = tmp_path / "events.jsonl"
    count = sim.write_event_log(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert count == len(lines) == len(sim.events)
    assert '"kind": "fault"' in "\n".join(lines)


def test_weakest_link_ttf_matches_closed_form():
    ttf = sample_job_ttf(683.5, 256, trials=10_000, seed=3)
    assert ttf.mean() == pytest.approx(683.5 / 256, rel=0.05)
    assert 683.5 / 256 == pytest.approx(2.67, abs=0.01)


@pytest.mark.slow
def test_disruption_rate_calibration():
    per_node_hour = 5.52 / (200 * 24)
    models = [FaultModel("host-os", per_node_hour, Manifestation.hang())]
    daily = []
    for seed in range(4):
        sim = ClusterSimulator(SimConfig(seed=seed, node_count=200, fault_models=models))
        sim.advance(90 * 24 * 3600)
        daily.append(sum(1 for e in sim.events if e.kind == "fault") / 90)
    assert np.mean(daily) == pytest.approx(5.52, rel=0.10)
