import argparse
import json
import logging
import sys
from pathlib import Path
from traceback import format_exc
from typing import Dict, List, Optional

from fleet_guardian.audit_logger import AuditLogger
from fleet_guardian.config import GuardianSettings, load_config
from fleet_guardian.kpi import compute_kpis, load_events, nodes_from_events
from fleet_guardian.models import ComponentClass, ConfigError, GuardianError
from fleet_guardian.numerics import compare_traces, read_trace_file
from fleet_guardian.partuner import (
    Calibration,
    MemoryConstraint,
    enumerate_space,
    load_calibration,
    load_constraints,
    prune,
    search,
    tokens_to_samples,
    write_ranking_csv,
)
from fleet_guardian.replay import replay_bundle
from fleet_guardian.scenario import run_scenario, scenario_nodes
from fleet_guardian.training_health import (
    load_norm_profiles,
    load_rank_timings,
    monitor_collapse,
    step_throughput,
    straggler_detect,
    throughput_stats,
    valley_score,
)


logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=logging.INFO,
)
logger = logging.getLogger("FleetGuardian")

SETTINGS: GuardianSettings = GuardianSettings()
AUDIT_LOGGER: Optional[AuditLogger] = None

DEFAULT_OPTIONS: Dict[str, List[int]] = {
    "tp": [1, 2, 4, 8],
    "cp": [1, 2],
    "ep": [1, 2, 4, 8],
    "pp": [1, 2, 4, 8],
    "vpp": [1, 2],
    "mbs": [1, 2, 4],
}


def _write_json(path: Optional[str], record: object) -> None:
    text = json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if not path:
        sys.stdout.write(text)
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")


def cmd_simulate(args: argparse.Namespace) -> int:
    out_dir = args.out or str(Path(SETTINGS.artifact_root) / Path(args.scenario).stem)
    summary = run_scenario(args.scenario, out_dir, overwrite=args.overwrite)
    logger.info(
        "Scenario finished: %d incidents (%d automated), %d rules learned -> %s",
        summary.incidents,
        summary.automated,
        len(summary.rules_learned),
        summary.out_dir,
    )
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    fault_class = None
    if args.fault_class:
        try:
            fault_class = ComponentClass(args.fault_class)
        except ValueError as exc:
            raise ConfigError(f"未知故障类别 {args.fault_class}") from exc
    out_dir = args.out or str(Path(SETTINGS.artifact_root) / "replay" / Path(args.bundle).name)
    result = replay_bundle(args.bundle, out_dir, args.corpus, SETTINGS, fault_class)
    logger.info("Replay of %s: %s %s", result.incident.incident_id, result.session.status, result.session.confirmed_node or "")
    if result.candidate is not None:
        rule = result.candidate.rule
        logger.info("Rule generation accepted=%s rule=%s", result.candidate.accepted, rule.text if rule else None)
    return 0


def _calibrated_accelerators(args: argparse.Namespace, calibration: Calibration) -> int:
    return int(args.accelerators) if args.accelerators else calibration.accelerators


def cmd_tune(args: argparse.Namespace) -> int:
    calibration = load_calibration(args.calibration)
    constraints, options = ([], {})
    if args.constraints:
        constraints, options = load_constraints(args.constraints)
    options = {**DEFAULT_OPTIONS, **options}
    seq = args.seq or calibration.model.seq_len
    gbs_samples = tokens_to_samples(args.gbs, seq)
    n = _calibrated_accelerators(args, calibration)
    space = enumerate_space(options, n, gbs_samples, calibration.model.layers)
    pruned = prune(space, [*constraints, MemoryConstraint(calibration.memory, calibration.cost, calibration.model)])
    logger.info("Pruned %d of %d configurations", len(space) - len(pruned), len(space))
    ranking = search(pruned, calibration, args.top)
    out = args.out or str(Path(SETTINGS.artifact_root) / "tune" / "ranking.csv")
    write_ranking_csv(out, ranking)
    for i, item in enumerate(ranking, start=1):
        logger.info("#%d %s step=%.4fs", i, item.config.full_label, item.estimate.step_time)
    return 0


def cmd_validate_traces(args: argparse.Namespace) -> int:
    reference = read_trace_file(args.reference)
    candidate = read_trace_file(args.candidate)
    numerics = SETTINGS.numerics
    report = compare_traces(
        reference,
        candidate,
        steps=args.steps or numerics.steps,
        threshold=args.threshold or numerics.threshold,
        overrides=numerics.overrides,
    )
    if args.csv:
        report.write_csv(args.csv)
    _write_json(args.out, report.to_record())
    for entry in report.flagged:
        logger.warning("Abnormal %s %s: min cosine %.4f", entry.module, entry.kind, entry.min_similarity)
    return 0 if report.passed else 2


def cmd_health(args: argparse.Namespace) -> int:
    if not args.norms and not args.timings:
        raise ConfigError("health 需要 --norms 或 --timings 至少一个输入。")
    health = SETTINGS.health
    record: Dict[str, object] = {}
    if args.norms:
        profiles = load_norm_profiles(args.norms)
        record["valleys"] = [
            {"iteration": r.iteration, "depth": r.depth, "layer": r.layer, "flagged": r.flagged}
            for r in (valley_score(p, health.valley_threshold) for p in profiles)
        ]
        record["collapse_alarm_iteration"] = monitor_collapse(profiles, health.collapse_persistence, health.valley_threshold)
    if args.timings:
        durations = load_rank_timings(args.timings)
        suspects = straggler_detect(durations, health.straggler_threshold, window=args.window)
        record["stragglers"] = [{"rank": s.rank, "pattern": s.pattern, "evidence": s.evidence} for s in suspects]
        if args.tokens_per_step:
            record["throughput"] = throughput_stats(step_throughput(durations, args.tokens_per_step)).to_record()
    _write_json(args.out, record)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    events = load_events(args.events)
    manifest = args.manifest or str(Path(args.events).with_name("manifest.json"))
    if Path(manifest).exists():
        nodes, t_end, calendar_start, rounding = scenario_nodes(manifest)
    else:
        nodes = nodes_from_events(events)
        t_end = max((int(e["t_ms"]) for e in events), default=0)
        calendar_start, rounding = SETTINGS.kpi.calendar_start, SETTINGS.kpi.rounding
    report = compute_kpis(events, nodes, t_end, args.rounding or rounding, calendar_start)
    out = args.out or str(Path(args.events).with_name("kpi"))
    for path in report.write_tables(out):
        logger.info("Wrote %s", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guardian", description="集群可靠性控制面与离散事件模拟器")
    parser.add_argument("--config", help="配置文件路径（缺省读取 GUARDIAN_CONFIG_PATH 或 guardian.yaml）")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="运行一个场景文件并生成产物目录")
    p.add_argument("scenario")
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="离线复盘一个事故快照")
    p.add_argument("bundle")
    p.add_argument("--corpus", help="带标签的事故库目录，给出时生成规则")
    p.add_argument("--out")
    p.add_argument("--fault-class", choices=[c.value for c in ComponentClass])
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("tune", help="搜索并行配置")
    p.add_argument("--accelerators", "--nodes", type=int, dest="accelerators")
    p.add_argument("--gbs", type=int, required=True, help="全局批大小（token 数）")
    p.add_argument("--seq", type=int)
    p.add_argument("--calibration", required=True)
    p.add_argument("--constraints")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", help="排名 CSV 输出路径")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("validate-traces", help="对比两份数值轨迹文件")
    p.add_argument("reference")
    p.add_argument("candidate")
    p.add_argument("--steps", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate_traces)

    p = sub.add_parser("health", help="检查范数谷值与慢节点")
    p.add_argument("--norms", help="iteration,layer,value CSV")
    p.add_argument("--timings", help="rank,step,duration CSV")
    p.add_argument("--window", type=int)
    p.add_argument("--tokens-per-step", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_health)

    p = sub.add_parser("report", help="从事件日志重算 KPI 表")
    p.add_argument("events")
    p.add_argument("--manifest")
    p.add_argument("--rounding", choices=["truncate", "half-even"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    global SETTINGS, AUDIT_LOGGER
    args = build_parser().parse_args(argv)
    try:
        SETTINGS = GuardianSettings.from_config(load_config(args.config))
        AUDIT_LOGGER = AuditLogger(SETTINGS.log_dir)
        return args.func(args)
    except GuardianError as exc:
        logger.exception("%s failed: %s", args.command, exc)
        if AUDIT_LOGGER is not None:
            AUDIT_LOGGER.log_error(type(exc).__name__, str(exc), {"command": args.command}, format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
