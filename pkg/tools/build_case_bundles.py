from __future__ import annotations
import argparse
import logging
import sys
from pathlib import Path

# Ensure project root is on sys.path to import fleet_guardian
PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from fleet_guardian.numerics import table7_fixture, write_trace_file
from fleet_guardian.replay import write_case_bundles


def main() -> None:
    parser = argparse.ArgumentParser(description="生成内置复盘快照与数值轨迹样例")
    parser.add_argument("--out", default=str(PROJECT_ROOT / "bundles"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    logging.basicConfig(format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", level=logging.INFO)
    written = write_case_bundles(args.out, args.seed)
    for group, paths in written.items():
        print(f"{group}: {len(paths)} 个快照")

    reference, candidate = table7_fixture(seed=args.seed)
    traces = Path(args.out) / "traces"
    write_trace_file(str(traces / "reference.fgtrace"), reference, backend="reference")
    write_trace_file(str(traces / "candidate.fgtrace"), candidate, backend="candidate")
    print(f"traces: {traces}")
    print()
    print("示例：")
    print(f"  python guardian.py replay {args.out}/case1/C1-HW-FOCAL --corpus {args.out}/case1/corpus")
    print(f"  python guardian.py replay {args.out}/case2/C2-NAN-01")
    print(f"  python guardian.py validate-traces {traces}/reference.fgtrace {traces}/candidate.fgtrace")


if __name__ == "__main__":
    main()
