"""Train every run behind the learning-curve criteria, then print one PASS/FAIL line each.

    python3 scripts/run_acceptance.py [--results results] [--only ogpo-plus,qc] [--seeds 0,1,2]

Finished runs are cached as JSON summaries and skipped on the next invocation.
"""

import argparse
import sys
from pathlib import Path

from ogpo import experiments as xp


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--results", type=Path, default=Path(__file__).resolve().parents[1] / "results")
    p.add_argument("--only", default=",".join(xp.PLANS))
    p.add_argument("--seeds", default=",".join(map(str, xp.SEEDS)))
    p.add_argument("--report", action="store_true", help="skip training; evaluate cached summaries")
    args = p.parse_args()
    if not args.report:
        for name in args.only.split(","):
            for seed in map(int, args.seeds.split(",")):
                s = xp.run_one(args.results, name, seed)
                print(f"{name} seed {seed}: final {xp.final_success(s):.3f}, {s['env_steps']} steps, "
                      f"{s['cpu_seconds']:.0f}s cpu", flush=True)
    results = xp.evaluate_all(args.results)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 3


if __name__ == "__main__":
    sys.exit(main())
