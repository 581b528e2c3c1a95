"""Run every scenario (or the named ones) in stepped mode and print a status table."""

import argparse
import sys
import time
from collections import Counter

from gridemu.harness import (Scenario, assert_exactly_once, assert_fifo, assert_legal_transitions,
                             assert_pending_cap, assert_single_grant, assert_slot_capacity, list_scenarios,
                             run_scenario)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("names", nargs="*", help="scenario names; default is all")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    ok = True
    for name in args.names or list_scenarios():
        scenario = Scenario.load(name)
        t0 = time.monotonic()
        result = run_scenario(scenario, seed=args.seed)
        elapsed = time.monotonic() - t0
        idx = result.index
        checks = [assert_exactly_once(idx), assert_single_grant(idx), assert_legal_transitions(idx),
                  assert_slot_capacity(idx, result.config.worker.slots), assert_fifo(idx),
                  assert_pending_cap(idx, result.config.ce.max_pending_agents)]
        broken = [c.message for c in checks if not c]
        mismatched = result.mismatches(scenario.expected)
        ok &= not broken and not mismatched
        counts = ", ".join(f"{s.value}={n}" for s, n in sorted(Counter(result.statuses.values()).items()))
        print(f"{name:<24} {elapsed:6.2f}s  {counts}  {'ok' if not broken and not mismatched else 'MISMATCH'}")
        for msg in broken:
            print(f"    {msg}")
        for job, (want, got) in sorted(mismatched.items()):
            print(f"    job {job}: expected {want.value}, got {got.value if got else None}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
