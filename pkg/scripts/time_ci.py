"""Time repeated `gridemu ci` runs on the realtime grid and report per-stage probe latencies."""

import argparse
import json
import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--config", help="JSON config passed through to ci")
    args = parser.parse_args()
    walls = []
    for i in range(args.runs):
        run_dir = Path(tempfile.mkdtemp(prefix="time-ci-"))
        cmd = [sys.executable, "-m", "gridemu", "ci", "--run-dir", str(run_dir), "--format", "json"]
        if args.config:
            cmd += ["--config", args.config]
        t0 = time.monotonic()
        proc = subprocess.run(cmd, capture_output=True, text=True)
        walls.append(time.monotonic() - t0)
        report = json.loads((run_dir / "report.json").read_text())
        lat = report["run_metadata"].get("latencies_ms", {})
        print(f"run {i + 1}: exit {proc.returncode}  {walls[-1]:.2f}s  "
              + "  ".join(f"{k}={v}ms" for k, v in sorted(lat.items())))
    print(f"median {statistics.median(walls):.2f}s  max {max(walls):.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
