"""Run every scenario config and print one status line per scenario.

    python3 scripts/run_all.py            # full configs into runs/
    python3 scripts/run_all.py --smoke    # minimal configs, a few seconds
"""
import argparse
import json
import sys
import time
from pathlib import Path

from kinflow import cli

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--smoke", action="store_true", help="use configs/smoke")
    ap.add_argument("--out", type=Path, default=ROOT / "runs", help="output root")
    args = ap.parse_args(argv)
    src = ROOT / "configs" / ("smoke" if args.smoke else "")
    failed = 0
    for path in sorted(src.glob("*.json")):
        out = args.out / path.stem
        t0 = time.perf_counter()
        code = cli.main(["run", str(path), "--out", str(out)])
        dt = time.perf_counter() - t0
        status = json.loads((out / "summary.json").read_text()).get("status") if code in (0, 3) else "invalid"
        print(f"{path.stem:26s} exit={code} status={status} {dt:7.1f}s")
        failed += code != 0
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
