"""Command line runner: ``kinflow run <config.json>`` and ``kinflow list``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from ._parallel import worker_count
from .config import ConfigError, ExperimentConfig
from .io import _plain, write_json
from .scenarios import REGISTRY, describe_plan, get
from .solver import NumericalAbort

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3


def list_scenarios() -> str:
    width = max(len(n) for n in REGISTRY)
    return "\n".join(f"{n:<{width}}  {s.description}" for n, s in REGISTRY.items())


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kinflow", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command")
    sub.add_parser("list", help="list the available scenarios")
    run = sub.add_parser("run", help="run a scenario from a JSON config")
    run.add_argument("config", type=Path)
    run.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    run.add_argument("--out", type=Path, help="output directory (overrides config)")
    run.add_argument("--seed", type=_u64, help="ensemble seed (overrides config)")
    return ap


def run(config: Path, *, out: Optional[Path] = None, seed: Optional[int] = None,
        dry_run: bool = False, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    err = sys.stderr
    try:
        cfg = ExperimentConfig.load(config)
        if cfg.scenario not in REGISTRY:
            print(f"unknown scenario {cfg.scenario!r}; known scenarios:", file=err)
            print(list_scenarios(), file=err)
            return EXIT_INVALID
        cfg = cfg.with_overrides(seed=seed, output=None if out is None else str(out))
        scen = get(cfg.scenario)
        plan = scen.resolve(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"invalid config: {exc}", file=err)
        return EXIT_INVALID
    out_dir = Path(cfg.output or f"runs/{cfg.scenario}")
    header = {"scenario": cfg.scenario, "config_hash": cfg.hash, "seed": cfg.ensemble.seed,
              "version": __version__}
    if dry_run:
        print(json.dumps(_plain({**header, "output": str(out_dir), "workers": worker_count(),
                                 "plan": describe_plan(plan)}), sort_keys=True, indent=2),
              file=stream)
        return EXIT_OK
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        results = scen.run(cfg, plan, out_dir, None)
    except NumericalAbort as exc:
        write_json(out_dir / "summary.json", {**header, "status": "numerical-abort",
                                              "error": str(exc), "dump": exc.dump})
        print(f"numerical abort: {exc}", file=err)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"invalid experiment: {exc}", file=err)
        return EXIT_INVALID
    write_json(out_dir / "summary.json", {**header, "status": "ok", "results": results})
    print(f"{cfg.scenario}: wrote {out_dir}", file=stream)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run(args.config, out=args.out, seed=args.seed, dry_run=args.dry_run)
    print(list_scenarios())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
