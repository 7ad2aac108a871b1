"""Command line: ``rollbacksim run | sweep | verify``.

Exit status is 0 on success, 1 for configuration errors and 2 for
simulation integrity errors (including deadlocks and oracle mismatches).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import (SimConfig, format_config, parse_config,
                     parse_overrides, validate)
from .errors import ConfigError, DeadlockError, IntegrityError
from .metrics import (RunSummary, compare, emit, series_csv, summary_json,
                      write_atomic)
from .runtime import Simulation

log = logging.getLogger("rollbacksim")

OUT_ENV = "ROLLBACKSIM_OUT"


def _default_out():
    return os.environ.get(OUT_ENV, "results")


def config_hash(config: SimConfig) -> str:
    text = format_config(config.with_values(seed=0))
    return hashlib.sha256(text.encode()).hexdigest()[:10]


def _load(path, overrides) -> SimConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, parse_overrides(overrides))


def _run_one(config: SimConfig, keep_trace: bool):
    sim = Simulation(config, keep_trace=keep_trace)
    summary = sim.run()
    sim.check_invariants()
    return summary, (sim.trace if keep_trace else None)


def cmd_run(args) -> int:
    config = _load(args.config, args.set)
    summary, trace = _run_one(config, args.trace)
    out = Path(args.out)
    write_atomic(out / "summary.json", summary_json(summary))
    if trace is not None:
        write_atomic(out / "trace.csv", emit(trace, "csv"))
    print(summary.profile.table())
    print(f"makespan {summary.makespan_s:.3f} s, "
          f"{summary.extra['triangles']} checkpoint triangles, "
          f"{len(summary.failures)} failure(s), "
          f"{summary.cancelled_count} cancelled")
    print(f"wrote {out / 'summary.json'}")
    return 0


def parse_levels(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if lo > hi:
            raise ConfigError(f"empty level range {text!r}")
        return list(range(lo, hi + 1))
    return [int(x) for x in text.split(",") if x]


def parse_recovery(text: str) -> list[str]:
    names = {"default": "Default", "dependency": "Dependency"}
    out = []
    for item in text.split(","):
        key = item.strip().lower()
        if key not in names:
            raise ConfigError(f"unknown recovery strategy {item!r}",
                              key="Recovery")
        out.append(names[key])
    return out


def _sweep_job(config: SimConfig) -> dict:
    summary, _ = _run_one(config, False)
    return summary.to_dict()


def cmd_sweep(args) -> int:
    base = _load(args.config, args.set)
    levels = parse_levels(args.levels)
    strategies = parse_recovery(args.recovery)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    jobs = []
    for level in levels:
        for rec in strategies:
            for seed in seeds:
                cfg = base.with_values(checkpoint_level=level, recovery=rec,
                                       seed=seed)
                validate(cfg)
                jobs.append(cfg)
    out = Path(args.out)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(cfg) for cfg in jobs]

    rows = []
    by_key = {}
    for cfg, data in zip(jobs, results):
        name = f"summary-{config_hash(cfg)}-seed{cfg.seed}.json"
        write_atomic(out / name, json.dumps(data, indent=2) + "\n")
        summary = RunSummary.from_dict(data)
        by_key[(cfg.checkpoint_level, cfg.recovery, cfg.seed)] = summary
        rows.append({"level": cfg.checkpoint_level, "recovery": cfg.recovery,
                     "seed": cfg.seed, "makespan_s": summary.makespan_s,
                     "aggregated_processing_s":
                         summary.aggregated_processing_s,
                     "cancelled_count": summary.cancelled_count,
                     "replay_count": summary.replay_count,
                     "failures": len(summary.failures)})
        log.info("level %d %s seed %d: makespan %.1f", cfg.checkpoint_level,
                 cfg.recovery, cfg.seed, summary.makespan_s)
    for rec in strategies:
        write_atomic(out / f"series-{rec.lower()}.csv",
                     series_csv([r for r in rows if r["recovery"] == rec]))
    comparisons = []
    if {"Default", "Dependency"} <= set(strategies):
        for level in levels:
            for seed in seeds:
                c = compare(by_key[(level, "Default", seed)],
                            by_key[(level, "Dependency", seed)])
                comparisons.append({"level": level, "seed": seed,
                                    **c.to_dict()})
        write_atomic(out / "comparison.json",
                     json.dumps(comparisons, indent=2) + "\n")
    print(f"wrote {len(results)} summaries to {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    failed = 0
    for check in run_all(args.max_grid):
        status = "ok  " if check.ok else "FAIL"
        print(f"{status} {check.name}: {check.detail}")
        failed += not check.ok
    if failed:
        print(f"{failed} oracle check(s) failed")
        return 2
    print("all oracle checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rollbacksim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a configuration key (repeatable)")
    run.add_argument("--out", default=_default_out())
    run.add_argument("--trace", action="store_true",
                     help="also write trace.csv")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="levels x strategies x seeds")
    sw.add_argument("--config", required=True)
    sw.add_argument("--set", action="append", metavar="KEY=VALUE")
    sw.add_argument("--levels", default="1..6")
    sw.add_argument("--recovery", default="default,dependency")
    sw.add_argument("--seeds", default="1,2,3,4,5")
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--out", default=_default_out())
    sw.set_defaults(func=cmd_sweep)

    ver = sub.add_parser("verify", help="run the oracle suites")
    ver.add_argument("--max-grid", type=int, default=16)
    ver.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (IntegrityError, DeadlockError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
