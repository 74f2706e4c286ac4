"""Command line entry point: ``overact run|validate|plot|bench``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import EXIT_INVALID, EXIT_OK, run
from .scenario import Scenario, ScenarioError, bundled_names, resolve, validate

# average cycle times measured on the original vehicle computer, for comparison only
REFERENCE_PLANNER_MS = 37.54
REFERENCE_MPC_MS = 5.43


def _load(name):
    """Resolve and validate a scenario; returns (Scenario, None) or (None, problems)."""
    try:
        path = resolve(name)
    except FileNotFoundError as exc:
        return None, [str(exc)]
    problems = validate(path)
    if problems:
        return None, problems
    try:
        return Scenario.load(path), None
    except ScenarioError as exc:
        return None, list(exc.problems)


def _report(problems, name):
    print(f"{name}: INVALID", file=sys.stderr)
    for p in problems:
        print(f"  - {p}", file=sys.stderr)


def cmd_run(args):
    sc, problems = _load(args.scenario)
    if sc is None:
        _report(problems, args.scenario)
        return EXIT_INVALID
    out = Path(args.out) if args.out else Path("runs") / sc.name
    result = run(sc, out, seed=args.seed, duration=args.duration, realtime_measure=args.realtime_measure)
    s = result.summary
    print(f"{sc.name}: {s.get('duration', 0.0):.1f} s simulated, logs in {out}")
    for key in ("max_tracking_error", "mean_tracking_error", "min_clearance", "mpc_fallbacks", "planner_reinit"):
        if key in s:
            print(f"  {key}: {s[key]}")
    if result.events:
        for ev in result.events:
            print(f"  event: {ev}")
    return result.exit_code


def cmd_validate(args):
    names = [args.scenario] if args.scenario else bundled_names()
    status = EXIT_OK
    for name in names:
        _, problems = _load(name)
        if problems:
            _report(problems, name)
            status = EXIT_INVALID
        else:
            print(f"{name}: ok")
    return status


def cmd_plot(args):
    from .plots import export_plots

    if not args.out:
        print("plot needs --out pointing at a run directory", file=sys.stderr)
        return EXIT_INVALID
    files = export_plots(args.out)
    for f in files:
        print(f)
    return EXIT_OK


def _percentiles(x):
    x = np.asarray(x, float)
    if x.size == 0:
        return {}
    return {"mean_ms": float(x.mean() * 1e3), "p50_ms": float(np.percentile(x, 50) * 1e3),
            "p90_ms": float(np.percentile(x, 90) * 1e3), "p99_ms": float(np.percentile(x, 99) * 1e3),
            "max_ms": float(x.max() * 1e3), "samples": int(x.size)}


def cmd_bench(args):
    sc, problems = _load(args.scenario or "reproduction")
    if sc is None:
        _report(problems, args.scenario)
        return EXIT_INVALID
    duration = 10.0 if args.duration is None else args.duration
    # the first short run absorbs JIT compilation
    run(sc, None, seed=args.seed, duration=min(duration, 0.5))
    result = run(sc, None, seed=args.seed, duration=duration, realtime_measure=True)
    report = {
        "scenario": sc.name,
        "duration": duration,
        "planner": _percentiles(result.column("planner", "solve_time")),
        "mpc": _percentiles(result.column("controller", "solve_time")),
        "reference_mean_ms": {"planner": REFERENCE_PLANNER_MS, "mpc": REFERENCE_MPC_MS},
    }
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.json").write_text(text + "\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="overact", description="Closed-loop planning and control simulator.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, fn, help_text in (("run", cmd_run, "simulate a scenario and write logs"),
                                ("validate", cmd_validate, "check scenario files"),
                                ("plot", cmd_plot, "write figures for a run directory"),
                                ("bench", cmd_bench, "report wall-clock solve-time percentiles")):
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--scenario", help="bundled scenario name or path to a JSON file")
        p.add_argument("--out", help="output (or, for plot, input) directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--duration", type=float, default=None, help="simulated seconds")
        p.add_argument("--realtime-measure", action="store_true",
                       help="check solve deadlines against wall-clock time instead of the virtual model")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "run" and not args.scenario:
        print("run needs --scenario", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
