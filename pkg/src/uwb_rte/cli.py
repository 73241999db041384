"""Command-line driver.

Angles are given in degrees on the command line and stored in radians in files.

Exit codes: 0 success, 2 configuration/usage error, 3 degenerate geometry, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import bench
from .estimator import DegenerateGeometryError, EstimateReport, ml_oracle_full_gn, two_step_estimate
from .geometry import FrameTransform
from .scenario import (
    ScenarioConfig,
    ScenarioError,
    check_path_validity,
    default_layout,
    design_params,
    generate_schedule,
    load_measurements,
    load_scenario,
    make_rng,
    measure,
    save_scenario,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GEOMETRY = 3
EXIT_IO = 4

log = logging.getLogger("uwb_rte")


class UsageError(Exception):
    pass


def bundled_config(name: str) -> Path | None:
    """Path of a config shipped with the package (``noise-sweep`` or ``noise-sweep.json``)."""
    stem = name[:-5] if name.endswith(".json") else name
    ref = resources.files("uwb_rte").joinpath("configs", stem + ".json")
    return Path(str(ref)) if ref.is_file() else None


def _resolve_config(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    found = bundled_config(name)
    if found is None:
        raise FileNotFoundError(f"config {name!r} not found (neither a file nor a bundled config)")
    return found


def _write_json(path, data) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_gen_scenario(args) -> int:
    m1, m2, k = design_params(args.j1, args.j2)
    seed = args.seed if args.seed is not None else 0
    layout = default_layout(args.j1, args.j2)
    schedule = generate_schedule(layout, args.rmax, make_rng(seed, 0))
    truth = FrameTransform(math.radians(args.theta_deg), np.asarray(args.t, dtype=float))
    config = ScenarioConfig(layout, schedule, args.sigma if args.sigma is not None else 1.0, args.n_rep, truth,
                            args.rmax, rng_seed=seed)
    report = check_path_validity(layout, schedule, args.rmax)
    if not report.valid:
        print("generated schedule failed validation: " + "; ".join(report.failed_conditions()), file=sys.stderr)
        return EXIT_GEOMETRY
    if args.out:
        save_scenario(config, args.out)
    else:
        _write_json(None, config.to_dict())
    print(f"M1={m1} M2={m2} K={k}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_check_path(args) -> int:
    config = load_scenario(_resolve_config(args.config))
    report = check_path_validity(config.layout, config.schedule, config.r_max)
    _write_json(args.out, report.to_dict())
    return EXIT_OK if report.valid else EXIT_GEOMETRY


def cmd_estimate(args) -> int:
    config = load_scenario(_resolve_config(args.config))
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)
    if args.sigma is not None:
        config = config.with_sigma(args.sigma)
    if args.synthesize == bool(args.measurements):
        raise UsageError("give exactly one of --synthesize or --measurements")
    if args.synthesize:
        report = check_path_validity(config.layout, config.schedule, config.r_max)
        if not report.valid:
            print("degenerate geometry: " + "; ".join(report.failed_conditions()), file=sys.stderr)
            return EXIT_GEOMETRY
        m = measure(config)
    else:
        m = load_measurements(args.measurements)

    est = two_step_estimate(m)
    rep = EstimateReport.from_estimate(est, m.seed, include_time=args.timing)
    if args.with_oracle:
        oracle = ml_oracle_full_gn(m, est.first.transform)
        rep.extra["oracle"] = {
            "theta_hat_rad": oracle.transform.theta,
            "t_hat_m": [float(v) for v in oracle.transform.translation],
            "cost": oracle.cost_after,
            "iterations": oracle.iterations,
            "converged": bool(oracle.converged),
            "wall_time_s": oracle.wall_time if args.timing else None,
        }
        rep.extra["cost_gap"] = est.cost_after - oracle.cost_after
    rep.extra["truth"] = config.ground_truth.to_dict() if args.synthesize else None
    _write_json(args.out, rep.to_dict())
    t = est.transform.translation
    log.info("theta_hat=%.6f deg t_hat=[%.6f, %.6f, %.6f] m", math.degrees(est.transform.theta), *t)
    return EXIT_OK


def _load_spec(args) -> bench.ExperimentSpec:
    spec = bench.load_experiment(_resolve_config(args.config))
    changes = {}
    if args.trials is not None:
        changes["trials_L"] = args.trials
    if args.seed is not None:
        changes["seed_base"] = args.seed
    if getattr(args, "sigma", None) is not None:
        changes["base"] = replace(spec.base, sigma=args.sigma)
    if changes:
        spec = replace(spec, **changes)
    return spec


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    summary, trials = bench.run_monte_carlo(
        spec, workers=args.workers, record_timing=args.timing,
        progress=lambda v: log.info("%s=%g done", spec.sweep_variable, v))
    if args.out:
        bench.export_results(summary, args.out)
    if args.raw:
        bench.export_trials_jsonl(trials, args.raw)
    print(summary.format_table())
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.config:
        params = bench.load_experiment(_resolve_config(args.config)).base
    else:
        params = bench.ScenarioParams.for_case("i")
    if args.sigma is not None:
        params = replace(params, sigma=args.sigma)
    runs = args.trials if args.trials is not None else 100
    table = bench.timing_report(params, runs=runs, warmup=10, seed_base=args.seed or 0)
    for meth, secs in table.items():
        print(f"{meth:>16} {secs:.6f} s")
    if args.out:
        _write_json(args.out, {"runs": runs, "warmup": 10, "mean_time_s": table})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwb-rte", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenario", help="write a random scenario that satisfies the path design rules")
    g.add_argument("--j1", type=int, default=1, help="anchors on robot 1 (1-4)")
    g.add_argument("--j2", type=int, default=1, help="tags on robot 2 (1-3)")
    g.add_argument("--rmax", type=float, default=10.0, help="max waypoint distance from the origin [m]")
    g.add_argument("--sigma", type=float, help="range noise std for every pair [m] (default 1)")
    g.add_argument("--n-rep", type=int, default=100, help="repeated ranges per pair")
    g.add_argument("--theta-deg", type=float, default=60.0, help="true relative yaw [deg]")
    g.add_argument("--t", type=float, nargs=3, default=(20.0, 20.0, 20.0), metavar=("X", "Y", "Z"),
                   help="true relative translation [m]")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_scenario)

    c = sub.add_parser("check-path", help="report rank conditions of a scenario file")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_check_path)

    e = sub.add_parser("estimate", help="run the two-step estimator on one scenario")
    e.add_argument("--config", required=True, help="scenario JSON")
    e.add_argument("--measurements", help="measurement CSV (with .positions.json sidecar)")
    e.add_argument("--synthesize", action="store_true", help="simulate ranges from the scenario")
    e.add_argument("--sigma", type=float, help="override noise std for every pair [m]")
    e.add_argument("--seed", type=int)
    e.add_argument("--with-oracle", action="store_true", help="also run converged Gauss-Newton")
    e.add_argument("--timing", action="store_true", help="record wall time (makes output non-reproducible)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sweep", help="Monte Carlo sweep from an experiment JSON or bundled config name")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="results CSV")
    s.add_argument("--raw", help="optional JSON-lines file of per-trial results")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    s.add_argument("--timing", action="store_true", help="record mean wall time (makes output non-reproducible)")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="mean computation time per method")
    b.add_argument("--config", help="experiment JSON whose base scenario is timed (default: case i)")
    b.add_argument("--trials", type=int, help="timed runs (default 100, after 10 warmups)")
    b.add_argument("--seed", type=int)
    b.add_argument("--sigma", type=float)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DegenerateGeometryError as exc:
        print(f"degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ScenarioError, bench.ExperimentError, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
