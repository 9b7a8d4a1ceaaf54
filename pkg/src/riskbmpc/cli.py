"""Command-line entry point.

Scenario arguments are YAML files (see ``export-scenario``) or the built-in
names ``TS1`` / ``TS2``. Set ``RISKBMPC_LOG=DEBUG`` (or INFO, WARNING) for
solver logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .scenario import SCENARIOS, ScenarioConfig, load_scenario, make_scenario, monte_carlo, run_closed_loop, run_open_loop, save_scenario

log = logging.getLogger("riskbmpc")

TRACE_SCHEMA = "riskbmpc-trace v1"
SAMPLES_SCHEMA = "riskbmpc-samples v1"
TIMING_SCHEMA = "riskbmpc-timing v1"
SAMPLE_COLUMNS = ["seed", "planner", "converged", "outer_iters", "inner_iters", "final_cost", "max_violation"]


class InputError(Exception):
    """Bad command-line input; reported with exit code 2."""


def _load(arg: str) -> ScenarioConfig:
    path = Path(arg)
    if path.exists():
        try:
            return load_scenario(path)
        except (yaml.YAMLError, TypeError, ValueError) as exc:
            raise InputError(f"{arg}: {exc}") from exc
    if arg in SCENARIOS:
        return make_scenario(arg)
    raise InputError(f"{arg}: no such scenario file (built-ins: {', '.join(SCENARIOS)})")


def _write_json(data, out: str | None) -> None:
    text = json.dumps(data, indent=2, default=_json_default)
    if out is None or out == "-":
        print(text)
    else:
        Path(out).write_text(text + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _override(config: ScenarioConfig, **changes) -> ScenarioConfig:
    try:
        return config.with_overrides(**changes)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _settings(config: ScenarioConfig, args):
    changes = {"alpha": config.alpha, "risk_aware": not getattr(args, "nominal", False)}
    if (getattr(args, "gamma", None) is None) != (getattr(args, "rho0", None) is None):
        raise InputError("--gamma and --rho0 must be given together")
    if getattr(args, "gamma", None) is not None:
        changes["gamma"] = args.gamma
    if getattr(args, "rho0", None) is not None:
        changes["rho0"] = args.rho0
    if getattr(args, "parallel", False):
        changes["parallel_branches"] = True
    try:
        return config.settings.with_(**changes)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_solve(args) -> int:
    config = _load(args.scenario)
    if args.alpha is not None:
        config = _override(config, alpha=args.alpha)
    settings = _settings(config, args)
    result = run_open_loop(config, settings)
    out = {"scenario": config.name, "alpha": config.alpha, "risk_aware": settings.risk_aware}
    out.update(result.to_dict())
    out["joint_modes"] = config.joint_mode_labels
    _write_json(out, args.out)
    log.info("converged=%s iters=%d time=%.1f ms", result.converged, result.total_inner_iters, 1e3 * result.solve_time)
    return 0


def write_samples_csv(path, summary: dict) -> None:
    """Per-sample solver outcomes; deterministic for a given scenario and seed range."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SAMPLES_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_COLUMNS)
        for planner, r in _all_rows(summary):
            writer.writerow(
                [r["seed"], planner, int(r["converged"]), r["outer_iters"], r["inner_iters"],
                 repr(r["final_cost"]), repr(r["max_violation"])]
            )


def write_timing_csv(path, summary: dict) -> None:
    """Per-sample wall-clock solve times (these differ from run to run)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TIMING_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["seed", "planner", "time_ms"])
        for planner, r in _all_rows(summary):
            writer.writerow([r["seed"], planner, f"{r['time_ms']:.3f}"])


def _all_rows(summary: dict):
    for planner, key in (("risk_aware", "rows"), ("nominal", "nominal_rows")):
        for r in summary[key]:
            yield planner, r


def read_samples_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if header != f"# {SAMPLES_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {header!r}")
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["converged"] = bool(int(r["converged"]))
        r["outer_iters"] = int(r["outer_iters"])
        r["inner_iters"] = int(r["inner_iters"])
        for key in ("final_cost", "max_violation"):
            r[key] = float(r[key])
    return rows


def cmd_montecarlo(args) -> int:
    if args.n < 1:
        raise InputError("--n must be >= 1")
    config = _load(args.scenario)
    if args.alpha is not None:
        config = _override(config, alpha=args.alpha)
    jobs = args.jobs
    summary = monte_carlo(config, args.n, parallel=jobs > 1, jobs=jobs, seed=args.seed, include_nominal=not args.skip_nominal)
    brief = {k: summary[k] for k in ("scenario", "alpha", "risk_aware", "nominal")}
    brief["seed"] = args.seed
    if args.out is None:
        _write_json(brief, None)
        return 0
    out = Path(args.out)
    _write_json(brief, str(out))
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    timing_path = csv_path.with_name(csv_path.stem + "_timing.csv")
    write_samples_csv(csv_path, summary)
    write_timing_csv(timing_path, summary)
    log.info("wrote %s, %s and %s", out, csv_path, timing_path)
    return 0


def trace_columns(config: ScenarioConfig) -> list[str]:
    cols = ["t", "px", "py", "theta", "v", "a", "delta", "converged", "inner_iters", "solve_ms"]
    cols += [f"q[{label}]" for label in config.joint_mode_labels]
    for v in config.vehicles:
        cols += [f"{v.name}_x", f"{v.name}_y"]
    return cols


def write_trace_csv(path, config: ScenarioConfig, trace) -> None:
    """Trace CSV: schema line, header, one row per control step.

    After the intent reveal only the true joint mode remains; its weight goes
    in that mode's ``q[...]`` column and the others are zero.
    """
    with open(path, "w", newline="") as fh:
        _write_trace(fh, config, trace)


def _write_trace(fh, config: ScenarioConfig, trace) -> None:
    true_mode = config.true_joint_mode
    d = config.num_modes
    fh.write(f"# {TRACE_SCHEMA} failed={int(trace.failed)}\n")
    writer = csv.writer(fh)
    writer.writerow(trace_columns(config))
    for k in range(len(trace.t)):
        q = np.zeros(d)
        qk = trace.q[k]
        if len(qk) == d:
            q[:] = qk
        else:
            q[true_mode] = qk[0]
        row = [f"{trace.t[k]:.1f}"]
        row += [repr(float(v)) for v in trace.ego[k, :4]]
        row += [repr(float(v)) for v in trace.controls[k]]
        row += [int(trace.converged[k]), int(trace.inner_iters[k]), f"{1e3 * trace.solve_time[k]:.3f}"]
        row += [repr(float(v)) for v in q]
        row += [repr(float(v)) for v in trace.vehicles[k, :, :2].reshape(-1)]
        writer.writerow(row)


def read_trace_csv(path) -> tuple[dict, list[dict]]:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if not header.startswith(f"# {TRACE_SCHEMA}"):
            raise ValueError(f"{path}: unexpected schema line {header!r}")
        meta = dict(item.split("=", 1) for item in header[len(f"# {TRACE_SCHEMA}"):].split())
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ("converged", "inner_iters") else float(v)) for k, v in r.items()})
    return {"failed": meta.get("failed") == "1"}, rows


def cmd_closedloop(args) -> int:
    config = _load(args.scenario)
    changes = {}
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.ta is not None:
        if args.ta < 0:
            raise InputError("--ta must be >= 0")
        changes["t_a"] = args.ta
    if args.duration is not None:
        changes["sim_duration"] = args.duration
    if changes:
        config = _override(config, **changes)
    settings = _settings(config, args)
    trace = run_closed_loop(config, settings)
    if args.out is None or args.out == "-":
        _write_trace(sys.stdout, config, trace)
    else:
        write_trace_csv(args.out, config, trace)
        log.info("wrote %d steps to %s", len(trace.t), args.out)
    return 1 if trace.failed else 0


def cmd_export(args) -> int:
    if args.name not in SCENARIOS:
        raise InputError(f"unknown scenario {args.name!r}; expected one of {SCENARIOS}")
    config = make_scenario(args.name)
    if args.out is None or args.out == "-":
        sys.stdout.write(yaml.safe_dump(config.to_dict(), sort_keys=False))
    else:
        save_scenario(config, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskbmpc", description="Risk-aware branch MPC for intersection scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="one open-loop solve from the scenario's initial state")
    p.add_argument("scenario", help="scenario YAML file or TS1 / TS2")
    p.add_argument("--alpha", type=float, help="CVaR risk level in [0, 1]")
    p.add_argument("--rho0", type=float, help="initial regularization weight (absolute; needs --gamma)")
    p.add_argument("--gamma", type=float, help="ascent step size (absolute; gamma * rho0 < 1)")
    p.add_argument("--nominal", action="store_true", help="disable the risk ascent (q stays p)")
    p.add_argument("--parallel", action="store_true", help="fan branch backward passes out to threads")
    p.add_argument("--out", help="result JSON path (default: stdout)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("montecarlo", help="open-loop solves from perturbed initial states")
    p.add_argument("scenario")
    p.add_argument("--n", type=int, default=100, help="number of perturbed starts")
    p.add_argument("--seed", type=int, default=0, help="first seed; samples use seed .. seed + n - 1")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--alpha", type=float)
    p.add_argument("--skip-nominal", action="store_true", help="do not run the nominal comparison")
    p.add_argument("--out", help="summary JSON path; per-sample CSVs go next to it")
    p.add_argument("--csv", help="per-sample CSV path (timings go to <stem>_timing.csv)")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("closedloop", help="receding-horizon simulation with the intent-reveal switch")
    p.add_argument("scenario")
    p.add_argument("--alpha", type=float)
    p.add_argument("--ta", type=float, help="intent-reveal time in seconds")
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--nominal", action="store_true")
    p.add_argument("--out", help="trace CSV path (default: stdout)")
    p.set_defaults(func=cmd_closedloop)

    p = sub.add_parser("export-scenario", help="write a built-in scenario as YAML")
    p.add_argument("name", help="TS1 or TS2")
    p.add_argument("--out", help="YAML path (default: stdout)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("RISKBMPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"riskbmpc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
