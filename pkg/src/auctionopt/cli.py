"""Command-line interface.

Subcommands: gen, calibrate, simulate, solve, apply, sweep-targets, sweep-nu,
report, run.  Global flags: --config, --seed, --force, --out-dir, --threads.
Exit codes: 0 success, 2 infeasible-only results, 1 error.

Stage commands (calibrate/simulate/solve/apply) operate on explicit file
paths so artifacts can be produced or consumed outside the orchestrated
pipeline; gen/run/sweep-*/report are driven by the experiment config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

from . import _kernels, calibration, datagen, pipeline, policy as policy_mod, simulator
from .errors import ConfigError
from .optimizer import STATUS_INFEASIBLE, ConstraintTargets, build_problem, solve
from .pipeline import EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, Artifacts, ExperimentConfig


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this command requires --config")
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        d = config.to_dict()
        d["seed"] = args.seed
        d["synth"]["seed"] = args.seed
        config = ExperimentConfig.from_dict(d)
    return config


def _parse_grid_spec(text: str) -> tuple[dict, simulator.GridSpec]:
    """Parse ``--grid`` as ``@file.json`` or ``key=value,...`` pairs.

    Keys: alpha, gamma, reserve, floor (center) and alpha_hw, gamma_hw,
    alpha_steps, gamma_steps (box).
    """
    if text.startswith("@"):
        with open(text[1:], "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return obj["center"], simulator.GridSpec.from_dict(obj["spec"])
    fields = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if not value:
            raise ConfigError(f"bad --grid entry {part!r}, expected key=value")
        fields[key.strip()] = float(value)
    center = {
        "alpha": fields.pop("alpha"),
        "gamma": fields.pop("gamma"),
        "reserve_score": fields.pop("reserve", 0.0),
        "price_floor": fields.pop("floor", 0.01),
    }
    spec = simulator.GridSpec(
        alpha_half_width=fields.pop("alpha_hw", 0.0),
        gamma_half_width=fields.pop("gamma_hw", 0.0),
        alpha_steps=int(fields.pop("alpha_steps", 1)),
        gamma_steps=int(fields.pop("gamma_steps", 1)),
    )
    if fields:
        raise ConfigError(f"unknown --grid keys: {sorted(fields)}")
    return center, spec


def _cmd_gen(args) -> int:
    config = _load_config(args)
    art = Artifacts(args.out_dir)
    stage_ran = pipeline.stage_gen(config, art, force=args.force)
    print(f"gen: {'wrote' if stage_ran else 'kept'} artifacts in {art.out_dir}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    impressions = datagen.load_impression_log(args.impressions)
    cal = calibration.fit_calibration(impressions, args.bins)
    calibration.store_calibration_map(cal, args.out)
    print(f"calibrate: fitted {len(cal.positions)} positions -> {args.out}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    log = datagen.load_replay_log(args.log)
    center_dict, spec = _parse_grid_spec(args.grid)
    from .auction import MechanismParams

    center = MechanismParams.from_dict(center_dict)
    cal, _ = calibration.load_calibration_map(args.calibration) if args.calibration else (None, None)
    categories = tuple(sorted({r.category for r in log}))
    grid = simulator.grid_params(center, spec, categories=categories)
    table = simulator.build_coefficient_table(log, grid, cal)
    simulator.write_coefficient_table(table, args.out)
    if args.baseline_out:
        base = simulator.baseline_metrics(log, center, cal)
        with open(args.baseline_out, "w", encoding="utf-8") as fh:
            json.dump(base.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"simulate: {table.n_requests} requests x K={table.k} -> {args.out}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    table, _ = simulator.read_coefficient_table(args.table)
    with open(args.baseline, "r", encoding="utf-8") as fh:
        base = simulator.MetricsReport.from_dict(json.load(fh))
    with open(args.targets, "r", encoding="utf-8") as fh:
        targets = ConstraintTargets.from_dict(json.load(fh))
    problem = build_problem(table, base, targets, args.nu)
    solution = solve(problem)
    prov = {
        "nu": args.nu,
        "targets": targets.to_dict(),
        "targets_hash": hashlib.sha256(targets.canonical_json().encode()).hexdigest()[:16],
    }
    pol = policy_mod.Policy.from_solution(solution, table.grid, prov)
    policy_mod.store_policy(pol, args.out)
    print(f"solve: status={solution.status} objective={solution.objective:.6g} -> {args.out}")
    for name, residual in sorted(solution.residuals.items()):
        print(f"  {name:<8} residual={residual:+.4g} dual={solution.duals[name]:.4g}")
    return EXIT_INFEASIBLE if solution.status == STATUS_INFEASIBLE else EXIT_OK


def _cmd_apply(args) -> int:
    pol = policy_mod.load_policy(args.policy)
    log = datagen.load_replay_log(args.log)
    cal, _ = calibration.load_calibration_map(args.calibration) if args.calibration else (None, None)
    mode = "monte_carlo" if args.mode == "mc" else "expectation"
    metrics = policy_mod.evaluate_policy(
        pol, log, cal, mode=mode, seed=args.seed or 0, reps=args.reps
    )
    report = {"mode": mode, "metrics": metrics.to_dict()}
    if args.baseline:
        with open(args.baseline, "r", encoding="utf-8") as fh:
            base = simulator.MetricsReport.from_dict(json.load(fh))
        report["baseline"] = base.to_dict()
        report["deltas"] = metrics.deltas(base)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"apply: {mode} evaluation of {len(log)} requests -> {args.out}")
    for key in ("revenue", "ctr", "cpc", "pvr", "cvr", "cpa"):
        value = report["metrics"].get(key)
        delta = report.get("deltas", {}).get(key)
        extra = f" ({100 * delta:+.3f}% vs baseline)" if delta is not None else ""
        print(f"  {key:<8} {value if value is not None else 'n/a'}{extra}")
    return EXIT_OK


def _cmd_run(args) -> int:
    config = _load_config(args)
    return pipeline.run_pipeline(config, args.out_dir, force=args.force, threads=args.threads)


def _cmd_sweep_targets(args) -> int:
    config = _load_config(args)
    _, code = pipeline.sweep_targets(config, args.out_dir)
    pipeline.write_report(config, Artifacts(args.out_dir))
    print(Artifacts(args.out_dir).report_txt.read_text())
    return code


def _cmd_sweep_nu(args) -> int:
    config = _load_config(args)
    _, code = pipeline.sweep_nu(config, args.out_dir)
    pipeline.write_report(config, Artifacts(args.out_dir))
    print(Artifacts(args.out_dir).report_txt.read_text())
    return code


def _cmd_report(args) -> int:
    config = _load_config(args)
    art = Artifacts(args.out_dir)
    pipeline.write_report(config, art)
    print(art.report_txt.read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auctionopt", description=__doc__)
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--force", action="store_true", help="recompute existing artifacts")
    parser.add_argument("--out-dir", default="out", help="artifact directory")
    parser.add_argument("--threads", type=int, default=None, help="kernel thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate synthetic replay/impression logs")

    p = sub.add_parser("calibrate", help="fit per-position isotonic calibration")
    p.add_argument("--impressions", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="build the coefficient table")
    p.add_argument("--log", required=True)
    p.add_argument("--grid", required=True, help="key=value,... or @spec.json")
    p.add_argument("--calibration", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline-out", default=None, help="also write baseline metrics JSON")

    p = sub.add_parser("solve", help="solve the constrained program")
    p.add_argument("--table", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--targets", required=True, help="targets config JSON")
    p.add_argument("--nu", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("apply", help="evaluate a policy on a replay log")
    p.add_argument("--policy", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--calibration", default=None)
    p.add_argument("--mode", choices=["expectation", "mc"], default="expectation")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--baseline", default=None, help="baseline metrics JSON for deltas")
    p.add_argument("--out", required=True)

    sub.add_parser("run", help="run the full pipeline")
    sub.add_parser("sweep-targets", help="solve once per target set")
    sub.add_parser("sweep-nu", help="solve once per entropy weight")
    sub.add_parser("report", help="summarize existing artifacts")
    return parser


_COMMANDS = {
    "gen": _cmd_gen,
    "calibrate": _cmd_calibrate,
    "simulate": _cmd_simulate,
    "solve": _cmd_solve,
    "apply": _cmd_apply,
    "run": _cmd_run,
    "sweep-targets": _cmd_sweep_targets,
    "sweep-nu": _cmd_sweep_nu,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        _kernels.set_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # deliberate: map any failure to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
