"""End-to-end experiment orchestration: gen -> calibrate -> simulate -> solve -> apply.

A single JSON config describes the synthetic world, the train/held-out split,
the parameter grid, calibration, targets and solver settings.  Every stage
writes its artifacts under one output directory and records provenance (config
hash plus seeds) either in the artifact's own header or in ``manifest.json``;
no artifact embeds wall-clock state, so reruns with identical config and seeds
are byte-identical.  Stages whose outputs already exist are skipped unless
forced.

The held-out log gets freshly re-noised predicted CTRs around the ground
truth, emulating the train/serve distribution gap that entropy regularization
is meant to absorb.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import _kernels, calibration, datagen, ndjson, policy as policy_mod, simulator
from .auction import MechanismParams
from .errors import ConfigError, DataError
from .optimizer import (
    STATUS_INFEASIBLE,
    ConstraintTargets,
    SolverConfig,
    build_problem,
    solve,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2

CONFIG_VERSION = 1


@dataclass
class ExperimentConfig:
    synth: datagen.SynthConfig
    baseline: MechanismParams
    grid: simulator.GridSpec
    targets: ConstraintTargets = field(default_factory=ConstraintTargets)
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    split_fraction: float = 0.5          # held-out share of generated requests
    calibration_bins: int = 50
    nu: float = 0.0
    nu_sweep: tuple[float, ...] = (0.0, 1e-4, 1e-2, 1.0)
    target_sweep: tuple[ConstraintTargets, ...] = ()
    mc_reps: int = 100

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must be in (0, 1)")
        if self.calibration_bins < 1:
            raise ConfigError("calibration_bins must be >= 1")

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "synth": self.synth.to_dict(),
            "baseline": self.baseline.to_dict(),
            "grid": self.grid.to_dict(),
            "split_fraction": self.split_fraction,
            "calibration_bins": self.calibration_bins,
            "targets": self.targets.to_dict(),
            "solver": self.solver.to_dict(),
            "nu": self.nu,
            "nu_sweep": list(self.nu_sweep),
            "target_sweep": [t.to_dict() for t in self.target_sweep],
            "mc_reps": self.mc_reps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        return cls(
            synth=datagen.SynthConfig.from_dict(d["synth"]),
            baseline=MechanismParams.from_dict(d["baseline"]),
            grid=simulator.GridSpec.from_dict(d["grid"]),
            targets=ConstraintTargets.from_dict(d.get("targets", {})),
            solver=SolverConfig.from_dict(d.get("solver", {})),
            seed=int(d.get("seed", 0)),
            split_fraction=float(d.get("split_fraction", 0.5)),
            calibration_bins=int(d.get("calibration_bins", 50)),
            nu=float(d.get("nu", 0.0)),
            nu_sweep=tuple(d.get("nu_sweep", (0.0, 1e-4, 1e-2, 1.0))),
            target_sweep=tuple(
                ConstraintTargets.from_dict(t) for t in d.get("target_sweep", ())
            ),
            mc_reps=int(d.get("mc_reps", 100)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def config_hash(self) -> str:
        return hashlib.sha256(ndjson.dumps_canonical(self.to_dict()).encode()).hexdigest()[:16]

    # Derived seeds for the stochastic stages
    @property
    def impression_seed(self) -> int:
        return self.seed + 1

    @property
    def heldout_noise_seed(self) -> int:
        return self.seed + 2


class Artifacts:
    """File layout inside one experiment output directory."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    @property
    def manifest(self) -> Path:
        return self.path("manifest.json")

    train_replay = property(lambda self: self.path("train_replay.ndjson.gz"))
    heldout_replay = property(lambda self: self.path("heldout_replay.ndjson.gz"))
    truth = property(lambda self: self.path("truth.ndjson.gz"))
    impressions = property(lambda self: self.path("impressions.ndjson.gz"))
    calibration = property(lambda self: self.path("calibration.ndjson"))
    table = property(lambda self: self.path("table.aopt1"))
    baseline_train = property(lambda self: self.path("baseline_train.json"))
    policy = property(lambda self: self.path("policy.ndjson"))
    apply_report = property(lambda self: self.path("heldout_report.json"))
    sweep_targets_json = property(lambda self: self.path("sweep_targets.json"))
    sweep_nu_json = property(lambda self: self.path("sweep_nu.json"))
    report_txt = property(lambda self: self.path("report.txt"))
    report_data = property(lambda self: self.path("report_data.json"))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _update_manifest(art: Artifacts, config: ExperimentConfig, stage: str, files: Sequence[Path]) -> None:
    manifest = {"config_hash": config.config_hash(), "seed": config.seed, "stages": {}}
    if art.manifest.exists():
        manifest = _read_json(art.manifest)
        manifest["config_hash"] = config.config_hash()
        manifest["seed"] = config.seed
    manifest.setdefault("stages", {})[stage] = {"files": sorted(f.name for f in files)}
    _write_json(art.manifest, manifest)


def _provenance(config: ExperimentConfig, stage: str) -> dict:
    return {"config_hash": config.config_hash(), "seed": config.seed, "stage": stage}


def _outputs_exist(paths: Sequence[Path]) -> bool:
    return all(p.exists() for p in paths)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_gen(config: ExperimentConfig, art: Artifacts, force: bool = False) -> bool:
    """Generate the split replay logs, ground truth and baseline impressions."""
    outputs = [art.train_replay, art.heldout_replay, art.truth, art.impressions]
    if not force and _outputs_exist(outputs):
        return False
    log, truth = datagen.generate_replay_log(config.synth)
    n_train = len(log) - int(round(len(log) * config.split_fraction))
    train, heldout = log[:n_train], log[n_train:]
    heldout = datagen.renoise_predictions(heldout, truth, config.synth, config.heldout_noise_seed)

    train_ids = {r.request_id for r in train}
    if train_ids & {r.request_id for r in heldout}:
        raise DataError("train and held-out logs share request ids")

    impressions = datagen.generate_impression_log(
        train, truth, config.baseline, config.impression_seed
    )
    datagen.store_replay_log(train, art.train_replay)
    datagen.store_replay_log(heldout, art.heldout_replay)
    datagen.store_ground_truth(truth, art.truth)
    datagen.store_impression_log(impressions, art.impressions)
    _update_manifest(art, config, "gen", outputs)
    return True


def stage_calibrate(config: ExperimentConfig, art: Artifacts, force: bool = False) -> bool:
    if not force and _outputs_exist([art.calibration]):
        return False
    impressions = datagen.load_impression_log(art.impressions)
    cal = calibration.fit_calibration(impressions, config.calibration_bins)
    calibration.store_calibration_map(cal, art.calibration, _provenance(config, "calibrate"))
    _update_manifest(art, config, "calibrate", [art.calibration])
    return True


def stage_simulate(config: ExperimentConfig, art: Artifacts, force: bool = False) -> bool:
    """Build the train coefficient table plus the train baseline metrics."""
    outputs = [art.table, art.baseline_train]
    if not force and _outputs_exist(outputs):
        return False
    train = datagen.load_replay_log(art.train_replay)
    cal, _ = calibration.load_calibration_map(art.calibration)
    categories = tuple(sorted({r.category for r in train}))
    grid = simulator.grid_params(config.baseline, config.grid, categories=categories)
    table = simulator.build_coefficient_table(train, grid, cal)
    simulator.write_coefficient_table(table, art.table, _provenance(config, "simulate"))
    base = simulator.baseline_metrics(train, config.baseline, cal)
    _write_json(art.baseline_train, base.to_dict())
    _update_manifest(art, config, "simulate", outputs)
    return True


def stage_solve(
    config: ExperimentConfig,
    art: Artifacts,
    force: bool = False,
    targets: ConstraintTargets | None = None,
    nu: float | None = None,
):
    """Solve the constrained program and persist the policy; returns the solution."""
    targets = config.targets if targets is None else targets
    nu = config.nu if nu is None else nu
    table, _ = simulator.read_coefficient_table(art.table)
    base = simulator.MetricsReport.from_dict(_read_json(art.baseline_train))
    problem = build_problem(table, base, targets, nu)
    solution = solve(problem, config.solver)
    prov = _provenance(config, "solve")
    prov["targets_hash"] = hashlib.sha256(targets.canonical_json().encode()).hexdigest()[:16]
    prov["targets"] = targets.to_dict()
    pol = policy_mod.Policy.from_solution(solution, table.grid, prov)
    if force or not art.policy.exists():
        policy_mod.store_policy(pol, art.policy)
        _update_manifest(art, config, "solve", [art.policy])
    return solution, pol


def stage_apply(
    config: ExperimentConfig, art: Artifacts, force: bool = False, mode: str = "expectation"
) -> dict:
    """Evaluate the stored policy on the held-out log; writes the report."""
    if not force and art.apply_report.exists():
        return _read_json(art.apply_report)
    pol = policy_mod.load_policy(art.policy)
    heldout = datagen.load_replay_log(art.heldout_replay)
    cal, _ = calibration.load_calibration_map(art.calibration)
    metrics = policy_mod.evaluate_policy(
        pol, heldout, cal, mode=mode, seed=config.seed, reps=config.mc_reps
    )
    heldout_base = simulator.baseline_metrics(heldout, config.baseline, cal)
    report = {
        "mode": mode,
        "policy_status": pol.provenance.get("status"),
        "metrics": metrics.to_dict(),
        "baseline": heldout_base.to_dict(),
        "deltas": metrics.deltas(heldout_base),
        "provenance": _provenance(config, "apply"),
    }
    _write_json(art.apply_report, report)
    _update_manifest(art, config, "apply", [art.apply_report])
    return report


def run_pipeline(
    config: ExperimentConfig,
    out_dir: str | Path,
    force: bool = False,
    threads: int | None = None,
) -> int:
    """Execute all stages in order; returns the process exit code."""
    if threads is not None:
        _kernels.set_threads(threads)
    art = Artifacts(out_dir)
    stage_gen(config, art, force)
    stage_calibrate(config, art, force)
    stage_simulate(config, art, force)
    solution, _ = stage_solve(config, art, force=True)
    stage_apply(config, art, force=True)
    write_report(config, art)
    return EXIT_INFEASIBLE if solution.status == STATUS_INFEASIBLE else EXIT_OK


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _ensure_upstream(config: ExperimentConfig, art: Artifacts) -> None:
    stage_gen(config, art)
    stage_calibrate(config, art)
    stage_simulate(config, art)


def _delta_row(deltas: dict) -> dict:
    order = ("revenue", "ctr", "cpc", "pvr", "cvr", "cpa")
    return {name: deltas.get(name) for name in order}


def sweep_targets(
    config: ExperimentConfig,
    out_dir: str | Path,
    targets_list: Sequence[ConstraintTargets] | None = None,
) -> tuple[list[dict], int]:
    """One solve + held-out evaluation per target set (constraint-efficacy table)."""
    art = Artifacts(out_dir)
    _ensure_upstream(config, art)
    targets_list = list(targets_list if targets_list is not None else config.target_sweep)
    if not targets_list:
        targets_list = [config.targets]

    table, _ = simulator.read_coefficient_table(art.table)
    base_train = simulator.MetricsReport.from_dict(_read_json(art.baseline_train))
    heldout = datagen.load_replay_log(art.heldout_replay)
    cal, _ = calibration.load_calibration_map(art.calibration)
    heldout_table = simulator.build_coefficient_table(heldout, table.grid, cal)
    heldout_base = simulator.baseline_metrics(heldout, config.baseline, cal)

    rows = []
    for targets in targets_list:
        problem = build_problem(table, base_train, targets, config.nu)
        solution = solve(problem, config.solver)
        row = {"targets": targets.to_dict(), "status": solution.status,
               "residuals": solution.residuals, "duals": solution.duals}
        if solution.status != STATUS_INFEASIBLE:
            train_metrics = simulator.aggregate_metrics(table, solution.x)
            held_metrics = simulator.aggregate_metrics(heldout_table, solution.x)
            row["train"] = _delta_row(train_metrics.deltas(base_train))
            row["heldout"] = _delta_row(held_metrics.deltas(heldout_base))
        rows.append(row)

    _write_json(art.sweep_targets_json, {"rows": rows, "provenance": _provenance(config, "sweep-targets")})
    _update_manifest(art, config, "sweep-targets", [art.sweep_targets_json])
    feasible = [r for r in rows if r["status"] != STATUS_INFEASIBLE]
    return rows, (EXIT_OK if feasible else EXIT_INFEASIBLE)


def sweep_nu(
    config: ExperimentConfig,
    out_dir: str | Path,
    nus: Sequence[float] | None = None,
) -> tuple[list[dict], int]:
    """Solve per entropy weight; report simulated (train) vs held-out metrics."""
    art = Artifacts(out_dir)
    _ensure_upstream(config, art)
    nus = list(nus if nus is not None else config.nu_sweep)

    table, _ = simulator.read_coefficient_table(art.table)
    base_train = simulator.MetricsReport.from_dict(_read_json(art.baseline_train))
    heldout = datagen.load_replay_log(art.heldout_replay)
    cal, _ = calibration.load_calibration_map(art.calibration)
    heldout_table = simulator.build_coefficient_table(heldout, table.grid, cal)
    heldout_base = simulator.baseline_metrics(heldout, config.baseline, cal)

    rows = []
    any_feasible = False
    for nu in nus:
        problem = build_problem(table, base_train, config.targets, nu)
        solution = solve(problem, config.solver)
        row = {"nu": nu, "status": solution.status, "entropy": solution.entropy(),
               "residuals": solution.residuals}
        if solution.status != STATUS_INFEASIBLE:
            any_feasible = True
            train_metrics = simulator.aggregate_metrics(table, solution.x)
            held_metrics = simulator.aggregate_metrics(heldout_table, solution.x)
            row["train"] = _delta_row(train_metrics.deltas(base_train))
            row["heldout"] = _delta_row(held_metrics.deltas(heldout_base))
        rows.append(row)

    _write_json(art.sweep_nu_json, {"rows": rows, "provenance": _provenance(config, "sweep-nu")})
    _update_manifest(art, config, "sweep-nu", [art.sweep_nu_json])
    return rows, (EXIT_OK if any_feasible else EXIT_INFEASIBLE)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

_PCT = ("revenue", "ctr", "cpc", "pvr", "cvr", "cpa")


def _fmt_delta(v) -> str:
    return f"{100 * v:+.3f}%" if v is not None else "   n/a"


def _delta_table(rows: list[dict], label_key: str, label_fmt=str) -> list[str]:
    head = f"{'case':<28} {'set':<9} " + " ".join(f"d{m.upper():<8}" for m in _PCT)
    lines = [head, "-" * len(head)]
    for row in rows:
        label = label_fmt(row[label_key])
        if row["status"] == STATUS_INFEASIBLE:
            worst = max(row["residuals"].items(), key=lambda kv: kv[1], default=("-", 0.0))
            lines.append(f"{label:<28} infeasible (binding: {worst[0]}, residual {worst[1]:.4g})")
            continue
        for split in ("train", "heldout"):
            if split in row:
                cells = " ".join(f"{_fmt_delta(row[split][m]):<9}" for m in _PCT)
                lines.append(f"{label:<28} {split:<9} {cells}")
    return lines


def write_report(config: ExperimentConfig, art: Artifacts) -> None:
    """Human-readable summary plus plot-ready series for whatever artifacts exist."""
    lines = [f"auctionopt experiment report (config {config.config_hash()}, seed {config.seed})", ""]
    data: dict = {"config_hash": config.config_hash(), "seed": config.seed}

    if art.apply_report.exists():
        rep = _read_json(art.apply_report)
        lines.append(f"held-out policy evaluation ({rep['mode']}, status {rep['policy_status']}):")
        for m in _PCT:
            lines.append(f"  {m.upper():<4} {_fmt_delta(rep['deltas'].get(m))}")
        lines.append("")
        data["heldout"] = rep

    if art.sweep_targets_json.exists():
        rows = _read_json(art.sweep_targets_json)["rows"]
        lines.append("target sweep:")
        lines.extend(_delta_table(rows, "targets", label_fmt=_describe_targets))
        lines.append("")
        data["sweep_targets"] = rows

    if art.sweep_nu_json.exists():
        rows = _read_json(art.sweep_nu_json)["rows"]
        lines.append("entropy-weight sweep:")
        lines.extend(_delta_table(rows, "nu", label_fmt=lambda nu: f"nu={nu:g}"))
        lines.append("")
        data["sweep_nu"] = rows
        data["nu_series"] = {
            "nu": [r["nu"] for r in rows],
            "train_revenue_delta": [r.get("train", {}).get("revenue") for r in rows],
            "heldout_revenue_delta": [r.get("heldout", {}).get("revenue") for r in rows],
            "entropy": [r.get("entropy") for r in rows],
        }

    art.report_txt.parent.mkdir(parents=True, exist_ok=True)
    art.report_txt.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(art.report_data, data)


def _describe_targets(t: dict) -> str:
    parts = []
    for key, short in (("ctr_min", "ctr>="), ("cpc_max", "cpc<="), ("cpc_min", "cpc>="),
                       ("pvr_min", "pvr>="), ("pvr_max", "pvr<="), ("cvr_min", "cvr>="),
                       ("cpa_max", "cpa<="), ("cpa_min", "cpa>=")):
        v = t.get(key)
        if v is not None:
            parts.append(f"{short}{100 * v:+g}%")
    return ",".join(parts) if parts else "unconstrained"
