"""Entropy-regularized constrained revenue maximization over category simplices.

The coefficient table turns every business metric into a linear form in the
policy ``x``; each fractional metric constraint ``lo <= N(x)/D(x) <= hi`` is
therefore transcribed into two linear rows ``N - hi*D <= 0`` and
``lo*D - N <= 0``, valid because the denominators (expected impressions,
clicks, conversions, request counts) are strictly positive for any simplex
point with a nonzero column.  The solver minimizes

    -r.x + nu * sum(max(x, eps) * ln(max(x, eps)))
    + sum_k [ lambda_k g_k(x) + mu/2 * max(0, g_k(x))^2 ]

with projected gradient over the per-category simplices in the inner loop,
first-order multiplier updates outside, and a tenfold penalty growth whenever
the maximum violation fails to shrink by the configured ratio.  Inequalities
get the one-sided quadratic penalty; the simplex itself is handled by
projection so iterates stay interpretable probabilities throughout.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .errors import ConfigError, ProblemBuildError, SolverNumericError
from .simulator import CoefficientTable, MetricsReport

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITERATIONS = "max_iterations"


# ---------------------------------------------------------------------------
# Targets and problem construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintTargets:
    """Relative deltas vs baseline; ``ctr_min=0.01`` means CTR >= baseline*1.01.

    ``ctr_mode="raw"`` constrains total expected clicks instead of the
    clicks/impressions ratio; ``pvr_mode="slots"`` uses filled/available slots
    instead of the share of requests with at least one ad.
    """

    ctr_min: float | None = None
    cpc_min: float | None = None
    cpc_max: float | None = None
    pvr_min: float | None = None
    pvr_max: float | None = None
    cvr_min: float | None = None
    cpa_min: float | None = None
    cpa_max: float | None = None
    ctr_mode: str = "ratio"
    pvr_mode: str = "requests"

    def __post_init__(self):
        for lo_name, hi_name in (("cpc_min", "cpc_max"), ("pvr_min", "pvr_max"),
                                 ("cpa_min", "cpa_max")):
            lo, hi = getattr(self, lo_name), getattr(self, hi_name)
            if lo is not None and hi is not None and lo > hi:
                raise ConfigError(f"{lo_name} > {hi_name} ({lo} > {hi})")
        if self.ctr_mode not in ("ratio", "raw"):
            raise ConfigError(f"ctr_mode must be 'ratio' or 'raw', got {self.ctr_mode!r}")
        if self.pvr_mode not in ("requests", "slots"):
            raise ConfigError(f"pvr_mode must be 'requests' or 'slots', got {self.pvr_mode!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintTargets":
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class ConstraintRow:
    """One linear inequality ``a.x + b <= 0`` (coefficients row-normalized)."""

    name: str
    a: np.ndarray
    b: float
    scale: float   # divisor applied to the raw row; raw residual = scale * (a.x + b)


@dataclass
class ProblemSpec:
    categories: tuple[str, ...]
    k: int
    revenue: np.ndarray            # (n,) objective coefficients, n = C*K
    rows: list[ConstraintRow]
    nu: float
    objective_scale: float = 1.0   # raw revenue sums were divided by this

    @property
    def n(self) -> int:
        return len(self.categories) * self.k

    def block(self, ci: int) -> slice:
        return slice(ci * self.k, (ci + 1) * self.k)


def _concat_columns(table: CoefficientTable, attr: str) -> np.ndarray:
    return np.concatenate([getattr(table.blocks[c], attr) for c in table.categories])


def _constant_form(table: CoefficientTable, per_category: Mapping[str, float]) -> np.ndarray:
    # A per-request constant is linear in x because each block sums to one.
    parts = [np.full(table.k, per_category[c]) for c in table.categories]
    return np.concatenate(parts)


def _bound(baseline_value: float | None, delta: float, metric: str) -> float:
    if baseline_value is None:
        raise ProblemBuildError(
            f"baseline {metric} is undefined (zero denominator); cannot target it"
        )
    return baseline_value * (1.0 + delta)


def build_problem(
    table: CoefficientTable,
    baseline: MetricsReport,
    targets: ConstraintTargets,
    nu: float = 0.0,
    *,
    normalize_objective: bool = True,
) -> ProblemSpec:
    """Transcribe targets into normalized linear rows over the concatenated x.

    With ``normalize_objective`` the revenue coefficients are divided by the
    request count, i.e. the objective is mean revenue per request.  The
    optimizer is invariant to this positive rescaling at ``nu=0``; for
    ``nu > 0`` it fixes the scale against which the entropy weight is defined,
    keeping a given ``nu`` meaningful across log sizes.
    """
    if nu < 0:
        raise ConfigError(f"nu must be >= 0, got {nu}")
    w_clicks = _concat_columns(table, "clicks")
    w_imps = _concat_columns(table, "filled_slots")
    w_rev = _concat_columns(table, "revenue")
    w_conv = _concat_columns(table, "conversions")
    w_hasad = _concat_columns(table, "requests_with_ad")
    w_requests = _constant_form(
        table, {c: float(table.blocks[c].n_requests) for c in table.categories}
    )
    w_slots = _constant_form(
        table, {c: table.blocks[c].n_slots_available for c in table.categories}
    )

    rows: list[ConstraintRow] = []

    def add_row(name: str, a: np.ndarray, b: float = 0.0) -> None:
        scale = max(float(np.abs(a).max(initial=0.0)), abs(b))
        if scale == 0.0:
            raise ProblemBuildError(f"constraint {name} has all-zero coefficients")
        rows.append(ConstraintRow(name=name, a=a / scale, b=b / scale, scale=scale))

    if targets.ctr_min is not None:
        if targets.ctr_mode == "ratio":
            bound = _bound(baseline.ctr, targets.ctr_min, "CTR")
            add_row("ctr_min", bound * w_imps - w_clicks)
        else:
            bound = _bound(baseline.clicks if baseline.clicks > 0 else None,
                           targets.ctr_min, "clicks")
            add_row("ctr_min", -w_clicks, bound)

    if targets.cpc_min is not None:
        bound = _bound(baseline.cpc, targets.cpc_min, "CPC")
        add_row("cpc_min", bound * w_clicks - w_rev)
    if targets.cpc_max is not None:
        bound = _bound(baseline.cpc, targets.cpc_max, "CPC")
        add_row("cpc_max", w_rev - bound * w_clicks)

    if targets.pvr_min is not None or targets.pvr_max is not None:
        if targets.pvr_mode == "requests":
            num, den, base = w_hasad, w_requests, baseline.pvr
        else:
            num, den, base = w_imps, w_slots, baseline.pvr_slot_fill
        if targets.pvr_min is not None:
            add_row("pvr_min", _bound(base, targets.pvr_min, "PVR") * den - num)
        if targets.pvr_max is not None:
            add_row("pvr_max", num - _bound(base, targets.pvr_max, "PVR") * den)

    if targets.cvr_min is not None:
        bound = _bound(baseline.cvr, targets.cvr_min, "CVR")
        add_row("cvr_min", bound * w_clicks - w_conv)

    if targets.cpa_min is not None:
        bound = _bound(baseline.cpa, targets.cpa_min, "CPA")
        add_row("cpa_min", bound * w_conv - w_rev)
    if targets.cpa_max is not None:
        bound = _bound(baseline.cpa, targets.cpa_max, "CPA")
        add_row("cpa_max", w_rev - bound * w_conv)

    scale = float(table.n_requests) if normalize_objective and table.n_requests > 0 else 1.0
    return ProblemSpec(
        categories=table.categories,
        k=table.k,
        revenue=w_rev / scale,
        rows=rows,
        nu=nu,
        objective_scale=scale,
    )


# ---------------------------------------------------------------------------
# Simplex projection
# ---------------------------------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sorted-threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, v.size + 1)
    thresh = (css - 1.0) / ks
    # index 0 always qualifies: u[0] - (u[0]-1) = 1 > 0
    last = np.nonzero(u - thresh > 0)[0][-1]
    return np.maximum(v - thresh[last], 0.0)


# ---------------------------------------------------------------------------
# Augmented-Lagrangian solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    mu0: float = 1.0
    mu_growth: float = 10.0
    violation_decrease: float = 0.25
    tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 2000
    armijo_shrink: float = 0.5
    armijo_c: float = 1e-4
    entropy_eps: float = 1e-12
    mu_max: float = 1e8

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class Solution:
    x: dict[str, np.ndarray]
    status: str
    objective: float               # -r.x + nu*entropy term, in problem scale
    residuals: dict[str, float]    # raw-unit residuals g_k * scale_k (<= 0 is satisfied)
    duals: dict[str, float]
    outer_iterations: int
    inner_iterations: int
    mu_final: float
    nu: float
    revenue: float = 0.0           # r.x at the solution, in problem scale

    def entropy(self) -> float:
        """Shannon entropy of the policy, summed over categories."""
        total = 0.0
        for v in self.x.values():
            pos = v[v > 0]
            total -= float((pos * np.log(pos)).sum())
        return total


def _flatten(x: Mapping[str, np.ndarray], categories) -> np.ndarray:
    return np.concatenate([np.asarray(x[c], dtype=np.float64) for c in categories])


def _split(x: np.ndarray, categories, k) -> dict[str, np.ndarray]:
    return {c: x[i * k : (i + 1) * k].copy() for i, c in enumerate(categories)}


class _AugmentedObjective:
    """Value/gradient of the augmented Lagrangian at fixed (lambda, mu)."""

    def __init__(self, problem: ProblemSpec, lam: np.ndarray, mu: float, eps: float):
        self.r = problem.revenue
        self.nu = problem.nu
        self.eps = eps
        self.lam = lam
        self.mu = mu
        if problem.rows:
            self.A = np.stack([row.a for row in problem.rows])
            self.b = np.array([row.b for row in problem.rows])
        else:
            self.A = np.zeros((0, problem.n))
            self.b = np.zeros(0)

    def constraints(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b

    def objective(self, x: np.ndarray) -> float:
        # Entropy clamped inside the log: value x*ln(max(x,eps)) keeps the
        # gradient finite at the boundary without creating spurious
        # projected-gradient fixed points at simplex vertices.
        val = -float(self.r @ x)
        if self.nu > 0:
            m = np.maximum(x, self.eps)
            val += self.nu * float((x * np.log(m)).sum())
        return val

    def value(self, x: np.ndarray) -> float:
        g = self.constraints(x)
        viol = np.maximum(g, 0.0)
        return self.objective(x) + float(self.lam @ g) + 0.5 * self.mu * float(viol @ viol)

    def grad(self, x: np.ndarray) -> np.ndarray:
        out = -self.r.copy()
        if self.nu > 0:
            m = np.maximum(x, self.eps)
            ent = self.nu * (np.log(m) + np.where(x > self.eps, 1.0, 0.0))
            out += ent
        if self.A.shape[0]:
            g = self.constraints(x)
            out += self.A.T @ (self.lam + self.mu * np.maximum(g, 0.0))
        return out


def _project_blocks(x: np.ndarray, n_cat: int, k: int) -> np.ndarray:
    out = np.empty_like(x)
    for ci in range(n_cat):
        out[ci * k : (ci + 1) * k] = project_simplex(x[ci * k : (ci + 1) * k])
    return out


def _inner_minimize(
    fn: _AugmentedObjective,
    x: np.ndarray,
    n_cat: int,
    k: int,
    cfg: SolverConfig,
    outer_it: int,
):
    """Projected gradient with BB step sizes and Armijo backtracking.

    Returns ``(x, stationarity, iterations)`` where stationarity is the
    infinity norm of the unit-step projected-gradient residual.
    """
    f_x = fn.value(x)
    if not np.isfinite(f_x):
        raise SolverNumericError("augmented objective is not finite", outer_it, 0)
    grad = fn.grad(x)
    t = 1.0 / max(1.0, float(np.abs(grad).max(initial=0.0)))
    prev_x = None
    prev_grad = None
    stationarity = np.inf
    stall_count = 0

    for it in range(cfg.max_inner):
        stationarity = float(np.abs(x - _project_blocks(x - grad, n_cat, k)).max(initial=0.0))
        if stationarity <= cfg.tol:
            return x, stationarity, it

        if prev_x is not None:
            s = x - prev_x
            y = grad - prev_grad
            sy = float(s @ y)
            if sy > 0:
                t = float(s @ s) / sy
        t = min(max(t, 1e-14), 1e14)

        step = t
        accepted = False
        for _ in range(60):
            x_new = _project_blocks(x - step * grad, n_cat, k)
            d = x_new - x
            d_norm = float(np.abs(d).max(initial=0.0))
            if d_norm == 0.0:
                break
            f_new = fn.value(x_new)
            if not np.isfinite(f_new):
                raise SolverNumericError("augmented objective overflowed", outer_it, it)
            if f_new <= f_x + cfg.armijo_c * float(grad @ d):
                accepted = True
                break
            step *= cfg.armijo_shrink
        if not accepted:
            # No descent direction left at float precision: treat as converged.
            return x, stationarity, it
        if f_x - f_new <= 1e-15 * max(1.0, abs(f_x)):
            stall_count += 1
            if stall_count >= 3:
                # Progress pinned at float noise; further iterations cannot help.
                x = x_new
                stationarity = float(
                    np.abs(x - _project_blocks(x - fn.grad(x), n_cat, k)).max(initial=0.0)
                )
                return x, stationarity, it + 1
        else:
            stall_count = 0

        prev_x, prev_grad = x, grad
        x, f_x = x_new, f_new
        grad = fn.grad(x)

    stationarity = float(np.abs(x - _project_blocks(x - grad, n_cat, k)).max(initial=0.0))
    return x, stationarity, cfg.max_inner


def solve(problem: ProblemSpec, cfg: SolverConfig | None = None) -> Solution:
    """Augmented-Lagrangian solve; deterministic from the uniform start.

    ``optimal`` requires feasibility within tolerance plus a convergence
    certificate: either inner stationarity within tolerance, or (for the
    degenerate-dual cycling common in pure LP instances at nu=0) three
    consecutive feasible outer iterations without material improvement of the
    best feasible objective, in which case the best feasible iterate is
    returned.  ``infeasible`` means the penalty was exhausted while the
    violation stayed above tolerance.  The penalty grows only while actually
    infeasible, so feasible problems are never pushed into a stiffness regime
    that would misreport them.
    """
    cfg = cfg or SolverConfig()
    n_cat, k = len(problem.categories), problem.k
    x = np.full(problem.n, 1.0 / k)
    lam = np.zeros(len(problem.rows))
    mu = cfg.mu0
    prev_viol = np.inf
    best_obj = np.inf
    best_x = None
    best_lam = lam
    lam_sum = np.zeros_like(lam)
    lam_count = 0
    stalled = 0
    status = STATUS_MAX_ITERATIONS
    total_inner = 0
    outer = 0

    def consider(candidate_x, candidate_lam, fn_eval):
        """Keep the lowest-objective feasible iterate seen so far."""
        nonlocal best_obj, best_x, best_lam, stalled
        g_c = fn_eval.constraints(candidate_x)
        if float(np.maximum(g_c, 0.0).max(initial=0.0)) > cfg.tol:
            return False
        obj_c = fn_eval.objective(candidate_x)
        if obj_c < best_obj - 1e-9 * max(1.0, abs(obj_c)):
            best_obj, best_x, best_lam = obj_c, candidate_x.copy(), candidate_lam.copy()
            stalled = 0
            return True
        stalled += 1
        return False

    for outer in range(1, cfg.max_outer + 1):
        fn = _AugmentedObjective(problem, lam, mu, cfg.entropy_eps)
        x, stationarity, inner_its = _inner_minimize(fn, x, n_cat, k, cfg, outer)
        total_inner += inner_its

        g = fn.constraints(x)
        viol = float(np.maximum(g, 0.0).max(initial=0.0))
        if viol <= cfg.tol:
            consider(x, lam, fn)
            if stationarity <= cfg.tol:
                status = STATUS_OPTIMAL
                break
            lam_sum += lam
            lam_count += 1
            # Degenerate duals cycle around their optimum at nu=0; the ergodic
            # dual average converges where the raw iterates do not, so polish
            # with it once progress stalls and keep the best feasible point.
            if problem.rows and stalled >= 3:
                lam_bar = lam_sum / lam_count
                fn_bar = _AugmentedObjective(problem, lam_bar, mu, cfg.entropy_eps)
                x_bar, stat_bar, its_bar = _inner_minimize(fn_bar, x, n_cat, k, cfg, outer)
                total_inner += its_bar
                consider(x_bar, lam_bar, fn_bar)
                g_bar = fn_bar.constraints(x_bar)
                if (float(np.maximum(g_bar, 0.0).max(initial=0.0)) <= cfg.tol
                        and stat_bar <= cfg.tol):
                    x, lam = x_bar, lam_bar
                    status = STATUS_OPTIMAL
                    break
                status = STATUS_OPTIMAL
                x, lam = best_x, best_lam
                break

        lam = np.maximum(0.0, lam + mu * g)
        if viol > cfg.tol and viol > cfg.violation_decrease * prev_viol:
            mu = min(mu * cfg.mu_growth, cfg.mu_max)
        if mu >= cfg.mu_max and viol > cfg.tol:
            status = STATUS_INFEASIBLE
            break
        prev_viol = viol

    if status == STATUS_MAX_ITERATIONS and best_x is not None:
        x, lam = best_x, best_lam

    fn = _AugmentedObjective(problem, lam, mu, cfg.entropy_eps)
    g = fn.constraints(x)
    residuals = {row.name: float(g[i] * row.scale) for i, row in enumerate(problem.rows)}
    duals = {row.name: float(lam[i]) for i, row in enumerate(problem.rows)}
    return Solution(
        x=_split(x, problem.categories, k),
        status=status,
        objective=fn.objective(x),
        residuals=residuals,
        duals=duals,
        outer_iterations=outer,
        inner_iterations=total_inner,
        mu_final=mu,
        nu=problem.nu,
        revenue=float(problem.revenue @ x),
    )


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

_BRUTE_FORCE_BUDGET = 60_000_000  # max simplex-point pairs to enumerate


def _simplex_grid(k: int, units: int) -> np.ndarray:
    """All points of the k-simplex with coordinates in multiples of 1/units."""
    points = []
    for dividers in itertools.combinations(range(units + k - 1), k - 1):
        prev = -1
        counts = []
        for d in dividers:
            counts.append(d - prev - 1)
            prev = d
        counts.append(units + k - 2 - prev)
        points.append(counts)
    return np.asarray(points, dtype=np.float64) / units


def brute_force_solve(
    problem: ProblemSpec, grid_step: float = 0.01, feas_tol: float = 1e-9
) -> Solution:
    """Exhaustive search over discretized simplices; exact test oracle.

    Supports one or two categories; the point budget guards against
    accidentally enormous enumerations.
    """
    n_cat, k = len(problem.categories), problem.k
    if n_cat > 2:
        raise ConfigError("brute force supports at most 2 categories")
    units = round(1.0 / grid_step)
    if abs(units * grid_step - 1.0) > 1e-9:
        raise ConfigError(f"grid_step {grid_step} must evenly divide 1")

    grids = [_simplex_grid(k, units) for _ in range(n_cat)]
    total = int(np.prod([g.shape[0] for g in grids]))
    if total > _BRUTE_FORCE_BUDGET:
        raise ConfigError(f"brute-force enumeration of {total} points exceeds budget")

    def block_objective(ci: int, pts: np.ndarray) -> np.ndarray:
        vals = -(pts @ problem.revenue[problem.block(ci)])
        if problem.nu > 0:
            m = np.maximum(pts, 1e-12)
            vals += problem.nu * (m * np.log(m)).sum(axis=1)
        return vals

    if problem.rows:
        A = np.stack([row.a for row in problem.rows])
        b = np.array([row.b for row in problem.rows])
    else:
        A = np.zeros((0, problem.n))
        b = np.zeros(0)

    block_g = [grids[ci] @ A[:, problem.block(ci)].T for ci in range(n_cat)]
    block_f = [block_objective(ci, grids[ci]) for ci in range(n_cat)]

    best_val = np.inf
    best_point = None
    least_viol = np.inf
    least_viol_point = None

    if n_cat == 1:
        g_all = block_g[0] + b
        viol = np.maximum(g_all, 0.0).max(axis=1) if problem.rows else np.zeros(len(grids[0]))
        feasible = viol <= feas_tol
        if feasible.any():
            idx = int(np.argmin(np.where(feasible, block_f[0], np.inf)))
            best_val, best_point = float(block_f[0][idx]), (idx,)
        idx_v = int(np.argmin(viol))
        least_viol, least_viol_point = float(viol[idx_v]), (idx_v,)
    else:
        g1, g2 = block_g
        f1, f2 = block_f
        for p in range(grids[0].shape[0]):
            g_all = g2 + (g1[p] + b)
            viol = np.maximum(g_all, 0.0).max(axis=1) if problem.rows else np.zeros(len(grids[1]))
            feasible = viol <= feas_tol
            if feasible.any():
                vals = np.where(feasible, f1[p] + f2, np.inf)
                q = int(np.argmin(vals))
                if vals[q] < best_val:
                    best_val, best_point = float(vals[q]), (p, q)
            q_v = int(np.argmin(viol))
            if viol[q_v] < least_viol:
                least_viol, least_viol_point = float(viol[q_v]), (p, q_v)

    if best_point is None:
        point, status, objective = least_viol_point, STATUS_INFEASIBLE, np.inf
    else:
        point, status, objective = best_point, STATUS_OPTIMAL, best_val

    x = {c: grids[ci][point[ci]].copy() for ci, c in enumerate(problem.categories)}
    flat = _flatten(x, problem.categories)
    g = A @ flat + b if problem.rows else np.zeros(0)
    return Solution(
        x=x,
        status=status,
        objective=objective if np.isfinite(objective) else float("inf"),
        residuals={row.name: float(g[i] * row.scale) for i, row in enumerate(problem.rows)},
        duals={row.name: 0.0 for row in problem.rows},
        outer_iterations=0,
        inner_iterations=total,
        mu_final=0.0,
        nu=problem.nu,
        revenue=float(problem.revenue @ flat),
    )


def feasibility_report(problem: ProblemSpec, solution: Solution, tol: float = 1e-6) -> list[dict]:
    """Per-constraint residuals/duals; ``satisfied`` is judged on scaled rows."""
    flat = _flatten(solution.x, problem.categories)
    out = []
    for row in problem.rows:
        g = float(row.a @ flat + row.b)
        out.append(
            {
                "name": row.name,
                "residual": g * row.scale,
                "residual_scaled": g,
                "dual": solution.duals.get(row.name, 0.0),
                "satisfied": g <= tol,
            }
        )
    return out
