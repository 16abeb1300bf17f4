"""Stochastic mechanism policy: per-request parameter sampling and evaluation.

Serving draws one grid instance per request from the learned per-category
distribution (inverse-CDF over a unit uniform) and runs the auction with it.
Request-level rng streams are derived from the policy hash and the request id,
so "online" runs replay identically.  Unknown categories fall back to the
baseline parameters with a warning: serving never fails.

Policy file format (newline-delimited JSON): a header line
``{"format": "auctionopt-policy", "version": 1, "grid": ..., "provenance": ...}``
followed by one object per category with the probability vector, solver
status, residuals and duals.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .auction import AuctionOutcome, MechanismParams, run_auction
from .calibration import CalibrationMap
from .datagen import ReplayRecord
from .errors import ParseError
from .ndjson import dumps_canonical, open_text_read, open_text_write
from .optimizer import Solution
from .simulator import CoefficientTable, MetricsReport, ParamGrid, aggregate_metrics, build_coefficient_table

FILE_FORMAT = "auctionopt-policy"
FILE_VERSION = 1


@dataclass
class Policy:
    grid: ParamGrid
    x: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    _cdfs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for c, v in self.x.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.grid.k,):
                raise ValueError(f"policy vector for {c!r} has wrong length")
            if np.any(v < -1e-9) or abs(float(v.sum()) - 1.0) > 1e-9:
                raise ValueError(f"policy vector for {c!r} is not a probability vector")
            self.x[c] = v

    @classmethod
    def from_solution(cls, solution: Solution, grid: ParamGrid, provenance: dict | None = None) -> "Policy":
        prov = {
            "status": solution.status,
            "nu": solution.nu,
            "residuals": solution.residuals,
            "duals": solution.duals,
        }
        if provenance:
            prov.update(provenance)
        return cls(grid=grid, x={c: v.copy() for c, v in solution.x.items()}, provenance=prov)

    @property
    def fallback_params(self) -> MechanismParams:
        return self.grid.default_center

    def policy_hash(self) -> str:
        payload = {
            "grid": self.grid.to_dict(),
            "x": {c: [float(v) for v in vec] for c, vec in sorted(self.x.items())},
        }
        return hashlib.sha256(dumps_canonical(payload).encode("utf-8")).hexdigest()

    def _cdf(self, category: str) -> np.ndarray:
        cdf = self._cdfs.get(category)
        if cdf is None:
            cdf = np.cumsum(self.x[category])
            self._cdfs[category] = cdf
        return cdf


def sample_params(policy: Policy, category: str, rng: np.random.Generator) -> MechanismParams:
    """Draw one grid instance for the category; baseline fallback when unknown."""
    if category not in policy.x:
        warnings.warn(f"category {category!r} not in policy; serving baseline params", stacklevel=2)
        return policy.fallback_params
    u = rng.random()
    j = int(np.searchsorted(policy._cdf(category), u, side="right"))
    j = min(j, policy.grid.k - 1)
    return policy.grid.instance(category, j)


def _request_rng(policy: Policy, request_id: str) -> np.random.Generator:
    digest = hashlib.sha256(
        (policy.policy_hash() + ":" + request_id).encode("utf-8")
    ).digest()
    seeds = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.default_rng([int(s) for s in seeds])


def serve_request(
    policy: Policy,
    record: ReplayRecord,
    calib: CalibrationMap | None = None,
    rng: np.random.Generator | None = None,
) -> AuctionOutcome:
    """Sample a mechanism instance and run the request's auction with it."""
    if rng is None:
        rng = _request_rng(policy, record.request_id)
    params = sample_params(policy, record.category, rng)
    return run_auction(params, record, calib)


def evaluate_policy(
    policy: Policy,
    heldout: Sequence[ReplayRecord],
    calib: CalibrationMap | None = None,
    mode: str = "expectation",
    *,
    seed: int = 0,
    reps: int = 100,
    table: CoefficientTable | None = None,
) -> MetricsReport:
    """Held-out metrics of the policy.

    ``expectation`` computes the exact x-weighted metrics through the
    simulator (a prebuilt held-out ``table`` is reused when given);
    ``monte_carlo`` samples one instance per request, ``reps`` times, and
    averages the realized expected metrics.
    """
    if mode == "expectation":
        if table is None:
            table = build_coefficient_table(heldout, policy.grid, calib)
        return aggregate_metrics(table, policy.x)
    if mode != "monte_carlo":
        raise ValueError(f"unknown evaluation mode {mode!r}")

    impressions = clicks = revenue = conversions = with_ads = 0.0
    for rep in range(reps):
        for i, rec in enumerate(heldout):
            rng = np.random.default_rng([seed, rep, i])
            params = sample_params(policy, rec.category, rng)
            outcome = run_auction(params, rec, calib)
            impressions += outcome.filled_slots
            clicks += outcome.expected_clicks
            revenue += outcome.expected_revenue
            conversions += outcome.expected_conversions
            with_ads += 1.0 if outcome.has_ad else 0.0
    return MetricsReport(
        requests=float(len(heldout)),
        available_slots=float(sum(r.n_slots for r in heldout)),
        impressions=impressions / reps,
        clicks=clicks / reps,
        revenue=revenue / reps,
        conversions=conversions / reps,
        requests_with_ads=with_ads / reps,
    )


# ---------------------------------------------------------------------------
# Policy file round trip
# ---------------------------------------------------------------------------

def store_policy(policy: Policy, path: str | Path) -> None:
    header = {
        "format": FILE_FORMAT,
        "version": FILE_VERSION,
        "grid": policy.grid.to_dict(),
        "provenance": policy.provenance,
    }
    with open_text_write(path) as fh:
        fh.write(dumps_canonical(header) + "\n")
        prov = policy.provenance
        for c in sorted(policy.x):
            fh.write(
                dumps_canonical(
                    {
                        "category": c,
                        "x": [float(v) for v in policy.x[c]],
                        "status": prov.get("status"),
                        "residuals": prov.get("residuals", {}),
                        "duals": prov.get("duals", {}),
                    }
                )
                + "\n"
            )


def load_policy(path: str | Path) -> Policy:
    header = None
    x = {}
    with open_text_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
            if lineno == 1:
                if obj.get("format") != FILE_FORMAT:
                    raise ParseError(path, lineno, "not a policy file")
                if obj.get("version") != FILE_VERSION:
                    raise ParseError(path, lineno, f"unsupported version {obj.get('version')}")
                header = obj
                continue
            x[str(obj["category"])] = np.array(obj["x"], dtype=np.float64)
    if header is None:
        raise ParseError(path, 1, "empty policy file")
    grid = ParamGrid.from_dict(header["grid"])
    return Policy(grid=grid, x=x, provenance=header.get("provenance", {}))
