"""Parameter grids, replay coefficient tables and aggregate business metrics.

``build_coefficient_table`` replays every request under every grid parameter
and reduces the outcomes to per-category column sums: for category ``c`` and
parameter ``j`` it keeps ``sum_i`` of expected clicks, revenue, conversions,
filled slots and has-ad indicators over the category's requests.  Every
aggregate business metric of a policy ``x`` is a linear (or ratio-of-linear)
function of these columns, so the per-request detail is only retained on
demand (``keep_requests=True``) for desk-scale inspection and oracle tests.

Coefficient-table file format ("AOPT1", little-endian):

- bytes 0..4   magic ``b"AOPT1"``
- uint32       header length ``L``
- ``L`` bytes  UTF-8 JSON header: version, mode (``aggregate`` | ``dense``),
  ``k``, ``n_requests``, grid spec with per-category centers, the category
  index (category name, request count, available slots, and request ids in
  dense mode), and provenance
- per category, in header order: five float64 arrays of length ``k``
  (clicks, revenue, conversions, requests_with_ad, filled_slots); in dense
  mode additionally float64 ``(n_c, k)`` arrays clicks/revenue/conversions
  (row-major), packed has-ad indicator bits (``numpy.packbits`` of the
  row-major bool matrix), int32 filled-slot counts ``(n_c, k)`` and int32
  per-request slot counts ``(n_c,)``.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .auction import ALPHA_RANGE, MechanismParams
from .calibration import CalibrationMap
from .datagen import GroundTruth, ReplayRecord
from .errors import DataError, ParseError

TABLE_MAGIC = b"AOPT1"
TABLE_VERSION = 1


# ---------------------------------------------------------------------------
# Parameter grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Evenly discretized box around a center, per ranking-function dimension."""

    alpha_half_width: float
    gamma_half_width: float
    alpha_steps: int
    gamma_steps: int

    def __post_init__(self):
        if self.alpha_steps < 1 or self.gamma_steps < 1:
            raise ValueError("steps must be >= 1 per dimension")
        if self.alpha_half_width < 0 or self.gamma_half_width < 0:
            raise ValueError("half widths must be >= 0")

    @property
    def k(self) -> int:
        return self.alpha_steps * self.gamma_steps

    def to_dict(self) -> dict:
        return {
            "alpha_half_width": self.alpha_half_width,
            "gamma_half_width": self.gamma_half_width,
            "alpha_steps": self.alpha_steps,
            "gamma_steps": self.gamma_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            alpha_half_width=float(d["alpha_half_width"]),
            gamma_half_width=float(d["gamma_half_width"]),
            alpha_steps=int(d["alpha_steps"]),
            gamma_steps=int(d["gamma_steps"]),
        )


def _axis(center: float, half_width: float, steps: int, lo: float, hi: float, name: str) -> np.ndarray:
    if steps == 1:
        vals = np.array([center])
    else:
        vals = np.linspace(center - half_width, center + half_width, steps)
    clipped = np.clip(vals, lo, hi)
    if not np.array_equal(clipped, vals):
        warnings.warn(
            f"{name} axis clipped into [{lo}, {hi}] to keep parameters valid", stacklevel=3
        )
    return clipped


@dataclass
class ParamGrid:
    """Per-category materialized parameter instances over a shared grid spec.

    Instance ``j`` maps to axis indices ``(j // gamma_steps, j % gamma_steps)``
    in alpha-major order; the center is instance ``(K-1)//2`` when both step
    counts are odd.
    """

    spec: GridSpec
    categories: tuple[str, ...]
    centers: dict[str, MechanismParams]
    alphas: dict[str, np.ndarray] = field(default_factory=dict)   # (K,) per category
    gammas: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def default_center(self) -> MechanismParams:
        return self.centers[self.categories[0]]

    def instance(self, category: str, j: int) -> MechanismParams:
        center = self.centers[category]
        return MechanismParams(
            alpha=float(self.alphas[category][j]),
            gamma=float(self.gammas[category][j]),
            reserve_score=center.reserve_score,
            price_floor=center.price_floor,
        )

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "categories": list(self.categories),
            "centers": {c: p.to_dict() for c, p in self.centers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamGrid":
        spec = GridSpec.from_dict(d["spec"])
        centers = {c: MechanismParams.from_dict(p) for c, p in d["centers"].items()}
        return grid_params(centers, spec, categories=tuple(d["categories"]))


def grid_params(
    centers: MechanismParams | Mapping[str, MechanismParams],
    spec: GridSpec,
    categories: Sequence[str] | None = None,
) -> ParamGrid:
    """Materialize the K = alpha_steps * gamma_steps instances per category.

    Axis values falling outside the valid parameter ranges are clipped (with a
    warning) rather than rejected, so a box may straddle a range boundary.
    """
    if isinstance(centers, MechanismParams):
        if categories is None:
            raise ValueError("categories are required when a single center is given")
        centers = {c: centers for c in categories}
    else:
        centers = dict(centers)
        if categories is None:
            categories = tuple(sorted(centers))
    categories = tuple(categories)
    missing = [c for c in categories if c not in centers]
    if missing:
        raise DataError(f"no center parameters for categories: {missing}")

    grid = ParamGrid(spec=spec, categories=categories, centers={c: centers[c] for c in categories})
    for c in categories:
        center = centers[c]
        a_axis = _axis(center.alpha, spec.alpha_half_width, spec.alpha_steps,
                       ALPHA_RANGE[0], ALPHA_RANGE[1], "alpha")
        g_axis = _axis(center.gamma, spec.gamma_half_width, spec.gamma_steps,
                       0.0, np.inf, "gamma")
        aa, gg = np.meshgrid(a_axis, g_axis, indexing="ij")
        grid.alphas[c] = aa.ravel()
        grid.gammas[c] = gg.ravel()
    return grid


# ---------------------------------------------------------------------------
# Coefficient table
# ---------------------------------------------------------------------------

@dataclass
class CategoryBlock:
    """Column-compressed replay outcomes of one category's requests."""

    category: str
    n_requests: int
    n_slots_available: float
    clicks: np.ndarray            # (K,) sums over the category's requests
    revenue: np.ndarray
    conversions: np.ndarray
    requests_with_ad: np.ndarray
    filled_slots: np.ndarray
    # present only when built with keep_requests=True
    request_ids: list[str] | None = None
    dense_clicks: np.ndarray | None = None       # (n_c, K)
    dense_revenue: np.ndarray | None = None
    dense_conversions: np.ndarray | None = None
    dense_has_ad: np.ndarray | None = None       # (n_c, K) uint8
    dense_filled: np.ndarray | None = None       # (n_c, K) int32
    dense_n_slots: np.ndarray | None = None      # (n_c,) int32


@dataclass
class CoefficientTable:
    grid: ParamGrid
    blocks: dict[str, CategoryBlock]

    @property
    def k(self) -> int:
        return self.grid.k

    @property
    def categories(self) -> tuple[str, ...]:
        return self.grid.categories

    @property
    def n_requests(self) -> int:
        return sum(b.n_requests for b in self.blocks.values())

    @property
    def n_slots_available(self) -> float:
        return sum(b.n_slots_available for b in self.blocks.values())

    @property
    def dense(self) -> bool:
        return all(b.dense_clicks is not None for b in self.blocks.values())


def _prepare_candidates(
    log: Sequence[ReplayRecord],
    calib: CalibrationMap,
    truth: GroundTruth | None,
    max_position: int,
):
    """Flatten the log into the kernel's array layout.

    Candidates are reordered by ad_id within each request so the kernel's
    index-based tie-break matches the engine's lexicographic rule.
    """
    n = len(log)
    req_nslots = np.fromiter((r.n_slots for r in log), dtype=np.int64, count=n)
    cand_count = np.fromiter((len(r.candidates) for r in log), dtype=np.int64, count=n)
    cand_start = np.zeros(n, dtype=np.int64)
    np.cumsum(cand_count[:-1], out=cand_start[1:])
    m = int(cand_count.sum())

    bid = np.empty(m)
    cvr = np.empty(m)
    cvr_metric = np.empty(m)
    pred = np.empty(m)
    truth_base = np.empty(m) if truth is not None else None
    pos = 0
    for rec in log:
        order = sorted(range(len(rec.candidates)), key=lambda t: rec.candidates[t].ad_id)
        for t in order:
            c = rec.candidates[t]
            bid[pos] = c.bid
            cvr[pos] = c.predicted_cvr
            pred[pos] = c.predicted_ctr
            if truth is not None:
                base = truth.base_ctr.get(rec.request_id)
                if base is None or t >= base.size:
                    raise DataError(f"ground truth missing entry for {rec.request_id}[{t}]")
                truth_base[pos] = base[t]
                cvr_metric[pos] = truth.true_cvr[rec.request_id][t]
            else:
                cvr_metric[pos] = c.predicted_cvr
            pos += 1

    ctr_rank = calib.apply_array(1, pred)
    ctr_pos = np.empty((m, max_position))
    if truth is not None:
        for p in range(1, max_position + 1):
            ctr_pos[:, p - 1] = truth_base * truth.position_decay[p - 1]
    else:
        for p in range(1, max_position + 1):
            ctr_pos[:, p - 1] = calib.apply_array(p, pred)
    return req_nslots, cand_start, cand_count, bid, cvr, cvr_metric, ctr_rank, ctr_pos


def _prepare_grid(grid: ParamGrid):
    n_cat = len(grid.categories)
    k = grid.k
    gamma_val = np.empty((n_cat, k))
    alpha_idx = np.empty((n_cat, k), dtype=np.int64)
    n_alpha = np.empty(n_cat, dtype=np.int64)
    reserve = np.empty(n_cat)
    floor = np.empty(n_cat)
    uniques = []
    for ci, c in enumerate(grid.categories):
        vals, inv = np.unique(grid.alphas[c], return_inverse=True)
        uniques.append(vals)
        alpha_idx[ci] = inv
        n_alpha[ci] = vals.size
        gamma_val[ci] = grid.gammas[c]
        reserve[ci] = grid.centers[c].reserve_score
        floor[ci] = grid.centers[c].price_floor
    a_max = int(n_alpha.max())
    alpha_vals = np.zeros((n_cat, a_max))
    for ci, vals in enumerate(uniques):
        alpha_vals[ci, : vals.size] = vals
    return alpha_idx, alpha_vals, n_alpha, gamma_val, reserve, floor


def build_coefficient_table(
    log: Sequence[ReplayRecord],
    grid: ParamGrid,
    calib: CalibrationMap | None = None,
    *,
    truth: GroundTruth | None = None,
    keep_requests: bool = False,
    chunk_size: int = 2048,
) -> CoefficientTable:
    """Replay every request under every grid instance and aggregate.

    Ranking and pricing always use the calibrated predicted CTRs; passing
    ``truth`` switches only the metric expectations (clicks, conversions) to
    the generator's true probabilities, which yields an oracle evaluation of
    what the mechanism would really earn.

    Aggregation order is the log order regardless of chunking or kernel
    threads, so results are bit-reproducible.
    """
    if calib is None:
        calib = CalibrationMap.identity()
    cat_of = {c: i for i, c in enumerate(grid.categories)}
    unknown = sorted({r.category for r in log} - set(cat_of))
    if unknown:
        raise DataError(f"log contains categories missing from the grid: {unknown}")

    n = len(log)
    k = grid.k
    n_cat = len(grid.categories)
    max_position = max((r.n_slots for r in log), default=1)

    req_cat = np.fromiter((cat_of[r.category] for r in log), dtype=np.int64, count=n)
    (req_nslots, cand_start, cand_count, bid, cvr, cvr_metric, ctr_rank, ctr_pos
     ) = _prepare_candidates(log, calib, truth, max_position)
    alpha_idx, alpha_vals, n_alpha, gamma_val, reserve, floor = _prepare_grid(grid)

    acc_clicks = np.zeros((n_cat, k))
    acc_revenue = np.zeros((n_cat, k))
    acc_conv = np.zeros((n_cat, k))
    acc_hasad = np.zeros((n_cat, k))
    acc_filled = np.zeros((n_cat, k))

    chunk = min(chunk_size, max(n, 1))
    out_clicks = np.empty((chunk, k))
    out_revenue = np.empty((chunk, k))
    out_conv = np.empty((chunk, k))
    out_filled = np.empty((chunk, k), dtype=np.int32)
    out_hasad = np.empty((chunk, k), dtype=np.uint8)

    dense: dict[str, list] | None = None
    if keep_requests:
        dense = {c: [] for c in grid.categories}

    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        m = hi - lo
        ck, cr, cc = out_clicks[:m], out_revenue[:m], out_conv[:m]
        cf, ch = out_filled[:m], out_hasad[:m]
        _kernels.replay_chunk(
            req_cat[lo:hi], req_nslots[lo:hi], cand_start[lo:hi], cand_count[lo:hi],
            bid, cvr, cvr_metric, ctr_rank, ctr_pos,
            alpha_idx, alpha_vals, n_alpha, gamma_val, reserve, floor,
            ck, cr, cc, cf, ch,
        )
        idx = req_cat[lo:hi]
        np.add.at(acc_clicks, idx, ck)
        np.add.at(acc_revenue, idx, cr)
        np.add.at(acc_conv, idx, cc)
        np.add.at(acc_hasad, idx, ch.astype(np.float64))
        np.add.at(acc_filled, idx, cf.astype(np.float64))
        if dense is not None:
            for row in range(m):
                cat = grid.categories[idx[row]]
                dense[cat].append(
                    (log[lo + row].request_id, ck[row].copy(), cr[row].copy(),
                     cc[row].copy(), ch[row].copy(), cf[row].copy(),
                     log[lo + row].n_slots)
                )

    n_req_per_cat = np.bincount(req_cat, minlength=n_cat)
    slots_per_cat = np.bincount(req_cat, weights=req_nslots.astype(np.float64), minlength=n_cat)

    blocks = {}
    for ci, c in enumerate(grid.categories):
        block = CategoryBlock(
            category=c,
            n_requests=int(n_req_per_cat[ci]),
            n_slots_available=float(slots_per_cat[ci]),
            clicks=acc_clicks[ci],
            revenue=acc_revenue[ci],
            conversions=acc_conv[ci],
            requests_with_ad=acc_hasad[ci],
            filled_slots=acc_filled[ci],
        )
        if dense is not None:
            rows = dense[c]
            block.request_ids = [r[0] for r in rows]
            block.dense_clicks = np.array([r[1] for r in rows]).reshape(len(rows), k)
            block.dense_revenue = np.array([r[2] for r in rows]).reshape(len(rows), k)
            block.dense_conversions = np.array([r[3] for r in rows]).reshape(len(rows), k)
            block.dense_has_ad = np.array([r[4] for r in rows], dtype=np.uint8).reshape(len(rows), k)
            block.dense_filled = np.array([r[5] for r in rows], dtype=np.int32).reshape(len(rows), k)
            block.dense_n_slots = np.array([r[6] for r in rows], dtype=np.int32)
        blocks[c] = block
    return CoefficientTable(grid=grid, blocks=blocks)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Expected totals and derived business ratios of a policy on a log."""

    requests: float
    available_slots: float
    impressions: float
    clicks: float
    revenue: float
    conversions: float
    requests_with_ads: float

    @staticmethod
    def _ratio(num: float, den: float) -> float | None:
        return num / den if den > 0 else None

    @property
    def ctr(self) -> float | None:
        return self._ratio(self.clicks, self.impressions)

    @property
    def cpc(self) -> float | None:
        return self._ratio(self.revenue, self.clicks)

    @property
    def cvr(self) -> float | None:
        return self._ratio(self.conversions, self.clicks)

    @property
    def cpa(self) -> float | None:
        return self._ratio(self.revenue, self.conversions)

    @property
    def pvr(self) -> float | None:
        """Share of requests showing at least one ad (indicator form)."""
        return self._ratio(self.requests_with_ads, self.requests)

    @property
    def pvr_slot_fill(self) -> float | None:
        """Alternate PVR: expected impressions over available slots."""
        return self._ratio(self.impressions, self.available_slots)

    def deltas(self, baseline: "MetricsReport") -> dict[str, float | None]:
        """Relative changes vs a baseline report; None when undefined."""
        out: dict[str, float | None] = {}
        pairs = [
            ("revenue", self.revenue, baseline.revenue),
            ("clicks", self.clicks, baseline.clicks),
            ("ctr", self.ctr, baseline.ctr),
            ("cpc", self.cpc, baseline.cpc),
            ("pvr", self.pvr, baseline.pvr),
            ("cvr", self.cvr, baseline.cvr),
            ("cpa", self.cpa, baseline.cpa),
        ]
        for name, ours, theirs in pairs:
            if ours is None or theirs in (None, 0):
                out[name] = None
            else:
                out[name] = ours / theirs - 1.0
        return out

    def to_dict(self) -> dict:
        return {
            "requests": self.requests,
            "available_slots": self.available_slots,
            "impressions": self.impressions,
            "clicks": self.clicks,
            "revenue": self.revenue,
            "conversions": self.conversions,
            "requests_with_ads": self.requests_with_ads,
            "ctr": self.ctr,
            "cpc": self.cpc,
            "cvr": self.cvr,
            "cpa": self.cpa,
            "pvr": self.pvr,
            "pvr_slot_fill": self.pvr_slot_fill,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            requests=float(d["requests"]),
            available_slots=float(d["available_slots"]),
            impressions=float(d["impressions"]),
            clicks=float(d["clicks"]),
            revenue=float(d["revenue"]),
            conversions=float(d["conversions"]),
            requests_with_ads=float(d["requests_with_ads"]),
        )


def _check_simplex(x: np.ndarray, k: int, category: str, tol: float = 1e-9) -> None:
    if x.shape != (k,):
        raise ValueError(f"policy vector for {category!r} has shape {x.shape}, expected ({k},)")
    if np.any(x < -tol) or abs(float(x.sum()) - 1.0) > tol:
        raise ValueError(f"policy vector for {category!r} is not on the simplex")


def aggregate_metrics(table: CoefficientTable, policy_x: Mapping[str, np.ndarray]) -> MetricsReport:
    """Expected metrics of a per-category mixture over grid instances.

    Every total is linear in x: ``total = sum_c x_c . column_c``.
    """
    totals = dict.fromkeys(
        ("impressions", "clicks", "revenue", "conversions", "requests_with_ads"), 0.0
    )
    for c in table.categories:
        block = table.blocks[c]
        if c not in policy_x:
            raise DataError(f"policy has no vector for category {c!r}")
        x = np.asarray(policy_x[c], dtype=np.float64)
        _check_simplex(x, table.k, c)
        totals["impressions"] += float(x @ block.filled_slots)
        totals["clicks"] += float(x @ block.clicks)
        totals["revenue"] += float(x @ block.revenue)
        totals["conversions"] += float(x @ block.conversions)
        totals["requests_with_ads"] += float(x @ block.requests_with_ad)
    return MetricsReport(
        requests=float(table.n_requests),
        available_slots=float(table.n_slots_available),
        **totals,
    )


def one_hot_policy(table: CoefficientTable, j: int) -> dict[str, np.ndarray]:
    x = {}
    for c in table.categories:
        v = np.zeros(table.k)
        v[j] = 1.0
        x[c] = v
    return x


def baseline_metrics(
    log: Sequence[ReplayRecord],
    centers: MechanismParams | Mapping[str, MechanismParams],
    calib: CalibrationMap | None = None,
    *,
    truth: GroundTruth | None = None,
) -> MetricsReport:
    """Metrics of the deterministic center parameters (one-hot policy)."""
    categories = tuple(sorted({r.category for r in log}))
    spec = GridSpec(alpha_half_width=0.0, gamma_half_width=0.0, alpha_steps=1, gamma_steps=1)
    grid = grid_params(centers, spec, categories=categories)
    table = build_coefficient_table(log, grid, calib, truth=truth)
    return aggregate_metrics(table, one_hot_policy(table, 0))


# ---------------------------------------------------------------------------
# Binary file round trip
# ---------------------------------------------------------------------------

def write_coefficient_table(
    table: CoefficientTable, path: str | Path, provenance: dict | None = None
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "dense" if table.dense else "aggregate"
    categories = []
    for c in table.categories:
        b = table.blocks[c]
        entry = {
            "category": c,
            "n_requests": b.n_requests,
            "n_slots_available": b.n_slots_available,
        }
        if mode == "dense":
            entry["request_ids"] = b.request_ids
        categories.append(entry)
    header = {
        "version": TABLE_VERSION,
        "mode": mode,
        "k": table.k,
        "n_requests": table.n_requests,
        "grid": table.grid.to_dict(),
        "categories": categories,
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in table.categories:
            b = table.blocks[c]
            for arr in (b.clicks, b.revenue, b.conversions, b.requests_with_ad, b.filled_slots):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            if mode == "dense":
                for arr in (b.dense_clicks, b.dense_revenue, b.dense_conversions):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
                fh.write(np.packbits(b.dense_has_ad.reshape(-1)).tobytes())
                fh.write(np.ascontiguousarray(b.dense_filled, dtype="<i4").tobytes())
                fh.write(np.ascontiguousarray(b.dense_n_slots, dtype="<i4").tobytes())


def read_coefficient_table(path: str | Path) -> tuple[CoefficientTable, dict]:
    """Read an AOPT1 file; returns ``(table, header)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != TABLE_MAGIC:
            raise ParseError(path, 0, f"bad magic {magic!r}, expected {TABLE_MAGIC!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != TABLE_VERSION:
            raise ParseError(path, 0, f"unsupported table version {header.get('version')}")
        grid = ParamGrid.from_dict(header["grid"])
        k = grid.k
        mode = header["mode"]
        blocks = {}
        for entry in header["categories"]:
            c = entry["category"]
            n_c = int(entry["n_requests"])

            def _read(count, dtype):
                arr = np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype)
                return arr.astype(arr.dtype.newbyteorder("="))

            block = CategoryBlock(
                category=c,
                n_requests=n_c,
                n_slots_available=float(entry["n_slots_available"]),
                clicks=_read(k, "<f8"),
                revenue=_read(k, "<f8"),
                conversions=_read(k, "<f8"),
                requests_with_ad=_read(k, "<f8"),
                filled_slots=_read(k, "<f8"),
            )
            if mode == "dense":
                block.request_ids = list(entry["request_ids"])
                block.dense_clicks = _read(n_c * k, "<f8").reshape(n_c, k)
                block.dense_revenue = _read(n_c * k, "<f8").reshape(n_c, k)
                block.dense_conversions = _read(n_c * k, "<f8").reshape(n_c, k)
                nbits = -(-n_c * k // 8)
                packed = np.frombuffer(fh.read(nbits), dtype=np.uint8)
                block.dense_has_ad = np.unpackbits(packed, count=n_c * k).reshape(n_c, k)
                block.dense_filled = _read(n_c * k, "<i4").reshape(n_c, k)
                block.dense_n_slots = _read(n_c, "<i4")
            blocks[c] = block
    return CoefficientTable(grid=grid, blocks=blocks), header
