"""Per-slot-position CTR calibration via weighted isotonic regression.

Predicted CTRs are systematically biased (typically inflated, and more so at
deeper slot positions).  For each position we bin served impressions by
predicted CTR into equal-frequency bins, measure the realized click rate per
bin, and fit a monotone non-decreasing step function with pool-adjacent-
violators.  The fitted map replaces raw predictions during replay simulation.

File format (newline-delimited JSON): a header line
``{"format": "auctionopt-calibration", "version": 1, ...}`` followed by one
``{"position": p, "lo": .., "hi": .., "omega": ..}`` object per bin.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError
from .ndjson import dumps_canonical, open_text_read, open_text_write

FILE_FORMAT = "auctionopt-calibration"
FILE_VERSION = 1


@dataclass(frozen=True)
class CalibrationBin:
    """One predicted-CTR interval ``[lo, hi)`` with its impression statistics."""

    lo: float
    hi: float
    weight: float          # impression count in the bin
    empirical_ctr: float   # clicks / impressions in the bin


def fit_isotonic(values: Sequence[float], weights: Sequence[float]) -> np.ndarray:
    """Weighted isotonic regression by pool-adjacent-violators.

    Returns the unique minimizer of ``sum_i w_i (out_i - values_i)^2`` subject
    to ``out`` non-decreasing.  The weighted mean is preserved exactly (up to
    float rounding) because every pooled block takes its weighted mean.
    """
    y = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if y.ndim != 1 or y.shape != w.shape:
        raise ValueError("values and weights must be 1-d and equally long")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if y.size == 0 or float(w.sum()) == 0.0:
        raise ValueError("isotonic fit requires at least one positive weight")

    n = y.size
    # Blocks are kept on a stack as (value sum * weight, weight, length).
    block_val = np.empty(n)
    block_w = np.empty(n)
    block_len = np.empty(n, dtype=np.int64)
    top = -1
    for i in range(n):
        top += 1
        block_val[top] = y[i] * w[i]
        block_w[top] = w[i]
        block_len[top] = 1
        # Merge while the new block's mean violates monotonicity.
        while top > 0 and _block_mean(block_val[top - 1], block_w[top - 1]) > _block_mean(
            block_val[top], block_w[top]
        ):
            block_val[top - 1] += block_val[top]
            block_w[top - 1] += block_w[top]
            block_len[top - 1] += block_len[top]
            top -= 1

    out = np.empty(n)
    pos = 0
    for b in range(top + 1):
        out[pos : pos + block_len[b]] = _block_mean(block_val[b], block_w[b])
        pos += block_len[b]
    return out


def _block_mean(val_sum: float, w_sum: float) -> float:
    # A zero-weight block carries no loss; its plain value keeps pooling stable.
    return val_sum / w_sum if w_sum > 0 else val_sum


def bin_impressions(
    impressions: Iterable,
    n_bins: int,
) -> dict[int, list[CalibrationBin]]:
    """Group impressions into per-position equal-frequency predicted-CTR bins.

    Bin boundaries are empirical quantiles of the predicted CTRs observed at
    each position (sorted-value index ``k * n // B``); identical boundaries are
    merged, empty bins are dropped.  Intervals jointly cover ``(0, 1)``:
    the first bin starts at 0.0 and the last ends at 1.0.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")

    by_position: dict[int, list[tuple[float, bool]]] = {}
    for imp in impressions:
        by_position.setdefault(imp.slot_position, []).append((imp.predicted_ctr, imp.clicked))

    result: dict[int, list[CalibrationBin]] = {}
    for position in sorted(by_position):
        rows = by_position[position]
        preds = np.array([p for p, _ in rows])
        clicks = np.array([1.0 if c else 0.0 for _, c in rows])
        n = preds.size
        order = np.sort(preds)
        cuts = sorted({float(order[(k * n) // n_bins]) for k in range(1, n_bins)})
        boundaries = np.array(cuts)
        # searchsorted(side=right) puts a value equal to a boundary in the bin above
        idx = np.searchsorted(boundaries, preds, side="right")
        lows = np.concatenate(([0.0], boundaries))
        highs = np.concatenate((boundaries, [1.0]))
        bins = []
        for b in range(lows.size):
            mask = idx == b
            weight = float(mask.sum())
            if weight == 0.0:
                continue
            bins.append(
                CalibrationBin(
                    lo=float(lows[b]),
                    hi=float(highs[b]),
                    weight=weight,
                    empirical_ctr=float(clicks[mask].sum() / weight),
                )
            )
        result[position] = bins
    return result


@dataclass
class CalibrationMap:
    """Monotone piecewise-constant predicted-to-calibrated CTR maps, one per position.

    Positions absent from the map fall back to identity calibration so that
    simulation of unseen positions never fails.
    """

    positions: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    # positions[p] = (interval lower bounds including 0.0, fitted omegas), both (n_bins,)

    @classmethod
    def identity(cls) -> "CalibrationMap":
        return cls(positions={})

    @classmethod
    def from_bins(cls, bins_by_position: Mapping[int, Sequence[CalibrationBin]]) -> "CalibrationMap":
        positions = {}
        for position, bins in bins_by_position.items():
            if not bins:
                continue
            omegas = fit_isotonic(
                [b.empirical_ctr for b in bins], [b.weight for b in bins]
            )
            lows = np.array([b.lo for b in bins])
            positions[position] = (lows, omegas)
        return cls(positions=positions)

    def apply(self, position: int, predicted_ctr: float) -> float:
        """Calibrated CTR for one prediction; identity for unmapped positions.

        Inputs below the first interval clamp to the first omega, above the
        last to the last omega.
        """
        entry = self.positions.get(position)
        if entry is None:
            return predicted_ctr
        lows, omegas = entry
        idx = int(np.searchsorted(lows, predicted_ctr, side="right")) - 1
        if idx < 0:
            idx = 0
        return float(omegas[idx])

    def apply_array(self, position: int, predicted_ctrs: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`apply` over an array of predictions."""
        entry = self.positions.get(position)
        preds = np.asarray(predicted_ctrs, dtype=np.float64)
        if entry is None:
            return preds.copy()
        lows, omegas = entry
        idx = np.searchsorted(lows, preds, side="right") - 1
        np.clip(idx, 0, None, out=idx)
        return omegas[idx]

    def max_position(self) -> int:
        return max(self.positions) if self.positions else 0


def fit_calibration(impressions: Iterable, n_bins: int = 50) -> CalibrationMap:
    """Bin an impression log and fit per-position isotonic maps.

    Positions without impressions are simply absent from the result; a warning
    is emitted when the input is entirely empty.
    """
    bins = bin_impressions(impressions, n_bins)
    if not bins:
        warnings.warn("no impressions provided; calibration map is identity", stacklevel=2)
    return CalibrationMap.from_bins(bins)


def store_calibration_map(
    cal: CalibrationMap, path: str | Path, provenance: dict | None = None
) -> None:
    header = {"format": FILE_FORMAT, "version": FILE_VERSION}
    if provenance:
        header["provenance"] = provenance
    with open_text_write(path) as fh:
        fh.write(dumps_canonical(header) + "\n")
        for position in sorted(cal.positions):
            lows, omegas = cal.positions[position]
            his = np.concatenate((lows[1:], [1.0]))
            for lo, hi, omega in zip(lows, his, omegas):
                fh.write(
                    dumps_canonical(
                        {"position": position, "lo": float(lo), "hi": float(hi), "omega": float(omega)}
                    )
                    + "\n"
                )


def load_calibration_map(path: str | Path):
    """Read a calibration file; returns ``(CalibrationMap, header)``."""
    import json

    rows_by_position: dict[int, list[tuple[float, float]]] = {}
    header = None
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
                    raise ParseError(path, lineno, "not a calibration file")
                if obj.get("version") != FILE_VERSION:
                    raise ParseError(path, lineno, f"unsupported version {obj.get('version')}")
                header = obj
                continue
            try:
                rows_by_position.setdefault(int(obj["position"]), []).append(
                    (float(obj["lo"]), float(obj["omega"]))
                )
            except (KeyError, TypeError) as exc:
                raise ParseError(path, lineno, f"missing field: {exc}") from exc
    positions = {}
    for position, rows in rows_by_position.items():
        rows.sort()
        lows = np.array([lo for lo, _ in rows])
        omegas = np.array([om for _, om in rows])
        positions[position] = (lows, omegas)
    return CalibrationMap(positions=positions), header
