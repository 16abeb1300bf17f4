"""Isotonic calibration: PAVA optimality, binning, application semantics."""

import itertools

import numpy as np
import pytest

from auctionopt.calibration import (
    CalibrationBin,
    CalibrationMap,
    bin_impressions,
    fit_calibration,
    fit_isotonic,
    load_calibration_map,
    store_calibration_map,
)
from auctionopt.datagen import ImpressionRecord


def monotone_qp_oracle(values, weights):
    """Exact isotonic fit by enumerating consecutive-block partitions.

    The optimum of the weighted monotone QP is blockwise constant with each
    block at its weighted mean; enumerating all 2^(B-1) partitions and keeping
    the best feasible one is therefore exhaustive.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n = values.size
    best, best_obj = None, np.inf
    for cuts in itertools.product([0, 1], repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        out = np.empty(n)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            w = weights[lo:hi].sum()
            out[lo:hi] = (weights[lo:hi] @ values[lo:hi]) / w
        if np.any(np.diff(out) < -1e-15):
            continue
        obj = float(weights @ (out - values) ** 2)
        if obj < best_obj:
            best, best_obj = out, obj
    return best


class TestFitIsotonic:
    def test_violating_triple_pools_to_mean(self):
        np.testing.assert_allclose(fit_isotonic([3, 1, 2], [1, 1, 1]), [2, 2, 2])

    def test_already_monotone_unchanged(self):
        np.testing.assert_allclose(fit_isotonic([0.1, 0.2, 0.3], [1, 1, 1]), [0.1, 0.2, 0.3])

    def test_weighted_pair_pools_to_weighted_mean(self):
        # (0.2*1 + 0.1*3) / 4 = 0.125
        np.testing.assert_allclose(fit_isotonic([0.2, 0.1], [1, 3]), [0.125, 0.125])

    def test_matches_partition_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            values = rng.uniform(0, 1, n)
            weights = rng.uniform(0.5, 100.0, n)
            fit = fit_isotonic(values, weights)
            oracle = monotone_qp_oracle(values, weights)
            np.testing.assert_allclose(fit, oracle, atol=1e-9)

    def test_weighted_mean_preserved(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            values = rng.uniform(0, 1, n)
            weights = rng.uniform(0.1, 50.0, n)
            fit = fit_isotonic(values, weights)
            assert abs(weights @ fit - weights @ values) <= 1e-12 * max(1.0, abs(weights @ values))

    def test_output_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            fit = fit_isotonic(rng.uniform(0, 1, n), rng.uniform(0.1, 10, n))
            assert np.all(np.diff(fit) >= -1e-15)

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            fit_isotonic([0.1, 0.2], [0.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_isotonic([], [])


def _impressions(pairs, position=1):
    return [
        ImpressionRecord(request_id=f"r{i}", slot_position=position,
                         predicted_ctr=p, clicked=c)
        for i, (p, c) in enumerate(pairs)
    ]


class TestBinImpressions:
    def test_single_bin_is_overall_rate(self):
        imps = _impressions([(0.1, True), (0.2, False), (0.3, False), (0.4, True)])
        bins = bin_impressions(imps, 1)[1]
        assert len(bins) == 1
        assert bins[0].weight == 4
        assert bins[0].empirical_ctr == pytest.approx(0.5)

    def test_equal_frequency_quartiles(self):
        rng = np.random.default_rng(0)
        preds = rng.uniform(0.01, 0.5, 100)
        imps = _impressions([(p, False) for p in preds])
        bins = bin_impressions(imps, 4)[1]
        assert [b.weight for b in bins] == [25, 25, 25, 25]

    def test_boundaries_match_sort_oracle_on_skewed_input(self):
        rng = np.random.default_rng(5)
        preds = rng.beta(0.5, 8.0, 401).clip(1e-4, 0.99)
        imps = _impressions([(p, False) for p in preds])
        bins = bin_impressions(imps, 4)[1]
        ordered = sorted(preds)
        n = len(ordered)
        expected_cuts = [ordered[(k * n) // 4] for k in range(1, 4)]
        got_cuts = [b.lo for b in bins[1:]]
        np.testing.assert_allclose(got_cuts, expected_cuts)

    def test_weights_sum_to_position_count(self):
        rng = np.random.default_rng(1)
        imps = _impressions([(p, False) for p in rng.uniform(0.01, 0.9, 137)])
        bins = bin_impressions(imps, 10)[1]
        assert sum(b.weight for b in bins) == 137

    def test_tied_predictions_merge_bins(self):
        imps = _impressions([(0.2, False)] * 50)
        bins = bin_impressions(imps, 5)[1]
        assert sum(b.weight for b in bins) == 50
        los = [b.lo for b in bins]
        assert los == sorted(set(los))

    def test_intervals_cover_unit_range(self):
        rng = np.random.default_rng(2)
        imps = _impressions([(p, False) for p in rng.uniform(0.1, 0.4, 60)])
        bins = bin_impressions(imps, 3)[1]
        assert bins[0].lo == 0.0
        assert bins[-1].hi == 1.0

    def test_invalid_bin_count(self):
        with pytest.raises(ValueError):
            bin_impressions(_impressions([(0.1, True)]), 0)


class TestCalibrationMap:
    def _map(self):
        bins = [
            CalibrationBin(lo=0.0, hi=0.2, weight=10, empirical_ctr=0.05),
            CalibrationBin(lo=0.2, hi=0.5, weight=10, empirical_ctr=0.12),
            CalibrationBin(lo=0.5, hi=1.0, weight=10, empirical_ctr=0.30),
        ]
        return CalibrationMap.from_bins({1: bins})

    def test_lookup_inside_bin(self):
        assert self._map().apply(1, 0.3) == pytest.approx(0.12)

    def test_clamp_above_last_boundary(self):
        assert self._map().apply(1, 0.999) == pytest.approx(0.30)

    def test_clamp_below_first_boundary(self):
        assert self._map().apply(1, -0.5) == pytest.approx(0.05)

    def test_unknown_position_is_identity(self):
        assert self._map().apply(7, 0.3141) == 0.3141

    def test_apply_monotone_in_prediction(self):
        rng = np.random.default_rng(11)
        imps = [
            ImpressionRecord(f"r{i}", 1, float(p), bool(rng.random() < p * 0.7))
            for i, p in enumerate(rng.uniform(0.01, 0.9, 3000))
        ]
        cal = fit_calibration(imps, 20)
        xs = np.sort(rng.uniform(0, 1, 500))
        ys = cal.apply_array(1, xs)
        assert np.all(np.diff(ys) >= 0)

    def test_apply_array_matches_scalar(self):
        cal = self._map()
        xs = np.array([0.0, 0.1, 0.2, 0.45, 0.5, 0.99])
        np.testing.assert_allclose(cal.apply_array(1, xs), [cal.apply(1, float(v)) for v in xs])

    def test_perfectly_calibrated_log_recovers_identity(self):
        # predicted == true click probability: fitted step function should
        # track the input within a bin width
        rng = np.random.default_rng(23)
        preds = rng.uniform(0.05, 0.6, 20000)
        imps = _impressions([(float(p), bool(rng.random() < p)) for p in preds])
        cal = fit_calibration(imps, 20)
        lows, _ = cal.positions[1]
        bin_width = float(np.diff(lows).max())
        for x in np.linspace(0.1, 0.55, 12):
            assert abs(cal.apply(1, float(x)) - x) <= bin_width + 0.02

    def test_empty_input_warns_and_is_identity(self):
        with pytest.warns(UserWarning):
            cal = fit_calibration([], 10)
        assert cal.apply(3, 0.25) == 0.25


class TestRoundTrip:
    def test_store_then_load_identical(self, tmp_path):
        rng = np.random.default_rng(9)
        imps = []
        for pos in (1, 2):
            for i, p in enumerate(rng.uniform(0.01, 0.8, 500)):
                imps.append(ImpressionRecord(f"r{pos}_{i}", pos, float(p), bool(rng.random() < p)))
        cal = fit_calibration(imps, 8)
        path = tmp_path / "calib.ndjson"
        store_calibration_map(cal, path, provenance={"seed": 9})
        loaded, header = load_calibration_map(path)
        assert header["provenance"]["seed"] == 9
        assert sorted(loaded.positions) == sorted(cal.positions)
        for pos in cal.positions:
            np.testing.assert_allclose(loaded.positions[pos][0], cal.positions[pos][0])
            np.testing.assert_allclose(loaded.positions[pos][1], cal.positions[pos][1])

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "x.ndjson"
        path.write_text('{"format": "something-else", "version": 1}\n')
        with pytest.raises(Exception, match="not a calibration file"):
            load_calibration_map(path)
