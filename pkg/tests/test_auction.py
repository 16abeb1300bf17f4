"""Ranking score, infimum pricing and GSP allocation."""

import numpy as np
import pytest

from auctionopt.auction import (
    AuctionOutcome,
    MechanismParams,
    clearing_price,
    ranking_score,
    run_auction,
)
from auctionopt.datagen import AdCandidate, ReplayRecord
from auctionopt.errors import DegenerateCandidateError


def _params(alpha=1.0, gamma=0.0, reserve=0.0, floor=0.01):
    return MechanismParams(alpha=alpha, gamma=gamma, reserve_score=reserve, price_floor=floor)


def _record(cands, n_slots=1, rid="r0", category="c00"):
    return ReplayRecord(request_id=rid, category=category, n_slots=n_slots,
                        candidates=tuple(cands))


def _cand(ad_id, bid, ctr, cvr=0.05):
    return AdCandidate(ad_id=ad_id, bid=bid, predicted_ctr=ctr, predicted_cvr=cvr)


class TestRankingScore:
    def test_ecpm_at_alpha_one(self):
        assert ranking_score(_params(1.0, 0.0), 0.2, 1.0, 0.1) == pytest.approx(0.2)

    def test_rank_by_bid_at_alpha_zero(self):
        assert ranking_score(_params(0.0, 0.0), 0.2, 1.5, 0.1) == pytest.approx(1.5)

    def test_hidden_cost_term(self):
        assert ranking_score(_params(1.0, 2.0), 0.1, 1.0, 0.05) == pytest.approx(0.11)

    def test_strictly_increasing_in_bid(self):
        p = _params(0.7, 0.3)
        assert ranking_score(p, 0.2, 1.0001, 0.1) > ranking_score(p, 0.2, 1.0, 0.1)


class TestClearingPrice:
    def test_plain_second_price_ratio(self):
        assert clearing_price(_params(1.0, 0.0), 0.2, 0.0, 1.0, 0.15) == pytest.approx(0.75)

    def test_hidden_cost_discount(self):
        assert clearing_price(_params(1.0, 2.0), 0.1, 0.05, 1.0, 0.105) == pytest.approx(0.95)

    def test_negative_raw_price_clamps_to_floor(self):
        p = _params(1.0, 10.0, floor=0.01)
        # hidden cost 10*0.1*0.2 = 0.2 exceeds next_score 0.1
        assert clearing_price(p, 0.1, 0.2, 1.0, 0.1) == pytest.approx(0.01)

    def test_zero_ctr_is_degenerate(self):
        with pytest.raises(DegenerateCandidateError):
            clearing_price(_params(1.0, 0.0), 0.0, 0.1, 1.0, 0.1)


class TestRunAuction:
    def test_empty_candidates(self):
        out = run_auction(_params(), _record([]))
        assert out == AuctionOutcome(winners=())
        assert not out.has_ad
        assert out.filled_slots == 0

    def test_two_candidates_one_slot(self):
        a = _cand("a", bid=1.0, ctr=0.2)
        b = _cand("b", bid=1.5, ctr=0.1)
        out = run_auction(_params(1.0, 0.0, reserve=0.0), _record([a, b]))
        assert [w.ad_id for w in out.winners] == ["a"]
        assert out.winners[0].click_price == pytest.approx(0.75)

    def test_reserve_filters_low_scores(self):
        a = _cand("a", bid=1.0, ctr=0.2)   # score 0.2
        b = _cand("b", bid=0.5, ctr=0.1)   # score 0.05 < reserve
        out = run_auction(_params(1.0, 0.0, reserve=0.1), _record([a, b], n_slots=2))
        assert [w.ad_id for w in out.winners] == ["a"]
        # last winner priced against the reserve: 0.1 / 0.2
        assert out.winners[0].click_price == pytest.approx(0.5)

    def test_ties_break_by_bid_then_ad_id(self):
        # equal scores via equal ctr*bid products, alpha=1
        a = _cand("z", bid=1.0, ctr=0.2)
        b = _cand("y", bid=2.0, ctr=0.1)
        out = run_auction(_params(1.0, 0.0), _record([a, b], n_slots=2))
        assert [w.ad_id for w in out.winners] == ["y", "z"]  # higher bid first
        c = _cand("m", bid=1.0, ctr=0.2)
        d = _cand("n", bid=1.0, ctr=0.2)
        out2 = run_auction(_params(1.0, 0.0), _record([c, d], n_slots=2))
        assert [w.ad_id for w in out2.winners] == ["m", "n"]  # lexicographic

    def test_determinism(self):
        rng = np.random.default_rng(0)
        cands = [_cand(f"a{i}", float(rng.lognormal(0, 0.5)), float(rng.uniform(0.01, 0.5)))
                 for i in range(6)]
        rec = _record(cands, n_slots=3)
        p = _params(1.2, 0.4, reserve=0.02)
        assert run_auction(p, rec) == run_auction(p, rec)


def _random_instance(rng, n_cands=6, n_slots=3):
    params = MechanismParams(
        alpha=float(rng.uniform(0.0, 2.0)),
        gamma=float(rng.uniform(0.0, 1.0)),
        reserve_score=float(rng.uniform(0.0, 0.05)),
        price_floor=float(rng.uniform(0.005, 0.02)),
    )
    cands = [
        _cand(f"a{i}", bid=max(0.05, float(rng.lognormal(0.0, 0.6))),
              ctr=float(rng.uniform(0.01, 0.6)), cvr=float(rng.uniform(0.01, 0.3)))
        for i in range(int(rng.integers(1, n_cands + 1)))
    ]
    return params, _record(cands, n_slots=int(rng.integers(1, n_slots + 1)))


def _position_of(outcome, ad_id):
    for w in outcome.winners:
        if w.ad_id == ad_id:
            return w.slot_position
    return None


def _with_bid(record, ad_id, new_bid):
    cands = [
        AdCandidate(c.ad_id, new_bid if c.ad_id == ad_id else c.bid,
                    c.predicted_ctr, c.predicted_cvr)
        for c in record.candidates
    ]
    return _record(cands, n_slots=record.n_slots, rid=record.request_id)


class TestInfimumProperty:
    def test_prices_within_floor_and_bid(self):
        rng = np.random.default_rng(101)
        for _ in range(300):
            params, rec = _random_instance(rng)
            out = run_auction(params, rec)
            for w in out.winners:
                bid = next(c.bid for c in rec.candidates if c.ad_id == w.ad_id)
                assert params.price_floor <= w.click_price <= bid + 1e-12

    def test_price_is_grid_infimum(self):
        """Price equals the minimal bid (on a 1e-4 money grid) keeping the slot."""
        rng = np.random.default_rng(55)
        checked = 0
        for _ in range(60):
            params, rec = _random_instance(rng)
            out = run_auction(params, rec)
            for w in out.winners:
                bid = next(c.bid for c in rec.candidates if c.ad_id == w.ad_id)
                if w.click_price <= params.price_floor + 1e-12:
                    continue  # floor-clamped: grid search floor below is meaningless
                # binary-search the 1e-4 grid for minimal keeping bid
                step = 1e-4
                lo_units = int(np.ceil(params.price_floor / step))
                hi_units = int(np.ceil(bid / step))
                def keeps(units):
                    test = _with_bid(rec, w.ad_id, units * step)
                    return _position_of(run_auction(params, test), w.ad_id) == w.slot_position
                assert keeps(hi_units)
                while lo_units < hi_units:
                    mid = (lo_units + hi_units) // 2
                    if keeps(mid):
                        hi_units = mid
                    else:
                        lo_units = mid + 1
                grid_infimum = hi_units * step
                assert abs(grid_infimum - w.click_price) <= step + 1e-9
                checked += 1
        assert checked > 50

    def test_bid_perturbation_keeps_and_loses_slot(self):
        rng = np.random.default_rng(77)
        kept = lost = 0
        for _ in range(200):
            params, rec = _random_instance(rng)
            out = run_auction(params, rec)
            for w in out.winners:
                up = run_auction(params, _with_bid(rec, w.ad_id, w.click_price + 1e-9))
                assert _position_of(up, w.ad_id) == w.slot_position
                kept += 1
                if w.click_price > params.price_floor + 1e-6:
                    down = run_auction(params, _with_bid(rec, w.ad_id, w.click_price - 1e-6))
                    pos = _position_of(down, w.ad_id)
                    assert pos is None or pos > w.slot_position
                    lost += 1
        assert kept > 200 and lost > 50

    def test_monotone_allocation(self):
        """Raising one candidate's bid never lowers its slot position."""
        rng = np.random.default_rng(13)
        for _ in range(150):
            params, rec = _random_instance(rng)
            if not rec.candidates:
                continue
            target = rec.candidates[int(rng.integers(len(rec.candidates)))]
            before = _position_of(run_auction(params, rec), target.ad_id)
            raised = _with_bid(rec, target.ad_id, target.bid * float(rng.uniform(1.0, 3.0)))
            after = _position_of(run_auction(params, raised), target.ad_id)
            if before is not None:
                assert after is not None and after <= before
