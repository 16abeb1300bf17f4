"""Parametric ranking score, GSP allocation and infimum clearing prices.

A candidate's ranking score is ``ctr**alpha * bid + gamma * ctr * cvr`` where
``ctr`` is the position-1 calibrated CTR: scores must be comparable before
positions are assigned, so ranking always uses the top-slot calibration while
per-winner metrics are re-calibrated at the assigned position.

The clearing price is the infimum bid that keeps a winner's position, i.e. the
bid at which its score equals the next surviving candidate's score (the
reserve score for the last winner), clamped into ``[price_floor, bid]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .calibration import CalibrationMap
from .errors import DegenerateCandidateError

ALPHA_RANGE = (0.0, 3.0)


@dataclass(frozen=True)
class MechanismParams:
    """Ranking-function parameters: (alpha, gamma) plus auction-level floors."""

    alpha: float
    gamma: float
    reserve_score: float = 0.0
    price_floor: float = 0.01

    def __post_init__(self):
        if not ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]:
            raise ValueError(f"alpha must be in {ALPHA_RANGE}, got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.reserve_score < 0:
            raise ValueError(f"reserve_score must be >= 0, got {self.reserve_score}")
        if self.price_floor <= 0:
            raise ValueError(f"price_floor must be > 0, got {self.price_floor}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "reserve_score": self.reserve_score,
            "price_floor": self.price_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MechanismParams":
        return cls(
            alpha=float(d["alpha"]),
            gamma=float(d["gamma"]),
            reserve_score=float(d["reserve_score"]),
            price_floor=float(d["price_floor"]),
        )


@dataclass(frozen=True)
class WinningAd:
    ad_id: str
    slot_position: int      # 1-based
    click_price: float
    calibrated_ctr: float   # calibrated at the assigned position
    predicted_cvr: float


@dataclass(frozen=True)
class AuctionOutcome:
    winners: tuple[WinningAd, ...] = field(default_factory=tuple)

    @property
    def has_ad(self) -> bool:
        return len(self.winners) > 0

    @property
    def filled_slots(self) -> int:
        return len(self.winners)

    @property
    def expected_clicks(self) -> float:
        return sum(w.calibrated_ctr for w in self.winners)

    @property
    def expected_revenue(self) -> float:
        return sum(w.calibrated_ctr * w.click_price for w in self.winners)

    @property
    def expected_conversions(self) -> float:
        return sum(w.calibrated_ctr * w.predicted_cvr for w in self.winners)


def ranking_score(params: MechanismParams, ctr: float, bid: float, cvr: float) -> float:
    """Score by which candidates are ordered; strictly increasing in bid for ctr > 0."""
    return ctr**params.alpha * bid + params.gamma * ctr * cvr


def clearing_price(
    params: MechanismParams, ctr: float, cvr: float, bid: float, next_score: float
) -> float:
    """Infimum bid keeping the winner above ``next_score``, clamped to [floor, bid].

    The raw price solves ``ctr**alpha * b + gamma * ctr * cvr = next_score``;
    when the hidden-cost term already exceeds ``next_score`` the raw price is
    negative and the floor applies.
    """
    if ctr <= 0.0 and params.alpha > 0.0:
        raise DegenerateCandidateError(
            f"ctr={ctr} with alpha={params.alpha}: clearing price undefined"
        )
    raw = (next_score - params.gamma * ctr * cvr) / ctr**params.alpha
    return min(bid, max(params.price_floor, raw))


def run_auction(
    params: MechanismParams,
    record,
    calib: CalibrationMap | None = None,
) -> AuctionOutcome:
    """Replay one request under ``params``: score, filter, allocate and price.

    Candidates are scored with their position-1 calibrated CTR; those scoring
    below the reserve (or with zero ranking CTR, which cannot be priced) are
    filtered out.  Survivors are sorted by (score desc, bid desc, ad_id asc)
    and the top ``n_slots`` win.  Winner ``k`` pays the infimum price against
    the (k+1)-th survivor's score, or against the reserve score when no
    survivor follows.
    """
    if calib is None:
        calib = CalibrationMap.identity()

    scored = []
    for i, cand in enumerate(record.candidates):
        ctr_rank = calib.apply(1, cand.predicted_ctr)
        if ctr_rank <= 0.0:
            continue
        score = ranking_score(params, ctr_rank, cand.bid, cand.predicted_cvr)
        if score < params.reserve_score:
            continue
        scored.append((score, cand, ctr_rank, i))

    scored.sort(key=lambda t: (-t[0], -t[1].bid, t[1].ad_id))

    winners = []
    n_winners = min(record.n_slots, len(scored))
    for k in range(n_winners):
        score, cand, ctr_rank, _ = scored[k]
        next_score = scored[k + 1][0] if k + 1 < len(scored) else params.reserve_score
        price = clearing_price(params, ctr_rank, cand.predicted_cvr, cand.bid, next_score)
        position = k + 1
        winners.append(
            WinningAd(
                ad_id=cand.ad_id,
                slot_position=position,
                click_price=price,
                calibrated_ctr=calib.apply(position, cand.predicted_ctr),
                predicted_cvr=cand.predicted_cvr,
            )
        )
    return AuctionOutcome(winners=tuple(winners))
