"""Seeded synthetic replay/impression logs with known ground truth.

Production replay logs are replaced by a generator whose true click and
conversion probabilities are known, so calibration quality and metric
estimates can be checked against an oracle.  Predicted CTRs are derived from
the true ones through a configurable miscalibration (multiplicative inflation
by default, optionally log-normal noise), mirroring over-optimistic production
predictors; true CTR decays multiplicatively with slot position while the
prediction is position-blind.

Replay log format: newline-delimited JSON, one object per request with fields
``request_id, category, n_slots, candidates[{ad_id, bid, predicted_ctr,
predicted_cvr}]``.  Impression log: ``request_id, slot_position,
predicted_ctr, clicked``.  Files ending in ``.gz`` are gzip-compressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .auction import MechanismParams, run_auction
from .errors import ConfigError, DataError, ParseError
from .ndjson import dumps_canonical, open_text_read, open_text_write, read_records

TRUTH_FORMAT = "auctionopt-truth"
TRUTH_VERSION = 1


@dataclass(frozen=True)
class AdCandidate:
    ad_id: str
    bid: float
    predicted_ctr: float
    predicted_cvr: float


@dataclass(frozen=True)
class ReplayRecord:
    request_id: str
    category: str
    n_slots: int
    candidates: tuple[AdCandidate, ...]


@dataclass(frozen=True)
class ImpressionRecord:
    request_id: str
    slot_position: int
    predicted_ctr: float
    clicked: bool


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic auction world; all draws derive from ``seed``."""

    n_requests: int
    n_categories: int = 4
    slots_min: int = 1
    slots_max: int = 3
    cands_min: int = 0
    cands_max: int = 8
    bid_median: float = 1.0
    bid_sigma: float = 0.5
    ctr_beta_a: float = 2.0
    ctr_beta_b: float = 12.0
    cvr_beta_a: float = 2.0
    cvr_beta_b: float = 38.0
    position_decay: float = 0.7
    inflation_factor: float = 1.3
    prediction_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_requests < 0:
            raise ConfigError("n_requests must be >= 0")
        if self.n_categories < 1:
            raise ConfigError("n_categories must be >= 1")
        if not 1 <= self.slots_min <= self.slots_max:
            raise ConfigError("need 1 <= slots_min <= slots_max")
        if not 0 <= self.cands_min <= self.cands_max:
            raise ConfigError("need 0 <= cands_min <= cands_max")
        for name in ("bid_median", "bid_sigma", "ctr_beta_a", "ctr_beta_b",
                     "cvr_beta_a", "cvr_beta_b", "inflation_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 < self.position_decay <= 1.0:
            raise ConfigError("position_decay must be in (0, 1]")
        if self.prediction_noise_sigma < 0:
            raise ConfigError("prediction_noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class GroundTruth:
    """True click/conversion probabilities behind a generated log.

    ``click_prob(request, candidate_index, position)`` is
    ``base_ctr * position_decay**(position-1)``: non-increasing in position.
    Entries are keyed by candidate index within the owning record.
    """

    position_decay: np.ndarray                      # (max positions,) factors
    base_ctr: dict[str, np.ndarray] = field(default_factory=dict)
    true_cvr: dict[str, np.ndarray] = field(default_factory=dict)

    def click_prob(self, request_id: str, cand_index: int, position: int) -> float:
        base = self.base_ctr.get(request_id)
        if base is None or cand_index >= base.size:
            raise DataError(f"ground truth missing entry for {request_id}[{cand_index}]")
        return float(base[cand_index] * self.position_decay[position - 1])


# Keep true probabilities strictly inside (0, 1)
_PROB_LO = 1e-4
_PROB_HI = 0.95
_PRED_CAP = 0.99


def _request_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    # Independent per-request substreams so generation may be parallelized
    return np.random.default_rng([seed, stream, index])


def _miscalibrate(base_ctr: np.ndarray, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    pred = base_ctr * config.inflation_factor
    if config.prediction_noise_sigma > 0:
        pred = pred * np.exp(config.prediction_noise_sigma * rng.standard_normal(pred.size))
    return np.clip(pred, 1e-6, _PRED_CAP)


def generate_replay_log(config: SynthConfig) -> tuple[list[ReplayRecord], GroundTruth]:
    """Generate ``config.n_requests`` records plus aligned ground truth."""
    decay = config.position_decay ** np.arange(config.slots_max, dtype=np.float64)
    truth = GroundTruth(position_decay=decay)
    records = []
    for i in range(config.n_requests):
        rng = _request_rng(config.seed, i, stream=0)
        category = f"c{int(rng.integers(config.n_categories)):02d}"
        n_slots = int(rng.integers(config.slots_min, config.slots_max + 1))
        n_cands = int(rng.integers(config.cands_min, config.cands_max + 1))
        bids = rng.lognormal(math.log(config.bid_median), config.bid_sigma, n_cands)
        base_ctr = np.clip(
            rng.beta(config.ctr_beta_a, config.ctr_beta_b, n_cands), _PROB_LO, _PROB_HI
        )
        cvr = np.clip(
            rng.beta(config.cvr_beta_a, config.cvr_beta_b, n_cands), _PROB_LO, _PROB_HI
        )
        pred_ctr = _miscalibrate(base_ctr, config, rng)
        request_id = f"r{i:08d}"
        candidates = tuple(
            AdCandidate(
                ad_id=f"{request_id}-a{k}",
                bid=float(bids[k]),
                predicted_ctr=float(pred_ctr[k]),
                predicted_cvr=float(cvr[k]),
            )
            for k in range(n_cands)
        )
        records.append(
            ReplayRecord(
                request_id=request_id, category=category, n_slots=n_slots, candidates=candidates
            )
        )
        truth.base_ctr[request_id] = base_ctr
        truth.true_cvr[request_id] = cvr
    return records, truth


def renoise_predictions(
    log: Sequence[ReplayRecord], truth: GroundTruth, config: SynthConfig, seed: int
) -> list[ReplayRecord]:
    """Fresh predicted CTRs around ground truth (same miscalibration shape).

    Emulates a later serving day: the true probabilities are unchanged but the
    predictor noise is redrawn with ``seed``.
    """
    out = []
    for i, rec in enumerate(log):
        base = truth.base_ctr.get(rec.request_id)
        if base is None or base.size != len(rec.candidates):
            raise DataError(f"ground truth missing entry for {rec.request_id}")
        rng = _request_rng(seed, i, stream=2)
        pred = _miscalibrate(base, config, rng)
        candidates = tuple(
            AdCandidate(c.ad_id, c.bid, float(pred[k]), c.predicted_cvr)
            for k, c in enumerate(rec.candidates)
        )
        out.append(ReplayRecord(rec.request_id, rec.category, rec.n_slots, candidates))
    return out


def generate_impression_log(
    replay: Sequence[ReplayRecord],
    truth: GroundTruth,
    baseline: MechanismParams,
    seed: int,
) -> list[ImpressionRecord]:
    """Run the baseline auction on raw predictions and realize clicks.

    Served traffic predates any calibration, so the baseline auction ranks by
    the raw predicted CTRs (identity calibration).  Each winning slot emits
    one impression with ``clicked ~ Bernoulli(true CTR at that position)``.
    """
    impressions = []
    for i, rec in enumerate(replay):
        outcome = run_auction(baseline, rec, calib=None)
        if not outcome.has_ad:
            continue
        rng = _request_rng(seed, i, stream=1)
        index_of = {c.ad_id: k for k, c in enumerate(rec.candidates)}
        for w in outcome.winners:
            p_true = truth.click_prob(rec.request_id, index_of[w.ad_id], w.slot_position)
            impressions.append(
                ImpressionRecord(
                    request_id=rec.request_id,
                    slot_position=w.slot_position,
                    predicted_ctr=rec.candidates[index_of[w.ad_id]].predicted_ctr,
                    clicked=bool(rng.random() < p_true),
                )
            )
    return impressions


# ---------------------------------------------------------------------------
# File round trips
# ---------------------------------------------------------------------------

def store_replay_log(log: Sequence[ReplayRecord], path: str | Path) -> None:
    with open_text_write(path) as fh:
        for rec in log:
            fh.write(
                dumps_canonical(
                    {
                        "request_id": rec.request_id,
                        "category": rec.category,
                        "n_slots": rec.n_slots,
                        "candidates": [
                            {
                                "ad_id": c.ad_id,
                                "bid": c.bid,
                                "predicted_ctr": c.predicted_ctr,
                                "predicted_cvr": c.predicted_cvr,
                            }
                            for c in rec.candidates
                        ],
                    }
                )
                + "\n"
            )


def load_replay_log(path: str | Path) -> list[ReplayRecord]:
    records = []
    seen: set[str] = set()
    with open_text_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            records.append(_parse_replay_line(path, lineno, line, seen))
    return records


def _parse_replay_line(path, lineno: int, line: str, seen: set[str]) -> ReplayRecord:
    import json

    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
    try:
        request_id = str(obj["request_id"])
        category = str(obj["category"])
        n_slots = int(obj["n_slots"])
        raw_cands = obj["candidates"]
        candidates = tuple(
            AdCandidate(
                ad_id=str(c["ad_id"]),
                bid=float(c["bid"]),
                predicted_ctr=float(c["predicted_ctr"]),
                predicted_cvr=float(c["predicted_cvr"]),
            )
            for c in raw_cands
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, lineno, f"malformed record: {exc!r}") from exc
    if n_slots < 1:
        raise ParseError(path, lineno, f"n_slots must be >= 1, got {n_slots}")
    if request_id in seen:
        raise ParseError(path, lineno, f"duplicate request_id {request_id!r}")
    seen.add(request_id)
    for c in candidates:
        if c.bid <= 0 or not 0 < c.predicted_ctr < 1 or not 0 < c.predicted_cvr < 1:
            raise ParseError(path, lineno, f"candidate {c.ad_id!r} violates field bounds")
    return ReplayRecord(request_id, category, n_slots, candidates)


def store_impression_log(log: Sequence[ImpressionRecord], path: str | Path) -> None:
    with open_text_write(path) as fh:
        for imp in log:
            fh.write(
                dumps_canonical(
                    {
                        "request_id": imp.request_id,
                        "slot_position": imp.slot_position,
                        "predicted_ctr": imp.predicted_ctr,
                        "clicked": imp.clicked,
                    }
                )
                + "\n"
            )


def load_impression_log(path: str | Path) -> list[ImpressionRecord]:
    out = []
    for lineno, obj in enumerate(read_records(path), start=1):
        try:
            out.append(
                ImpressionRecord(
                    request_id=str(obj["request_id"]),
                    slot_position=int(obj["slot_position"]),
                    predicted_ctr=float(obj["predicted_ctr"]),
                    clicked=bool(obj["clicked"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, lineno, f"malformed impression: {exc!r}") from exc
    return out


def store_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    with open_text_write(path) as fh:
        header = {
            "format": TRUTH_FORMAT,
            "version": TRUTH_VERSION,
            "position_decay": [float(v) for v in truth.position_decay],
        }
        fh.write(dumps_canonical(header) + "\n")
        for request_id in truth.base_ctr:
            fh.write(
                dumps_canonical(
                    {
                        "request_id": request_id,
                        "base_ctr": [float(v) for v in truth.base_ctr[request_id]],
                        "true_cvr": [float(v) for v in truth.true_cvr[request_id]],
                    }
                )
                + "\n"
            )


def load_ground_truth(path: str | Path) -> GroundTruth:
    truth = None
    for lineno, obj in enumerate(read_records(path), start=1):
        if lineno == 1:
            if obj.get("format") != TRUTH_FORMAT or obj.get("version") != TRUTH_VERSION:
                raise ParseError(path, lineno, "not a ground-truth file")
            truth = GroundTruth(position_decay=np.array(obj["position_decay"]))
            continue
        truth.base_ctr[obj["request_id"]] = np.array(obj["base_ctr"], dtype=np.float64)
        truth.true_cvr[obj["request_id"]] = np.array(obj["true_cvr"], dtype=np.float64)
    if truth is None:
        raise ParseError(path, 1, "empty ground-truth file")
    return truth
