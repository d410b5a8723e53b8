"""Weighted two-choice allocation with per-tier decisions.

Balls carry weights in [0, 1]. The weight range is split into tiers whose
boundaries double: tier 0 is [0, 1/log2 m] and is placed by one choice
alone; each higher tier runs an independent unweighted two-choice process
over the number of balls of that tier in the two candidate bins, ignoring
concrete weights. Growing a ball within its tier updates it in place;
crossing into a higher tier leaves a residual copy behind (it keeps
counting toward load and tier populations but is no longer addressable)
and re-inserts the ball under two-choice in the new tier.

The concrete weight inside a tier never influences any bin choice, so
replaying a sequence with weights snapped to their tier's upper bound
yields identical placements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BallNotFound, DuplicateBall, WeightDecrease, WeightOutOfRange
from .params import AllocParams, llog


def tier_of(weight: float, num_bins: int) -> int:
    """Tier index for a weight: 0 iff weight <= 1/log2(m), else
    ceil(log2(weight * log2 m)) clamped to [1, llog(m)]."""
    if not 0.0 <= weight <= 1.0:
        raise WeightOutOfRange(f"weight {weight} outside [0, 1]")
    if num_bins < 4:
        raise WeightOutOfRange("need at least 4 bins for the tier split")
    lg = math.log2(num_bins)
    if weight <= 1.0 / lg:
        return 0
    return max(1, min(llog(num_bins), math.ceil(math.log2(weight * lg))))


def choose_bin(tier: int, count_first: int, count_second: int) -> int:
    """0 for the first candidate, 1 for the second.

    Tier 0 always takes the first choice; higher tiers take the bin with
    fewer balls of that tier, ties toward the first.
    """
    if tier == 0:
        return 0
    return 0 if count_first <= count_second else 1


@dataclass
class Ball:
    ident: bytes
    tier: int
    weight: float
    payload: Optional[list] = None
    residual: bool = False


@dataclass
class BinState:
    balls: list = field(default_factory=list)
    tier_counts: dict = field(default_factory=dict)
    load: float = 0.0

    def add(self, ball: Ball):
        self.balls.append(ball)
        self.tier_counts[ball.tier] = self.tier_counts.get(ball.tier, 0) + 1
        self.load += ball.weight

    def count(self, tier: int) -> int:
        return self.tier_counts.get(tier, 0)


ChoiceFn = Callable[[bytes], tuple[int, int]]


class TieredTwoChoiceAllocator:
    """Stateful allocator over ``params.num_bins`` bins.

    ``choice_fn`` maps a ball identity to its two candidate bins; it must be
    deterministic per identity (hash of the identity, or a pre-drawn table
    for statistical experiments).
    """

    def __init__(self, params: AllocParams, choice_fn: ChoiceFn):
        self.params = params
        self.num_bins = params.num_bins
        self.capacity = params.capacity
        self.choice_fn = choice_fn
        self.bins = [BinState() for _ in range(self.num_bins)]
        self._live: dict[bytes, int] = {}  # ident -> bin index
        self.residual_weight: dict[bytes, float] = {}

    # -- queries -----------------------------------------------------------
    def live_bin(self, ident: bytes) -> Optional[int]:
        return self._live.get(ident)

    def max_load(self) -> float:
        return max((b.load for b in self.bins), default=0.0)

    def overflow_check(self) -> bool:
        return any(b.load > self.capacity + 1e-9 for b in self.bins)

    def total_load(self) -> float:
        return sum(b.load for b in self.bins)

    def live_weight(self) -> float:
        total = 0.0
        for ident, idx in self._live.items():
            for ball in self.bins[idx].balls:
                if ball.ident == ident and not ball.residual:
                    total += ball.weight
        return total

    # -- operations ----------------------------------------------------------
    def insert_ball(self, ident: bytes, weight: float, payload=None) -> int:
        if ident in self._live:
            raise DuplicateBall(ident.hex())
        a, b = self.choice_fn(ident)
        tier = tier_of(weight, self.num_bins) if self.num_bins >= 4 else 0
        pick = choose_bin(tier, self.bins[a].count(tier), self.bins[b].count(tier))
        target = a if pick == 0 else b
        self.bins[target].add(Ball(ident, tier, weight, payload))
        self._live[ident] = target
        return target

    def update_ball(self, ident: bytes, old_weight: float, new_weight: float, extra_payload=None):
        """Returns ("in_place", bin) or ("moved", bin)."""
        if new_weight < old_weight:
            raise WeightDecrease(f"{new_weight} < {old_weight}")
        idx = self._live.get(ident)
        if idx is None:
            raise BallNotFound(ident.hex())
        bin_state = self.bins[idx]
        ball = next(
            (x for x in bin_state.balls if x.ident == ident and not x.residual), None
        )
        if ball is None:
            raise BallNotFound(ident.hex())
        old_tier = ball.tier
        new_tier = tier_of(new_weight, self.num_bins) if self.num_bins >= 4 else 0
        if new_tier == old_tier:
            bin_state.load += new_weight - ball.weight
            ball.weight = new_weight
            if extra_payload:
                ball.payload = (ball.payload or []) + list(extra_payload)
            return ("in_place", idx)
        # Residual copy stays behind at the old weight with a dummy payload
        # of equal length; the live ball re-enters under two-choice in the
        # new tier, reusing the identity's original two candidates.
        merged_payload = (ball.payload or []) + list(extra_payload or [])
        ball.residual = True
        if ball.payload is not None:
            ball.payload = [0] * len(ball.payload)
        self.residual_weight[ident] = self.residual_weight.get(ident, 0.0) + ball.weight
        del self._live[ident]
        a, b = self.choice_fn(ident)
        pick = choose_bin(new_tier, self.bins[a].count(new_tier), self.bins[b].count(new_tier))
        target = a if pick == 0 else b
        self.bins[target].add(Ball(ident, new_tier, new_weight, merged_payload or None))
        self._live[ident] = target
        return ("moved", target)

    @classmethod
    def setup(cls, params: AllocParams, balls: Sequence[tuple[bytes, float]],
              choice_fn: ChoiceFn, payloads=None) -> "TieredTwoChoiceAllocator":
        """Fold insert_ball over the balls in input order."""
        state = cls(params, choice_fn)
        for i, (ident, weight) in enumerate(balls):
            state.insert_ball(ident, weight, payloads[i] if payloads else None)
        return state


def rng_choice_fn(num_bins: int, rng: np.random.Generator) -> ChoiceFn:
    """Random-oracle stand-in for statistical experiments: two fresh uniform
    choices per identity, memoized so repeats are consistent."""
    table: dict[bytes, tuple[int, int]] = {}

    def fn(ident: bytes) -> tuple[int, int]:
        got = table.get(ident)
        if got is None:
            got = (int(rng.integers(num_bins)), int(rng.integers(num_bins)))
            table[ident] = got
        return got

    return fn


def baseline_one_choice(weights: Sequence[float], num_bins: int, rng: np.random.Generator) -> float:
    """Max load after placing each weighted ball in one uniform bin."""
    loads = np.zeros(num_bins)
    picks = rng.integers(0, num_bins, size=len(weights))
    np.add.at(loads, picks, np.asarray(weights, dtype=float))
    return float(loads.max()) if num_bins else 0.0


def baseline_two_choice(num_balls: int, num_bins: int, rng: np.random.Generator) -> int:
    """Max ball count after unweighted two-choice placement."""
    counts = np.zeros(num_bins, dtype=np.int64)
    pairs = rng.integers(0, num_bins, size=(num_balls, 2))
    for a, b in pairs:
        counts[a if counts[a] <= counts[b] else b] += 1
    return int(counts.max()) if num_bins else 0
