"""Shared parameter arithmetic: iterated logs, bin counts, capacities.

All logarithms are base 2. ``llog`` clamps at 1 so tiny domains stay
well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BadSpec

WORD_BYTES = 8  # one word = one document identifier

DEFAULT_LAMBDA = 128
# Calibrated on the 2^10-scale allocation experiment (see the acceptance
# suite): smallest grid value with zero overflow across 100 trials.
DEFAULT_LOAD_CONST = 1.75


def llog(x: float) -> int:
    """max(1, ceil(log2 log2 max(x, 4)))."""
    return max(1, math.ceil(math.log2(math.log2(max(x, 4)))))


def delta_for(mode: str, lam: int = DEFAULT_LAMBDA) -> int:
    """Failure-probability knob for the allocator.

    ``one`` fixes 1; ``logloglog`` applies the triple log to the work
    factor 2^lam, i.e. max(1, ceil(log2 log2 lam)).
    """
    if mode == "one":
        return 1
    if mode == "logloglog":
        return max(1, math.ceil(math.log2(math.log2(max(lam, 4)))))
    raise BadSpec(f"unknown delta mode {mode!r}")


def next_multiple(x: int, step: int) -> int:
    return ((x + step - 1) // step) * step


def next_pow2(x: int) -> int:
    return 1 if x <= 1 else 1 << (x - 1).bit_length()


def is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def ceil_root_pow(n: int, num: int, den: int) -> int:
    """ceil(n ** (num/den)) with a guard against float fuzz at integers."""
    val = n ** (num / den)
    r = round(val)
    if abs(val - r) < 1e-9:
        return int(r)
    return math.ceil(val)


@dataclass(frozen=True)
class AllocParams:
    """Geometry of the tiered two-choice allocation.

    w_max is the bound on the total scaled weight; bins hold at most
    ``capacity`` weight units each.
    """

    w_max: float
    lam: int = DEFAULT_LAMBDA
    delta_mode: str = "logloglog"
    load_const: float = DEFAULT_LOAD_CONST

    @property
    def delta(self) -> int:
        return delta_for(self.delta_mode, self.lam)

    @property
    def num_bins(self) -> int:
        return max(1, math.ceil(self.w_max / (self.delta * llog(self.w_max))))

    @property
    def num_tiers(self) -> int:
        return llog(self.num_bins)

    @property
    def capacity_units(self) -> int:
        return math.ceil(self.load_const * self.delta * llog(self.w_max))

    @property
    def capacity(self) -> float:
        return float(self.capacity_units)
