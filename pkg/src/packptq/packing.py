"""Partitioning blocks into contiguous packs.

The score-guided strategy ("hada") walks backwards from the last block:
with [t_s, t_e] = [1, n], find the minimum-score index t_min in that range,
emit pack [t_min .. t_e], set t_e = t_min - 1 and repeat. Ties pick the
smallest index so packs come out as large as possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

STRATEGIES = ("hada", "random", "fixed", "none")


@dataclass
class PackPlan:
    packs: list[tuple[int, int]]  # [lo, hi] 1-based inclusive ranges, ascending
    strategy: str
    scores: list[float] | None = None
    capped: bool = False  # True when a max-pack-size cap split an oversized pack
    meta: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return self.packs[-1][1] if self.packs else 0

    @property
    def n_packs(self) -> int:
        return len(self.packs)

    def block_to_pack(self) -> dict[int, int]:
        out = {}
        for j, (lo, hi) in enumerate(self.packs):
            for t in range(lo, hi + 1):
                out[t] = j
        return out

    def validate(self) -> None:
        if not self.packs:
            raise ConfigError("empty pack plan")
        expect = 1
        for lo, hi in self.packs:
            if lo != expect or hi < lo:
                raise ConfigError(f"packs are not a contiguous ascending partition: {self.packs}")
            expect = hi + 1

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "packs": [[lo, hi] for lo, hi in self.packs],
            "scores": self.scores,
            "capped": self.capped,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PackPlan":
        plan = cls(
            packs=[(int(lo), int(hi)) for lo, hi in doc["packs"]],
            strategy=str(doc["strategy"]),
            scores=doc.get("scores"),
            capped=bool(doc.get("capped", False)),
        )
        plan.validate()
        return plan


def _argmin(scores: list[float], lo: int, hi: int) -> int:
    """Index (1-based) of the minimum over scores[lo..hi]; ties -> smallest index."""
    best, best_val = lo, scores[lo - 1]
    for t in range(lo + 1, hi + 1):
        if scores[t - 1] < best_val:
            best, best_val = t, scores[t - 1]
    return best


def _cap_split(lo: int, hi: int, scores: list[float], max_size: int) -> list[tuple[int, int]]:
    if hi - lo + 1 <= max_size:
        return [(lo, hi)]
    cut = _argmin(scores, lo + 1, hi)  # split before the internal minimum
    return _cap_split(lo, cut - 1, scores, max_size) + _cap_split(cut, hi, scores, max_size)


def partition_hada(scores: list[float], max_pack_size: int | None = None) -> PackPlan:
    """Score-guided packing: repeatedly cut at the minimum-score block."""
    scores = [float(s) for s in scores]
    if not scores:
        raise ConfigError("partition_hada: need at least one score")
    if any(math.isnan(s) or math.isinf(s) for s in scores):
        raise NumericalError("partition_hada: scores contain NaN/Inf")
    if max_pack_size is not None and max_pack_size < 1:
        raise ConfigError(f"max_pack_size must be >= 1, got {max_pack_size}")

    n = len(scores)
    packs: list[tuple[int, int]] = []
    t_e = n
    while t_e >= 1:
        t_min = _argmin(scores, 1, t_e)
        packs.append((t_min, t_e))
        t_e = t_min - 1
    packs.reverse()

    capped = False
    if max_pack_size is not None:
        split = []
        for lo, hi in packs:
            parts = _cap_split(lo, hi, scores, max_pack_size)
            capped = capped or len(parts) > 1
            split.extend(parts)
        packs = split
    plan = PackPlan(packs, "hada", scores=scores, capped=capped)
    plan.validate()
    return plan


def partition_random(n: int, target_pack_count: int, seed: int) -> PackPlan:
    """Contiguous packs from target_pack_count - 1 uniformly drawn cut points."""
    if n < 1:
        raise ConfigError("partition_random: need n >= 1")
    if not 1 <= target_pack_count <= n:
        raise ConfigError(
            f"target_pack_count {target_pack_count} outside valid range 1..{n}"
        )
    rng = np.random.default_rng(seed)
    cuts = sorted(rng.choice(np.arange(2, n + 1), size=target_pack_count - 1, replace=False))
    starts = [1] + [int(c) for c in cuts]
    packs = [(s, (starts[i + 1] - 1) if i + 1 < len(starts) else n) for i, s in enumerate(starts)]
    plan = PackPlan(packs, "random", meta={"seed": seed})
    plan.validate()
    return plan


def partition_fixed(n: int, size: int) -> PackPlan:
    if n < 1 or size < 1:
        raise ConfigError("partition_fixed: need n >= 1 and size >= 1")
    packs = [(lo, min(lo + size - 1, n)) for lo in range(1, n + 1, size)]
    plan = PackPlan(packs, "fixed", meta={"size": size})
    plan.validate()
    return plan


def partition_none(n: int) -> PackPlan:
    """All-singleton plan: plain block-wise reconstruction."""
    if n < 1:
        raise ConfigError("partition_none: need n >= 1")
    plan = PackPlan([(t, t) for t in range(1, n + 1)], "none")
    plan.validate()
    return plan
