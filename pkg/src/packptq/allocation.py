"""Mixed-precision bit allocation over packs.

Solves  max sum_j b_j * Omega_j  s.t.  sum_j b_j * p_j <= C,  b_j in K
exactly, by dynamic programming over exact integer cost. Ties prefer lower
cost, then the lexicographically smallest (b_1..b_M). A brute-force
enumerator with identical tie rules serves as the differential oracle.

Both solvers accumulate the objective left-to-right over packs so identical
bit vectors produce bit-identical float objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .data import Dataset
from .errors import ConfigError, InfeasibleBudgetError
from .nets import Network
from .packing import PackPlan
from .quant import quantize_single_block
from .tensor import Tensor
from . import tensor as T

BRUTE_FORCE_LIMIT = 10**6


@dataclass
class SensitivityReport:
    plan: PackPlan
    omegas: list[float]          # Omega_j per pack
    block_scores: list[float]    # S per block (1-based order)
    block_losses: list[float]    # per-block quantization loss at the reference width
    reference_bits: int

    def to_json(self) -> dict:
        return {
            "packs": [
                {"range": [lo, hi], "omega": self.omegas[j]}
                for j, (lo, hi) in enumerate(self.plan.packs)
            ],
            "block_scores": self.block_scores,
            "block_losses": self.block_losses,
            "reference_bits": self.reference_bits,
        }


@dataclass
class BitAllocation:
    bits: list[int]
    candidates: list[int]
    budget: int
    p: list[int]                 # weight parameters per pack
    objective: float
    cost: int
    pack_ranges: list[tuple[int, int]]
    omegas: list[float]

    @property
    def avg_bits(self) -> float:
        return self.cost / sum(self.p)

    def to_json(self) -> dict:
        return {
            "K": self.candidates,
            "C": self.budget,
            "packs": [
                {
                    "range": [lo, hi],
                    "omega": self.omegas[j],
                    "p": self.p[j],
                    "bits": self.bits[j],
                }
                for j, (lo, hi) in enumerate(self.pack_ranges)
            ],
            "objective": self.objective,
            "cost": self.cost,
            "avg_bits": self.avg_bits,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BitAllocation":
        packs = doc["packs"]
        return cls(
            bits=[int(pk["bits"]) for pk in packs],
            candidates=[int(k) for k in doc["K"]],
            budget=int(doc["C"]),
            p=[int(pk["p"]) for pk in packs],
            objective=float(doc["objective"]),
            cost=int(doc["cost"]),
            pack_ranges=[(int(pk["range"][0]), int(pk["range"][1])) for pk in packs],
            omegas=[float(pk["omega"]) for pk in packs],
        )


def pack_quant_loss(network: Network, calibration: Dataset, t: int, bits: int) -> float:
    """Task-loss increase when only block t is MinMax-quantized at ``bits``.

    Both the block's weights and its input activation are quantized; every
    other block stays full precision.
    """
    x, y = calibration.inputs, calibration.labels
    fp_logits = network.logits_np(x)
    fp_loss = T.reduce_mean(T.softmax_cross_entropy(Tensor(fp_logits), y)).item()
    qnet = quantize_single_block(network, t, bits, x, y)
    q_logits = qnet.logits_np(x)
    q_loss = T.reduce_mean(T.softmax_cross_entropy(Tensor(q_logits), y)).item()
    return q_loss - fp_loss


def compute_sensitivities(plan: PackPlan, scores: list[float], quant_losses: list[float],
                          reference_bits: int) -> SensitivityReport:
    """Omega_j = mean over the pack's blocks of score * quantization loss."""
    n = plan.n_blocks
    if len(scores) != n or len(quant_losses) != n:
        raise ConfigError(
            f"plan covers {n} blocks but got {len(scores)} scores / {len(quant_losses)} losses"
        )
    omegas = []
    for lo, hi in plan.packs:
        terms = [scores[t - 1] * quant_losses[t - 1] for t in range(lo, hi + 1)]
        omegas.append(float(np.mean(terms)))
    return SensitivityReport(plan, omegas, list(map(float, scores)),
                             list(map(float, quant_losses)), reference_bits)


# ---------------------------------------------------------------------------
# exact MCKP solvers
# ---------------------------------------------------------------------------

def _validate_instance(omegas, p, candidates, budget):
    m = len(omegas)
    if m == 0 or len(p) != m:
        raise ConfigError("allocator: omegas and p must be non-empty and equal length")
    if not candidates:
        raise ConfigError("allocator: empty candidate bit set")
    if any(int(k) != k or k < 1 for k in candidates):
        raise ConfigError(f"allocator: candidate bit-widths must be positive integers: {candidates}")
    if any(int(q) != q or q < 1 for q in p):
        raise ConfigError(f"allocator: parameter counts must be positive integers: {p}")
    candidates = sorted(int(k) for k in set(candidates))
    p = [int(q) for q in p]
    budget = int(budget)
    min_cost = min(candidates) * sum(p)
    if min_cost > budget:
        raise InfeasibleBudgetError(budget, min_cost)
    return [float(w) for w in omegas], p, candidates, budget


def _better(a: tuple[float, tuple[int, ...]], b: tuple[float, tuple[int, ...]]) -> bool:
    """True if candidate a beats b at the same cost: higher objective, tie -> lex-smaller vector."""
    if a[0] != b[0]:
        return a[0] > b[0]
    return a[1] < b[1]


def solve_mckp(omegas, p, candidates, budget) -> tuple[float, int, tuple[int, ...]]:
    """DP over exact cost; returns (objective, cost, bits)."""
    omegas, p, candidates, budget = _validate_instance(omegas, p, candidates, budget)
    dp: dict[int, tuple[float, tuple[int, ...]]] = {0: (0.0, ())}
    for j, (w, pj) in enumerate(zip(omegas, p)):
        nxt: dict[int, tuple[float, tuple[int, ...]]] = {}
        for cost, (obj, vec) in dp.items():
            for k in candidates:
                nc = cost + k * pj
                if nc > budget:
                    continue
                cand = (obj + k * w, vec + (k,))
                cur = nxt.get(nc)
                if cur is None or _better(cand, cur):
                    nxt[nc] = cand
        dp = nxt
    best = None
    for cost, (obj, vec) in dp.items():
        key = (obj, cost, vec)
        if best is None or _final_better(key, best):
            best = key
    assert best is not None  # feasibility was checked up front
    return best[0], best[1], best[2]


def _final_better(a: tuple[float, int, tuple[int, ...]],
                  b: tuple[float, int, tuple[int, ...]]) -> bool:
    """Max objective, then min cost, then lexicographically smallest vector."""
    if a[0] != b[0]:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


def solve_mckp_bruteforce(omegas, p, candidates, budget) -> tuple[float, int, tuple[int, ...]]:
    """Exhaustive enumeration with identical tie rules (the oracle)."""
    omegas, p, candidates, budget = _validate_instance(omegas, p, candidates, budget)
    m = len(omegas)
    if len(candidates) ** m > BRUTE_FORCE_LIMIT:
        raise ConfigError(
            f"brute-force instance too large: {len(candidates)}^{m} combinations"
        )
    best = None
    for vec in product(candidates, repeat=m):
        cost = 0
        obj = 0.0
        for k, w, pj in zip(vec, omegas, p):
            cost += k * pj
            obj = obj + k * w
        if cost > budget:
            continue
        key = (obj, cost, vec)
        if best is None or _final_better(key, best):
            best = key
    if best is None:
        raise InfeasibleBudgetError(budget, min(candidates) * sum(p))
    return best[0], best[1], best[2]


def _build_allocation(report: SensitivityReport, p: list[int], candidates, budget,
                      solution) -> BitAllocation:
    obj, cost, vec = solution
    return BitAllocation(
        bits=list(vec),
        candidates=sorted(int(k) for k in set(candidates)),
        budget=int(budget),
        p=[int(q) for q in p],
        objective=obj,
        cost=cost,
        pack_ranges=list(report.plan.packs),
        omegas=list(report.omegas),
    )


def allocate_bits(report: SensitivityReport, p: list[int], candidates, budget) -> BitAllocation:
    return _build_allocation(report, p, candidates, budget,
                             solve_mckp(report.omegas, p, candidates, budget))


def allocate_bits_bruteforce(report: SensitivityReport, p: list[int], candidates,
                             budget) -> BitAllocation:
    return _build_allocation(report, p, candidates, budget,
                             solve_mckp_bruteforce(report.omegas, p, candidates, budget))


def pack_param_counts(network: Network, plan: PackPlan) -> list[int]:
    if plan.n_blocks != network.n_blocks:
        raise ConfigError(
            f"plan covers {plan.n_blocks} blocks, network has {network.n_blocks}"
        )
    return [
        sum(network.blocks[t - 1].param_count for t in range(lo, hi + 1))
        for lo, hi in plan.packs
    ]
