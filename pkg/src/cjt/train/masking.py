"""Confidence-driven label masking of pseudo-labels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..synthtask import PAD


class MissingConfidences(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    positions: frozenset            # masked target indices
    masked: tuple                   # target with masked tokens replaced by PAD

    @classmethod
    def build(cls, target: Sequence[int], positions) -> "MaskPlan":
        pos = frozenset(int(p) for p in positions)
        return cls(pos, tuple(PAD if i in pos else int(t) for i, t in enumerate(target)))


def threshold_from_quantile(confidences: Sequence[float], q: float) -> float:
    """Smallest confidence ``c`` whose empirical CDF reaches ``q`` (sorted-order quantile).

    Returns -inf when ``q`` is 0 so that nothing is masked.
    """
    vals = np.sort(np.asarray(confidences, dtype=np.float64))
    k = math.ceil(q * vals.size - 1e-12)
    if k <= 0 or vals.size == 0:
        return -math.inf
    return float(vals[k - 1])


def solve_conf_multiplier(confidences: Sequence[float], rate: float) -> float:
    """Multiplier ``k`` with ``mean(min(1, k * (1 - p))) == rate``.

    Starts from ``rate / mean(1 - p)``; bisects only when clipping at 1 kicks in.
    """
    u = 1.0 - np.asarray(confidences, dtype=np.float64)
    if rate <= 0:
        return 0.0
    if u.mean() <= 0:
        return math.inf
    k = rate / u.mean()
    if np.all(k * u <= 1.0):
        return k
    if np.mean(u > 0) < rate:
        return math.inf
    lo, hi = k, k
    while np.minimum(1.0, hi * u).mean() < rate:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * u).mean() < rate:
            lo = mid
        else:
            hi = mid
    return hi


class MaskPlanner:
    """Corpus-level masking policy fitted once, then sampled per record visit."""

    def __init__(self, strategy: str, mask_prob: float, confidences: Optional[Sequence[float]] = None,
                 k: Optional[float] = None):
        if strategy not in ("conf", "thres", "rand", "none"):
            raise ValueError(f"unknown mask strategy {strategy!r}")
        if strategy in ("conf", "thres") and confidences is None:
            raise MissingConfidences(f"{strategy} masking needs token confidences")
        self.strategy = strategy
        self.mask_prob = mask_prob
        self.threshold = None
        self.k = None
        if strategy == "thres":
            self.threshold = threshold_from_quantile(confidences, mask_prob)
        elif strategy == "conf":
            self.k = solve_conf_multiplier(confidences, mask_prob) if k is None else float(k)

    @classmethod
    def fit(cls, pairs, strategy: str, mask_prob: float, k: Optional[float] = None) -> "MaskPlanner":
        confs = None
        if strategy in ("conf", "thres"):
            confs = []
            for r in pairs:
                if r.confidences is None:
                    raise MissingConfidences(f"record {r.id} has no confidences")
                confs.extend(r.confidences)
        return cls(strategy, mask_prob, confs, k)

    def positions(self, target: Sequence[int], confidences: Optional[Sequence[float]],
                  rng: np.random.Generator) -> np.ndarray:
        n = len(target)
        if self.strategy == "none" or self.mask_prob == 0 or n == 0:
            return np.zeros(n, dtype=bool)
        if self.strategy == "rand":
            return rng.random(n) < self.mask_prob
        p = np.asarray(confidences, dtype=np.float64)
        if p.shape[0] != n:
            raise MissingConfidences("confidences must match the target length")
        if self.strategy == "thres":
            return p <= self.threshold
        prob = np.minimum(1.0, self.k * (1.0 - p)) if math.isfinite(self.k) else (p < 1.0).astype(float)
        return rng.random(n) < prob

    def plan(self, record, rng: np.random.Generator) -> MaskPlan:
        m = self.positions(record.target, record.confidences, rng)
        return MaskPlan.build(record.target, np.nonzero(m)[0])


def make_mask_plan(pairs, strategy: str, mask_prob: float, k: Optional[float] = None,
                   seed: int = 0) -> dict:
    """One plan per record (id -> MaskPlan), deterministic given ``seed``."""
    planner = MaskPlanner.fit(pairs, strategy, mask_prob, k)
    rng = np.random.default_rng(seed)
    return {r.id: planner.plan(r, rng) for r in pairs}


def realized_mask_rate(plans: dict) -> float:
    masked = sum(len(p.positions) for p in plans.values())
    total = sum(len(p.masked) for p in plans.values())
    return masked / max(total, 1)
