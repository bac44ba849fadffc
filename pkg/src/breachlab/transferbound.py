"""Analytic oracle for the cross-version loss-gap bound.

The loss of each model around an adversarial input is approximated by a
1-D linear classifier with shared slope and distinct intercepts; squared
error against the target value plays the role of the loss. For an input
optimised on the leaked model F (loss under gamma) that transfers to the
recovered model G (loss under gamma_prime), the gap between G's and F's
losses exceeds a threshold T with a chosen probability, assuming the
input is uniformly distributed over F's feasible interval.

The module computes the case split (transfer vs no transfer), the
closed-form lower bound T(D, gamma, p), its inverse p(D, gamma, T), and a
Monte-Carlo verifier for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class TransferCase(Enum):
    NO_TRANSFER = "case1_no_transfer"
    TRANSFERS = "case2_transfers"


@dataclass(frozen=True)
class LinearPair:
    """Leaked/recovered pair of 1-D linear models with shared slope.

    Construct via `LinearPair.create`, which swaps the intercepts if
    needed so that intercept_g >= intercept_f (the gap D is symmetric in
    the two models).
    """

    slope: float  # a > 0
    intercept_f: float  # b_F (leaked model)
    intercept_g: float  # b_G (recovered model), >= b_F
    gamma: float  # attack-optimisation tightness on F
    gamma_prime: float  # transfer tolerance on G, > gamma
    target: float  # y_t

    @classmethod
    def create(cls, slope, intercept_f, intercept_g, gamma, gamma_prime, target) -> "LinearPair":
        if intercept_g < intercept_f:
            intercept_f, intercept_g = intercept_g, intercept_f
        pair = cls(slope, intercept_f, intercept_g, gamma, gamma_prime, target)
        pair.validate()
        return pair

    def validate(self) -> None:
        if self.slope <= 0:
            raise ValueError(f"slope must be positive, got {self.slope}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.gamma_prime <= self.gamma:
            raise ValueError(
                f"gamma_prime must exceed gamma, got {self.gamma_prime} <= {self.gamma}"
            )
        if self.intercept_g < self.intercept_f:
            raise ValueError("intercept_g must be >= intercept_f (use LinearPair.create)")

    @property
    def intercept_gap(self) -> float:
        return self.intercept_g - self.intercept_f


def transfer_case(pair: LinearPair) -> TransferCase:
    """No transfer when the intercept gap exceeds sqrt(gamma') - sqrt(gamma)."""
    pair.validate()
    if pair.intercept_gap > math.sqrt(pair.gamma_prime) - math.sqrt(pair.gamma):
        return TransferCase.NO_TRANSFER
    return TransferCase.TRANSFERS


def lower_bound_T(gap: float, gamma: float, p: float) -> float:
    """Loss-gap threshold exceeded with probability p: D*(D + 2*sqrt(g) - 4*sqrt(g)*p)."""
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    root = math.sqrt(gamma)
    return gap * (gap + 2.0 * root - 4.0 * root * p)


def exceed_probability(gap: float, gamma: float, threshold: float) -> float:
    """Closed-form inverse of lower_bound_T, clipped to [0, 1].

    Probability that the loss gap exceeds `threshold` for a uniformly
    distributed transferring input; degenerate gap 0 gives probability 0
    for any threshold >= 0 and 1 otherwise (the gap is identically zero).
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    if gap == 0:
        return 0.0 if threshold >= 0 else 1.0
    root = math.sqrt(gamma)
    return float(min(1.0, max(0.0, (gap * (gap + 2.0 * root) - threshold) / (4.0 * root * gap))))


def monte_carlo_verify(pair: LinearPair, threshold: float, n_samples: int, seed: int) -> float:
    """Empirical probability that the G-minus-F loss gap exceeds `threshold`.

    Inputs are sampled uniformly over F's feasible interval
    [(y_t - b_F - sqrt(gamma))/a, (y_t - b_F + sqrt(gamma))/a]; losses are
    squared errors of the linear responses against the target. Rejects
    no-transfer pairs, whose interval is not fully inside G's.
    """
    if n_samples < 10_000:
        raise ValueError(f"need at least 10000 samples, got {n_samples}")
    if transfer_case(pair) is TransferCase.NO_TRANSFER:
        raise ValueError("pair is in the no-transfer case; nothing to verify")
    root = math.sqrt(pair.gamma)
    lo = (pair.target - pair.intercept_f - root) / pair.slope
    hi = (pair.target - pair.intercept_f + root) / pair.slope
    x = np.random.default_rng(seed).uniform(lo, hi, size=n_samples)
    loss_f = (pair.target - (pair.slope * x + pair.intercept_f)) ** 2
    loss_g = (pair.target - (pair.slope * x + pair.intercept_g)) ** 2
    return float(np.mean(loss_g - loss_f > threshold))


def verification_grid(cases, n_samples: int, seed: int) -> dict:
    """JSON-ready report verifying the bound over a grid of cases.

    Each case is a dict with gamma, ratio (gamma_prime/gamma), p, and
    optionally slope/intercept_f/target. The pair is built at the maximal
    transferring gap D = sqrt(gamma') - sqrt(gamma); the empirical
    exceedance of T = lower_bound_T(D, gamma, p) is compared with p, with
    a binomial 95% interval.
    """
    rows = []
    for i, case in enumerate(cases):
        gamma = float(case["gamma"])
        ratio = float(case.get("ratio", 25.0))
        p = float(case.get("p", 0.95))
        pair = LinearPair.create(
            slope=float(case.get("slope", 1.0)),
            intercept_f=float(case.get("intercept_f", 0.0)),
            intercept_g=float(case.get("intercept_f", 0.0))
            + (math.sqrt(gamma * ratio) - math.sqrt(gamma)),
            gamma=gamma,
            gamma_prime=gamma * ratio,
            target=float(case.get("target", 0.0)),
        )
        threshold = lower_bound_T(pair.intercept_gap, gamma, p)
        empirical = monte_carlo_verify(pair, threshold, n_samples, seed + i)
        half_width = 1.96 * math.sqrt(max(empirical * (1 - empirical), 1e-12) / n_samples)
        rows.append(
            {
                "gamma": gamma,
                "gamma_prime": gamma * ratio,
                "gap": pair.intercept_gap,
                "p_requested": p,
                "threshold": threshold,
                "p_empirical": empirical,
                "ci95": [empirical - half_width, empirical + half_width],
                "n_samples": n_samples,
                "within_ci": abs(empirical - p) <= max(half_width, 0.01),
            }
        )
    return {"cases": rows, "all_within_ci": all(r["within_ci"] for r in rows)}
