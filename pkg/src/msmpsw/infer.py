"""Paired influence-function inference: variance of a difference, the
chi-squared pair test and Wald intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

from .estimate import EstimateResult

__all__ = [
    "DegenerateTestError",
    "PairTest",
    "chi2_sf1",
    "chi2_critical",
    "rejects",
    "variance_of_difference",
    "pair_test",
    "PAIR_VARIANCES",
    "confidence_interval",
    "bootstrap_variance_of_difference",
]


class DegenerateTestError(ValueError):
    """Zero variance for a nonzero difference: the test statistic is infinite."""


def chi2_sf1(x: float) -> float:
    """Upper tail of the chi-squared distribution with 1 df, ``erfc(sqrt(x/2))``."""
    if x <= 0:
        return 1.0
    return float(special.erfc(math.sqrt(x / 2.0)))


def chi2_critical(alpha: float) -> float:
    """Upper ``alpha`` quantile of the chi-squared distribution with 1 df."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    return float(stats.chi2.isf(alpha, 1))


def rejects(D: float, alpha: float) -> bool:
    """Reject iff ``D`` is strictly above the chi-squared(1) critical value."""
    return bool(D > chi2_critical(alpha))


@dataclass(frozen=True)
class PairTest:
    m: int
    kinds: tuple
    difference: float
    variance: float
    D: float
    p_value: float
    alpha: float
    rejected: bool

    def to_dict(self) -> dict:
        return {"m": self.m, "d": self.D, "p": self.p_value, "rejected": self.rejected,
                "kinds": list(self.kinds), "difference": self.difference, "variance": self.variance}


def variance_of_difference(a: EstimateResult, b: EstimateResult) -> float:
    """``(1/n^2) sum_i (phi_a,i - phi_b,i)^2`` for estimators on the same subjects."""
    if a.influence.shape != b.influence.shape:
        raise ValueError(f"influence vectors differ in length: {a.influence.shape} vs {b.influence.shape}")
    d = a.influence - b.influence
    n = len(d)
    return float(np.dot(d, d) / n ** 2)


PAIR_VARIANCES = ("paired", "sum")


def pair_test(a: EstimateResult, b: EstimateResult, alpha: float, variance: Optional[float] = None,
              method: str = "paired") -> PairTest:
    """Test equal limits of two estimators with ``D = (a - b)^2 / V``.

    ``V`` is the paired influence-function variance of the difference
    (``method="paired"``), or the sum of the two naive variances
    (``method="sum"``), which ignores their covariance and is conservative
    when the estimators are positively correlated. An explicit ``variance``
    (e.g. from the bootstrap) overrides both.

    Rejects when ``D`` exceeds the upper ``alpha`` chi-squared(1) quantile
    (strictly). A zero difference with zero variance is not rejected.
    """
    diff = a.estimate - b.estimate
    if variance is not None:
        V = float(variance)
    elif method == "paired":
        V = variance_of_difference(a, b)
    elif method == "sum":
        V = a.variance + b.variance
    else:
        raise ValueError(f"unknown pair variance {method!r}; expected one of {PAIR_VARIANCES}")
    if V <= 0:
        if diff == 0:
            D, p = 0.0, 1.0
        else:
            raise DegenerateTestError(
                f"zero variance for a nonzero difference {diff:g} between {a.kind} and {b.kind} at m={a.m}")
    else:
        D = diff * diff / V
        p = chi2_sf1(D)
    return PairTest(a.m, (a.kind, b.kind), float(diff), float(V), float(D), p, alpha,
                    rejects(D, alpha))


def confidence_interval(e: EstimateResult, level: float = 0.95, exponentiate: bool = False,
                        z: Optional[float] = None) -> tuple:
    """Wald interval ``estimate -/+ z sqrt(variance)``.

    ``z`` defaults to the normal quantile for ``level`` (1.96 at 95%).
    With ``exponentiate`` the limits are returned on the ratio scale.
    """
    if z is None:
        z = float(stats.norm.isf((1 - level) / 2))
    half = z * math.sqrt(max(e.variance, 0.0))
    lo, hi = e.estimate - half, e.estimate + half
    if exponentiate:
        return math.exp(lo), math.exp(hi)
    return lo, hi


def bootstrap_variance_of_difference(panel, fn: Callable, B: int = 2000, seed: int = 0) -> float:
    """Nonparametric bootstrap variance of ``fn(panel)`` (a scalar difference).

    Subjects are resampled with replacement; ``fn`` receives the resampled
    panel and should refit everything it needs.
    """
    from .dgp import rng_for

    rng = rng_for(seed, 0)
    n = panel.n
    vals = np.empty(B)
    for b in range(B):
        idx = rng.integers(0, n, n)
        vals[b] = fn(panel.subset(idx))
    return float(vals.var(ddof=1))
