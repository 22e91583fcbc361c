"""Ground truth by direct summation and by brute-force simulation.

Everything for enumerable distributions is computed from the probability
table alone, without the weight-model or estimator code, so it can serve as
an independent check of both.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from .dgp import ExactDistribution, NormalDgpConfig, PositivityError, generate, preset

__all__ = [
    "conditional_treatment",
    "exact_numerators",
    "potential_mean",
    "msm_coefficients",
    "treatment_association",
    "treatment_association_from_marginal",
    "weighted_limit",
    "exact_limits",
    "TruthEstimate",
    "mc_truth",
]


def _check_positivity(dist: ExactDistribution):
    if np.any(dist.pA <= 0) or np.any(dist.pA >= 1):
        raise PositivityError("positivity violated: some treatment probability in the table is 0 or 1")
    if np.any(dist.mass < 0) or not np.isclose(dist.mass.sum(), 1.0, rtol=0, atol=1e-10):
        raise ValueError("path masses must be non-negative and sum to 1")


def conditional_treatment(dist: ExactDistribution, k: int, start: int = 0) -> np.ndarray:
    """Per-path ``P[A(k)=1 | A(start..k-1)]`` under the table's own law."""
    num: Dict[tuple, float] = {}
    den: Dict[tuple, float] = {}
    for a, w in zip(dist.A, dist.mass):
        key = tuple(a[start:k])
        den[key] = den.get(key, 0.0) + w
        if a[k] == 1:
            num[key] = num.get(key, 0.0) + w
    out = np.empty(len(dist.mass))
    for r, a in enumerate(dist.A):
        key = tuple(a[start:k])
        if den[key] <= 0:
            raise PositivityError(f"treatment history {key} before time {k} has zero probability")
        out[r] = num.get(key, 0.0) / den[key]
    return out


def exact_numerators(dist: ExactDistribution) -> list:
    """Exact numerator grids ``num[r][path, k] = P[A(k)=1 | last min(r, k) treatments]``.

    ``r`` runs over ``0..K-1``; the list layout matches weight models with
    full-history numerators.
    """
    K = dist.K
    out = []
    for r in range(K):
        g = np.empty((len(dist.mass), K))
        for k in range(K):
            g[:, k] = conditional_treatment(dist, k, k - min(r, k))
        out.append(g)
    return out


def _lag_law(dist: ExactDistribution) -> np.ndarray:
    """``prod_k P[L(k) = l_k | past]`` along each path (the covariate factor)."""
    f = np.where(dist.L == 1, dist.pL, 1 - dist.pL)
    return np.prod(f, axis=1)


def potential_mean(dist: ExactDistribution, regime, natural_before: int = 0) -> float:
    """``E[Y^a]`` by the g-formula.

    ``regime`` fixes ``A(natural_before..K-1)``; treatments before
    ``natural_before`` follow their observed-data law (``natural_before=0``
    fixes the whole history).
    """
    regime = np.asarray(regime)
    K = dist.K
    if len(regime) != K - natural_before:
        raise ValueError("regime length must equal the number of intervened times")
    keep = np.all(dist.A[:, natural_before:] == regime, axis=1)
    f = _lag_law(dist)
    if natural_before:
        pa = dist.pA[:, :natural_before]
        f = f * np.prod(np.where(dist.A[:, :natural_before] == 1, pa, 1 - pa), axis=1)
    return float(np.sum(f[keep] * dist.EY[keep]))


def msm_coefficients(dist: ExactDistribution) -> tuple:
    """Least-squares fit of ``E[Y^a] = psi_0 + sum_j psi_j a(K-j)`` over all regimes.

    Returns ``(psi, max_residual)``; ``psi[j]`` multiplies ``a(K-j)`` and a
    zero residual means the main-effect MSM holds exactly.
    """
    K = dist.K
    regimes = np.array(list(itertools.product((0, 1), repeat=K)), dtype=float)
    means = np.array([potential_mean(dist, a) for a in regimes])
    X = np.column_stack([np.ones(len(regimes))] + [regimes[:, K - j] for j in range(1, K + 1)])
    psi, *_ = np.linalg.lstsq(X, means, rcond=None)
    return psi, float(np.max(np.abs(X @ psi - means)))


def treatment_association(dist: ExactDistribution, m: int) -> Dict[int, float]:
    """``q_j = P[A(K-j)=1 | last m all 1] - P[A(K-j)=1 | last m all 0]`` for ``j > m``,
    summed path by path."""
    K = dist.K
    late = dist.A[:, K - m:]
    on = np.all(late == 1, axis=1)
    off = np.all(late == 0, axis=1)
    q = {}
    for j in range(m + 1, K + 1):
        hit = dist.A[:, K - j] == 1
        p1 = dist.mass[on & hit].sum() / dist.mass[on].sum()
        p0 = dist.mass[off & hit].sum() / dist.mass[off].sum()
        q[j] = float(p1 - p0)
    return q


def treatment_association_from_marginal(dist: ExactDistribution, m: int) -> Dict[int, float]:
    """Same quantity as :func:`treatment_association`, summing in the other order:
    first the marginal law of the treatment history, then conditionals."""
    K = dist.K
    law: Dict[tuple, float] = {}
    for a, w in zip(dist.A, dist.mass):
        law[tuple(int(x) for x in a)] = law.get(tuple(int(x) for x in a), 0.0) + w
    q = {}
    for j in range(m + 1, K + 1):
        vals = []
        for level in (1, 0):
            tot = sum(p for a, p in law.items() if all(x == level for x in a[K - m:]))
            hit = sum(p for a, p in law.items() if all(x == level for x in a[K - m:]) and a[K - j] == 1)
            vals.append(hit / tot)
        q[j] = float(vals[0] - vals[1])
    return q


def _path_weights(dist: ExactDistribution, kind: str, m: int) -> np.ndarray:
    K = dist.K
    den = np.where(dist.A == 1, dist.pA, 1 - dist.pA)
    w = np.ones(len(dist.mass))
    first = 0 if kind == "SW" else K - m
    for k in range(first, K):
        start = K - m if kind == "RSW" else 0
        p = conditional_treatment(dist, k, start)
        num = np.where(dist.A[:, k] == 1, p, 1 - p)
        w *= num / den[:, k]
    return w


def weighted_limit(dist: ExactDistribution, kind: str, m: int) -> float:
    """Population limit of the Hajek contrast with exact ``kind`` weights."""
    kind = kind.upper()
    if kind not in ("SW", "RSW", "PSW"):
        raise ValueError(f"unknown weight kind {kind!r}")
    K = dist.K
    w = dist.mass * _path_weights(dist, kind, m)
    late = dist.A[:, K - m:]
    on = np.all(late == 1, axis=1)
    off = np.all(late == 0, axis=1)
    return float(np.sum(w[on] * dist.EY[on]) / np.sum(w[on]) - np.sum(w[off] * dist.EY[off]) / np.sum(w[off]))


def exact_limits(dist: ExactDistribution, m: int) -> dict:
    """Exact population quantities at depth ``m``.

    Keys: ``theta_K`` (always vs never treated), ``theta_m`` (last ``m``
    times fixed, earlier ones natural), the weighted limits ``sw``, ``rsw``,
    ``psw`` and ``q`` (dict ``j -> q_j`` for ``j > m``).
    """
    _check_positivity(dist)
    K = dist.K
    if not 1 <= m <= K:
        raise ValueError(f"m must be in 1..{K}")
    ones, zeros = np.ones(K), np.zeros(K)
    return {
        "theta_K": potential_mean(dist, ones) - potential_mean(dist, zeros),
        "theta_m": potential_mean(dist, ones[:m], K - m) - potential_mean(dist, zeros[:m], K - m),
        "sw": weighted_limit(dist, "SW", m),
        "rsw": weighted_limit(dist, "RSW", m),
        "psw": weighted_limit(dist, "PSW", m),
        "q": treatment_association(dist, m),
    }


@dataclass(frozen=True)
class TruthEstimate:
    value: float
    se: float
    n: int


def mc_truth(cfg: Union[str, NormalDgpConfig], m: int, kind: str, n_huge: int = 10 ** 6,
             model_form: str = "saturated", adjusted: bool = False, rep: int = 0,
             seed: Optional[int] = None) -> TruthEstimate:
    """Estimator limit approximated on one very large draw.

    Denominators are the generating probabilities; numerators are saturated
    in the treatment history (exact for binary treatments in large samples).
    The standard error is the estimator's own sandwich SE on that draw.
    """
    from .estimate import estimate
    from .ipw import WeightModelSpec, fit_weight_models

    if n_huge < 10 ** 6:
        raise ValueError("n_huge must be at least 10**6")
    if isinstance(cfg, str):
        cfg = preset(cfg)
    overrides = {"n": n_huge}
    if seed is not None:
        overrides["seed"] = seed
    panel, truth = generate(cfg, rep=rep, **overrides)
    spec = WeightModelSpec(num_form="saturated", true_denominators=True, adjust_L0=adjusted)
    models = fit_weight_models(panel, spec, truth)
    res = estimate(panel, models, kind, m, model_form, adjusted)
    return TruthEstimate(res.estimate, res.se, panel.n)
