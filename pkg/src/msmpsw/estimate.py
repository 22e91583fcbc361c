"""IP-weighted estimators of the always- versus never-treated effect.

All estimators return an :class:`EstimateResult` with per-subject influence
contributions ``phi`` scaled so that ``variance = sum(phi**2) / n**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .glm import CoxData, RankError, fit_weighted_cox, fit_wls
from .ipw import WeightModels, WeightSet, at_risk, build_survival_weights, build_weights
from .panel import LongPanel

__all__ = [
    "EstimabilityError",
    "EstimateResult",
    "ContrastArms",
    "contrast_arms",
    "contrast_estimate",
    "wls_estimate",
    "wls_estimate_adjusted",
    "cox_estimate",
    "estimate",
    "combined_estimate",
]


class EstimabilityError(ValueError):
    """An arm (or risk set) is empty so the estimator is undefined."""


@dataclass(frozen=True)
class EstimateResult:
    estimate: float
    influence: np.ndarray
    variance: float
    kind: str
    m: int
    model_form: str
    n_effective: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def n(self) -> int:
        return len(self.influence)


@dataclass(frozen=True)
class ContrastArms:
    """``treated[i] = prod I(A(k)=1)`` and ``control[i] = prod I(A(k)=0)``
    over the last ``m`` times."""

    treated: np.ndarray
    control: np.ndarray
    m: int


def contrast_arms(panel: LongPanel, m: int) -> ContrastArms:
    K = panel.K
    window = panel.A[:, K - m:]
    return ContrastArms(np.all(window == 1, axis=1), np.all(window == 0, axis=1), m)


def _variance(phi):
    n = len(phi)
    return float(np.sum(phi ** 2) / n ** 2)


def _kish(w):
    s = w.sum()
    return float(s * s / np.sum(w * w)) if s > 0 else 0.0


def _subject_weights(panel, ws: WeightSet, case_weights):
    w = ws.filled()
    if case_weights is not None:
        w = w * np.asarray(case_weights, dtype=float)
    return w


def contrast_estimate(panel: LongPanel, ws: WeightSet, m: int, case_weights=None) -> EstimateResult:
    """Hajek contrast of weighted outcome means, always- minus never-treated
    over the last ``m`` times.

    With censoring only subjects with ``C(K) = 0`` contribute. ``case_weights``
    multiply the IP-weights (e.g. population masses for exact evaluation).
    """
    if ws.survival:
        raise ValueError("contrast_estimate needs a mean-mode weight set")
    if ws.kind != "SW" and ws.m != m:
        raise ValueError(f"weight set has m={ws.m}, estimator asked for m={m}")
    arms = contrast_arms(panel, m)
    w = _subject_weights(panel, ws, case_weights)
    Y = np.where(ws.mask, np.nan_to_num(panel.Y), 0.0)
    I1 = arms.treated & ws.mask
    I0 = arms.control & ws.mask
    n = panel.n
    for name, I in (("treated", I1), ("control", I0)):
        if not np.any(w[I] > 0):
            raise EstimabilityError(f"empty {name} arm at m={m}: no contributing subject with A(K-{m}..K-1) all "
                                    f"{1 if name == 'treated' else 0}")
    P1 = np.sum(w * I1) / n
    P0 = np.sum(w * I0) / n
    mu1 = np.sum(w * I1 * Y) / np.sum(w * I1)
    mu0 = np.sum(w * I0 * Y) / np.sum(w * I0)
    phi = I1 * w * (Y - mu1) / P1 - I0 * w * (Y - mu0) / P0
    return EstimateResult(
        float(mu1 - mu0), phi, _variance(phi), ws.kind, m, "saturated",
        n_effective=(_kish(w[I1]), _kish(w[I0])),
        meta={"mu1": float(mu1), "mu0": float(mu0)},
    )


def _wls_core(panel, ws, m, extra_cols, case_weights, model_form):
    if ws.survival:
        raise ValueError("wls_estimate needs a mean-mode weight set")
    K = panel.K
    if not 1 <= m <= K:
        raise ValueError(f"m must be in 1..{K}")
    mask = ws.mask
    w = _subject_weights(panel, ws, case_weights)
    A = np.nan_to_num(panel.A)
    cols = [np.ones(panel.n)] + [A[:, K - j] for j in range(1, m + 1)] + list(extra_cols)
    X = np.column_stack(cols)
    Y = np.where(mask, np.nan_to_num(panel.Y), 0.0)
    try:
        fit = fit_wls(X, Y, w)
    except RankError as exc:
        raise EstimabilityError(f"main-effect design rank deficient at m={m}: {exc}") from exc
    c = np.zeros(X.shape[1])
    c[1 : m + 1] = 1.0
    n = panel.n
    phi = n * fit.scores @ (fit.bread @ c)
    return EstimateResult(float(c @ fit.coef), phi, _variance(phi), ws.kind, m, model_form,
                          meta={"coef": fit.coef})


def wls_estimate(panel: LongPanel, ws: WeightSet, m: int, model_form: str = "main_effect",
                 case_weights=None) -> EstimateResult:
    """Weighted regression of Y on ``(1, A(K-1), ..., A(K-m))``.

    The estimate is the sum of the ``m`` treatment coefficients. The saturated
    form is delegated to :func:`contrast_estimate`, which is algebraically
    identical and numerically safer for large ``m``.
    """
    if model_form == "saturated":
        return contrast_estimate(panel, ws, m, case_weights)
    if model_form not in ("main_effect", "main"):
        raise ValueError(f"unknown model_form {model_form!r}")
    return _wls_core(panel, ws, m, [], case_weights, "main_effect")


def wls_estimate_adjusted(panel: LongPanel, ws: WeightSet, m: int, case_weights=None) -> EstimateResult:
    """Main-effect weighted regression with ``L(0)`` as an extra regressor.

    Pair it with weights whose numerators condition on ``L(0)``
    (``WeightModelSpec(adjust_L0=True)``).
    """
    L0 = panel.L0
    return _wls_core(panel, ws, m, [L0[:, j] for j in range(L0.shape[1])], case_weights, "main_effect_adjusted")


def cox_rows(panel: LongPanel, ws: WeightSet, m: int) -> CoxData:
    """Risk-set rows for the weighted Cox fit with covariates A(t-1..t-m)."""
    mask = ws.mask
    ii, tt0 = np.nonzero(mask)
    t = tt0 + 1
    A = np.nan_to_num(panel.A)
    X = np.zeros((len(ii), m))
    for j in range(1, m + 1):
        k = t - j
        ok = k >= 0
        X[ok, j - 1] = A[ii[ok], k[ok]]
    event = np.nan_to_num(panel.Y[ii, tt0]) == 1
    return CoxData(time=t, event=event.astype(float), X=X, weight=ws.values[ii, tt0], subject=ii)


def cox_estimate(panel: LongPanel, ws: WeightSet, m: int, model_form: str = "main_effect") -> EstimateResult:
    """Weighted Cox fit of the hazard on ``A(t-1), ..., A(t-m)``.

    The estimate is the sum of the ``m`` log hazard ratios (always- versus
    never-treated). Influence contributions are per-subject score residuals
    mapped through the inverse information.
    """
    if not panel.survival:
        raise ValueError("cox_estimate needs a survival-mode panel")
    if not ws.survival:
        raise ValueError("cox_estimate needs time-specific weights")
    if model_form not in ("main_effect", "main"):
        raise ValueError("only the main-effect Cox model is supported")
    data = cox_rows(panel, ws, m)
    fit = fit_weighted_cox(data)
    c = np.ones(m)
    n = panel.n
    subjects = np.unique(data.subject)
    phi = np.zeros(n)
    phi[subjects] = n * fit.scores @ (fit.bread @ c)
    return EstimateResult(float(c @ fit.coef), phi, _variance(phi), ws.kind, m, "main_effect",
                          meta={"coef": fit.coef, "events": float(data.event.sum())})


def estimate(panel: LongPanel, models: WeightModels, kind: str, m: int, model_form: str = "saturated",
             adjusted: bool = False, case_weights=None) -> EstimateResult:
    """Build the weights of ``kind`` at depth ``m`` and apply the matching estimator."""
    if panel.survival:
        ws = build_survival_weights(models, kind, m)
        res = cox_estimate(panel, ws, m)
    else:
        ws = build_weights(models, kind, m)
        if adjusted:
            res = wls_estimate_adjusted(panel, ws, m, case_weights)
        else:
            res = wls_estimate(panel, ws, m, model_form, case_weights)
    return replace(res, kind=kind.upper(), m=m)


def combined_estimate(panel: LongPanel, models: WeightModels, m: int, alpha: float, base: str = "SW",
                      model_form: str = "saturated", adjusted: bool = False, cache=None,
                      pair_variance: str = "paired") -> EstimateResult:
    """PSW estimate unless the PSW-versus-base test rejects at ``m``, then the base.

    The returned ``kind`` is ``"SW/PSW"`` or ``"RSW/PSW"``; ``meta["branch"]``
    records which estimator was used and ``meta["test"]`` the pair test.
    The variance is the chosen branch's naive variance (the pretest is not
    accounted for).
    """
    from .infer import pair_test

    base = base.upper()
    if base not in ("SW", "RSW"):
        raise ValueError("base must be 'SW' or 'RSW'")
    get = cache if cache is not None else (lambda k, mm: estimate(panel, models, k, mm, model_form, adjusted))
    psw = get("PSW", m)
    other = get(base, m)
    test = pair_test(psw, other, alpha, method=pair_variance)
    chosen = other if test.rejected else psw
    meta = dict(chosen.meta)
    meta.update({"branch": chosen.kind, "test": test})
    return replace(chosen, kind=f"{base}/PSW", meta=meta)
