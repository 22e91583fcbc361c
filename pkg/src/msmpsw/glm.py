"""Weighted regression fitters with sandwich ingredients.

Every fitter returns a :class:`GlmFit` carrying the coefficients, the bread
(inverse of the negative Hessian), per-observation (or per-subject) score
contributions and convergence diagnostics. The sandwich covariance is
``bread @ scores.T @ scores @ bread``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

__all__ = [
    "FitDiagnostics",
    "GlmFit",
    "ConvergenceError",
    "RankError",
    "DegenerateError",
    "CoxData",
    "fit_weighted_logistic",
    "fit_wls",
    "fit_weighted_cox",
    "logistic_loglik",
    "logistic_gradient",
    "cox_loglik",
    "cox_gradient",
]


class ConvergenceError(RuntimeError):
    """Iterative fit failed to converge; ``diagnostics`` says how far it got."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class RankError(np.linalg.LinAlgError):
    """Design is rank deficient on the weighted support."""


class DegenerateError(ValueError):
    """Data cannot identify the model at all (e.g. no events)."""


@dataclass(frozen=True)
class FitDiagnostics:
    converged: bool
    iterations: int
    max_gradient: float
    condition_warning: bool = False


@dataclass(frozen=True)
class GlmFit:
    coef: np.ndarray
    bread: np.ndarray
    scores: np.ndarray
    diagnostics: FitDiagnostics

    def sandwich(self) -> np.ndarray:
        meat = self.scores.T @ self.scores
        return self.bread @ meat @ self.bread


def _solve(H, g):
    """Solve ``H x = g`` for symmetric ``H``: Cholesky, least squares if not PD."""
    try:
        c = linalg.cho_factor(H, check_finite=False)
        return linalg.cho_solve(c, g, check_finite=False), False
    except linalg.LinAlgError:
        x, *_ = linalg.lstsq(H, g, check_finite=False)
        return x, True


def _inverse(H, *, strict=False):
    try:
        c = linalg.cho_factor(H, check_finite=False)
        return linalg.cho_solve(c, np.eye(H.shape[0]), check_finite=False), False
    except linalg.LinAlgError:
        if strict:
            raise RankError("information matrix is singular") from None
        return linalg.pinvh(H), True


def _small_step(step, beta, rtol=1e-8):
    return step.size == 0 or float(np.max(np.abs(step))) <= rtol * (1.0 + float(np.max(np.abs(beta))))


def _check_inputs(X, y, w):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    if X.shape[0] != y.shape[0] or w.shape != y.shape:
        raise ValueError("X, y and w must have matching lengths")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    return X, y, w


def logistic_loglik(beta, X, y, w):
    eta = X @ beta
    return float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))


def logistic_gradient(beta, X, y, w):
    return X.T @ (w * (y - expit(X @ beta)))


def fit_weighted_logistic(X, y, w=None, *, tol=1e-8, max_iter=100, beta0=None) -> GlmFit:
    """Weighted logistic regression by Newton-Raphson (IRLS) with step halving.

    Maximises ``sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`` with
    ``p_i = expit(x_i' beta)``. Convergence is declared when the max-norm of the
    score is at most ``tol`` and the next Newton step is negligible.

    Raises
    ------
    ConvergenceError
        On non-convergence, including (quasi-)separation.
    """
    X, y, w = _check_inputs(X, y, w)
    p = X.shape[1]
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    ll = logistic_loglik(beta, X, y, w)
    cond_flag = False
    grad = logistic_gradient(beta, X, y, w)
    gmax = float(np.max(np.abs(grad))) if p else 0.0
    it = 0
    while True:
        mu = expit(X @ beta)
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X
        step, fallback = _solve(H, grad) if p else (np.zeros(0), False)
        # a small score alone is not enough: along a separating direction the
        # score vanishes while the Newton step does not
        if gmax <= tol and _small_step(step, beta):
            beta = beta + step  # free quadratic-convergence polish
            break
        if it >= max_iter:
            diag = FitDiagnostics(False, it, gmax, cond_flag)
            raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations (|grad|={gmax:.3g})", diag)
        it += 1
        cond_flag |= fallback
        halvings = 0
        while True:
            cand = beta + step
            ll_new = logistic_loglik(cand, X, y, w)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (1 + abs(ll)):
                break
            step = step / 2
            halvings += 1
            if halvings > 30:
                diag = FitDiagnostics(False, it, gmax, cond_flag)
                raise ConvergenceError("IRLS step halving failed", diag)
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > 50:
            diag = FitDiagnostics(False, it, gmax, cond_flag)
            raise ConvergenceError("coefficients diverging: likely separation", diag)
        grad = logistic_gradient(beta, X, y, w)
        gmax = float(np.max(np.abs(grad)))
        if halvings > 20 and gmax > tol:
            diag = FitDiagnostics(False, it, gmax, cond_flag)
            raise ConvergenceError("IRLS stalled", diag)
    mu = expit(X @ beta)
    H = (X * (w * mu * (1 - mu))[:, None]).T @ X
    gmax = float(np.max(np.abs(logistic_gradient(beta, X, y, w)))) if p else 0.0
    bread, fallback = _inverse(H)
    cond_flag |= fallback or np.linalg.cond(H) > 1e12
    scores = X * (w * (y - mu))[:, None]
    return GlmFit(beta, bread, scores, FitDiagnostics(True, it, gmax, bool(cond_flag)))


def fit_wls(X, y, w=None) -> GlmFit:
    """Weighted least squares, ``beta = (X'WX)^{-1} X'Wy`` by direct solve.

    ``scores`` holds ``x_i w_i (y_i - x_i' beta)``; ``bread`` is ``(X'WX)^{-1}``.

    Raises
    ------
    RankError
        If ``X'WX`` is singular.
    """
    X, y, w = _check_inputs(X, y, w)
    support = w > 0
    Xs = X[support] * np.sqrt(w[support])[:, None]
    if Xs.shape[0] < X.shape[1] or np.linalg.matrix_rank(Xs) < X.shape[1]:
        raise RankError("X'WX is singular: design is rank deficient on the weighted support")
    XtWX = (X * w[:, None]).T @ X
    XtWy = X.T @ (w * y)
    try:
        c = linalg.cho_factor(XtWX, check_finite=False)
        beta = linalg.cho_solve(c, XtWy, check_finite=False)
        bread = linalg.cho_solve(c, np.eye(X.shape[1]), check_finite=False)
        cond_flag = False
    except linalg.LinAlgError:
        # fall back to QR on the weighted design
        Q, R = np.linalg.qr(Xs)
        beta = linalg.solve_triangular(R, Q.T @ (y[support] * np.sqrt(w[support])))
        Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
        bread = Rinv @ Rinv.T
        cond_flag = True
    resid = y - X @ beta
    scores = X * (w * resid)[:, None]
    gmax = float(np.max(np.abs(scores.sum(axis=0)))) if X.shape[1] else 0.0
    return GlmFit(beta, bread, scores, FitDiagnostics(True, 0, gmax, cond_flag))


@dataclass(frozen=True)
class CoxData:
    """Counting-process rows for a discrete-time Cox fit.

    Each row is one subject at risk at integer time ``time``. ``event`` marks an
    event at that time, ``X`` holds the (time-varying) covariates and ``weight``
    the row's weight. ``subject`` groups rows for robust score residuals.
    """

    time: np.ndarray
    event: np.ndarray
    X: np.ndarray
    weight: np.ndarray
    subject: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "time", np.asarray(self.time, dtype=np.int64))
        object.__setattr__(self, "event", np.asarray(self.event, dtype=float))
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=float))
        object.__setattr__(self, "subject", np.asarray(self.subject, dtype=np.int64))


class _RiskSets:
    """Rows grouped by time for fast per-time sums."""

    def __init__(self, data: CoxData):
        order = np.argsort(data.time, kind="stable")
        self.order = order
        self.time = data.time[order]
        self.X = data.X[order]
        self.w = data.weight[order]
        self.d = data.event[order]
        self.subject = data.subject[order]
        times, starts = np.unique(self.time, return_index=True)
        self.bounds = np.append(starts, len(self.time))
        self.group = np.repeat(np.arange(len(times)), np.diff(self.bounds))
        self.G = len(times)
        self.dw = np.bincount(self.group, self.w * self.d, minlength=self.G)
        self.event_groups = np.nonzero(self.dw > 0)[0]

    def sums(self, beta, second=True):
        eta = self.X @ beta
        eta_shift = eta - eta.max()
        r = self.w * np.exp(eta_shift)
        S0 = np.bincount(self.group, r, minlength=self.G)
        p = self.X.shape[1]
        S1 = np.empty((self.G, p))
        for j in range(p):
            S1[:, j] = np.bincount(self.group, r * self.X[:, j], minlength=self.G)
        S2 = None
        if second:
            S2 = np.zeros((self.G, p, p))
            for g in self.event_groups:
                a, b = self.bounds[g], self.bounds[g + 1]
                Xg = self.X[a:b]
                S2[g] = (Xg * r[a:b, None]).T @ Xg
        return eta, eta.max(), r, S0, S1, S2


def cox_loglik(beta, data: CoxData) -> float:
    """Weighted Breslow log partial likelihood."""
    rs = data if isinstance(data, _RiskSets) else _RiskSets(data)
    eta, shift, r, S0, _, _ = rs.sums(np.asarray(beta, dtype=float), second=False)
    ev = rs.event_groups
    return float(np.sum(rs.w * rs.d * eta) - np.sum(rs.dw[ev] * (np.log(S0[ev]) + shift)))


def cox_gradient(beta, data: CoxData) -> np.ndarray:
    rs = data if isinstance(data, _RiskSets) else _RiskSets(data)
    _, _, _, S0, S1, _ = rs.sums(np.asarray(beta, dtype=float), second=False)
    ev = rs.event_groups
    return (rs.X * (rs.w * rs.d)[:, None]).sum(axis=0) - (rs.dw[ev, None] * S1[ev] / S0[ev, None]).sum(axis=0)


def fit_weighted_cox(data: CoxData, *, tol=1e-8, max_iter=100) -> GlmFit:
    """Weighted Cox partial likelihood with Breslow ties, by Newton-Raphson.

    Each row's contribution to its risk set is multiplied by its weight. The
    returned ``scores`` are per-subject weighted score residuals (rows in
    ``unique(subject)`` order), so ``bread @ scores.T @ scores @ bread`` is the
    robust sandwich covariance.

    Raises
    ------
    DegenerateError
        If there are no events.
    RankError
        If the information matrix is singular (e.g. a constant covariate).
    ConvergenceError
        On monotone likelihood or other non-convergence.
    """
    rs = _RiskSets(data)
    if len(rs.event_groups) == 0:
        raise DegenerateError("no events: partial likelihood is flat")
    p = rs.X.shape[1]

    def info_and_grad(beta):
        eta, shift, r, S0, S1, S2 = rs.sums(beta)
        ev = rs.event_groups
        xbar = S1[ev] / S0[ev, None]
        grad = (rs.X * (rs.w * rs.d)[:, None]).sum(axis=0) - (rs.dw[ev, None] * xbar).sum(axis=0)
        V = S2[ev] / S0[ev, None, None] - xbar[:, :, None] * xbar[:, None, :]
        info = np.einsum("g,gjk->jk", rs.dw[ev], V)
        ll = float(np.sum(rs.w * rs.d * eta) - np.sum(rs.dw[ev] * (np.log(S0[ev]) + shift)))
        return ll, grad, info

    beta = np.zeros(p)
    ll, grad, info = info_and_grad(beta)
    scale = max(1.0, float(np.sum(rs.dw)))
    if np.linalg.matrix_rank(info, tol=1e-10 * scale) < p:
        raise RankError("Cox information matrix is singular: a covariate is constant within risk sets")
    gmax = float(np.max(np.abs(grad)))
    it = 0
    while True:
        step, _ = _solve(info, grad)
        if gmax <= tol and _small_step(step, beta):
            beta = beta + step  # free quadratic-convergence polish
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"Cox Newton-Raphson did not converge in {max_iter} iterations",
                FitDiagnostics(False, it, gmax),
            )
        it += 1
        halvings = 0
        while True:
            cand = beta + step
            ll_new, grad_new, info_new = info_and_grad(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (1 + abs(ll)):
                break
            step = step / 2
            halvings += 1
            if halvings > 30:
                raise ConvergenceError("Cox step halving failed", FitDiagnostics(False, it, gmax))
        beta, ll, grad, info = cand, ll_new, grad_new, info_new
        gmax = float(np.max(np.abs(grad)))
        if np.max(np.abs(beta)) > 30:
            raise ConvergenceError("coefficients diverging: monotone likelihood", FitDiagnostics(False, it, gmax))

    _, grad, info = info_and_grad(beta)
    gmax = float(np.max(np.abs(grad)))
    bread, flag = _inverse(info, strict=True)
    cond_flag = flag or np.linalg.cond(info) > 1e12

    # per-row weighted score residuals, then summed per subject
    eta, shift, r, S0, S1, _ = rs.sums(beta, second=False)
    xbar = np.zeros_like(S1)
    ok = S0 > 0
    xbar[ok] = S1[ok] / S0[ok, None]
    dLambda = np.zeros(rs.G)
    dLambda[ok] = rs.dw[ok] / S0[ok]
    centred = rs.X - xbar[rs.group]
    row_scores = centred * (rs.w * rs.d - r * dLambda[rs.group])[:, None]
    subjects, inv = np.unique(rs.subject, return_inverse=True)
    scores = np.zeros((len(subjects), p))
    for j in range(p):
        scores[:, j] = np.bincount(inv, row_scores[:, j], minlength=len(subjects))
    return GlmFit(beta, bread, scores, FitDiagnostics(True, it, gmax, bool(cond_flag)))


def _warn_positivity(msg):
    warnings.warn(msg, RuntimeWarning, stacklevel=3)
