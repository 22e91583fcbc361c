"""Inverse-probability weights: SW, RSW and PSW.

Treatment (and censoring) probabilities are modelled once per panel by pooled
logistic regressions, then every weight kind and history depth is assembled
from the same fitted probabilities:

* ``den``: ``P[A(k)=1 | L(k), L(0), A(k-1)]`` (configurable history),
* ``num[r]``: ``P[A(k)=1 | A(k-1), ..., A(k-r)]`` for ``r = 0..d``.

SW and PSW use ``num[min(d, k)]``, the full (lag-capped) treatment history.
RSW with window start ``s`` uses ``num[min(d, k - s)]``, so it never looks at
treatments before ``s``. At ``m = K`` all three coincide exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .glm import fit_weighted_logistic
from .panel import LongPanel, _require_valid

__all__ = [
    "KINDS",
    "PositivityWarning",
    "WeightModelSpec",
    "WeightModels",
    "WeightSet",
    "fit_weight_models",
    "build_weights",
    "build_survival_weights",
    "weight_summary",
    "write_weights_csv",
]

KINDS = ("SW", "RSW", "PSW")


class PositivityWarning(RuntimeWarning):
    """A fitted probability hit the floor: positivity is doubtful."""


@dataclass(frozen=True)
class WeightModelSpec:
    """How the weight models are specified and fitted.

    Parameters
    ----------
    den_current_L : bool
        Condition the denominator on ``L(k)``.
    den_L0 : bool
        Condition the denominator on ``L(0)``.
    den_lags : int
        Number of past treatments in the denominator.
    num_lags : int, optional
        Cap ``d`` on the treatment lags in the numerators; ``None`` uses the
        full history ``K - 1``.
    num_form : {"main", "saturated"}
        Main effects of the lags, or one parameter per lag pattern.
    time : {"dummies", "linear", "none"}
        Time effect in pooled fits.
    pooled : bool
        One model across time (True) or a separate fit per ``k``.
    adjust_L0 : bool
        Add ``L(0)`` to every numerator (for the baseline-adjusted estimator).
    true_denominators : bool
        Use the generating probabilities for the denominators when supplied.
    truncate : (lo, hi) percentiles, optional
        Symmetric percentile truncation of the final weights.
    floor : float
        Probabilities are clipped to ``[floor, 1 - floor]``.
    """

    den_current_L: bool = True
    den_L0: bool = True
    den_lags: int = 1
    num_lags: Optional[int] = None
    num_form: str = "main"
    time: str = "dummies"
    pooled: bool = True
    adjust_L0: bool = False
    true_denominators: bool = False
    truncate: Optional[Tuple[float, float]] = None
    floor: float = 1e-12

    def __post_init__(self):
        if self.num_form not in ("main", "saturated"):
            raise ValueError(f"num_form must be 'main' or 'saturated', got {self.num_form!r}")
        if self.time not in ("dummies", "linear", "none"):
            raise ValueError(f"time must be 'dummies', 'linear' or 'none', got {self.time!r}")
        if self.num_lags is not None and self.num_lags < 0:
            raise ValueError("num_lags must be >= 0")


@dataclass(frozen=True)
class WeightSet:
    """IP-weights of one kind and depth.

    ``values`` has shape (n,) in mean mode (NaN for subjects that do not
    contribute, i.e. censored ones) and (n, K) in survival mode, where
    ``values[i, t-1]`` is ``W_i(t)`` on at-risk rows and NaN elsewhere.
    """

    kind: str
    m: int
    values: np.ndarray
    mask: np.ndarray
    truncation: dict = field(default_factory=lambda: {"count": 0, "lower": None, "upper": None})

    @property
    def survival(self) -> bool:
        return self.values.ndim == 2

    def filled(self) -> np.ndarray:
        """Weights with zeros where the subject (or row) does not contribute."""
        return np.where(self.mask, self.values, 0.0)


# --------------------------------------------------------------------------
# design construction


def _time_columns(k: np.ndarray, times: np.ndarray, how: str) -> List[np.ndarray]:
    cols = [np.ones(len(k))]
    if how == "dummies":
        cols += [(k == t).astype(float) for t in times[1:]]
    elif how == "linear" and len(times) > 1:
        cols.append(k.astype(float))
    return cols


def _independent(X: np.ndarray, w: np.ndarray, tol=1e-9) -> np.ndarray:
    """Indices of a maximal set of linearly independent columns (greedy)."""
    G = (X * w[:, None]).T @ X
    keep: List[int] = []
    for j in range(X.shape[1]):
        gjj = G[j, j]
        if gjj <= 0:
            continue
        if keep:
            Gk = G[np.ix_(keep, keep)]
            gk = G[keep, j]
            resid = gjj - gk @ np.linalg.solve(Gk, gk)
        else:
            resid = gjj
        if resid > tol * gjj:
            keep.append(j)
    return np.array(keep, dtype=int)


def _group_rows(Z):
    """``(first, inverse)`` indices of the distinct rows of ``Z``.

    Rows are grouped by a random projection (a 1-D sort instead of a sort on
    wide byte strings); the grouping is then checked for exactness.
    """
    direction = np.random.default_rng(0x5EED).uniform(0.5, 1.5, Z.shape[1])
    _, first, inv = np.unique(Z @ direction, return_index=True, return_inverse=True)
    inv = inv.ravel()
    if not np.array_equal(Z[first][inv], Z):
        Zc = np.ascontiguousarray(Z)
        keys = Zc.view(np.dtype((np.void, Zc.dtype.itemsize * Zc.shape[1]))).ravel()
        _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        inv = inv.ravel()
    return first, inv


def _compress(X, y, w):
    """Collapse identical (x, y) rows, summing their weights."""
    first, inv = _group_rows(np.column_stack([X, y]))
    if len(first) * 2 > len(y):
        return X, y, w
    return X[first], y[first], np.bincount(inv, w, minlength=len(first))


def _fit_predict(X, y, w, compress=True):
    """Weighted logistic fit on (X, y, w); returns fitted P[y=1] for every row."""
    keep = _independent(X, w)
    Xk = X[:, keep]
    Xf, yf, wf = _compress(Xk, y, w) if compress else (Xk, y, w)
    fit = fit_weighted_logistic(Xf, yf, wf)
    return expit(Xk @ fit.coef), fit


def _lag_pattern(lags: np.ndarray) -> np.ndarray:
    """Integer code of each row's lag pattern (binary, first lag is bit 0)."""
    if lags.shape[1] == 0:
        return np.zeros(lags.shape[0], dtype=np.int64)
    return (lags.astype(np.int64) << np.arange(lags.shape[1])).sum(axis=1)


def _saturated_columns(code: np.ndarray, k: np.ndarray, r: int, time: str, pooled: bool) -> List[np.ndarray]:
    """Indicator columns for every (time, lag pattern) cell, or pattern only."""
    if time == "dummies" or not pooled:
        cell = k * (1 << r) + code
    else:
        cell = code
    cells = np.unique(cell)
    cols = [np.ones(len(code))] + [(cell == c).astype(float) for c in cells[1:]]
    if time == "linear" and pooled:
        cols.append(k.astype(float))
    return cols


class _Rows:
    """Flattened view of the observed (subject, time) rows of a panel."""

    def __init__(self, panel: LongPanel, max_lag: int):
        self.panel = panel
        obs = panel.observed
        self.ii, self.kk = np.nonzero(obs)
        A = np.nan_to_num(panel.A)
        self.A = A[self.ii, self.kk]
        lags = np.zeros((panel.n, panel.K, max(max_lag, 0)))
        for j in range(1, max_lag + 1):
            lags[:, j:, j - 1] = A[:, : panel.K - j]
        self.lags = lags[self.ii, self.kk]
        self.L = panel.Z[self.ii, self.kk]
        self.L0 = panel.L0[self.ii]
        self.C = None if panel.C is None else panel.C[self.ii, self.kk]
        self.times = np.unique(self.kk)

    def grid(self, values: np.ndarray) -> np.ndarray:
        out = np.full((self.panel.n, self.panel.K), np.nan)
        out[self.ii, self.kk] = values
        return out


def _fit_role(rows: _Rows, y, sel, features, spec: WeightModelSpec, case_w, saturated_r=None):
    """Fit one logistic role on rows ``sel``; returns (probabilities on sel rows, fits)."""
    k = rows.kk[sel]
    yv = y[sel]
    wv = case_w[sel]
    probs = np.empty(sel.sum())
    fits = []
    groups = [np.ones(len(k), dtype=bool)] if spec.pooled else [k == t for t in np.unique(k)]
    for g in groups:
        # collapse to distinct (time, covariates, outcome) rows before the
        # design is expanded; the fit is identical with summed weights
        narrow = [k[g].astype(float), yv[g]] + [f[g] for f in features]
        if saturated_r is not None:
            narrow.append(_lag_pattern(rows.lags[sel][g][:, :saturated_r]).astype(float))
        first, inv = _group_rows(np.column_stack(narrow))
        wg = np.bincount(inv, wv[g], minlength=len(first))
        kg = k[g][first]
        times = np.unique(kg)
        extra = [f[g][first] for f in features]
        if saturated_r is not None:
            code = narrow[-1][first].astype(np.int64)
            cols = _saturated_columns(code, kg, saturated_r, spec.time, spec.pooled)
        else:
            cols = _time_columns(kg, times, spec.time if spec.pooled else "none")
        X = np.column_stack(cols + extra)
        p, fit = _fit_predict(X, yv[g][first], wg, compress=False)
        probs[g] = p[inv]
        fits.append(fit)
    return probs, fits


@dataclass
class WeightModels:
    """Fitted (or supplied) probability grids, shape (n, K), NaN off-support.

    ``num_a[r]`` is defined for ``k >= r``. Censoring grids hold
    ``P[C(k+1)=1 | ...]`` and are None without censoring.
    """

    panel: LongPanel
    den_a: np.ndarray
    num_a: List[np.ndarray]
    den_c: Optional[np.ndarray] = None
    num_c: Optional[List[np.ndarray]] = None
    floor: float = 1e-12
    truncate: Optional[Tuple[float, float]] = None
    diagnostics: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return len(self.num_a) - 1

    @classmethod
    def from_probabilities(cls, panel, den_a, num_a, den_c=None, num_c=None, floor=1e-12, truncate=None):
        """Wrap supplied probability grids (e.g. true or exact population ones)."""
        num_a = [np.asarray(a, dtype=float) for a in num_a]
        if num_c is not None:
            num_c = [np.asarray(c, dtype=float) for c in num_c]
        return cls(panel, np.asarray(den_a, dtype=float), num_a,
                   None if den_c is None else np.asarray(den_c, dtype=float), num_c,
                   floor=floor, truncate=truncate)

    # log f[A(k) | ...] at the observed treatment, and log P[C(k+1)=0 | ...]
    def _log_f(self, p):
        A = self.panel.A
        lo, hi = self.floor, 1 - self.floor
        with np.errstate(invalid="ignore"):
            hit = (p < lo) | (p > hi)
        if hit.any():
            warnings.warn(
                f"{int(hit.sum())} fitted probabilities clipped at the floor {self.floor:g}: "
                "positivity (every treatment level possible at every history) is doubtful",
                PositivityWarning,
                stacklevel=4,
            )
        pc = np.clip(p, lo, hi)
        return np.where(A == 1, np.log(pc), np.log1p(-pc))

    def _log_surv(self, p):
        return np.log1p(-np.clip(p, self.floor, 1 - self.floor))

    def _prepared(self):
        if not hasattr(self, "_cache"):
            K, d = self.panel.K, self.d
            la_den = self._log_f(self.den_a)
            la_num = [self._log_f(a) for a in self.num_a]
            lc_den = lc_num = None
            if self.den_c is not None:
                lc_den = self._log_surv(self.den_c)
                lc_num = [self._log_surv(c) for c in self.num_c]
            kk = np.arange(K)
            r_full = np.minimum(d, kk)
            lf = np.empty_like(la_den)
            for k in range(K):
                lf[:, k] = la_num[r_full[k]][:, k] - la_den[:, k]
                if lc_den is not None:
                    lf[:, k] += lc_num[r_full[k]][:, k] - lc_den[:, k]
            lf = np.where(self.panel.observed, lf, 0.0)
            self._cache = (la_num, lc_num, lf, r_full)
        return self._cache

    def _restricted_correction(self, j, k):
        """log num[j] - log num[min(d,k)] at time k, per subject (column vector)."""
        la_num, lc_num, _, r_full = self._prepared()
        rf = r_full[k]
        out = la_num[j][:, k] - la_num[rf][:, k]
        if lc_num is not None:
            out = out + lc_num[j][:, k] - lc_num[rf][:, k]
        return np.nan_to_num(out)

    def log_window(self, kind: str, m: int, t: int) -> np.ndarray:
        """Per-subject log weight for the window ``[max(0, t-m), t-1]``."""
        _, _, lf, _ = self._prepared()
        s = 0 if kind == "SW" else max(0, t - m)
        out = lf[:, s:t].sum(axis=1)
        if kind == "RSW":
            for j in range(min(self.d, t - s)):
                k = s + j
                if j < min(self.d, k):
                    out = out + self._restricted_correction(j, k)
        return out


def _design_features(rows: _Rows, spec: WeightModelSpec, current_L: bool, L0: bool, lags: int):
    feats = []
    if current_L:
        feats += [rows.L[:, j] for j in range(rows.L.shape[1])]
    if L0:
        feats += [rows.L0[:, j] for j in range(rows.L0.shape[1])]
    feats += [rows.lags[:, j] for j in range(lags)]
    return feats


def fit_weight_models(panel: LongPanel, spec: WeightModelSpec = WeightModelSpec(), truth=None,
                      case_weights=None) -> WeightModels:
    """Fit the treatment (and censoring) models that all weight kinds share.

    Parameters
    ----------
    panel : LongPanel
    spec : WeightModelSpec
    truth : TruthRecord, optional
        Used for the denominators when ``spec.true_denominators`` is set.
    case_weights : array (n,), optional
        Frequency weights per subject (e.g. population masses).
    """
    _require_valid(panel)
    K = panel.K
    d = K - 1 if spec.num_lags is None else min(spec.num_lags, K - 1)
    rows = _Rows(panel, max(d, spec.den_lags))
    cw = np.ones(panel.n) if case_weights is None else np.asarray(case_weights, dtype=float)
    cw = cw[rows.ii]
    everything = np.ones(len(rows.kk), dtype=bool)
    diagnostics = []

    use_truth = spec.true_denominators and truth is not None
    if use_truth:
        den_a = np.where(panel.observed, truth.p_treat, np.nan)
    else:
        feats = _design_features(rows, spec, spec.den_current_L, spec.den_L0, spec.den_lags)
        p, fits = _fit_role(rows, rows.A, everything, feats, spec, cw)
        den_a = rows.grid(p)
        diagnostics.append(("den_a", [f.diagnostics for f in fits]))

    num_a = []
    for r in range(d + 1):
        sel = rows.kk >= r
        feats = [rows.L0[:, j] for j in range(rows.L0.shape[1])] if spec.adjust_L0 else []
        if spec.num_form == "saturated":
            p, fits = _fit_role(rows, rows.A, sel, [f[sel] for f in feats], spec, cw, saturated_r=r)
        else:
            feats = [rows.lags[:, j] for j in range(r)] + feats
            p, fits = _fit_role(rows, rows.A, sel, [f[sel] for f in feats], spec, cw)
        g = np.full((panel.n, K), np.nan)
        g[rows.ii[sel], rows.kk[sel]] = p
        num_a.append(g)
        diagnostics.append((f"num_a[{r}]", [f.diagnostics for f in fits]))

    den_c = num_c = None
    if panel.C is not None:
        cens = rows.C
        if use_truth and getattr(truth, "p_censor", None) is not None:
            den_c = np.where(panel.observed, truth.p_censor, np.nan)
        else:
            feats = _design_features(rows, spec, spec.den_current_L, spec.den_L0, spec.den_lags)
            feats = [rows.A] + feats
            p, fits = _fit_role(rows, cens, everything, feats, spec, cw)
            den_c = rows.grid(p)
            diagnostics.append(("den_c", [f.diagnostics for f in fits]))
        num_c = []
        for r in range(d + 1):
            sel = rows.kk >= r
            feats = [rows.L0[:, j] for j in range(rows.L0.shape[1])] if spec.adjust_L0 else []
            if spec.num_form == "saturated":
                feats = [rows.A[sel]] + [f[sel] for f in feats]
                p, fits = _fit_role(rows, cens, sel, feats, spec, cw, saturated_r=r)
            else:
                feats = [rows.A] + [rows.lags[:, j] for j in range(r)] + feats
                p, fits = _fit_role(rows, cens, sel, [f[sel] for f in feats], spec, cw)
            g = np.full((panel.n, K), np.nan)
            g[rows.ii[sel], rows.kk[sel]] = p
            num_c.append(g)
            diagnostics.append((f"num_c[{r}]", [f.diagnostics for f in fits]))

    return WeightModels(panel, den_a, num_a, den_c, num_c, floor=spec.floor,
                        truncate=spec.truncate, diagnostics=diagnostics)


def _check_kind(kind, m, K):
    kind = kind.upper()
    if kind not in KINDS:
        raise ValueError(f"unknown weight kind {kind!r}; expected one of {KINDS}")
    if not 1 <= m <= K:
        raise ValueError(f"m must be in 1..{K}, got {m}")
    return kind


def _truncate(values, mask, pct):
    report = {"count": 0, "lower": None, "upper": None}
    if pct is None:
        return values, report
    lo_p, hi_p = pct
    v = values[mask]
    lo, hi = np.percentile(v, [lo_p, hi_p])
    clipped = np.clip(values, lo, hi)
    report = {"count": int(np.sum(mask & ((values < lo) | (values > hi)))), "lower": float(lo), "upper": float(hi)}
    return np.where(mask, clipped, values), report


def build_weights(models: WeightModels, kind: str, m: int) -> WeightSet:
    """Per-subject weights ``W_i`` over the window ``k = K-m .. K-1``.

    With censoring every factor carries the censoring ratio and only subjects
    with ``C(K) = 0`` contribute.
    """
    panel = models.panel
    if panel.survival:
        raise ValueError("survival-mode panel: use build_survival_weights")
    K = panel.K
    kind = _check_kind(kind, m, K)
    if kind == "SW":
        m = K
    mask = panel.uncensored.copy()
    logw = models.log_window(kind, m, K)
    values = np.where(mask, np.exp(logw), np.nan)
    values, report = _truncate(values, mask, models.truncate)
    return WeightSet(kind, m, values, mask, report)


def build_survival_weights(models: WeightModels, kind: str, m: int) -> WeightSet:
    """Time-specific weights ``W_i(t)`` for ``t = 1..K`` on at-risk rows.

    The window is ``k = max(0, t-m) .. t-1`` (``0 .. t-1`` for SW). Row ``t``
    is at risk when the treatment at ``t-1`` was observed and ``C(t) = 0``.
    """
    panel = models.panel
    K = panel.K
    kind = _check_kind(kind, m, K)
    if kind == "SW":
        m = K
    mask = at_risk(panel)
    values = np.full((panel.n, K), np.nan)
    for t in range(1, K + 1):
        col = mask[:, t - 1]
        if col.any():
            values[col, t - 1] = np.exp(models.log_window(kind, m, t)[col])
    values, report = _truncate(values, mask, models.truncate)
    return WeightSet(kind, m, values, mask, report)


def at_risk(panel: LongPanel) -> np.ndarray:
    """(n, K) mask: subject is in the risk set at time ``t`` (column ``t-1``)."""
    mask = panel.observed.copy()
    if panel.C is not None:
        mask &= np.nan_to_num(panel.C, nan=1.0) == 0
    return mask


def weight_summary(ws: WeightSet) -> dict:
    """Mean, sd, min, max over contributing entries, plus the truncation count."""
    v = ws.values[ws.mask]
    if v.size == 0:
        return {"mean": np.nan, "sd": np.nan, "min": np.nan, "max": np.nan,
                "truncated": ws.truncation["count"], "count": 0}
    return {
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()),
        "max": float(v.max()),
        "truncated": int(ws.truncation["count"]),
        "count": int(v.size),
    }


def write_weights_csv(path, panel: LongPanel, sets: Sequence[WeightSet]) -> None:
    """Export weights as CSV with columns id, [t,] kind, m, weight."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        survival = any(ws.survival for ws in sets)
        out.writerow(["id", "t", "kind", "m", "weight"] if survival else ["id", "kind", "m", "weight"])
        for ws in sets:
            if ws.survival:
                ii, tt = np.nonzero(ws.mask)
                for i, t in zip(ii, tt):
                    out.writerow([int(panel.ids[i]), int(t + 1), ws.kind, ws.m, repr(float(ws.values[i, t]))])
            else:
                for i in np.nonzero(ws.mask)[0]:
                    out.writerow([int(panel.ids[i]), ws.kind, ws.m, repr(float(ws.values[i]))])
