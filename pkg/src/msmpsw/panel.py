"""Longitudinal panel data model, validation, person-period expansion and CSV I/O.

A panel holds ``n`` subjects followed over ``K`` treatment times. Row ``t`` of a
subject carries the covariates ``L(t)``, the treatment ``A(t)`` and, when present,
the censoring indicator ``C(t+1)`` and event indicator ``Y(t+1)`` observed right
after it. Entries after a subject leaves follow-up are NaN, never zero.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional

import numpy as np

__all__ = [
    "LongPanel",
    "PersonPeriods",
    "Violation",
    "PanelValidationError",
    "PanelParseError",
    "validate",
    "expand_person_periods",
    "read_csv",
    "write_csv",
]


class PanelValidationError(ValueError):
    """Raised when an operation needs a valid panel and gets an invalid one."""

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = "" if len(self.violations) <= 5 else f" (+{len(self.violations) - 5} more)"
        super().__init__(f"invalid panel: {head}{more}")


class PanelParseError(ValueError):
    """Raised by :func:`read_csv` on malformed input."""


class Violation(NamedTuple):
    subject: int
    time: Optional[int]
    rule: str

    def __str__(self):
        where = f"subject {self.subject}" if self.time is None else f"subject {self.subject}, t={self.time}"
        return f"{where}: {self.rule}"


def _frozen(x):
    if x is None:
        return None
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class LongPanel:
    """Per-subject longitudinal records.

    Parameters
    ----------
    Z : array, shape (n, K, q)
        Time-varying covariates; ``Z[i, t]`` is ``L_i(t)`` for ``t >= 1``.
    A : array, shape (n, K)
        Binary treatments, NaN once the subject has left follow-up.
    Y : array, shape (n,) or (n, K)
        Scalar outcome (mean mode) or event indicators with ``Y[i, t-1] = Y_i(t)``
        (survival mode).
    C : array, shape (n, K), optional
        Censoring indicators with ``C[i, t-1] = C_i(t)``.
    B : array, shape (n, p), optional
        Time-fixed covariates. ``L(0)`` is ``(B, Z(0))``.
    ids : array of int, optional
        Subject identifiers, defaults to ``0..n-1``.
    """

    Z: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    C: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 2:
            Z = Z[:, :, None]
        A = np.asarray(self.A, dtype=float)
        if Z.ndim != 3 or A.ndim != 2 or Z.shape[:2] != A.shape:
            raise ValueError("Z must be (n, K, q) and A (n, K) with matching n, K")
        n, K = A.shape
        Y = np.asarray(self.Y, dtype=float)
        if Y.shape not in ((n,), (n, K)):
            raise ValueError(f"Y must have shape ({n},) or ({n}, {K}), got {Y.shape}")
        if self.C is not None and np.shape(self.C) != (n, K):
            raise ValueError(f"C must have shape ({n}, {K})")
        B = None if self.B is None else np.asarray(self.B, dtype=float).reshape(n, -1)
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,) or len(np.unique(ids)) != n:
            raise ValueError("ids must be n distinct integers")
        object.__setattr__(self, "Z", _frozen(Z))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "C", _frozen(self.C))
        object.__setattr__(self, "B", _frozen(B))
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.A.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[2]

    @property
    def p(self) -> int:
        return 0 if self.B is None else self.B.shape[1]

    @property
    def survival(self) -> bool:
        return self.Y.ndim == 2

    @property
    def mode(self) -> str:
        if self.survival:
            return "survival"
        return "censor" if self.C is not None else "mean"

    @property
    def L0(self) -> np.ndarray:
        """Baseline covariates ``L(0) = (B, Z(0))``, shape (n, p + q)."""
        if self.B is None:
            return self.Z[:, 0, :]
        return np.hstack([self.B, self.Z[:, 0, :]])

    def exit_index(self) -> np.ndarray:
        """First ``t`` in ``1..K`` with ``C(t)=1`` or ``Y(t)=1``, else ``K``.

        This is also the number of treatment rows the subject contributes.
        """
        gone = np.zeros((self.n, self.K), dtype=bool)
        if self.C is not None:
            gone |= self.C == 1
        if self.survival:
            gone |= self.Y == 1
        return np.where(gone.any(axis=1), gone.argmax(axis=1) + 1, self.K)

    @property
    def observed(self) -> np.ndarray:
        """Boolean (n, K) mask of treatment rows ``t`` that were observed."""
        return np.arange(self.K)[None, :] < self.exit_index()[:, None]

    @property
    def uncensored(self) -> np.ndarray:
        """``I(C(K) = 0)`` per subject (all True without censoring)."""
        if self.C is None:
            return np.ones(self.n, dtype=bool)
        return self.C[:, -1] == 0

    def subset(self, index) -> "LongPanel":
        """Panel restricted (or resampled) to the given subject positions.

        Duplicated positions receive fresh ids so the result stays valid.
        """
        index = np.asarray(index)
        ids = self.ids[index]
        if len(np.unique(ids)) != len(ids):
            ids = np.arange(len(index))
        return LongPanel(
            Z=self.Z[index],
            A=self.A[index],
            Y=self.Y[index],
            C=None if self.C is None else self.C[index],
            B=None if self.B is None else self.B[index],
            ids=ids,
        )

    def equals(self, other: "LongPanel") -> bool:
        """Field-for-field equality, treating NaN as equal to NaN."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return (
            same(self.Z, other.Z)
            and same(self.A, other.A)
            and same(self.Y, other.Y)
            and same(self.C, other.C)
            and same(self.B, other.B)
            and np.array_equal(self.ids, other.ids)
        )

    def __eq__(self, other):
        if not isinstance(other, LongPanel):
            return NotImplemented
        return self.equals(other)

    __hash__ = None


def _binary_or_nan(x):
    return np.isnan(x) | (x == 0) | (x == 1)


def validate(panel: LongPanel) -> List[Violation]:
    """Check the panel invariants.

    Returns an empty list iff the panel is valid. Each violation names the
    subject id, the time index (when meaningful) and the rule broken.
    """
    out: List[Violation] = []
    n, K = panel.n, panel.K
    ids = panel.ids

    def report(mask, rule, time_offset=0):
        for i, t in zip(*np.nonzero(mask)):
            out.append(Violation(int(ids[i]), int(t) + time_offset, rule))

    for name, arr, offset in (("censoring", panel.C, 1), ("event", panel.Y if panel.survival else None, 1)):
        if arr is None:
            continue
        report(~_binary_or_nan(arr), f"{name} indicator not binary", offset)
        filled = np.where(np.isnan(arr), -np.inf, arr)
        running = np.maximum.accumulate(filled, axis=1)
        drop = (arr == 0) & (running == 1)
        report(drop, f"{name} not absorbing", offset)

    exit_t = panel.exit_index()
    obs = np.arange(K)[None, :] < exit_t[:, None]

    report(obs & ~(panel.A == 0) & ~(panel.A == 1), "treatment not binary")
    report(~obs & ~np.isnan(panel.A), "treatment present after leaving follow-up")
    zbad = ~np.isfinite(panel.Z).all(axis=2)
    report(obs & zbad, "covariate missing or non-finite while observed")
    report(~obs & ~np.isnan(panel.Z).all(axis=2), "covariate present after leaving follow-up")
    if panel.B is not None:
        for i in np.nonzero(~np.isfinite(panel.B).all(axis=1))[0]:
            out.append(Violation(int(ids[i]), None, "time-fixed covariate non-finite"))

    if panel.C is not None:
        # C(t) is recorded for t <= exit; after an event it is missing
        cobs = np.arange(1, K + 1)[None, :] <= exit_t[:, None]
        if panel.survival:
            ev = (panel.Y == 1) & ~(panel.C == 1)
            ev_first = np.where(ev.any(axis=1), ev.argmax(axis=1) + 1, K + 1)
            cobs = np.arange(1, K + 1)[None, :] <= np.minimum(exit_t, ev_first)[:, None]
        report(cobs & np.isnan(panel.C), "censoring indicator missing while at risk", 1)

    if panel.survival:
        censored_at = np.full(n, K + 1)
        if panel.C is not None:
            c1 = panel.C == 1
            censored_at = np.where(c1.any(axis=1), c1.argmax(axis=1) + 1, K + 1)
        tt = np.arange(1, K + 1)[None, :]
        report((tt < censored_at[:, None]) & np.isnan(panel.Y), "event indicator missing while at risk", 1)
        report((tt >= censored_at[:, None]) & ~np.isnan(panel.Y), "event indicator present after censoring", 1)
    else:
        unc = panel.uncensored
        for i in np.nonzero(unc & ~np.isfinite(panel.Y))[0]:
            out.append(Violation(int(ids[i]), None, "outcome missing for uncensored subject"))
        for i in np.nonzero(~unc & ~np.isnan(panel.Y))[0]:
            out.append(Violation(int(ids[i]), None, "outcome present for censored subject"))
    return out


def _require_valid(panel):
    v = validate(panel)
    if v:
        raise PanelValidationError(v)


@dataclass(frozen=True)
class PersonPeriods:
    """Column-oriented person-period table, one row per observed subject-time.

    ``lags[:, j-1]`` holds ``A(t-j)`` (zero before the study start), ``L`` the
    current covariates ``L(t)`` and ``L0`` the baseline covariates. ``censored``
    is ``C(t+1)`` and ``event`` is ``Y(t+1)``; both are NaN when not applicable.
    """

    subject: np.ndarray
    index: np.ndarray
    t: np.ndarray
    A: np.ndarray
    lags: np.ndarray
    L: np.ndarray
    L0: np.ndarray
    censored: np.ndarray
    event: np.ndarray

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[dict]:
        for r in range(len(self)):
            yield {
                "subject": int(self.subject[r]),
                "t": int(self.t[r]),
                "A": float(self.A[r]),
                "lags": self.lags[r],
                "L": self.L[r],
                "censored": float(self.censored[r]),
                "event": float(self.event[r]),
            }


def lag_matrix(A: np.ndarray, depth: int) -> np.ndarray:
    """``out[i, k, j-1] = A[i, k-j]`` with zeros before time 0."""
    n, K = A.shape
    out = np.zeros((n, K, depth))
    for j in range(1, depth + 1):
        out[:, j:, j - 1] = A[:, : K - j]
    return out


def expand_person_periods(panel: LongPanel, max_lag: Optional[int] = None) -> PersonPeriods:
    """One row per (subject, t) whose treatment ``A(t)`` was observed.

    A subject leaving at ``C(t+1)=1`` or ``Y(t+1)=1`` contributes rows ``0..t``.
    Rows are ordered by subject, then time.
    """
    _require_valid(panel)
    K = panel.K
    depth = K - 1 if max_lag is None else max_lag
    obs = panel.observed
    ii, tt = np.nonzero(obs)
    A = np.nan_to_num(panel.A)
    lags = lag_matrix(A, depth)[ii, tt]
    cens = np.full(len(ii), np.nan)
    if panel.C is not None:
        cens = panel.C[ii, tt]
    event = np.full(len(ii), np.nan)
    if panel.survival:
        event = panel.Y[ii, tt]
    return PersonPeriods(
        subject=panel.ids[ii],
        index=ii,
        t=tt,
        A=panel.A[ii, tt],
        lags=lags,
        L=panel.Z[ii, tt],
        L0=panel.L0[ii],
        censored=cens,
        event=event,
    )


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_csv(path, panel: LongPanel) -> None:
    """Write the panel in long format.

    The first line is a ``# K=<K> mode=<mode>`` comment, followed by the header
    ``id,t,L1..Lq[,B1..Bp],A[,C],Y|Yt``. Row ``t`` carries ``C(t+1)`` and, in
    survival mode, ``Y(t+1)``; a scalar outcome sits on the subject's final row.
    """
    _require_valid(panel)
    q, p, K = panel.q, panel.p, panel.K
    header = ["id", "t"] + [f"L{j + 1}" for j in range(q)] + [f"B{j + 1}" for j in range(p)] + ["A"]
    if panel.C is not None:
        header.append("C")
    header.append("Yt" if panel.survival else "Y")
    exit_t = panel.exit_index()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# K={K} mode={panel.mode}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(panel.n):
            last = exit_t[i] - 1
            for t in range(exit_t[i]):
                row = [str(int(panel.ids[i])), str(t)]
                row += [_fmt(v) for v in panel.Z[i, t]]
                if p:
                    row += [_fmt(v) for v in panel.B[i]]
                row.append(_fmt(panel.A[i, t]))
                if panel.C is not None:
                    row.append(_fmt(panel.C[i, t]))
                if panel.survival:
                    row.append(_fmt(panel.Y[i, t]))
                else:
                    row.append(_fmt(panel.Y[i]) if t == last else "")
                w.writerow(row)


def _parse_float(s, lineno, col):
    if s == "":
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise PanelParseError(f"row {lineno}: column {col!r} is not numeric: {s!r}") from None


def read_csv(path) -> LongPanel:
    """Read a long-format CSV written by :func:`write_csv` (or by hand)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    declared_K = None
    start = 0
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            if tok.startswith("K="):
                declared_K = int(tok[2:])
        start = 1
    rows = list(csv.reader(lines[start:]))
    if not rows:
        raise PanelParseError("empty file: header required")
    header = [h.strip() for h in rows[0]]
    for need in ("id", "t", "A"):
        if need not in header:
            raise PanelParseError(f"header is missing required column {need!r}")
    if "Y" in header and "Yt" in header:
        raise PanelParseError("header has both Y and Yt")
    if "Y" not in header and "Yt" not in header:
        raise PanelParseError("header is missing outcome column 'Y' or 'Yt'")
    survival = "Yt" in header
    lcols = [h for h in header if h.startswith("L") and h[1:].isdigit()]
    bcols = [h for h in header if h.startswith("B") and h[1:].isdigit()]
    if not lcols:
        raise PanelParseError("header has no covariate columns L1..Lq")
    col = {h: j for j, h in enumerate(header)}
    has_c = "C" in col
    ycol = "Yt" if survival else "Y"

    records = {}
    order = []
    for r, row in enumerate(rows[1:], start=start + 2):
        if not row:
            continue
        if len(row) != len(header):
            raise PanelParseError(f"row {r}: expected {len(header)} fields, got {len(row)}")
        try:
            sid = int(row[col["id"]])
            t = int(row[col["t"]])
        except ValueError:
            raise PanelParseError(f"row {r}: id and t must be integers") from None
        a = _parse_float(row[col["A"]], r, "A")
        if a not in (0.0, 1.0):
            raise PanelParseError(f"row {r}: treatment A must be 0 or 1, got {row[col['A']]!r}")
        rec = {
            "t": t,
            "L": [_parse_float(row[col[c]], r, c) for c in lcols],
            "B": [_parse_float(row[col[c]], r, c) for c in bcols],
            "A": a,
            "C": _parse_float(row[col["C"]], r, "C") if has_c else np.nan,
            "Y": _parse_float(row[col[ycol]], r, ycol),
            "line": r,
        }
        if sid not in records:
            records[sid] = []
            order.append(sid)
        records[sid].append(rec)

    K = declared_K if declared_K is not None else 1 + max(rec["t"] for recs in records.values() for rec in recs)
    n, q, p = len(order), len(lcols), len(bcols)
    Z = np.full((n, K, q), np.nan)
    A = np.full((n, K), np.nan)
    C = np.full((n, K), np.nan) if has_c else None
    Y = np.full((n, K), np.nan) if survival else np.full(n, np.nan)
    B = np.full((n, p), np.nan) if p else None

    for i, sid in enumerate(order):
        recs = sorted(records[sid], key=lambda x: x["t"])
        ts = [x["t"] for x in recs]
        if ts != list(range(len(ts))):
            raise PanelParseError(f"row {recs[0]['line']}: subject {sid} times must be 0..T without gaps or repeats")
        if len(ts) > K:
            raise PanelParseError(f"row {recs[-1]['line']}: subject {sid} has {len(ts)} rows but K={K}")
        last = recs[-1]
        left_early = (has_c and last["C"] == 1) or (survival and last["Y"] == 1)
        if len(ts) < K and not left_early:
            raise PanelParseError(
                f"row {last['line']}: subject {sid} has {len(ts)} rows but K={K} and no censoring or event flag"
            )
        for rec in recs:
            t = rec["t"]
            Z[i, t] = rec["L"]
            A[i, t] = rec["A"]
            if has_c:
                C[i, t] = rec["C"]
            if survival:
                Y[i, t] = rec["Y"]
        if p:
            B[i] = recs[0]["B"]
        if not survival:
            Y[i] = last["Y"]
        # absorbing indicators after exit
        exit_t = len(ts)
        if has_c and last["C"] == 1:
            C[i, exit_t:] = 1
        if survival and last["Y"] == 1 and not (has_c and last["C"] == 1):
            Y[i, exit_t:] = 1

    panel = LongPanel(Z=Z, A=A, Y=Y, C=C, B=B, ids=np.array(order))
    v = validate(panel)
    if v:
        raise PanelParseError(f"invalid panel after parsing: {v[0]}")
    return panel
