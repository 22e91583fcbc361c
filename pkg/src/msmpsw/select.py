"""Closed testing for the history depth ``m``.

Hypotheses ``H0(m)``: the two weighted estimators share a limit, tested in
ascending ``m``. The first accepted ``m`` is selected; if every tested ``m``
below ``max_m`` is rejected, ``max_m`` is returned without a test.

Variants: ``ztest`` compares SW with RSW, ``pztest`` compares PSW with RSW.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .estimate import EstimateResult, estimate
from .infer import PairTest, bootstrap_variance_of_difference, pair_test
from .ipw import WeightModels, WeightModelSpec, fit_weight_models
from .panel import LongPanel

__all__ = [
    "VARIANTS",
    "SelectionError",
    "SelectionResult",
    "EstimateCache",
    "first_acceptance",
    "closed_test_select",
    "selection_report",
    "selection_to_json",
    "selection_from_json",
]

VARIANTS = {"ztest": ("SW", "RSW"), "pztest": ("PSW", "RSW")}


class SelectionError(RuntimeError):
    """An estimator failed at some ``m`` during selection."""

    def __init__(self, m, cause):
        super().__init__(f"selection aborted at m={m}: {cause}")
        self.m = m
        self.cause = cause


@dataclass(frozen=True)
class SelectionResult:
    selected_m: int
    alpha: float
    variant: str
    path: Tuple[PairTest, ...]
    start_m: int = 1
    max_m: Optional[int] = None


class EstimateCache:
    """Lazily computed estimates keyed by ``(kind, m)`` on one fitted panel."""

    def __init__(self, panel: LongPanel, models: WeightModels, model_form: str = "saturated",
                 adjusted: bool = False):
        self.panel = panel
        self.models = models
        self.model_form = model_form
        self.adjusted = adjusted
        self._store: Dict[tuple, EstimateResult] = {}

    def __call__(self, kind: str, m: int) -> EstimateResult:
        key = (kind.upper(), m)
        if key not in self._store:
            self._store[key] = estimate(self.panel, self.models, kind, m, self.model_form, self.adjusted)
        return self._store[key]


def first_acceptance(reject: Callable[[int], bool], max_m: int, start_m: int = 1) -> Tuple[int, List[int]]:
    """Sequential rule: return the first ``m`` in ``start_m..max_m-1`` with
    ``reject(m)`` False, else ``max_m``. Also returns the tested ``m`` values."""
    if not 1 <= start_m <= max_m:
        raise ValueError(f"start_m must be in 1..{max_m}")
    tested = []
    m = start_m - 1
    h = True
    while h:
        m += 1
        if m <= max_m - 1:
            tested.append(m)
            h = reject(m)
        else:
            h = False
    return m, tested


def closed_test_select(panel: LongPanel, alpha: float, variant: str = "ztest", model_form: str = "saturated",
                       start_m: int = 1, mode: Optional[str] = None, max_m: Optional[int] = None,
                       spec: Optional[WeightModelSpec] = None, models: Optional[WeightModels] = None,
                       cache: Optional[EstimateCache] = None, adjusted: bool = False, truth=None,
                       pair_variance: str = "paired", bootstrap_reps: int = 200,
                       bootstrap_seed: int = 0) -> SelectionResult:
    """Select ``m`` by closed testing on one panel.

    Parameters
    ----------
    panel : LongPanel
    alpha : float
        Level of every pair test.
    variant : {"ztest", "pztest"}
    model_form : {"saturated", "main_effect"}
        Ignored in survival mode (main-effect Cox models).
    start_m : int
        First ``m`` tested.
    mode : str, optional
        Checked against ``panel.mode`` when given.
    max_m : int, optional
        Largest candidate ``m`` (defaults to ``K``); it is never tested.
    spec, models, cache
        Weight-model specification, or already fitted models, or a shared
        estimate cache.
    pair_variance : {"paired", "sum", "bootstrap"}
        Variance of the estimator difference used by every pair test. The
        bootstrap refits the weight models (with ``spec``) on each of
        ``bootstrap_reps`` subject resamples.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    if mode is not None and mode != panel.mode:
        raise ValueError(f"panel is in {panel.mode!r} mode, not {mode!r}")
    K = panel.K
    max_m = K if max_m is None else max_m
    if not 1 <= max_m <= K:
        raise ValueError(f"max_m must be in 1..{K}")
    if not 1 <= start_m <= max_m:
        raise ValueError(f"start_m must be in 1..{max_m}")
    if cache is None:
        if models is None:
            models = fit_weight_models(panel, spec or WeightModelSpec(), truth)
        cache = EstimateCache(panel, models, model_form, adjusted)
    first, second = VARIANTS[variant]
    path: List[PairTest] = []

    def boot_variance(m):
        boot_spec = spec or WeightModelSpec()

        def diff(p):
            mods = fit_weight_models(p, boot_spec)
            return (estimate(p, mods, first, m, model_form, adjusted).estimate
                    - estimate(p, mods, second, m, model_form, adjusted).estimate)

        return bootstrap_variance_of_difference(panel, diff, bootstrap_reps, bootstrap_seed + m)

    def reject(m):
        try:
            a = cache(first, m)
            b = cache(second, m)
            if pair_variance == "bootstrap":
                t = pair_test(a, b, alpha, variance=boot_variance(m))
            else:
                t = pair_test(a, b, alpha, method=pair_variance)
        except Exception as exc:  # surface which m failed
            raise SelectionError(m, exc) from exc
        path.append(t)
        return t.rejected

    selected, _ = first_acceptance(reject, max_m, start_m)
    return SelectionResult(selected, alpha, variant, tuple(path), start_m, max_m)


def selection_to_json(r: SelectionResult) -> str:
    """Machine-readable selection path."""
    return json.dumps({
        "variant": r.variant,
        "alpha": r.alpha,
        "selected_m": r.selected_m,
        "start_m": r.start_m,
        "max_m": r.max_m,
        "path": [{"m": t.m, "d": t.D, "p": t.p_value, "rejected": t.rejected} for t in r.path],
    })


def selection_from_json(text: str) -> dict:
    """Parse and check a selection-path document."""
    doc = json.loads(text)
    for key in ("variant", "alpha", "selected_m", "path"):
        if key not in doc:
            raise ValueError(f"selection JSON missing {key!r}")
    for row in doc["path"]:
        if set(row) != {"m", "d", "p", "rejected"}:
            raise ValueError(f"bad path entry {row}")
    return doc


def selection_report(r: SelectionResult) -> str:
    """Plain-text table of the path: one row per tested ``m``."""
    lines = [f"{r.variant} at alpha={r.alpha:g}: selected m = {r.selected_m}",
             f"{'m':>3}  {'D':>10}  {'p':>8}  decision"]
    for t in r.path:
        lines.append(f"{t.m:>3}  {t.D:>10.4f}  {t.p_value:>8.4f}  {'reject' if t.rejected else 'accept'}")
    if not r.path or r.path[-1].rejected:
        lines.append(f"{r.selected_m:>3}  {'-':>10}  {'-':>8}  largest candidate, not tested")
    return "\n".join(lines)
