"""Monte-Carlo harness: repeated draw, select, estimate, aggregate.

Each replication owns a counter-based RNG stream keyed by ``(seed, rep)``;
results are reduced in replication order, so aggregates do not depend on the
worker count or the order in which replications finish.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dgp import generate, preset
from .estimate import combined_estimate
from .infer import confidence_interval, pair_test
from .ipw import WeightModelSpec, fit_weight_models
from .select import EstimateCache, closed_test_select

__all__ = [
    "McConfig",
    "McReport",
    "scenario_defaults",
    "method_label",
    "run_replication",
    "aggregate",
    "run_mc",
]

# Linear main-effect scenarios test with the unpaired (sum) variance of the
# difference, which is what their published selection rates reflect; the
# paired variance is calibrated there but far more powerful than reported.
_SCENARIO_DEFAULTS = {
    "s1": {"model_form": "saturated", "max_m": None, "spec": WeightModelSpec(), "pair_variance": "paired"},
    "s2": {"model_form": "main_effect", "max_m": None, "spec": WeightModelSpec(), "pair_variance": "sum"},
    "s3": {"model_form": "main_effect", "max_m": None, "spec": WeightModelSpec(), "pair_variance": "sum"},
    "surv": {"model_form": "main_effect", "max_m": 10, "spec": WeightModelSpec(num_lags=1),
             "pair_variance": "paired"},
}


def scenario_defaults(scenario: str) -> dict:
    """Model form, largest candidate ``m`` and weight spec used for a preset."""
    if scenario not in _SCENARIO_DEFAULTS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {sorted(_SCENARIO_DEFAULTS)}")
    return dict(_SCENARIO_DEFAULTS[scenario])


def method_label(variant: str, alpha: float) -> str:
    """``ztest`` at 0.05 -> ``"ztest05"``."""
    return f"{variant}{int(round(alpha * 100)):02d}"


@dataclass(frozen=True)
class McConfig:
    """One Monte-Carlo study.

    ``adjusted`` switches every estimator (selection included) to the
    ``L(0)``-adjusted main-effect regression with ``L(0)``-conditioned
    numerators. ``calibrate_m`` additionally records the SW-RSW pair test at
    that ``m`` in every replication. ``pair_variance`` (``"paired"`` or
    ``"sum"``) is the variance used by every pair test; unset fields take
    the scenario defaults.
    """

    scenario: str = "s1"
    reps: int = 1000
    n: Optional[int] = None
    seed: int = 2024
    alphas: Tuple[float, ...] = (0.05, 0.20)
    variants: Tuple[str, ...] = ("ztest", "pztest")
    kinds: Tuple[str, ...] = ("SW", "RSW", "PSW")
    combined: bool = True
    model_form: Optional[str] = None
    adjusted: bool = False
    spec: Optional[WeightModelSpec] = None
    true_weights: bool = False
    max_m: Optional[int] = None
    start_m: int = 1
    calibrate_m: Optional[int] = None
    pair_variance: Optional[str] = None
    threads: int = 1

    def resolved(self) -> "McConfig":
        d = scenario_defaults(self.scenario)
        spec = self.spec or d["spec"]
        if self.adjusted and not spec.adjust_L0:
            spec = replace(spec, adjust_L0=True)
        if self.true_weights and not spec.true_denominators:
            spec = replace(spec, true_denominators=True)
        return replace(
            self,
            model_form=self.model_form or d["model_form"],
            max_m=self.max_m or d["max_m"],
            spec=spec,
            pair_variance=self.pair_variance or d["pair_variance"],
        )


def _draw(cfg: McConfig, rep: int):
    overrides = {"seed": cfg.seed}
    if cfg.n is not None:
        overrides["n"] = cfg.n
    return generate(cfg.scenario, rep=rep, **overrides)


def run_replication(cfg: McConfig, rep: int) -> dict:
    """Generate one panel, run every selection method and estimator on it."""
    cfg = cfg.resolved()
    panel, truth = _draw(cfg, rep)
    out = {"rep": rep, "selected": {}, "estimates": {}, "failures": [], "calibration": None}
    try:
        models = fit_weight_models(panel, cfg.spec, truth)
    except Exception as exc:
        out["failures"].append(("weights", repr(exc)))
        return out
    cache = EstimateCache(panel, models, cfg.model_form, cfg.adjusted)
    max_m = cfg.max_m or panel.K
    survival = panel.survival
    for variant in cfg.variants:
        for alpha in cfg.alphas:
            label = method_label(variant, alpha)
            try:
                sel = closed_test_select(panel, alpha, variant, cfg.model_form, start_m=cfg.start_m,
                                         max_m=max_m, cache=cache,
                                         pair_variance=cfg.pair_variance)
            except Exception as exc:
                out["failures"].append((label, repr(exc)))
                continue
            m = sel.selected_m
            out["selected"][label] = m
            for kind in cfg.kinds:
                try:
                    e = cache(kind, m)
                    out["estimates"][(label, kind)] = (e.estimate, e.variance)
                except Exception as exc:
                    out["failures"].append((f"{label}/{kind}", repr(exc)))
            if cfg.combined and variant == "ztest":
                for base in ("SW", "RSW"):
                    name = f"PSW_{base}"
                    try:
                        e = combined_estimate(panel, models, m, alpha, base, cfg.model_form, cfg.adjusted,
                                              cache=cache,
                                              pair_variance=cfg.pair_variance)
                        out["estimates"][(label, name)] = (e.estimate, e.variance)
                    except Exception as exc:
                        out["failures"].append((f"{label}/{name}", repr(exc)))
    if cfg.calibrate_m is not None:
        try:
            t = pair_test(cache("SW", cfg.calibrate_m), cache("RSW", cfg.calibrate_m), 0.05)
            out["calibration"] = (t.D, t.rejected)
        except Exception as exc:
            out["failures"].append(("calibration", repr(exc)))
    out["theta"] = truth.theta
    out["survival"] = survival
    return out


@dataclass
class McReport:
    """Aggregated Monte-Carlo results.

    ``selection[method]`` lists ``P[selected = m]`` for ``m = 1..max_m``.
    ``estimation[(method, kind)]`` holds bias, SE (population sd over
    replications), RMSE, CP and the number of replications used.
    """

    scenario: str
    reps: int
    theta: float
    max_m: int
    selection: Dict[str, List[float]]
    estimation: Dict[Tuple[str, str], dict]
    failures: Dict[str, int]
    calibration: Optional[dict]
    runtime: float
    config: dict = field(default_factory=dict)

    def row(self, method: str, kind: str) -> dict:
        return self.estimation[(method, kind)]

    def to_json(self) -> str:
        return json.dumps({
            "scenario": self.scenario,
            "reps": self.reps,
            "theta": self.theta,
            "max_m": self.max_m,
            "runtime": self.runtime,
            "selection": self.selection,
            "estimation": [{"method": m, "weight": k, **v} for (m, k), v in self.estimation.items()],
            "failures": self.failures,
            "calibration": self.calibration,
            "config": self.config,
        }, indent=2)

    def write(self, out_dir: str, fmt: str = "csv") -> List[str]:
        """Write the report (CSV tables plus JSON, or JSON only)."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        jpath = os.path.join(out_dir, f"mc_{self.scenario}.json")
        with open(jpath, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        paths.append(jpath)
        if fmt == "csv":
            spath = os.path.join(out_dir, f"mc_{self.scenario}_selection.csv")
            with open(spath, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["method"] + [f"m={m}" for m in range(1, self.max_m + 1)])
                for method, probs in self.selection.items():
                    w.writerow([method] + [f"{p:.3f}" for p in probs])
            epath = os.path.join(out_dir, f"mc_{self.scenario}_estimation.csv")
            with open(epath, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "weight", "bias", "se", "rmse", "cp", "used"])
                for (method, kind), v in self.estimation.items():
                    w.writerow([method, kind, f"{v['bias']:.4f}", f"{v['se']:.4f}", f"{v['rmse']:.4f}",
                                f"{v['cp']:.3f}", v["used"]])
            paths += [spath, epath]
        return paths

    def table(self) -> str:
        """Human-readable summary in the layout of the simulation tables."""
        lines = [f"scenario {self.scenario}: {self.reps} replications, truth {self.theta:g}, "
                 f"{self.runtime:.1f}s"]
        head = "".join(f"{'m=' + str(m):>7}" for m in range(1, self.max_m + 1))
        lines.append(f"{'method':<10}{head}")
        for method, probs in self.selection.items():
            lines.append(f"{method:<10}" + "".join(f"{p:>7.3f}" for p in probs))
        lines.append(f"{'method':<10}{'weight':<9}{'bias':>8}{'SE':>8}{'RMSE':>8}{'CP':>7}")
        for (method, kind), v in self.estimation.items():
            lines.append(f"{method:<10}{kind:<9}{v['bias']:>8.3f}{v['se']:>8.3f}{v['rmse']:>8.3f}{v['cp']:>7.3f}")
        if self.calibration:
            c = self.calibration
            lines.append(f"calibration at m={c['m']}: rejection rate {c['rate']:.3f} over {c['count']}")
        if self.failures:
            lines.append(f"failures: {self.failures}")
        return "\n".join(lines)


def aggregate(cfg: McConfig, results: Sequence[dict], runtime: float = 0.0) -> McReport:
    """Reduce per-replication results (in replication order) to a report."""
    cfg = cfg.resolved()
    results = sorted(results, key=lambda r: r["rep"])
    theta = next((r["theta"] for r in results if "theta" in r), float("nan"))
    K = preset(cfg.scenario).K
    max_m = cfg.max_m or K
    methods = [method_label(v, a) for v in cfg.variants for a in cfg.alphas]
    selection = {}
    for method in methods:
        counts = np.zeros(max_m)
        for r in results:
            m = r["selected"].get(method)
            if m is not None:
                counts[m - 1] += 1
        selection[method] = (counts / len(results)).tolist()
    estimation = {}
    for method in methods:
        kinds = list(cfg.kinds)
        if cfg.combined and method.startswith("ztest"):
            kinds += ["PSW_SW", "PSW_RSW"]
        for kind in kinds:
            vals = [r["estimates"][(method, kind)] for r in results if (method, kind) in r["estimates"]]
            if not vals:
                continue
            est = np.array([v[0] for v in vals])
            se_hat = np.sqrt(np.array([v[1] for v in vals]))
            z = 1.959963984540054
            covered = (est - z * se_hat <= theta) & (theta <= est + z * se_hat)
            bias = float(est.mean() - theta)
            sd = float(est.std(ddof=0))
            estimation[(method, kind)] = {
                "bias": bias,
                "se": sd,
                "rmse": float(np.sqrt(np.mean((est - theta) ** 2))),
                "cp": float(covered.mean()),
                "used": len(vals),
            }
    failures: Dict[str, int] = {}
    for r in results:
        for where, _ in r["failures"]:
            failures[where] = failures.get(where, 0) + 1
    calibration = None
    if cfg.calibrate_m is not None:
        rej = [r["calibration"][1] for r in results if r["calibration"] is not None]
        calibration = {"m": cfg.calibrate_m, "count": len(rej), "rate": float(np.mean(rej)) if rej else float("nan")}
    conf = asdict(replace(cfg, spec=None))
    conf["spec"] = asdict(cfg.spec)
    return McReport(cfg.scenario, len(results), float(theta), max_m, selection, estimation, failures,
                    calibration, runtime, conf)


def _worker(args):
    cfg, rep = args
    return run_replication(cfg, rep)


def run_mc(cfg: McConfig, reps: Optional[Sequence[int]] = None, progress=None) -> McReport:
    """Run the study. ``reps`` overrides the replication indices (default
    ``0..cfg.reps-1``); ``cfg.threads > 1`` uses a process pool."""
    if cfg.reps < 1:
        raise ValueError("reps must be at least 1")
    cfg = cfg.resolved()
    indices = list(range(cfg.reps)) if reps is None else list(reps)
    start = time.perf_counter()
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(_worker, [(cfg, r) for r in indices], chunksize=8))
    else:
        results = []
        for i, r in enumerate(indices):
            results.append(run_replication(cfg, r))
            if progress is not None:
                progress(i + 1, len(indices))
    return aggregate(cfg, results, time.perf_counter() - start)
