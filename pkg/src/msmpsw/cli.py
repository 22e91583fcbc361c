"""Command-line front end: ``simulate``, ``fit``, ``select`` and ``mc``.

Every subcommand exits with status 0 on success and a nonzero status (with a
one-line message on stderr) on any fatal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields, replace
from typing import List, Optional

import numpy as np

from .dgp import PRESETS, TruthRecord, generate, preset
from .estimate import combined_estimate, estimate
from .infer import chi2_sf1, confidence_interval
from .ipw import (WeightModelSpec, build_survival_weights, build_weights, fit_weight_models,
                  weight_summary)
from .mc import McConfig, run_mc, scenario_defaults
from .panel import read_csv, write_csv
from .select import EstimateCache, closed_test_select, selection_report, selection_to_json

__all__ = ["build_parser", "main"]

_WEIGHTS = {"sw": "SW", "rsw": "RSW", "psw": "PSW", "sw_psw": "SW", "rsw_psw": "RSW"}
_MODELS = {"saturated": "saturated", "main": "main_effect"}


class CliError(Exception):
    """Fatal, user-facing error."""


# --------------------------------------------------------------------------
# simulate


def write_probabilities(path, panel, truth: TruthRecord) -> None:
    """Generating probabilities on the observed rows: id, t, p_treat[, p_censor]."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cens = truth.p_censor is not None
        w.writerow(["id", "t", "p_treat"] + (["p_censor"] if cens else []))
        ii, kk = np.nonzero(panel.observed)
        for i, k in zip(ii, kk):
            row = [str(int(panel.ids[i])), str(int(k)), repr(float(truth.p_treat[i, k]))]
            if cens:
                row.append(repr(float(truth.p_censor[i, k])))
            w.writerow(row)


def read_probabilities(path, panel) -> TruthRecord:
    """Inverse of :func:`write_probabilities`, aligned to ``panel``'s subjects."""
    index = {int(v): i for i, v in enumerate(panel.ids)}
    pt = np.full((panel.n, panel.K), np.nan)
    pc = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "p_treat" not in reader.fieldnames:
            raise CliError(f"{path}: not a probabilities file")
        if "p_censor" in reader.fieldnames:
            pc = np.full((panel.n, panel.K), np.nan)
        for row in reader:
            try:
                i = index[int(row["id"])]
            except KeyError:
                raise CliError(f"{path}: subject {row['id']} is not in the panel") from None
            k = int(row["t"])
            pt[i, k] = float(row["p_treat"])
            if pc is not None:
                pc[i, k] = float(row["p_censor"])
    if np.any(np.isnan(pt[panel.observed])):
        raise CliError(f"{path}: probabilities missing for some observed rows")
    return TruthRecord(float("nan"), 0, pt, pc)


def cmd_simulate(args) -> int:
    overrides = {"seed": args.seed}
    if args.n is not None:
        overrides["n"] = args.n
    panel, truth = generate(args.scenario, rep=args.rep, **overrides)
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "panel.csv"), panel)
    write_probabilities(os.path.join(args.out, "probabilities.csv"), panel, truth)
    doc = truth.to_json()
    doc.update({"rep": args.rep, "probabilities": "probabilities.csv", "panel": "panel.csv"})
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {panel.n} subjects x {panel.K} times ({panel.mode} mode) to {args.out}")
    return 0


# --------------------------------------------------------------------------
# shared panel/model handling


def _load(args):
    panel = read_csv(args.panel)
    if args.mode is not None and args.mode != panel.mode:
        raise CliError(f"panel is in {panel.mode!r} mode, not {args.mode!r}")
    truth = None
    if args.true_weights:
        path = args.truth or os.path.join(os.path.dirname(os.path.abspath(args.panel)), "probabilities.csv")
        if not os.path.exists(path):
            raise CliError(f"--true-weights needs generating probabilities; {path} not found")
        truth = read_probabilities(path, panel)
    num_lags = args.num_lags
    if num_lags is None and panel.survival:
        num_lags = scenario_defaults("surv")["spec"].num_lags
    spec = WeightModelSpec(
        num_lags=num_lags,
        true_denominators=bool(args.true_weights),
        truncate=tuple(args.truncate) if args.truncate else None,
        adjust_L0=args.adjusted,
    )
    return panel, truth, spec


def _check_m(m, panel):
    if not 1 <= m <= panel.K:
        raise CliError(f"m={m} is outside 1..K={panel.K}")


def _model_form(args, panel):
    if panel.survival:
        return "main_effect"
    return _MODELS[args.model]


# --------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    panel, truth, spec = _load(args)
    _check_m(args.m, panel)
    models = fit_weight_models(panel, spec, truth)
    form = _model_form(args, panel)
    kind = _WEIGHTS[args.weights]
    if args.weights in ("sw_psw", "rsw_psw"):
        res = combined_estimate(panel, models, args.m, args.alpha[0], kind, form, args.adjusted,
                                pair_variance=args.variance if args.variance != "bootstrap" else "paired")
        used = res.meta["branch"]
    else:
        res = estimate(panel, models, kind, args.m, form, args.adjusted)
        used = res.kind
    ws = (build_survival_weights if panel.survival else build_weights)(models, used, args.m)
    summary = weight_summary(ws)
    lo, hi = confidence_interval(res)
    p = chi2_sf1(res.estimate ** 2 / res.variance) if res.variance > 0 else float("nan")
    row = {"weights": args.weights.upper().replace("_", "/"), "m": args.m, "estimate": res.estimate,
           "se": res.se, "lcl": lo, "ucl": hi, "p": p, "used": used}
    if panel.survival:
        row.update({"hr": float(np.exp(res.estimate)), "hr_lcl": float(np.exp(lo)), "hr_ucl": float(np.exp(hi))})
    row["weight_summary"] = summary
    if args.format == "json":
        print(json.dumps(row, indent=2))
    else:
        if panel.survival:
            print(f"{'weights':<9}{'m':>3}{'log HR':>10}{'SE':>9}{'HR':>9}{'LCL':>9}{'UCL':>9}{'p':>9}")
            print(f"{row['weights']:<9}{args.m:>3}{res.estimate:>10.4f}{res.se:>9.4f}{row['hr']:>9.4f}"
                  f"{row['hr_lcl']:>9.4f}{row['hr_ucl']:>9.4f}{p:>9.4f}")
        else:
            print(f"{'weights':<9}{'m':>3}{'estimate':>10}{'SE':>9}{'LCL':>9}{'UCL':>9}{'p':>9}")
            print(f"{row['weights']:<9}{args.m:>3}{res.estimate:>10.4f}{res.se:>9.4f}{lo:>9.4f}{hi:>9.4f}{p:>9.4f}")
        if used != res.kind or args.weights in ("sw_psw", "rsw_psw"):
            print(f"combined estimator used {used} weights")
        print("weights: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                      for k, v in summary.items()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "fit.json"), "w", encoding="utf-8") as fh:
            json.dump(row, fh, indent=2)
    return 0


# --------------------------------------------------------------------------
# select


def cmd_select(args) -> int:
    panel, truth, spec = _load(args)
    form = _model_form(args, panel)
    max_m = args.max_m or (min(10, panel.K) if panel.survival else panel.K)
    _check_m(max_m, panel)
    models = fit_weight_models(panel, spec, truth)
    cache = EstimateCache(panel, models, form, args.adjusted)
    results = []
    for alpha in args.alpha:
        results.append(closed_test_select(panel, alpha, args.variant, form, start_m=args.start_m, max_m=max_m,
                                          cache=cache, adjusted=args.adjusted, spec=spec,
                                          pair_variance=args.variance, bootstrap_reps=args.bootstrap_reps,
                                          bootstrap_seed=args.seed))
    if args.format == "json":
        print(json.dumps([json.loads(selection_to_json(r)) for r in results], indent=2))
    else:
        for r in results:
            print(selection_report(r))
            print()
        if len(results) > 1:
            print("sensitivity: " + "  ".join(f"alpha={r.alpha:g} -> m={r.selected_m}" for r in results))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for r in results:
            name = f"selection_{r.variant}_{int(round(r.alpha * 100)):02d}.json"
            with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
                fh.write(selection_to_json(r) + "\n")
    return 0


# --------------------------------------------------------------------------
# mc


def _mc_config(args) -> McConfig:
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
        known = {f.name for f in fields(McConfig)}
        unknown = set(base) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        if "spec" in base and base["spec"] is not None:
            base["spec"] = WeightModelSpec(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in base["spec"].items()})
        for key in ("alphas", "variants", "kinds"):
            if key in base:
                base[key] = tuple(base[key])
    cfg = McConfig(**base)
    over = {}
    if args.scenario is not None:
        over["scenario"] = args.scenario
    if cfg.scenario not in PRESETS and over.get("scenario") not in PRESETS:
        raise CliError(f"unknown scenario {over.get('scenario', cfg.scenario)!r}")
    for name, attr in (("reps", "reps"), ("n", "n"), ("seed", "seed"), ("threads", "threads"),
                       ("max_m", "max_m"), ("start_m", "start_m")):
        v = getattr(args, name)
        if v is not None:
            over[attr] = v
    if args.alpha:
        over["alphas"] = tuple(args.alpha)
    if args.variant:
        over["variants"] = tuple(args.variant)
    if args.model is not None:
        over["model_form"] = _MODELS[args.model]
    if args.true_weights:
        over["true_weights"] = True
    if args.adjusted:
        over["adjusted"] = True
    if args.variance is not None:
        if args.variance == "bootstrap":
            raise CliError("the bootstrap variance is too slow for Monte-Carlo studies; use paired or sum")
        over["pair_variance"] = args.variance
    if args.calibrate_m is not None:
        over["calibrate_m"] = args.calibrate_m
    if args.truncate:
        spec = cfg.spec or scenario_defaults(over.get("scenario", cfg.scenario))["spec"]
        over["spec"] = replace(spec, truncate=tuple(args.truncate))
    cfg = replace(cfg, **over)
    if cfg.reps < 1:
        raise CliError("reps must be at least 1")
    return cfg


def cmd_mc(args) -> int:
    cfg = _mc_config(args)

    def progress(done, total):
        if args.verbose and (done % 50 == 0 or done == total):
            print(f"  {done}/{total} replications", file=sys.stderr)

    report = run_mc(cfg, progress=progress)
    print(report.table())
    if args.out:
        for path in report.write(args.out, args.format):
            print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# parser


def _common_panel(p):
    p.add_argument("panel", help="panel CSV written by 'simulate' or in the same long format")
    p.add_argument("--mode", choices=["mean", "censor", "survival"], help="expected panel mode (checked)")
    p.add_argument("--model", choices=sorted(_MODELS), default="saturated",
                   help="outcome regression form (survival mode always uses main effects)")
    p.add_argument("--adjusted", action="store_true", help="adjust for L(0) in numerators and regression")
    p.add_argument("--true-weights", action="store_true", help="use generating treatment/censoring probabilities")
    p.add_argument("--truth", help="probabilities CSV for --true-weights (default: next to the panel)")
    p.add_argument("--truncate", nargs=2, type=float, metavar=("LO", "HI"), help="percentile truncation of weights")
    p.add_argument("--num-lags", type=int, default=None,
                   help="treatment lags in the numerator models (default: full history, 1 in survival mode)")
    p.add_argument("--variance", choices=["paired", "sum", "bootstrap"], default="paired",
                   help="variance of estimator differences in pair tests")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for machine-readable output")
    p.add_argument("--format", choices=["csv", "json"], default="csv",
                   help="json prints machine-readable output to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msmpsw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one panel from a scenario")
    p.add_argument("--scenario", required=True, choices=sorted(PRESETS))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep", type=int, default=0, help="replication index of the draw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit weights and estimate at one m")
    _common_panel(p)
    p.add_argument("--weights", choices=sorted(_WEIGHTS), default="psw")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--alpha", type=float, action="append", default=None,
                   help="level of the pretest for sw_psw / rsw_psw (default 0.05)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="select m by closed testing")
    _common_panel(p)
    p.add_argument("--alpha", type=float, action="append", default=None, help="repeatable")
    p.add_argument("--variant", choices=["ztest", "pztest"], default="ztest")
    p.add_argument("--start-m", type=int, default=1)
    p.add_argument("--max-m", type=int, default=None, help="largest candidate (default K, or 10 in survival mode)")
    p.add_argument("--bootstrap-reps", type=int, default=200)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("mc", help="Monte-Carlo study of a scenario")
    p.add_argument("--config", help="JSON file with McConfig fields; flags override it")
    p.add_argument("--scenario", choices=sorted(PRESETS), default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--alpha", type=float, action="append", default=None, help="repeatable")
    p.add_argument("--variant", choices=["ztest", "pztest"], action="append", default=None, help="repeatable")
    p.add_argument("--model", choices=sorted(_MODELS), default=None)
    p.add_argument("--adjusted", action="store_true")
    p.add_argument("--true-weights", action="store_true")
    p.add_argument("--truncate", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--variance", choices=["paired", "sum", "bootstrap"], default=None)
    p.add_argument("--calibrate-m", type=int, default=None)
    p.add_argument("--max-m", type=int, default=None)
    p.add_argument("--start-m", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_mc)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "alpha", None) is None and args.command in ("fit", "select"):
        args.alpha = [0.05]
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"msmpsw {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
