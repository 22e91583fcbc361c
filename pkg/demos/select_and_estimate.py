"""One scenario-1 panel: choose the treatment-history depth, then estimate.

Run with an optional seed, e.g. ``python3 demos/select_and_estimate.py 7``.
"""
import sys

from msmpsw.dgp import generate
from msmpsw.estimate import combined_estimate, estimate
from msmpsw.infer import confidence_interval
from msmpsw.ipw import fit_weight_models
from msmpsw.select import closed_test_select, selection_report


def main(seed=0):
    panel, truth = generate("s1", n=5000, seed=seed)
    models = fit_weight_models(panel)
    sel = closed_test_select(panel, 0.05, "ztest", "saturated", models=models)
    print(selection_report(sel))
    m = sel.selected_m
    print(f"\ntrue effect {truth.theta}, true depth {truth.m_star}, selected depth {m}")
    print(f"{'weights':<8}{'estimate':>10}{'SE':>8}{'95% CI':>20}")
    rows = [estimate(panel, models, k, m, "saturated") for k in ("SW", "RSW", "PSW")]
    rows.append(combined_estimate(panel, models, m, 0.05, "SW", "saturated"))
    for r in rows:
        lo, hi = confidence_interval(r)
        print(f"{r.kind:<8}{r.estimate:>10.3f}{r.se:>8.3f}   ({lo:6.3f}, {hi:6.3f})")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
