"""A reduced Monte-Carlo study of scenario 2 (200 replications).

Prints the selection probabilities and the bias/SE/RMSE/CP table; the same
study is available as ``msmpsw mc --scenario s2 --reps 200``.
"""
from msmpsw.mc import McConfig, run_mc


def main():
    report = run_mc(McConfig(scenario="s2", reps=200, seed=11))
    print(report.table())


if __name__ == "__main__":
    main()
