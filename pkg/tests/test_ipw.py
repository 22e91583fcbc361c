import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from helpers import random_panel
from msmpsw.dgp import generate, logistic_enumerable
from msmpsw.glm import fit_weighted_logistic
from msmpsw.ipw import (PositivityWarning, WeightModels, WeightModelSpec, build_survival_weights, build_weights,
                        fit_weight_models, weight_summary, write_weights_csv)


@pytest.fixture(scope="module")
def s1():
    panel, truth = generate("s1", n=3000, seed=11)
    return panel, truth, fit_weight_models(panel)


@pytest.fixture(scope="module")
def surv():
    panel, truth = generate("surv", n=3000, seed=5)
    return panel, truth, fit_weight_models(panel, WeightModelSpec(num_lags=1))


def _f(p, a):
    return np.where(a == 1, p, 1 - p)


# ------------------------------------------------------------ identities

def test_identical_models_give_unit_weights():
    panel = random_panel(2, n=20, K=4, mode="censor")
    rng = np.random.default_rng(0)
    p = rng.uniform(0.1, 0.9, (20, 4))
    c = rng.uniform(0.05, 0.3, (20, 4))
    models = WeightModels.from_probabilities(panel, p, [p] * 4, c, [c] * 4)
    for kind in ("SW", "RSW", "PSW"):
        for m in range(1, 5):
            ws = build_weights(models, kind, m)
            assert_allclose(ws.values[ws.mask], 1.0, rtol=1e-14)


def test_identical_models_give_unit_survival_weights():
    panel = random_panel(4, n=20, K=5, mode="survival")
    p = np.full((20, 5), 0.3)
    models = WeightModels.from_probabilities(panel, p, [p] * 5, p / 3, [p / 3] * 5)
    ws = build_survival_weights(models, "PSW", 2)
    assert_allclose(ws.values[ws.mask], 1.0, rtol=1e-14)


def test_full_depth_weights_equal_sw(s1):
    panel, _, models = s1
    sw = build_weights(models, "SW", 4).values
    assert_array_equal(build_weights(models, "PSW", 4).values, sw)
    assert_array_equal(build_weights(models, "RSW", 4).values, sw)


def test_full_depth_survival_weights_equal_sw(surv):
    _, _, models = surv
    sw = build_survival_weights(models, "SW", 36).values
    assert_array_equal(build_survival_weights(models, "PSW", 36).values, sw)
    assert_array_equal(build_survival_weights(models, "RSW", 36).values, sw)


def test_early_window_clipped_at_start(surv):
    _, _, models = surv
    sw = build_survival_weights(models, "SW", 36).values
    psw = build_survival_weights(models, "PSW", 3).values
    assert_array_equal(psw[:, :3], sw[:, :3])
    assert not np.allclose(psw[:, 10:], sw[:, 10:], equal_nan=True)


# ------------------------------------------------------------ hand oracles

def test_two_period_sw_by_hand():
    # K=2, binary L, true denominators; numerators computed here by summation
    dist = logistic_enumerable(2, l_coef=[(0.2, 0, 0, 0), (-0.1, 0.5, -0.7, 0.3)],
                               a_coef=[(-0.3, 1.1, 0, 0), (-0.5, 0.8, 0.9, 0.4)],
                               y_fn=lambda L, A: L.sum() + A.sum())
    panel, mass = dist.to_panel()
    pa0 = np.sum(mass * dist.A[:, 0])
    pa1 = {a: np.sum(mass * dist.A[:, 1] * (dist.A[:, 0] == a)) / np.sum(mass * (dist.A[:, 0] == a))
           for a in (0, 1)}
    marg1 = np.sum(mass * dist.A[:, 1])
    num0 = np.full(len(mass), pa0)
    num1 = np.array([pa1[a] for a in dist.A[:, 0]])
    zero_lags = np.column_stack([num0, np.full(len(mass), marg1)])
    models = WeightModels.from_probabilities(panel, dist.pA, [zero_lags, np.column_stack([num0, num1])])
    sw = build_weights(models, "SW", 2).values
    for r in range(len(mass)):
        a = dist.A[r]
        hand = (_f(pa0, a[0]) / _f(dist.pA[r, 0], a[0])) * (_f(pa1[a[0]], a[1]) / _f(dist.pA[r, 1], a[1]))
        assert_allclose(sw[r], hand, rtol=1e-12)
    # and the PSW/RSW m=1 window is the second factor alone
    psw = build_weights(models, "PSW", 1).values
    rsw = build_weights(models, "RSW", 1).values
    assert_allclose(psw, _f(num1, dist.A[:, 1]) / _f(dist.pA[:, 1], dist.A[:, 1]), rtol=1e-12)
    assert_allclose(rsw, _f(marg1, dist.A[:, 1]) / _f(dist.pA[:, 1], dist.A[:, 1]), rtol=1e-12)


def test_survival_weights_traced_by_hand(surv):
    panel, truth, _ = surv
    models = fit_weight_models(panel, WeightModelSpec(num_lags=1, true_denominators=True), truth)
    i = int(np.nonzero(panel.exit_index() >= 4)[0][0])

    def factor(k, r):
        a = panel.A[i, k]
        out = _f(models.num_a[r][i, k], a) / _f(truth.p_treat[i, k], a)
        return out * (1 - models.num_c[r][i, k]) / (1 - truth.p_censor[i, k])

    full = [factor(k, min(1, k)) for k in range(3)]
    for t in (1, 2, 3):
        assert_allclose(build_survival_weights(models, "SW", 36).values[i, t - 1], np.prod(full[:t]), rtol=1e-12)
    psw = build_survival_weights(models, "PSW", 2).values[i]
    rsw = build_survival_weights(models, "RSW", 2).values[i]
    assert_allclose(psw[:3], [full[0], full[0] * full[1], full[1] * full[2]], rtol=1e-12)
    # RSW restarts the numerator history at the window start t-m
    assert_allclose(rsw[:3], [full[0], full[0] * full[1], factor(1, 0) * factor(2, 1)], rtol=1e-12)
    assert_allclose(build_survival_weights(models, "PSW", 1).values[i, :3], full, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), mode=st.sampled_from(["mean", "censor"]), K=st.integers(1, 5),
       d=st.integers(0, 4), kind=st.sampled_from(["SW", "RSW", "PSW"]), data=st.data())
def test_weights_match_explicit_product(seed, mode, K, d, kind, data):
    """Random probability grids: every weight equals its defining product."""
    d = min(d, K - 1)
    m = data.draw(st.integers(1, K))
    panel = random_panel(seed, n=8, K=K, mode=mode)
    rng = np.random.default_rng(seed + 1)
    den = rng.uniform(0.05, 0.95, (8, K))
    num = [rng.uniform(0.05, 0.95, (8, K)) for _ in range(d + 1)]
    den_c = num_c = None
    if mode == "censor":
        den_c = rng.uniform(0.01, 0.4, (8, K))
        num_c = [rng.uniform(0.01, 0.4, (8, K)) for _ in range(d + 1)]
    ws = build_weights(WeightModels.from_probabilities(panel, den, num, den_c, num_c), kind, m)
    s = 0 if kind == "SW" else K - m
    for i in np.nonzero(ws.mask)[0]:
        w = 1.0
        for k in range(s, K):
            r = min(d, k - s) if kind == "RSW" else min(d, k)
            a = panel.A[i, k]
            w *= _f(num[r][i, k], a) / _f(den[i, k], a)
            if den_c is not None:
                w *= (1 - num_c[r][i, k]) / (1 - den_c[i, k])
        assert_allclose(ws.values[i], w, rtol=1e-12)
    assert np.all(np.isnan(ws.values[~ws.mask]))
    assert np.all(ws.values[ws.mask] > 0)


# ------------------------------------------------------------ fitting

def test_compressed_fit_equals_direct_fit(s1):
    panel, _, models = s1
    n, K = panel.n, panel.K
    k = np.tile(np.arange(K), n)
    L = panel.Z[:, :, 0].ravel()
    L0 = np.repeat(panel.Z[:, 0, 0], K)
    lag = np.column_stack([np.zeros(n), panel.A[:, :-1]]).ravel()
    X = np.column_stack([np.ones(n * K)] + [(k == t).astype(float) for t in range(1, K)] + [L, L0, lag])
    fit = fit_weighted_logistic(X, panel.A.ravel(), np.ones(n * K))
    p = 1 / (1 + np.exp(-X @ fit.coef))
    assert_allclose(models.den_a.ravel(), p, atol=1e-10)


def test_saturated_numerator_is_cell_frequency(s1):
    panel, _, _ = s1
    models = fit_weight_models(panel, WeightModelSpec(num_form="saturated"))
    A = panel.A
    for r in (1, 3):
        for k in range(r, 4):
            hist = A[:, k - r:k]
            for pat in np.unique(hist, axis=0):
                cell = np.all(hist == pat, axis=1)
                assert_allclose(models.num_a[r][cell, k], A[cell, k].mean(), atol=1e-8)


def test_pooled_and_per_time_fits_agree_for_saturated():
    panel, _ = generate("s2", n=1500, seed=3)
    a = fit_weight_models(panel, WeightModelSpec(num_form="saturated"))
    b = fit_weight_models(panel, WeightModelSpec(num_form="saturated", pooled=False))
    for r in range(4):
        assert_allclose(a.num_a[r], b.num_a[r], atol=1e-8)


def test_true_denominators_replace_fits(s1):
    panel, truth, _ = s1
    models = fit_weight_models(panel, WeightModelSpec(true_denominators=True), truth)
    assert_array_equal(models.den_a, truth.p_treat)


def test_positivity_warning_on_floor():
    panel = random_panel(1, n=10, K=3)
    p = np.full((10, 3), 0.5)
    p[0, 0] = 0.0
    models = WeightModels.from_probabilities(panel, p, [p] * 3, floor=1e-6)
    with pytest.warns(PositivityWarning):
        ws = build_weights(models, "SW", 3)
    assert np.all(np.isfinite(ws.values))


# ------------------------------------------------------------ summaries

def test_summary_of_unit_weights():
    panel = random_panel(0, n=10, K=2)
    p = np.full((10, 2), 0.4)
    s = weight_summary(build_weights(WeightModels.from_probabilities(panel, p, [p, p]), "SW", 2))
    assert s["mean"] == 1.0 and s["sd"] == 0.0 and s["count"] == 10 and s["truncated"] == 0


def test_stabilized_weights_average_one():
    panel, _ = generate("s1", n=20000, seed=1)
    ws = build_weights(fit_weight_models(panel), "SW", 4)
    s = weight_summary(ws)
    assert abs(s["mean"] - 1) <= 3 * s["sd"] / np.sqrt(s["count"])


@pytest.mark.parametrize("bounds", [(1, 99), (0.1, 10)])
def test_truncation_reports_count(s1, bounds):
    panel, _, _ = s1
    models = fit_weight_models(panel, WeightModelSpec(truncate=bounds))
    ws = build_weights(models, "SW", 4)
    s = weight_summary(ws)
    assert s["truncated"] > 0
    assert ws.truncation["lower"] <= s["min"] and s["max"] <= ws.truncation["upper"]


def test_weight_export(tmp_path, s1):
    panel, _, models = s1
    path = tmp_path / "w.csv"
    write_weights_csv(path, panel, [build_weights(models, "PSW", 2)])
    lines = path.read_text().splitlines()
    assert lines[0] == "id,kind,m,weight"
    assert len(lines) == panel.n + 1


def test_survival_weights_only_on_risk_rows(surv):
    panel, _, models = surv
    ws = build_survival_weights(models, "RSW", 2)
    assert np.all(np.isfinite(ws.values[ws.mask]))
    assert np.all(np.isnan(ws.values[~ws.mask]))
    assert ws.mask.sum() < panel.n * panel.K


def test_invalid_m(s1):
    _, _, models = s1
    with pytest.raises(ValueError):
        build_weights(models, "PSW", 5)
    with pytest.raises(ValueError):
        build_weights(models, "XSW", 2)
