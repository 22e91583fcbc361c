import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from helpers import random_panel
from msmpsw.dgp import generate
from msmpsw.panel import (LongPanel, PanelParseError, PanelValidationError, expand_person_periods,
                          lag_matrix, read_csv, validate, write_csv)


def _full(n=1, K=4, q=1):
    return np.zeros((n, K, q)), np.zeros((n, K))


def test_non_binary_treatment_reported():
    Z, A = _full()
    A[0, 2] = 0.5
    v = validate(LongPanel(Z, A, np.zeros(1)))
    assert [x.rule for x in v] == ["treatment not binary"]
    assert (v[0].subject, v[0].time) == (0, 2)


def test_non_absorbing_censoring_reported():
    Z, A = _full()
    C = np.array([[0, 0, 1, 0]], dtype=float)
    Z[0, 2:] = np.nan
    A[0, 2:] = np.nan
    v = validate(LongPanel(Z, A, np.array([np.nan]), C=C))
    assert "censoring not absorbing" in [x.rule for x in v]


def test_outcome_presence_follows_censoring():
    Z, A = _full(n=2)
    C = np.zeros((2, 4))
    C[1, 3] = 1
    bad = LongPanel(Z, A, np.array([1.0, 2.0]), C=C)
    assert [x.rule for x in validate(bad)] == ["outcome present for censored subject"]
    ok = LongPanel(Z, A, np.array([1.0, np.nan]), C=C)
    assert validate(ok) == []


@pytest.mark.parametrize("scenario", ["s1", "s2", "s3", "surv"])
def test_generated_panels_are_valid(scenario):
    reps = 100 if scenario != "surv" else 10
    for rep in range(reps):
        panel, _ = generate(scenario, rep=rep, n=200)
        assert validate(panel) == []


def test_full_follow_up_gives_K_rows():
    Z, A = _full()
    pp = expand_person_periods(LongPanel(Z, A, np.zeros(1)))
    assert len(pp) == 4
    assert_array_equal(pp.t, [0, 1, 2, 3])


def test_censoring_cut():
    # order within a period is L(t), A(t), C(t+1): C(3)=1 still lets A(2) be seen
    Z, A = _full()
    Z[0, 3:] = np.nan
    A[0, 3:] = np.nan
    C = np.array([[0, 0, 1, 1]], dtype=float)
    panel = LongPanel(Z, A, np.array([np.nan]), C=C)
    pp = expand_person_periods(panel)
    assert_array_equal(pp.t, [0, 1, 2])
    assert_array_equal(pp.censored, [0, 0, 1])


def test_event_is_absorbing_in_expansion():
    Z, A = _full()
    Z[0, 2:] = np.nan
    A[0, 2:] = np.nan
    Y = np.array([[0, 1, 1, 1]], dtype=float)
    pp = expand_person_periods(LongPanel(Z, A, Y))
    assert_array_equal(pp.t, [0, 1])
    assert_array_equal(pp.event, [0, 1])


def test_expansion_rejects_invalid_panel():
    Z, A = _full()
    A[0, 0] = 2
    with pytest.raises(PanelValidationError):
        expand_person_periods(LongPanel(Z, A, np.zeros(1)))


def test_lags_and_order():
    panel = random_panel(3, n=5, K=4, mode="censor")
    pp = expand_person_periods(panel)
    key = pp.index * 10 + pp.t
    assert np.all(np.diff(key) > 0)
    for r in range(len(pp)):
        i, t = pp.index[r], pp.t[r]
        for j in range(1, 4):
            expect = panel.A[i, t - j] if t - j >= 0 else 0.0
            assert pp.lags[r, j - 1] == expect


def test_lag_matrix():
    A = np.array([[1.0, 0.0, 1.0]])
    assert_array_equal(lag_matrix(A, 2)[0], [[0, 0], [1, 0], [0, 1]])


def test_write_read_scenario_panel(tmp_path):
    panel, _ = generate("s1", n=50)
    path = tmp_path / "p.csv"
    write_csv(path, panel)
    assert read_csv(path) == panel


def test_missing_treatment_column(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,t,L1,Y\n0,0,1.0,\n")
    with pytest.raises(PanelParseError, match="'A'"):
        read_csv(path)


def test_short_subject_without_censoring(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("# K=4 mode=mean\nid,t,L1,A,Y\n0,0,1,0,\n0,1,1,1,\n0,2,1,0,2.5\n")
    with pytest.raises(PanelParseError):
        read_csv(path)


def test_non_binary_treatment_names_row(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,t,L1,A,Y\n0,0,1,0,\n0,1,1,0.5,3\n")
    with pytest.raises(PanelParseError, match="row 3"):
        read_csv(path)


def test_ragged_row(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,t,L1,A,Y\n0,0,1,0\n")
    with pytest.raises(PanelParseError, match="fields"):
        read_csv(path)


def test_panel_is_immutable():
    panel = random_panel(0)
    with pytest.raises(ValueError):
        panel.A[0, 0] = 1


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), mode=st.sampled_from(["mean", "censor", "survival"]),
       n=st.integers(1, 8), K=st.integers(1, 5), q=st.integers(1, 3), p=st.integers(0, 2))
def test_round_trip_property(tmp_path_factory, seed, mode, n, K, q, p):
    panel = random_panel(seed, n=n, K=K, q=q, p=p, mode=mode)
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    write_csv(path, panel)
    back = read_csv(path)
    assert back == panel
    assert back.mode == panel.mode


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), mode=st.sampled_from(["mean", "censor", "survival"]),
       K=st.integers(1, 6))
def test_row_count_property(seed, mode, K):
    panel = random_panel(seed, n=7, K=K, mode=mode)
    gone = np.zeros((panel.n, K), dtype=bool)
    if panel.C is not None:
        gone |= panel.C == 1
    if panel.survival:
        gone |= panel.Y == 1
    expect = sum(int(np.argmax(g)) + 1 if g.any() else K for g in gone)
    assert len(expand_person_periods(panel)) == expect <= panel.n * K
