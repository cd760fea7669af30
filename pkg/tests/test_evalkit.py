import itertools
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vqapipe.errors import DataError, UndefinedStatisticError
from vqapipe.evalkit import (PredictionEntry, evaluate, f_test, format_cell, join_predictions, logistic4,
                             logistic_fit, outlier_ratio, parse_cell, pearson, plcc_rmse_or,
                             read_prediction_columns, read_subjective, single_source_srocc, srocc)

import oracles


def test_srocc_examples():
    assert srocc([1, 2, 3], [4, 5, 6]) == 1.0
    assert srocc([1, 2, 3], [6, 5, 4]) == -1.0
    assert abs(srocc([1, 2, 3, 5, 4], [1, 2, 3, 4, 5]) - 0.9) < 1e-12
    assert abs(oracles.spearman_no_ties([1, 2, 3, 5, 4], [1, 2, 3, 4, 5]) - (1 - 6 * 2 / (5 * 24))) < 1e-15
    with pytest.raises(UndefinedStatisticError):
        srocc([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedStatisticError):
        srocc([1], [1])


@given(st.lists(st.integers(-10**4, 10**4), min_size=3, max_size=12, unique=True),
       st.lists(st.integers(-10**4, 10**4), min_size=12, max_size=12))
def test_srocc_invariant_to_monotone_transforms(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y[:len(x)], dtype=float)
    if np.ptp(y) == 0:
        return
    base = srocc(x, y)
    assert abs(srocc(np.exp(x / 1e4), y) - base) < 1e-12
    assert abs(srocc(x, y ** 3 + y) - base) < 1e-12


@pytest.mark.parametrize("subj", [[10.0, 20.0, 35.0, 40.0, 70.0, 90.0], [10.0, 20.0, 20.0, 40.0, 90.0, 90.0]])
def test_statistics_match_brute_force_on_all_permutations(subj):
    base = [0.5, 1.0, 2.5, 3.0, 4.25, 8.0]
    for perm in itertools.permutations(base):
        pred = list(perm)
        assert abs(srocc(pred, subj) - oracles.spearman(pred, subj)) < 1e-12
        assert abs(pearson(pred, subj) - oracles.pearson(pred, subj)) < 1e-12
        acc = plcc_rmse_or(pred, subj, None)
        mapped = oracles.linear_fit(pred, subj)
        resid = [s - m for s, m in zip(subj, mapped)]
        assert acc.mapping == "linear"
        assert abs(acc.rmse - oracles.rmse(mapped, subj)) < 1e-12
        assert acc.outlier_ratio == oracles.outlier_ratio(resid)


def test_accuracy_examples():
    subj = np.linspace(5, 95, 12)
    exact = plcc_rmse_or(subj, subj, None)
    assert abs(exact.plcc - 1) < 1e-12 and exact.rmse < 1e-12 and exact.outlier_ratio == 0
    c = 2.5
    resid = np.array([c, -c] * 5)
    assert abs(np.sqrt(np.mean(resid ** 2)) - c) < 1e-15
    spike = np.zeros(10)
    spike[3] = 3.0
    assert outlier_ratio(spike, [1.0] * 10) == (0.1, "rating_std")
    assert outlier_ratio(spike)[0] == 0.1


def test_logistic_inversion_and_identity():
    x = np.linspace(-3, 3, 40)
    true = (90.0, 10.0, 0.4, 0.8)
    fit = logistic_fit(x, logistic4(x, *true))
    assert fit.converged
    assert np.sqrt(np.mean((fit(x) - logistic4(x, *true)) ** 2)) < 1e-3
    s = np.linspace(0, 100, 30)
    ident = logistic_fit(s, s)
    assert ident.converged and np.sqrt(np.mean((ident(s) - s) ** 2)) < 1e-2
    flat = logistic_fit(np.full(10, 3.0), s[:10])
    assert not flat.converged
    assert plcc_rmse_or(np.full(10, 3.0), s[:10], flat).mapping == "constant"


def test_logistic_plcc_invariant_to_monotone_pred_transform(rng):
    x = np.sort(rng.uniform(-2, 2, 60))
    subj = logistic4(x, 95, 5, 0.2, 0.6)
    base = plcc_rmse_or(x, subj, logistic_fit(x, subj)).plcc
    shifted = 3 * x + 7
    assert abs(plcc_rmse_or(shifted, subj, logistic_fit(shifted, subj)).plcc - base) < 1e-3


def _f_critical(d1, d2, q):
    """Quantile of the F distribution via the regularized incomplete beta function."""
    mpmath.mp.dps = 30

    def cdf(f):
        return mpmath.betainc(d1 / 2, d2 / 2, 0, d1 * f / (d1 * f + d2), regularized=True) - q
    return float(mpmath.findroot(cdf, 1.5))


def test_f_test_examples():
    crit = _f_critical(49, 49, 0.975)
    assert abs(crit - 1.76) < 0.01
    assert abs(stats.f.ppf(0.975, 49, 49) - crit) < 1e-9
    rng = np.random.default_rng(0)
    z = rng.normal(size=50)
    z = (z - z.mean()) / z.std(ddof=1)
    assert f_test(z, z) == 0
    assert f_test(z, np.sqrt(10) * z[::-1]) == 1
    assert f_test(np.sqrt(10) * z, z) == -1
    assert f_test(np.zeros(10), np.zeros(10)) == 0
    assert f_test(np.zeros(10), z[:10]) == 1
    ratio = crit * 0.99
    assert f_test(z, np.sqrt(ratio) * z) == 0
    assert f_test(z, np.sqrt(crit * 1.01) * z) == 1
    with pytest.raises(UndefinedStatisticError):
        f_test(z[:7], z)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.integers(8, 60), st.integers(8, 60))
@settings(max_examples=100, deadline=None)
def test_f_test_symmetry(seed, scale, na, nb):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=na), rng.normal(size=nb) * scale
    assert f_test(a, b) == -f_test(b, a)


def test_cell_format_round_trip():
    assert format_cell(0.89723, 0) == "0.8972 (0)"
    assert parse_cell("0.8972 (0)") == (0.8972, 0)
    assert parse_cell(format_cell(-0.5, -1)) == (-0.5, -1)
    with pytest.raises(DataError):
        parse_cell("0.8972(0)")


def _entries(pred, subj, source="s", db="d"):
    return [PredictionEntry(f"{source}_{i}", p, s, source, db) for i, (p, s) in enumerate(zip(pred, subj))]


def test_single_source_average():
    perfect = _entries([1, 2, 3, 4], [10, 20, 30, 40], "a")
    half = _entries([1, 2, 3, 4], [10, 30, 20, 40], "b")
    assert srocc([1, 2, 3, 4], [10, 30, 20, 40]) == 0.8
    assert abs(single_source_srocc(perfect + half) - 0.9) < 1e-12
    two = _entries([1, 2, 3], [10, 20, 30], "a") + _entries([1, 2, 3, 4, 5], [10, 40, 20, 50, 30], "b")
    assert abs(srocc([1, 2, 3, 4, 5], [10, 40, 20, 50, 30]) - 0.5) < 1e-12
    assert abs(single_source_srocc(two) - 0.75) < 1e-12
    with pytest.warns(UserWarning):
        single_source_srocc(perfect + _entries([1], [50], "lonely"))
    with pytest.raises(UndefinedStatisticError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        single_source_srocc(_entries([1, 2], [50, 50], "flat"))


def test_single_source_permutation_null():
    rng = np.random.default_rng(7)
    subj = np.linspace(10, 90, 8)
    values = []
    for _ in range(400):
        rows = []
        for s in range(5):
            rows += _entries(rng.permutation(8).astype(float), subj, f"src{s}")
        values.append(single_source_srocc(rows))
    assert abs(np.mean(values)) < 0.03


def test_subjective_range():
    with pytest.raises(DataError):
        PredictionEntry("x", 1.0, 101.0)


def test_evaluate_report(rng):
    subj = rng.uniform(0, 100, 40)
    rows = {"good": [], "noisy": []}
    for i, s in enumerate(subj):
        db, src = ("A" if i < 20 else "B"), f"src{i % 4}"
        rows["good"].append(PredictionEntry(f"q{i}", s / 10 + rng.normal(0, 0.1), s, src, db))
        rows["noisy"].append(PredictionEntry(f"q{i}", s / 10 + rng.normal(0, 3), s, src, db))
    report = evaluate(rows)
    assert report.databases == ["A", "B"]
    for db in report.databases:
        mat = report.f_tests[db]
        assert mat[0][0] == mat[1][1] == 0 and mat[0][1] == -mat[1][0] == 1
        s = report.per_database["good"][db]
        assert -1 <= s.srocc <= 1 and 0 <= s.outlier_ratio <= 1
    assert report.mean_srocc["good"] > report.mean_srocc["noisy"]
    table = report.table()
    assert "good" in table and format_cell(report.per_database["noisy"]["A"].srocc, -1) in table
    assert '"f_tests"' in report.to_json()


def test_csv_join(tmp_path):
    (tmp_path / "subj.csv").write_text("sequence_id,source_id,database_id,subjective_score\n"
                                       "a,s1,d,10\nb,s1,d,20\nc,s2,d,30\n")
    (tmp_path / "mine.csv").write_text("sequence_id,score\na,1.5\nb,2.5\nz,9\n")
    preds = read_prediction_columns(tmp_path / "mine.csv")
    assert list(preds) == ["mine"]
    joined, missing = join_predictions(preds, read_subjective(tmp_path / "subj.csv"))
    assert [e.sequence_id for e in joined["mine"]] == ["a", "b"]
    assert missing == ["c", "z"]
