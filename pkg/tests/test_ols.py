import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabscale.ols import (
    RankDeficientError, filter_outliers_p95, fit_ols, is_significant, min_max_scale,
    prune_correlated, regress,
)


def normal_equations(X, y):
    A = np.column_stack([np.ones(len(y)), X])
    return np.linalg.solve(A.T @ A, A.T @ y)


def test_scale_simple():
    out, scaler = min_max_scale(pd.DataFrame({"a": [0.0, 5.0, 10.0]}))
    assert list(out["a"]) == [0, 0.5, 1]
    unit = pd.DataFrame({"a": [0.0, 0.3, 1.0]})
    pd.testing.assert_frame_equal(min_max_scale(unit)[0], unit)


def test_scale_round_trip():
    rng = np.random.default_rng(0)
    frame = pd.DataFrame(rng.normal(size=(50, 3)) * 100, columns=list("abc"))
    scaled, scaler = min_max_scale(frame)
    assert scaled.min().min() == 0 and scaled.max().max() == 1
    np.testing.assert_allclose(scaler.inverse_transform(scaled).to_numpy(), frame.to_numpy(), atol=1e-12)


def test_scale_constant_raises():
    with pytest.raises(ValueError, match="constant"):
        min_max_scale(pd.DataFrame({"a": [1.0, 1.0]}))


def test_prune_duplicate():
    x = np.arange(10.0)
    kept, removed = prune_correlated(pd.DataFrame({"x1": x, "x2": 2 * x}))
    assert list(kept.columns) == ["x1"]
    assert removed["x2"][0] == "x1" and removed["x2"][1] == pytest.approx(1.0)


def test_prune_three_copies():
    x = np.random.default_rng(1).normal(size=30)
    kept, removed = prune_correlated(pd.DataFrame({"a": x, "b": -x, "c": 3 * x + 1}))
    assert list(kept.columns) == ["a"] and set(removed) == {"b", "c"}


def test_prune_independent():
    frame = pd.DataFrame(np.random.default_rng(2).normal(size=(10_000, 6)))
    kept, removed = prune_correlated(frame)
    assert removed == {} and kept.shape[1] == 6


def test_outliers_1_to_100():
    frame = pd.DataFrame({"v": np.arange(1, 101)})
    assert np.percentile(frame["v"], 95) == pytest.approx(95.05)
    assert list(filter_outliers_p95(frame, "v")["v"]) == list(range(1, 96))
    same = pd.DataFrame({"v": [3.0] * 10})
    assert len(filter_outliers_p95(same, "v")) == 10


@given(st.lists(st.integers(0, 50), min_size=1, max_size=200))
def test_outliers_sort_oracle(values):
    frame = pd.DataFrame({"v": values})
    s = sorted(values)
    pos = 0.95 * (len(s) - 1)
    lo = int(np.floor(pos))
    cut = s[lo] + (s[min(lo + 1, len(s) - 1)] - s[lo]) * (pos - lo)
    kept = filter_outliers_p95(frame, "v")
    assert sorted(kept["v"]) == [v for v in s if v <= cut + 1e-12]


def test_exact_line():
    x = np.arange(10.0)
    fit = fit_ols(pd.DataFrame({"x": x, "y": 3 + 2 * x}), "y")
    assert fit["intercept"] == pytest.approx(3) and fit["x"] == pytest.approx(2)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_normal_equations_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 3))
    y = X @ [1.0, -2.0, 0.5] + rng.normal(size=50)
    frame = pd.DataFrame(X, columns=list("abc")).assign(y=y)
    fit = fit_ols(frame, "y")
    np.testing.assert_allclose(fit.coef, normal_equations(X, y), atol=1e-8)
    # residuals orthogonal to the design
    A = np.column_stack([np.ones(50), X])
    assert np.max(np.abs(A.T @ fit.resid)) / np.linalg.norm(fit.resid) < 1e-8


def test_against_statsmodels_style_formulas():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(80, 2))
    y = 1 + X @ [0.3, 0.0] + rng.normal(size=80)
    fit = fit_ols(pd.DataFrame(X, columns=["a", "b"]).assign(y=y), "y")
    A = np.column_stack([np.ones(80), X])
    beta = np.linalg.lstsq(A, y, rcond=None)[0]
    resid = y - A @ beta
    s2 = resid @ resid / (80 - 3)
    se = np.sqrt(np.diag(s2 * np.linalg.inv(A.T @ A)))
    np.testing.assert_allclose(fit.se, se, rtol=1e-10)
    from scipy import stats
    np.testing.assert_allclose(fit.pvalues, 2 * stats.t.sf(np.abs(beta / se), 77), rtol=1e-8)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10**6), st.randoms())
def test_row_permutation_invariant(seed, rnd):
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame(rng.normal(size=(30, 2)), columns=["a", "b"]).assign(y=rng.normal(size=30))
    idx = list(range(30))
    rnd.shuffle(idx)
    a = fit_ols(frame, "y").coef
    b = fit_ols(frame.iloc[idx], "y").coef
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_noise_column_keeps_coefficients():
    x = np.arange(20.0)
    frame = pd.DataFrame({"x": x, "y": 1 + 2 * x, "z": np.sin(x)})
    base = fit_ols(frame, "y", ["x"])
    more = fit_ols(frame, "y", ["x", "z"])
    assert abs(more["x"] - base["x"]) < 1e-6 and abs(more["z"]) < 1e-6


def test_rank_deficient():
    x = np.arange(10.0)
    with pytest.raises(RankDeficientError) as err:
        fit_ols(pd.DataFrame({"a": x, "b": 2 * x, "y": x ** 2}), "y")
    assert err.value.columns


def test_regress_planted_positive_size_effect():
    rng = np.random.default_rng(5)
    n = 2000
    frame = pd.DataFrame({
        "group_size": rng.integers(1, 21, n).astype(float),
        "watchers": rng.poisson(5, n).astype(float),
        "forks": rng.poisson(2, n).astype(float),
    })
    frame["mean_work"] = 5 + 0.9 * frame["group_size"] + 0.1 * frame["watchers"] + rng.normal(0, 2, n)
    frame["dup"] = frame["group_size"] * 3
    report = regress(frame, "mean_work", ["group_size", "dup", "watchers", "forks"])
    assert "dup" in report.pruned and report.pruned["dup"][0] == "group_size"
    assert report.fit["group_size"] > 0 and is_significant(report.fit, "group_size")
    assert report.n_outliers > 0
