import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from collabscale.scaling import (
    LogDomainError, PowerLawFit, TotalWorkCurve, fit_edit_size_scaling, fit_mean_work,
    fit_power_law, mean_work_curve, predict_mean_work, total_work,
)

C = math.exp(2.45)
FIT = PowerLawFit(alpha=0.28, ln_c=2.45, r2=1.0, point_count=20)


def test_noiseless_recovery():
    x = np.arange(1, 21)
    fit = fit_power_law(x, C * x ** 0.28)
    assert abs(fit.alpha - 0.28) < 1e-9 and abs(fit.ln_c - 2.45) < 1e-9
    assert fit.r2 == pytest.approx(1.0)


def test_constant_series():
    fit = fit_power_law(np.arange(1, 11), np.full(10, 4.0))
    assert abs(fit.alpha) < 1e-12 and fit.r2 == 1.0


def test_per_size_mean_aggregation():
    x = np.array([1, 1, 2, 2, 4])
    y = np.array([1.0, 3.0, 3.0, 5.0, 8.0])
    fit = fit_power_law(x, y)
    ref = stats.linregress(np.log([1, 2, 4]), np.log([2, 4, 8]))
    assert fit.alpha == pytest.approx(ref.slope) and fit.point_count == 3


def test_raw_matches_linregress():
    rng = np.random.default_rng(2)
    x = rng.integers(1, 30, 200).astype(float)
    y = 3 * x ** 0.5 * rng.lognormal(0, 0.3, 200)
    fit = fit_power_law(x, y, aggregate="raw")
    ref = stats.linregress(np.log(x), np.log(y))
    assert fit.alpha == pytest.approx(ref.slope, rel=1e-12)
    assert fit.ln_c == pytest.approx(ref.intercept, rel=1e-12)
    assert fit.r2 == pytest.approx(ref.rvalue ** 2, rel=1e-12)
    assert fit.se_alpha == pytest.approx(ref.stderr, rel=1e-10)


@pytest.mark.parametrize("x,y", [([0, 1], [1, 2]), ([1, 2], [1, -1])])
def test_log_domain(x, y):
    with pytest.raises(LogDomainError, match="log-domain"):
        fit_power_law(x, y)


def test_needs_two_sizes():
    with pytest.raises(ValueError):
        fit_power_law([3, 3, 3], [1, 2, 3])


def test_lognormal_noise_monte_carlo():
    errs = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.integers(1, 21, 10_000).astype(float)
        y = C * x ** 0.28 * rng.lognormal(0, 0.1, x.size)
        errs.append(fit_power_law(x, y, aggregate="raw").alpha - 0.28)
    assert np.max(np.abs(errs)) < 0.02


@settings(deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.integers(0, 1000))
def test_rescaling(ky, kx, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 50, 40)
    y = rng.uniform(1, 50, 40)
    base = fit_power_law(x, y, aggregate="raw")
    scaled_y = fit_power_law(x, ky * y, aggregate="raw")
    assert scaled_y.alpha == pytest.approx(base.alpha, abs=1e-10)
    assert scaled_y.ln_c - base.ln_c == pytest.approx(math.log(ky), abs=1e-10)
    assert fit_power_law(kx * x, y, aggregate="raw").alpha == pytest.approx(base.alpha, abs=1e-10)


def test_predict():
    assert predict_mean_work(FIT, 10) == pytest.approx(22.08, abs=0.01)
    assert abs(predict_mean_work(FIT, 10) - 22) / 22 < 0.05
    assert predict_mean_work(FIT, 1) == pytest.approx(C)
    flat = PowerLawFit(0.0, 1.0, 1.0, 2)
    np.testing.assert_allclose(predict_mean_work(flat, [1, 5, 50]), math.e)


def test_total_work():
    curve = TotalWorkCurve(0.28, C)
    assert total_work(curve, 10) / total_work(curve, 2) == pytest.approx(5 ** 1.28, abs=1e-12)
    assert abs(5 ** 1.28 - 7.85) < 0.01
    quad, _ = integrate.quad(lambda n: C * n ** 0.28, 0, 10)
    assert total_work(curve, 10) == pytest.approx(quad, abs=1e-6)
    assert abs(total_work(curve, 10) - 172.5) < 0.1
    linear = TotalWorkCurve(0.0, 3.0)
    assert total_work(linear, 7) == pytest.approx(21.0)


def test_total_work_errors():
    with pytest.raises(ValueError):
        total_work(TotalWorkCurve(-1.0, 1.0), 3)
    with pytest.raises(ValueError):
        total_work(TotalWorkCurve(0.5, 1.0), 0.5)


@given(st.floats(-0.9, 3), st.floats(0.01, 100))
def test_total_work_increasing(alpha, c):
    w = total_work(TotalWorkCurve(alpha, c), np.arange(1, 40))
    assert np.all(np.diff(w) > 0)


def test_edit_scaling_exact():
    n = np.arange(1, 200)
    rows = pd.DataFrame({"work": n, "edit_bytes": n ** 1.2})
    assert fit_edit_size_scaling(rows).alpha == pytest.approx(1.2, abs=1e-12)
    rows = pd.DataFrame({"work": n, "edit_bytes": n})
    fit = fit_edit_size_scaling(rows)
    assert fit.alpha == pytest.approx(1.0) and fit.r2 == pytest.approx(1.0)


def test_edit_scaling_drops_zero_bytes():
    rows = pd.DataFrame({"work": [1, 2, 3, 4], "edit_bytes": [0, 2, 3, 4]})
    assert fit_edit_size_scaling(rows).point_count == 3


def test_mean_work_curve_and_fit():
    rows = pd.DataFrame({"group_size": [1, 1, 2, 2, 3, 9], "work": [2, 4, 5, 7, 9, 100],
                         "capped": [False] * 5 + [True]})
    curve = mean_work_curve(rows)
    assert list(curve["N"]) == [1, 2, 3, 9]
    assert list(curve["mean"]) == [3, 6, 9, 100]
    assert curve.loc[0, "ci_low"] < 3 < curve.loc[0, "ci_high"]
    fit = fit_mean_work(rows)
    assert fit.point_count == 3
