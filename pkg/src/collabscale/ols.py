"""Ordinary least squares with min-max scaling, correlation pruning and percentile outlier cuts."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats


class RankDeficientError(ValueError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass
class MinMaxScaler:
    columns: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, frame: pd.DataFrame) -> pd.DataFrame:
        out = frame.copy()
        out[self.columns] = (frame[self.columns].to_numpy(float) - self.mins) / (self.maxs - self.mins)
        return out

    def inverse_transform(self, frame: pd.DataFrame) -> pd.DataFrame:
        out = frame.copy()
        out[self.columns] = frame[self.columns].to_numpy(float) * (self.maxs - self.mins) + self.mins
        return out


def min_max_scale(frame: pd.DataFrame, columns: Sequence[str] | None = None) -> tuple[pd.DataFrame, MinMaxScaler]:
    """Map each column onto [0, 1]. Constant columns cannot be scaled and raise."""
    columns = list(frame.columns if columns is None else columns)
    values = frame[columns].to_numpy(float)
    mins = values.min(axis=0)
    maxs = values.max(axis=0)
    constant = [c for c, lo, hi in zip(columns, mins, maxs) if not hi > lo]
    if constant:
        raise ValueError(f"cannot min-max scale constant column(s): {', '.join(constant)}")
    scaler = MinMaxScaler(columns, mins, maxs)
    return scaler.transform(frame), scaler


def prune_correlated(
    frame: pd.DataFrame, threshold: float = 0.8, columns: Sequence[str] | None = None
) -> tuple[pd.DataFrame, dict[str, tuple[str, float]]]:
    """Drop columns too correlated with an earlier kept one.

    Columns are scanned in the given order (their priority); the report maps
    each removed column to the kept column it collided with and the correlation.
    """
    columns = list(frame.columns if columns is None else columns)
    if len(columns) < 2:
        return frame, {}
    corr = np.corrcoef(frame[columns].to_numpy(float), rowvar=False)
    kept: list[int] = []
    removed: dict[str, tuple[str, float]] = {}
    for j, name in enumerate(columns):
        clash = next((k for k in kept if abs(corr[j, k]) > threshold), None)
        if clash is None:
            kept.append(j)
        else:
            removed[name] = (columns[clash], float(corr[j, clash]))
    return frame.drop(columns=list(removed)), removed


def filter_outliers_p95(frame: pd.DataFrame, column: str, percentile: float = 95.0) -> pd.DataFrame:
    """Remove rows whose ``column`` is strictly above its (linearly interpolated) percentile."""
    values = frame[column].to_numpy(float)
    if values.size == 0:
        raise ValueError("cannot filter outliers of an empty table")
    cut = np.percentile(values, percentile)
    return frame[values <= cut]


@dataclass
class OlsFit:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    tvalues: np.ndarray
    pvalues: np.ndarray
    r2: float
    n_obs: int
    sigma2: float
    resid: np.ndarray = field(repr=False)

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"variable": self.names, "coef": self.coef, "std_err": self.se,
                             "t": self.tvalues, "p": self.pvalues})


def _collinear_columns(X: np.ndarray, names: Sequence[str]) -> list[str] | None:
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    if rank == X.shape[1]:
        return None
    return [names[i] for i in sorted(piv[rank:])]


def fit_ols(frame: pd.DataFrame, response: str, columns: Sequence[str] | None = None, intercept: bool = True) -> OlsFit:
    """Least squares via QR. Standard errors from ``s^2 (X'X)^-1``; p-values from Student t."""
    if columns is None:
        columns = [c for c in frame.columns if c != response]
    columns = list(columns)
    y = frame[response].to_numpy(float)
    X = frame[columns].to_numpy(float)
    names = columns
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["intercept", *columns]
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more observations ({n}) than coefficients ({k})")
    bad = _collinear_columns(X, names)
    if bad is not None:
        raise RankDeficientError(bad)

    Q, R = np.linalg.qr(X)
    beta = scipy.linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    dof = n - k
    ss_res = float(resid @ resid)
    sigma2 = ss_res / dof
    Rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    cov = sigma2 * (Rinv @ Rinv.T)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        tvals = beta / se
    pvals = 2 * stats.t.sf(np.abs(tvals), dof)
    centered = y - y.mean() if intercept else y
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return OlsFit(names, beta, se, tvals, pvals, r2, n, sigma2, resid)


@dataclass
class RegressionReport:
    fit: OlsFit
    n_input: int
    n_outliers: int
    dropped_constant: list[str]
    pruned: dict[str, tuple[str, float]]


def regress(
    frame: pd.DataFrame,
    response: str,
    features: Sequence[str],
    prune_threshold: float = 0.8,
    outlier_percentile: float | None = 95.0,
    scale: bool = True,
    scale_response: bool = True,
) -> RegressionReport:
    """Outlier cut on the response, min-max scaling, correlation pruning, then OLS."""
    data = frame[[response, *features]].astype(float)
    n_input = len(data)
    if outlier_percentile is not None:
        data = filter_outliers_p95(data, response, outlier_percentile)
    n_outliers = n_input - len(data)
    constant = [c for c in features if data[c].nunique() <= 1]
    features = [c for c in features if c not in constant]
    if scale:
        cols = [*features, response] if scale_response else list(features)
        data, _ = min_max_scale(data, cols)
    pruned: dict[str, tuple[str, float]] = {}
    if len(features) >= 2:
        kept, pruned = prune_correlated(data[features], prune_threshold)
        features = list(kept.columns)
    fit = fit_ols(data, response, features)
    return RegressionReport(fit, n_input, n_outliers, constant, pruned)


def is_significant(fit: OlsFit, name: str, level: float = 0.005) -> bool:
    p = fit.pvalues[fit.names.index(name)]
    return bool(p < level) and not math.isnan(p)
