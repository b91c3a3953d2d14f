"""Random-intercept linear mixed models, user binning and eligibility filtering.

The model is ``y = X b + u[g] + e`` with ``u ~ N(0, s_u^2)`` and ``e ~ N(0, s^2)``.
With ``theta = s_u^2 / s^2`` each group's covariance is ``s^2 (I + theta 11')``,
whose inverse and determinant have closed forms, so the likelihood only needs
per-group sums. ``s^2`` and ``b`` are profiled out and ``theta`` is found by a
log-scale grid scan followed by golden-section refinement.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .ols import RankDeficientError, _collinear_columns

log = logging.getLogger(__name__)

THETA_MIN = 1e-8
THETA_MAX = 1e8
GRID_POINTS = 65
GOLDEN = (math.sqrt(5) - 1) / 2


class NotIdentifiableError(ValueError):
    pass


@dataclass
class LmeFit:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    sigma2_u: float
    sigma2: float
    theta: float
    group_key: str
    llf: float
    n_obs: int
    n_groups: int
    method: str = "reml"
    levels: np.ndarray = field(default=None, repr=False)
    random_effects: np.ndarray = field(default=None, repr=False)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.index(name)])

    def ci(self, name: str, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        b, s = self[name], self.stderr(name)
        return b - z * s, b + z * s

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"variable": self.names, "coef": self.coef, "std_err": self.se, "p": self.pvalues})


class _Problem:
    """Sufficient statistics of one random-intercept problem."""

    def __init__(self, X: np.ndarray, y: np.ndarray, codes: np.ndarray, n_groups: int, method: str):
        self.n, self.p = X.shape
        self.method = method
        self.ng = np.bincount(codes, minlength=n_groups).astype(float)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.Sx = np.column_stack([np.bincount(codes, weights=X[:, j], minlength=n_groups)
                                   for j in range(self.p)])
        self.Sy = np.bincount(codes, weights=y, minlength=n_groups)

    def solve(self, theta: float):
        a = theta / (1.0 + self.ng * theta)
        aSx = self.Sx * a[:, None]
        A = self.XtX - self.Sx.T @ aSx
        c = self.Xty - aSx.T @ self.Sy
        yHy = self.yty - float(a @ (self.Sy * self.Sy))
        L = np.linalg.cholesky(A)
        beta = np.linalg.solve(L.T, np.linalg.solve(L, c))
        q = yHy - float(beta @ c)
        logdet_H = float(np.log1p(self.ng * theta).sum())
        logdet_A = 2.0 * float(np.log(np.diag(L)).sum())
        return beta, q, logdet_H, logdet_A, A

    def neg2ll(self, theta: float) -> float:
        """-2 x profiled log-likelihood (constants included)."""
        _, q, logdet_H, logdet_A, _ = self.solve(theta)
        dof = self.n - self.p if self.method == "reml" else self.n
        q = max(q, 1e-300)
        val = dof * (math.log(2 * math.pi) + math.log(q / dof) + 1.0) + logdet_H
        if self.method == "reml":
            val += logdet_A
        return val


    def grad(self, theta: float) -> float:
        """Derivative of :meth:`neg2ll` in ``theta``; residual group sums make it closed form."""
        beta, q, _, _, A = self.solve(theta)
        da = 1.0 / (1.0 + self.ng * theta) ** 2
        r = self.Sy - self.Sx @ beta
        dq = -float(da @ (r * r))
        dof = self.n - self.p if self.method == "reml" else self.n
        val = dof * dq / max(q, 1e-300) + float((self.ng / (1.0 + self.ng * theta)).sum())
        if self.method == "reml":
            quad = np.einsum("ij,ij->i", self.Sx, np.linalg.solve(A, self.Sx.T).T)
            val -= float(da @ quad)
        return val


def _golden(f, lo: float, hi: float, tol: float) -> float:
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = f(d)
    return (lo + hi) / 2


def _search_theta(obj, tol: float = 1e-10, grad=None) -> float:
    grid = np.linspace(math.log(THETA_MIN), math.log(THETA_MAX), GRID_POINTS)
    values = np.array([obj(math.exp(g)) for g in grid])
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best = _golden(lambda g: obj(math.exp(g)), lo, hi, tol)
    if obj(math.exp(best)) > values[i]:
        best = grid[i]
    theta = math.exp(best)
    if grad is not None:
        # the objective is flat near its minimum; polish on the stationarity condition
        a, b = math.exp(lo), math.exp(hi)
        ga, gb = grad(a), grad(b)
        if ga < 0 < gb:
            root = optimize.brentq(grad, a, b, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=200)
            # objective values this close to the optimum differ only by rounding
            if obj(root) <= obj(theta) + 1e-9 * max(1.0, abs(obj(theta))):
                theta = root
    # boundary: the random-intercept variance may be exactly zero
    if obj(0.0) <= obj(theta):
        return 0.0
    return theta


def _standardize(X: np.ndarray, y: np.ndarray, has_intercept: bool):
    # only used to condition the theta search; theta is invariant to it
    Xs = X.copy()
    for j in range(X.shape[1]):
        col = X[:, j]
        if has_intercept and j == 0:
            continue
        scale = col.std() or 1.0
        Xs[:, j] = (col - (col.mean() if has_intercept else 0.0)) / scale
    sy = y.std() or 1.0
    ys = (y - (y.mean() if has_intercept else 0.0)) / sy
    return Xs, ys


def fit_random_intercept(
    frame: pd.DataFrame,
    response: str,
    fixed: Sequence[str],
    group: str = "user_id",
    method: str = "reml",
    intercept: bool = True,
) -> LmeFit:
    """Fit ``response ~ fixed + (1 | group)`` by REML (default) or ML."""
    if method not in ("reml", "ml"):
        raise ValueError(f"method must be 'reml' or 'ml', got {method!r}")
    fixed = list(fixed)
    y = frame[response].to_numpy(float)
    X = frame[fixed].to_numpy(float) if fixed else np.empty((len(y), 0))
    names = fixed
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["intercept", *fixed]
    codes, levels = pd.factorize(frame[group], sort=True)
    n_groups = len(levels)
    n, p = X.shape
    if n_groups < 2:
        raise NotIdentifiableError(f"need at least two levels of {group!r}, got {n_groups}")
    if np.bincount(codes).max() < 2:
        raise NotIdentifiableError(f"every level of {group!r} has a single observation")
    if n <= p:
        raise NotIdentifiableError(f"{n} observations for {p} fixed effects")
    bad = _collinear_columns(X, names)
    if bad is not None:
        raise RankDeficientError(bad)

    Xs, ys = _standardize(X, y, intercept)
    search = _Problem(Xs, ys, codes, n_groups, method)
    theta = _search_theta(search.neg2ll, grad=search.grad)

    prob = _Problem(X, y, codes, n_groups, method)
    ng = prob.ng
    # GLS in original units through the H^{-1/2} transform for accurate residuals
    gamma = 1.0 - 1.0 / np.sqrt(1.0 + ng * theta)
    Xt = X - (gamma / ng)[codes, None] * prob.Sx[codes]
    yt = y - (gamma / ng)[codes] * prob.Sy[codes]
    Q, R = np.linalg.qr(Xt)
    beta = np.linalg.solve(R, Q.T @ yt)
    rt = yt - Xt @ beta
    q = float(rt @ rt)
    dof = n - p if method == "reml" else n
    sigma2 = q / dof
    Rinv = np.linalg.solve(R, np.eye(p))
    cov = sigma2 * (Rinv @ Rinv.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    pvals = 2 * stats.norm.sf(np.abs(z))

    logdet_H = float(np.log1p(ng * theta).sum())
    if sigma2 > 0:
        llf = -0.5 * (dof * math.log(2 * math.pi * sigma2) + logdet_H + q / sigma2)
        if method == "reml":
            llf -= float(np.log(np.abs(np.diag(R))).sum())
    else:
        llf = math.inf

    resid = y - X @ beta
    group_resid = np.bincount(codes, weights=resid, minlength=n_groups)
    blup = theta / (1.0 + ng * theta) * group_resid
    return LmeFit(
        names=names, coef=beta, se=se, pvalues=pvals,
        sigma2_u=theta * sigma2, sigma2=sigma2, theta=theta, group_key=group,
        llf=llf, n_obs=n, n_groups=n_groups, method=method,
        levels=np.asarray(levels), random_effects=blup,
    )


def restricted_loglik(frame, response, fixed, group, sigma2_u, sigma2, method="reml", intercept=True) -> float:
    """Profile-free log-likelihood at given variance components (b at its GLS value)."""
    y = frame[response].to_numpy(float)
    X = frame[list(fixed)].to_numpy(float) if fixed else np.empty((len(y), 0))
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
    codes, levels = pd.factorize(frame[group], sort=True)
    prob = _Problem(X, y, codes, len(levels), method)
    theta = sigma2_u / sigma2
    _, q, logdet_H, logdet_A, _ = prob.solve(theta)
    n, p = X.shape
    dof = n - p if method == "reml" else n
    val = dof * math.log(2 * math.pi) + n * math.log(sigma2) + logdet_H + q / sigma2
    if method == "reml":
        val += logdet_A - p * math.log(sigma2)
    return -0.5 * val


def predict(fit: LmeFit, frame: pd.DataFrame, include_random: bool = True) -> np.ndarray:
    fixed = [c for c in fit.names if c != "intercept"]
    X = frame[fixed].to_numpy(float)
    if "intercept" in fit.names:
        X = np.column_stack([np.ones(len(frame)), X])
    out = X @ fit.coef
    if include_random and fit.random_effects is not None:
        lookup = dict(zip(fit.levels, fit.random_effects))
        out = out + frame[fit.group_key].map(lookup).fillna(0.0).to_numpy(float)
    return out


# -- binning ---------------------------------------------------------------

BIN_ATTRIBUTES = {"n_projects": "value", "work": "quantile", "followers": "quantile", "user_id": "level"}


@dataclass(frozen=True)
class BinSpec:
    attribute: str
    bins: int = 5

    def __post_init__(self):
        if self.attribute not in BIN_ATTRIBUTES:
            raise ValueError(f"unknown binning attribute {self.attribute!r}; "
                             f"choose from {sorted(BIN_ATTRIBUTES)}")
        if BIN_ATTRIBUTES[self.attribute] == "quantile" and self.bins < 2:
            raise ValueError("quantile binning needs at least two bins")

    @property
    def mode(self) -> str:
        return BIN_ATTRIBUTES[self.attribute]


def bin_labels(frame: pd.DataFrame, spec: BinSpec) -> pd.Series:
    """Bin id per row: value bins, equal-count quantile bins, or one bin per user."""
    if spec.attribute not in frame:
        raise KeyError(f"binning attribute {spec.attribute!r} missing from rows")
    values = frame[spec.attribute]
    if spec.mode in ("value", "level"):
        return values.copy()
    if values.nunique() < spec.bins:
        log.warning("%s has %d distinct values (< %d bins); using per-value bins",
                    spec.attribute, values.nunique(), spec.bins)
        return values.copy()
    # rank ties in row order so that bin sizes differ by at most one
    ranks = values.rank(method="first").to_numpy() - 1
    labels = np.floor(ranks * spec.bins / len(values)).astype(int)
    return pd.Series(labels, index=frame.index)


def bin_users(frame: pd.DataFrame, spec: BinSpec) -> dict:
    labels = bin_labels(frame, spec)
    return {key: part for key, part in frame.groupby(labels, sort=True)}


def filter_eligible(frame: pd.DataFrame, group: str = "user_id", size_col: str = "group_size") -> pd.DataFrame:
    """Keep levels with at least two rows spanning at least two distinct group sizes."""
    distinct = frame.groupby(group)[size_col].transform("nunique")
    return frame[distinct >= 2]


@dataclass
class BinnedFit:
    spec: BinSpec
    fits: dict
    skipped: dict
    bin_sizes: dict
    pooled_coef: float
    pooled_se: float
    term: str

    def summary(self) -> dict:
        sizes = list(self.bin_sizes.values())
        return {
            "grouping": self.spec.attribute,
            "coef": self.pooled_coef,
            "std_err": self.pooled_se,
            "bins": len(sizes),
            "fitted_bins": len(self.fits),
            "max_bin_size": int(max(sizes)) if sizes else 0,
            "mean_bin_size": float(np.mean(sizes)) if sizes else 0.0,
        }


def fit_binned(
    frame: pd.DataFrame,
    spec: BinSpec,
    response: str = "work",
    fixed: Sequence[str] = ("group_size",),
    group: str = "user_id",
    eligible_only: bool = True,
) -> BinnedFit:
    """One random-intercept fit per bin, pooled by observation-weighted mean of the first fixed effect.

    ``user_id`` binning is the limiting case where every user is a bin; it is
    fitted as a single model with a per-user random intercept.
    """
    term = list(fixed)[0]
    data = filter_eligible(frame, group) if eligible_only else frame
    if data.empty:
        raise NotIdentifiableError("no eligible rows")
    if spec.mode == "level":
        fit = fit_random_intercept(data, response, fixed, group)
        sizes = data.groupby(spec.attribute).size()
        return BinnedFit(spec, {"all": fit}, {}, sizes.to_dict(), fit[term], fit.stderr(term), term)

    fits, skipped = {}, {}
    bins = bin_users(data, spec)
    sizes = {k: len(v) for k, v in bins.items()}
    for key, part in bins.items():
        part = filter_eligible(part, group) if eligible_only else part
        try:
            fits[key] = fit_random_intercept(part, response, fixed, group)
        except (NotIdentifiableError, RankDeficientError, np.linalg.LinAlgError) as exc:
            skipped[key] = str(exc)
    if not fits:
        raise NotIdentifiableError(f"no identifiable bin for {spec.attribute!r}")
    weights = np.array([f.n_obs for f in fits.values()], dtype=float)
    weights /= weights.sum()
    coefs = np.array([f[term] for f in fits.values()])
    ses = np.array([f.stderr(term) for f in fits.values()])
    pooled = float(weights @ coefs)
    pooled_se = float(np.sqrt(weights ** 2 @ ses ** 2))
    return BinnedFit(spec, fits, skipped, sizes, pooled, pooled_se, term)


def fit_grouped_by(
    frame: pd.DataFrame,
    spec: BinSpec,
    response: str = "work",
    fixed: Sequence[str] = ("group_size",),
) -> dict:
    """Single model whose random intercept is the bin itself (one row of the binning table)."""
    data = filter_eligible(frame, "user_id")
    labels = bin_labels(data, spec)
    data = data.assign(_bin=labels.to_numpy())
    fit = fit_random_intercept(data, response, fixed, "_bin")
    sizes = data.groupby("_bin").size()
    term = list(fixed)[0]
    return {
        "grouping": spec.attribute,
        "coef": fit[term],
        "std_err": fit.stderr(term),
        "p": float(fit.pvalues[fit.index(term)]),
        "bins": int(sizes.size),
        "max_bin_size": int(sizes.max()),
        "mean_bin_size": float(sizes.mean()),
        "sigma2_u": fit.sigma2_u,
        "sigma2": fit.sigma2,
        "n_obs": fit.n_obs,
    }
