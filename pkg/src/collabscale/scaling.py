"""Log-log power-law fits: mean work vs. group size, the total-work curve, edit-size scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

Z95 = 1.959963984540054


class LogDomainError(ValueError):
    pass


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    ln_c: float
    r2: float
    point_count: int
    se_alpha: float = math.nan

    @property
    def c(self) -> float:
        return math.exp(self.ln_c)

    def ci_alpha(self, z: float = Z95) -> tuple[float, float]:
        return self.alpha - z * self.se_alpha, self.alpha + z * self.se_alpha

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "ln_c": self.ln_c, "r2": self.r2,
                "se_alpha": self.se_alpha, "point_count": self.point_count}


@dataclass(frozen=True)
class TotalWorkCurve:
    alpha: float
    c: float
    C: float = 0.0


def _aggregate_by_size(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys = np.rint(x)
    if np.any(keys != x):
        raise ValueError("per_size_mean aggregation needs integer abscissae")
    sizes, inverse = np.unique(keys, return_inverse=True)
    means = np.bincount(inverse, weights=y) / np.bincount(inverse)
    return sizes, means


def fit_power_law(x, y, aggregate: str = "per_size_mean") -> PowerLawFit:
    """Least-squares line through ``(ln x, ln y)``; ``y = c * x**alpha``.

    With ``aggregate="per_size_mean"`` the y values are first averaged within
    each integer x, so every size contributes one point.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if np.any(x <= 0) or np.any(y <= 0):
        raise LogDomainError("log-domain violation: x and y must be positive")
    if aggregate == "per_size_mean":
        x, y = _aggregate_by_size(x, y)
    elif aggregate != "raw":
        raise ValueError(f"unknown aggregate mode {aggregate!r}")
    if np.unique(x).size < 2:
        raise ValueError("power-law fit needs at least two distinct x values")

    lx, ly = np.log(x), np.log(y)
    mx, my = lx.mean(), ly.mean()
    dx, dy = lx - mx, ly - my
    sxx = dx @ dx
    alpha = (dx @ dy) / sxx
    ln_c = my - alpha * mx
    resid = dy - alpha * dx
    ss_res = resid @ resid
    ss_tot = dy @ dy
    # a noiseless constant series is a perfect (flat) fit
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, ly @ ly) else float(np.clip(1 - ss_res / ss_tot, 0.0, 1.0))
    dof = lx.size - 2
    se = math.sqrt(ss_res / dof / sxx) if dof > 0 else math.nan
    return PowerLawFit(alpha=float(alpha), ln_c=float(ln_c), r2=r2, point_count=int(lx.size), se_alpha=se)


def predict_mean_work(fit: PowerLawFit, N) -> float | np.ndarray:
    N = np.asarray(N, dtype=float)
    if np.any(N < 1):
        raise ValueError("group size must be >= 1")
    out = np.exp(fit.ln_c) * N ** fit.alpha
    return float(out) if out.ndim == 0 else out


def total_work(curve: TotalWorkCurve, N) -> float | np.ndarray:
    """Antiderivative ``c/(alpha+1) * N**(alpha+1) + C`` of the mean-work power law."""
    if curve.alpha == -1:
        raise ValueError("alpha = -1 (logarithmic total work) is not supported")
    N = np.asarray(N, dtype=float)
    if np.any(N < 1):
        raise ValueError("group size must be >= 1")
    out = curve.c / (curve.alpha + 1) * N ** (curve.alpha + 1) + curve.C
    return float(out) if out.ndim == 0 else out


def fit_edit_size_scaling(rows: pd.DataFrame, count_col: str = "work", bytes_col: str = "edit_bytes") -> PowerLawFit:
    """Raw log-log fit of total edit bytes against edit count, one point per row.

    Rows with zero bytes carry no size information and are dropped.
    """
    sub = rows[[count_col, bytes_col]].dropna()
    sub = sub[sub[bytes_col] > 0]
    return fit_power_law(sub[count_col].to_numpy(float), sub[bytes_col].to_numpy(float), aggregate="raw")


def mean_work_curve(rows: pd.DataFrame, z: float = Z95) -> pd.DataFrame:
    """Per-size mean work per member with a normal-approximation CI (the data behind the fit plot)."""
    grouped = rows.groupby("group_size")["work"]
    stats = grouped.agg(["mean", "std", "count"]).reset_index()
    half = z * stats["std"].fillna(0.0) / np.sqrt(stats["count"])
    return pd.DataFrame({
        "N": stats["group_size"].astype(int),
        "mean": stats["mean"],
        "ci_low": stats["mean"] - half,
        "ci_high": stats["mean"] + half,
        "count": stats["count"].astype(int),
    })


def fit_mean_work(rows: pd.DataFrame) -> PowerLawFit:
    """Fit mean work per member against group size on uncapped membership rows."""
    if "capped" in rows:
        rows = rows[~rows["capped"].astype(bool)]
    return fit_power_law(rows["group_size"].to_numpy(float), rows["work"].to_numpy(float))
