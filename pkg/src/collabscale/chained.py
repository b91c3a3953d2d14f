"""Mixed models over overlapping group-size ranges and the stitched work-vs-size curve."""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .lme import NotIdentifiableError, filter_eligible, fit_random_intercept
from .ols import RankDeficientError, filter_outliers_p95, prune_correlated

log = logging.getLogger(__name__)

# confounds that enter each range model next to group size
CONFOUNDS = {
    "github": ["effective_size", "watchers", "user_age", "aggregate_focus",
               "owned_repos", "followers", "n_projects"],
    "wikipedia": ["effective_size", "n_projects", "group_work", "max_group",
                  "project_age", "mean_group", "created_pages"],
}


@dataclass(frozen=True)
class RangeSpec:
    span: int = 6
    stride: int = 1
    lo: int = 1
    hi: int = 20
    # append a final range ending exactly at ``hi`` when the stride overshoots it
    cover_upper: bool = True

    def __post_init__(self):
        if self.span < 2:
            raise ValueError("range span must be at least 2")
        if not 1 <= self.stride < self.span:
            # consecutive ranges must overlap for the stitched curve to be defined
            raise ValueError(f"range stride must be in [1, span), got {self.stride}")
        if self.hi < self.lo:
            raise ValueError("empty group-size domain")
        if self.span > self.hi - self.lo + 1:
            raise ValueError(f"span {self.span} exceeds domain width {self.hi - self.lo + 1}")

    @classmethod
    def for_mode(cls, mode: str) -> "RangeSpec":
        if mode == "github":
            return cls(span=6, stride=1, lo=1, hi=20)
        if mode == "wikipedia":
            return cls(span=9, stride=3, lo=1, hi=70)
        raise ValueError(f"unknown mode {mode!r}")


def make_ranges(spec: RangeSpec) -> list[tuple[int, int]]:
    """Inclusive ``(lower, upper)`` bounds of ``span`` consecutive sizes, starts ``stride`` apart."""
    out = []
    m = spec.lo
    while m + spec.span - 1 <= spec.hi:
        out.append((m, m + spec.span - 1))
        m += spec.stride
    if spec.cover_upper and out[-1][1] < spec.hi:
        out.append((spec.hi - spec.span + 1, spec.hi))
    return out


@dataclass
class RangeFit:
    lower: int
    upper: int
    coef: float
    se: float
    ci_low: float
    ci_high: float
    p: float
    n_obs: int
    n_bins: int
    dropped: list[str] = field(default_factory=list)

    @property
    def avg_bin(self) -> float:
        return self.n_obs / self.n_bins if self.n_bins else float("nan")


@dataclass
class ChainedFit:
    mode: str
    entries: list[RangeFit]
    skipped: dict[tuple[int, int], str] = field(default_factory=dict)
    term: str = "group_size"

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "range": [f"{e.lower}-{e.upper}" for e in self.entries],
            "lower": [e.lower for e in self.entries],
            "upper": [e.upper for e in self.entries],
            "coef": [e.coef for e in self.entries],
            "std_err": [e.se for e in self.entries],
            "ci_low": [e.ci_low for e in self.entries],
            "ci_high": [e.ci_high for e in self.entries],
            "p": [e.p for e in self.entries],
            "observations": [e.n_obs for e in self.entries],
            "bins": [e.n_bins for e in self.entries],
            "avg_bin_size": [e.avg_bin for e in self.entries],
        })

    @classmethod
    def from_table(cls, table: pd.DataFrame, mode: str = "github") -> "ChainedFit":
        entries = [
            RangeFit(int(r.lower), int(r.upper), float(r.coef), float(r.std_err),
                     float(r.ci_low), float(r.ci_high), float(r.p), int(r.observations), int(r.bins))
            for r in table.itertuples(index=False)
        ]
        return cls(mode, entries)


def _fit_range(part: pd.DataFrame, response: str, term: str, confounds: list[str], group: str,
               prune_threshold: float | None = 0.8):
    covariates = [c for c in confounds if part[c].nunique() > 1]
    dropped = [c for c in confounds if c not in covariates]
    if prune_threshold is not None and covariates:
        # group size goes first so it is never the one removed
        _, removed = prune_correlated(part[[term, *covariates]], prune_threshold)
        covariates = [c for c in covariates if c not in removed]
        dropped += list(removed)
    while True:
        try:
            return fit_random_intercept(part, response, [term, *covariates], group), dropped
        except RankDeficientError as exc:
            # collinear confounds go, group size is never dropped
            bad = [c for c in exc.columns if c in covariates]
            if not bad:
                raise
            covariates.remove(bad[-1])
            dropped.append(bad[-1])


def fit_chained(
    rows: pd.DataFrame,
    spec: RangeSpec | None = None,
    mode: str = "github",
    confounds: Sequence[str] | None = None,
    response: str = "work",
    term: str = "group_size",
    group: str = "user_id",
    outlier_percentile: float | None = 95.0,
    prune_threshold: float | None = 0.8,
    z: float = 1.959963984540054,
) -> ChainedFit:
    """Fit a random-intercept model with the mode's confound set on every size range.

    Rows above the response percentile are removed once up front; each range is
    then restricted to users with two or more rows of distinct sizes inside it.
    Confounds correlated with group size (or an earlier confound) beyond
    ``prune_threshold`` inside a range are left out of that range's model.
    """
    spec = spec or RangeSpec.for_mode(mode)
    confounds = list(CONFOUNDS[mode] if confounds is None else confounds)
    data = rows
    if "capped" in data:
        data = data[~data["capped"].astype(bool)]
    if outlier_percentile is not None and len(data):
        data = filter_outliers_p95(data, response, outlier_percentile)

    entries, skipped = [], {}
    for lower, upper in make_ranges(spec):
        part = data[(data[term] >= lower) & (data[term] <= upper)]
        part = filter_eligible(part, group, term)
        if part.empty:
            skipped[(lower, upper)] = "no eligible users"
            continue
        try:
            fit, dropped = _fit_range(part, response, term, confounds, group, prune_threshold)
        except (NotIdentifiableError, RankDeficientError, np.linalg.LinAlgError) as exc:
            skipped[(lower, upper)] = str(exc)
            log.info("range %d-%d skipped: %s", lower, upper, exc)
            continue
        b, se = fit[term], fit.stderr(term)
        entries.append(RangeFit(
            lower, upper, b, se, b - z * se, b + z * se,
            float(fit.pvalues[fit.index(term)]), fit.n_obs, fit.n_groups, dropped,
        ))
    return ChainedFit(mode, entries, skipped, term)


@dataclass
class UnifiedCurve:
    k: np.ndarray
    w: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    wb1: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"k": self.k, "w": self.w, "ci_low": self.ci_low, "ci_high": self.ci_high})

    def at(self, k: int) -> float:
        return float(self.w[np.searchsorted(self.k, k)])


def _stitch(models: list[tuple[int, int, float]], wb1: float) -> dict[int, list[float]]:
    """Left-to-right fold: each line starts at the mean of earlier estimates at its lower bound."""
    preds: dict[int, list[float]] = defaultdict(list)
    for i, (lower, upper, slope) in enumerate(models):
        if i == 0:
            base = wb1
        else:
            if not preds.get(lower):
                raise ValueError(f"gap in coverage: no estimate at size {lower} for range {lower}-{upper}")
            base = float(np.mean(preds[lower]))
        for k in range(lower, upper + 1):
            preds[k].append(base + slope * (k - lower))
    return preds


def unify(chained: ChainedFit | Sequence[RangeFit], wb1: float = 1.0) -> UnifiedCurve:
    """Stitch the per-range slopes into one curve starting from ``wb1`` at the smallest size.

    Ranges with identical bounds count as one model (their slopes are averaged).
    The band is stitched the same way from the slope CI endpoints and widened to
    the pointwise min/max across the models covering each size.
    """
    entries = chained.entries if isinstance(chained, ChainedFit) else list(chained)
    if not entries:
        raise ValueError("no range fits to unify")
    merged: dict[tuple[int, int], list[RangeFit]] = defaultdict(list)
    for e in entries:
        merged[(e.lower, e.upper)].append(e)
    keys = sorted(merged)
    center = [(lo, hi, float(np.mean([e.coef for e in merged[lo, hi]]))) for lo, hi in keys]
    low = [(lo, hi, float(np.mean([e.ci_low for e in merged[lo, hi]]))) for lo, hi in keys]
    high = [(lo, hi, float(np.mean([e.ci_high for e in merged[lo, hi]]))) for lo, hi in keys]

    mid = _stitch(center, wb1)
    lows = _stitch(low, wb1)
    highs = _stitch(high, wb1)
    ks = np.arange(keys[0][0], max(hi for _, hi in keys) + 1)
    missing = [int(k) for k in ks if k not in mid]
    if missing:
        raise ValueError(f"gap in coverage at sizes {missing}")
    w = np.array([np.mean(mid[k]) for k in ks])
    lo_band = np.array([min(lows[k]) for k in ks])
    hi_band = np.array([max(highs[k]) for k in ks])
    return UnifiedCurve(ks, w, np.minimum(lo_band, w), np.maximum(hi_band, w), wb1)


def marginal_gain_report(chained: ChainedFit) -> pd.DataFrame:
    """Per-range marginal gain with its CI; non-positive gains are flagged as sub-linear."""
    table = chained.table()
    return pd.DataFrame({
        "range": table["range"],
        "midpoint": (table["lower"] + table["upper"]) / 2,
        "coef": table["coef"],
        "ci_low": table["ci_low"],
        "ci_high": table["ci_high"],
        "sub_linear": table["coef"] <= 0,
    })
