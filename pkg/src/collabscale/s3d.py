"""Structured sum-of-squares decomposition: greedy, binned, variance-explaining feature selection.

Each step tries every remaining feature. Inside every current cell the
feature's values are cut into blocks by an optimal 1-D partition (dynamic
programming over candidate cut points, one penalty ``lam`` per cut, in units of
R^2). The feature whose partition explains the largest share of the total sum
of squares is kept and the cells are refined by its blocks.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


TIE_TOL = 1e-12


@dataclass(frozen=True)
class S3dConfig:
    max_features: int = 8
    lam: float = 0.0
    cv_folds: int = 5
    min_r2_gain: float = 1e-3
    max_cuts: int | None = None
    min_cell_size: int = 1
    max_candidates: int = 64

    def __post_init__(self):
        if self.max_features < 1:
            raise ValueError("max_features must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.min_cell_size < 1:
            raise ValueError("min_cell_size must be >= 1")


def _value_groups(x: np.ndarray, y: np.ndarray, max_candidates: int):
    """Sorted distinct-value groups (merged to at most ``max_candidates``) with count/sum/sumsq."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    if starts.size > max_candidates:
        # keep boundaries at distinct-value starts closest to equal-count quantiles
        targets = np.linspace(0, xs.size, max_candidates + 1)[1:-1]
        pick = np.unique(np.searchsorted(starts, targets))
        pick = pick[(pick > 0) & (pick < starts.size)]
        starts = np.r_[0, starts[pick]]
        starts = np.unique(starts)
    ends = np.r_[starts[1:], xs.size]
    cnt = (ends - starts).astype(float)
    s1 = np.add.reduceat(ys, starts)
    s2 = np.add.reduceat(ys * ys, starts)
    lo_vals = xs[starts]
    hi_vals = xs[ends - 1]
    return cnt, s1, s2, lo_vals, hi_vals


def optimal_partition(x, y, penalty: float = 0.0, max_cuts: int | None = None,
                      min_size: int = 1, max_candidates: int = 64):
    """Cut points minimizing within-block SS + ``penalty`` per cut.

    Returns ``(cuts, between_ss)``; cuts are midpoints between adjacent
    candidate values and ``between_ss`` the explained sum of squares.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cnt, s1, s2, lo_vals, hi_vals = _value_groups(x, y, max_candidates)
    m = cnt.size
    C = np.r_[0.0, np.cumsum(cnt)]
    S = np.r_[0.0, np.cumsum(s1)]
    Q = np.r_[0.0, np.cumsum(s2)]
    total_sse = Q[m] - S[m] ** 2 / C[m]

    def sse(i, j):
        # groups i..j-1 as one block; vectorized over i
        n = C[j] - C[i]
        s = S[j] - S[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (Q[j] - Q[i]) - s * s / n
        out = np.maximum(out, 0.0)
        return np.where(n >= min_size, out, np.inf)

    if max_cuts is None:
        bounds, inside = _penalized_split(m, sse, penalty)
    else:
        bounds, inside = _limited_split(m, sse, penalty, min(max_cuts, m - 1), total_sse)
    if bounds is None:
        return np.empty(0), 0.0
    cuts = np.array([(hi_vals[b - 1] + lo_vals[b]) / 2 for b in bounds])
    return cuts, float(max(total_sse - inside, 0.0))


def _penalized_split(m, sse, penalty):
    # cost[j]: best within-SS + penalty per cut over groups 0..j-1
    cost = np.full(m + 1, np.inf)
    cuts = np.zeros(m + 1, dtype=int)
    prev = np.zeros(m + 1, dtype=int)
    cost[0] = -penalty
    for j in range(1, m + 1):
        i = np.arange(j)
        cand = cost[i] + sse(i, j) + penalty
        # ties prefer fewer cuts
        order = np.lexsort((cuts[i], cand))
        a = order[0]
        cost[j] = cand[a]
        prev[j] = a
        cuts[j] = cuts[a] + (a > 0)
    if not np.isfinite(cost[m]):
        return None, 0.0
    bounds, j = [], m
    while prev[j] > 0:
        bounds.append(int(prev[j]))
        j = prev[j]
    bounds.sort()
    return bounds, float(cost[m] - penalty * len(bounds))


def _limited_split(m, sse, penalty, kmax, total_sse):
    # best[k, j]: min within-SS splitting groups 0..j-1 into k+1 blocks
    best = np.full((kmax + 1, m + 1), np.inf)
    arg = np.zeros((kmax + 1, m + 1), dtype=int)
    for j in range(1, m + 1):
        best[0, j] = sse(np.array([0]), j)[0]
    for k in range(1, kmax + 1):
        for j in range(k + 1, m + 1):
            i = np.arange(k, j)
            cand = best[k - 1, i] + sse(i, j)
            a = int(np.argmin(cand))
            best[k, j] = cand[a]
            arg[k, j] = i[a]
    costs = best[:, m] + penalty * np.arange(kmax + 1)
    if not np.isfinite(costs).any():
        return None, 0.0
    k = int(np.flatnonzero(costs <= costs.min() + 1e-12 * max(1.0, abs(total_sse)))[0])
    bounds, j = [], m
    for kk in range(k, 0, -1):
        j = arg[kk, j]
        bounds.append(int(j))
    bounds.sort()
    return bounds, float(best[k, m])


@dataclass
class S3dStep:
    feature: str
    cuts: dict[tuple, np.ndarray]
    r2_gain: float
    candidates: dict[str, float]


@dataclass
class S3dModel:
    features: list[str]
    steps: list[S3dStep]
    cells: dict[tuple, tuple[float, int]]
    bounds: dict[tuple, dict[str, tuple[float, float]]]
    y_mean: float
    total_ss: float
    config: S3dConfig = field(default_factory=S3dConfig)

    @property
    def selected(self) -> list[str]:
        return [s.feature for s in self.steps]

    @property
    def step_r2(self) -> list[float]:
        return [s.r2_gain for s in self.steps]

    @property
    def r2(self) -> float:
        return float(sum(self.step_r2))

    def cell_key(self, row) -> tuple:
        key: tuple = ()
        for step in self.steps:
            cuts = step.cuts.get(key)
            if cuts is None:
                break
            key = key + (int(np.searchsorted(cuts, float(row[step.feature]), side="right")),)
        return key

    def cell_table(self) -> pd.DataFrame:
        recs = []
        for key, (mean, count) in sorted(self.cells.items()):
            rec = {"cell": "/".join(map(str, key)) or "root", "mean": mean, "count": count}
            for f in self.selected:
                lo, hi = self.bounds[key].get(f, (-math.inf, math.inf))
                rec[f"{f}_lower"] = lo
                rec[f"{f}_upper"] = hi
            recs.append(rec)
        return pd.DataFrame(recs)


def fit_s3d(frame: pd.DataFrame, response: str, features: Sequence[str] | None = None,
            config: S3dConfig | None = None) -> S3dModel:
    config = config or S3dConfig()
    if features is None:
        features = [c for c in frame.columns if c != response]
    features = list(features)
    y = frame[response].to_numpy(float)
    X = {f: frame[f].to_numpy(float) for f in features}
    if y.size < 2:
        raise ValueError("need at least two observations")
    total_ss = float(((y - y.mean()) ** 2).sum())
    if total_ss <= 0:
        raise ValueError("response has zero variance")

    cells: dict[tuple, np.ndarray] = {(): np.arange(y.size)}
    bounds: dict[tuple, dict[str, tuple[float, float]]] = {(): {}}
    penalty = config.lam * total_ss
    steps: list[S3dStep] = []
    remaining = list(features)
    while remaining and len(steps) < config.max_features:
        scored = {}
        for f in remaining:
            gain, cuts = 0.0, {}
            for key, idx in cells.items():
                c, g = optimal_partition(X[f][idx], y[idx], penalty, config.max_cuts,
                                         config.min_cell_size, config.max_candidates)
                cuts[key] = c
                gain += g
            scored[f] = (gain / total_ss, cuts)
        # gains equal up to rounding count as ties; ties go to declared column order
        top = max(scored[f][0] for f in remaining)
        best = next(f for f in remaining if scored[f][0] >= top - TIE_TOL)
        gain, cuts = scored[best]
        if gain < config.min_r2_gain:
            break
        steps.append(S3dStep(best, cuts, gain, {f: scored[f][0] for f in remaining}))
        remaining.remove(best)
        new_cells, new_bounds = {}, {}
        for key, idx in cells.items():
            c = cuts[key]
            block = np.searchsorted(c, X[best][idx], side="right")
            edges = np.r_[-math.inf, c, math.inf]
            for b in range(c.size + 1):
                child = key + (b,)
                new_cells[child] = idx[block == b]
                new_bounds[child] = {**bounds[key], best: (float(edges[b]), float(edges[b + 1]))}
        cells, bounds = new_cells, new_bounds

    table = {key: (float(y[idx].mean()), int(idx.size)) for key, idx in cells.items() if idx.size}
    bounds = {key: b for key, b in bounds.items() if key in table}
    return S3dModel(features, steps, table, bounds, float(y.mean()), total_ss, config)


def predict_s3d(model: S3dModel, rows) -> np.ndarray | float:
    """Mean of the training cell each row falls in; accepts a mapping or a DataFrame."""
    if isinstance(rows, pd.DataFrame):
        return np.array([predict_s3d(model, r) for _, r in rows.iterrows()])
    key = model.cell_key(rows)
    while key not in model.cells:
        # an empty child cannot occur for training cuts; fall back to the parent's mean
        key = key[:-1]
        if not key:
            return model.y_mean
    return model.cells[key][0]


def _predict_many(model: S3dModel, frame: pd.DataFrame) -> np.ndarray:
    cols = {s.feature: frame[s.feature].to_numpy(float) for s in model.steps}
    out = np.empty(len(frame))
    for i in range(len(frame)):
        key: tuple = ()
        for step in model.steps:
            cuts = step.cuts.get(key)
            if cuts is None:
                break
            key = key + (int(np.searchsorted(cuts, cols[step.feature][i], side="right")),)
        out[i] = model.cells[key][0] if key in model.cells else model.y_mean
    return out


def feature_importance_steps(model: S3dModel) -> pd.DataFrame:
    recs = []
    for i, step in enumerate(model.steps, start=1):
        for f, r2 in step.candidates.items():
            recs.append({"step": i, "feature": f, "candidate_r2": r2, "selected": f == step.feature})
    return pd.DataFrame(recs, columns=["step", "feature", "candidate_r2", "selected"])


def kfold_indices(n: int, folds: int, seed: int = 0) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def cross_validate_lambda(
    frame: pd.DataFrame,
    response: str,
    features: Sequence[str] | None = None,
    lambdas: Sequence[float] = (0.0, 1e-4, 1e-3, 1e-2, 3e-2, 1e-1),
    config: S3dConfig | None = None,
    seed: int = 0,
) -> tuple[float, dict[float, float]]:
    """Pick the penalty with the lowest mean held-out squared error; ties go to the larger penalty."""
    config = config or S3dConfig()
    if not lambdas:
        raise ValueError("empty lambda grid")
    n = len(frame)
    if n < 10 * config.cv_folds:
        raise ValueError(f"need at least {10 * config.cv_folds} rows for {config.cv_folds}-fold CV")
    folds = kfold_indices(n, config.cv_folds, seed)
    y = frame[response].to_numpy(float)
    scores = {}
    for lam in lambdas:
        cfg = S3dConfig(config.max_features, lam, config.cv_folds, config.min_r2_gain,
                        config.max_cuts, config.min_cell_size, config.max_candidates)
        errs = []
        for i, test in enumerate(folds):
            train = np.concatenate([f for j, f in enumerate(folds) if j != i])
            tr = frame.iloc[train]
            if tr[response].var() == 0:
                pred = np.full(test.size, tr[response].mean())
            else:
                model = fit_s3d(tr, response, features, cfg)
                pred = _predict_many(model, frame.iloc[test])
            errs.append(float(np.mean((y[test] - pred) ** 2)))
        scores[float(lam)] = float(np.mean(errs))
    low = min(scores.values())
    best = max(lam for lam, s in scores.items() if s <= low + 1e-12 * max(1.0, abs(low)))
    return best, scores
