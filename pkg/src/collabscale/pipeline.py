"""Stage orchestration, artifact stamping, the time-window sweep and plot-data emission."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from . import chained as chained_mod
from . import ingest, lme, metrics, ols, s3d, scaling

log = logging.getLogger(__name__)

GROUP_OLS_FEATURES = {
    "github": ["group_size", "forks", "watchers", "project_age", "effective_size",
               "mean_projects", "mean_focus"],
    "wikipedia": ["group_size", "project_age", "mean_projects", "mean_focus", "effective_size"],
}
USER_OLS_FEATURES = {
    "github": ["group_size", "effective_size", "watchers", "project_age", "aggregate_focus",
               "n_projects", "followers", "owned_repos"],
    "wikipedia": ["group_size", "effective_size", "n_projects", "group_work", "max_group",
                  "created_pages", "project_age", "mean_group"],
}
S3D_FEATURES = {
    "github": ["effective_size", "watchers", "forks", "group_size", "aggregate_focus", "user_age",
               "project_age", "n_projects", "max_group", "min_group", "followers", "owned_repos",
               "description_len"],
}
S3D_FEATURES["wikipedia"] = [*S3D_FEATURES["github"], "group_work", "edit_bytes", "mean_group", "created_pages"]
LME_GROUPINGS = {"github": ["n_projects", "work", "followers", "user_id"],
                 "wikipedia": ["n_projects", "work", "user_id"]}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class RunConfig:
    events: str | None = None
    projects: str | None = None
    users: str | None = None
    bots: str | None = None
    out: str = "out"
    mode: str = "github"
    window_months: int = 3
    seed: int = 0
    group_cap: int | None = None
    prune_threshold: float = 0.8
    outlier_percentile: float | None = 95.0
    scale_response: bool = True
    lme_bins: int = 5
    lme_confounds: bool = False
    span: int | None = None
    stride: int | None = None
    wb1: float = 1.0
    s3d_max_features: int = 8
    s3d_lambdas: list[float] = field(default_factory=lambda: [1e-3, 3e-3, 1e-2, 3e-2])
    s3d_folds: int = 5
    s3d_min_cell: int = 20
    activity_horizons: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6])
    emit_svg: bool = False

    def __post_init__(self):
        if self.mode not in ("github", "wikipedia"):
            raise ValueError(f"unknown mode {self.mode!r}")
        ingest.TimeWindow(self.window_months)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def cap(self) -> int:
        return self.group_cap if self.group_cap is not None else metrics.GROUP_CAPS[self.mode]

    def range_spec(self) -> chained_mod.RangeSpec:
        base = chained_mod.RangeSpec.for_mode(self.mode)
        return chained_mod.RangeSpec(
            span=self.span or base.span, stride=self.stride or base.stride,
            lo=base.lo, hi=min(base.hi, self.cap),
        )


def config_hash(config: RunConfig | dict) -> str:
    data = config.to_dict() if isinstance(config, RunConfig) else config
    # output location does not change results
    data = {k: v for k, v in data.items() if k != "out"}
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return None if math.isnan(v) else v
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path, data: dict, stamp: str | None = None) -> None:
    payload = dict(data)
    if stamp is not None:
        payload = {"config_hash": stamp, **payload}
    _atomic_write(Path(path), json.dumps(_clean(payload), indent=1, sort_keys=False) + "\n")


def write_csv(path, frame: pd.DataFrame, stamp: str | None = None) -> None:
    body = frame.to_csv(index=False, float_format="%.12g", lineterminator="\n")
    head = f"# config_hash: {stamp}\n" if stamp is not None else ""
    _atomic_write(Path(path), head + body)


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", keep_default_na=True, dtype={"user_id": str, "project_id": str})


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


@dataclass
class StageData:
    events: list = field(default_factory=list)
    projects: dict = field(default_factory=dict)
    users: dict = field(default_factory=dict)
    groups: list = field(default_factory=list)
    rows: pd.DataFrame | None = None
    chained: chained_mod.ChainedFit | None = None
    unified: chained_mod.UnifiedCurve | None = None
    reports: dict = field(default_factory=dict)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"no {what} path given")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def stage_ingest(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    events, load_report = ingest.load_events(_require(cfg.events, "events file"))
    data.projects = ingest.load_project_profiles(_require(cfg.projects, "projects file"))
    data.users = ingest.load_user_profiles(_require(cfg.users, "users file")) if cfg.users else {}
    bots = ingest.load_bot_list(_require(cfg.bots, "bot list")) if cfg.bots else frozenset()
    windowed, filt = ingest.filter_window(events, data.projects, ingest.TimeWindow(cfg.window_months), bots)
    clean = [e for e in events if not e.is_bot and e.user_id not in bots]
    fractions = ingest.compute_activity_fraction(clean, data.projects, [*cfg.activity_horizons, math.inf])
    data.events = windowed
    tmp = out / ".events_window.csv.tmp"
    ingest.write_events(windowed, tmp, fmt="csv")
    os.replace(tmp, out / "events_window.csv")
    write_json(out / "activity.json", {
        "events_loaded": len(events),
        "malformed_rows": load_report.malformed[:100],
        "n_malformed": load_report.n_malformed,
        "filter": asdict(filt),
        "activity_fraction": [{"months": None if math.isinf(h) else h, "fraction": f}
                              for h, f in fractions.items()],
    }, stamp)


def _load_windowed(cfg: RunConfig, data: StageData, out: Path) -> None:
    if data.events:
        return
    data.events, _ = ingest.load_events(_require(str(out / "events_window.csv"), "windowed events (run ingest first)"))
    data.projects = ingest.load_project_profiles(_require(cfg.projects, "projects file"))
    data.users = ingest.load_user_profiles(_require(cfg.users, "users file")) if cfg.users else {}


def _rows(data: StageData, out: Path) -> pd.DataFrame:
    if data.rows is None:
        data.rows = read_csv(_require(str(out / "rows.csv"), "rows table (run metrics first)"))
    return data.rows


def stage_metrics(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    _load_windowed(cfg, data, out)
    data.groups = metrics.build_groups(data.events, cap=cfg.cap)
    if not data.groups:
        raise ValueError("no groups inside the analysis window")
    data.rows = metrics.assemble_rows(data.groups, data.projects, data.users)
    write_csv(out / "rows.csv", data.rows, stamp)
    write_csv(out / "groups.csv", metrics.groups_frame(data.groups, data.rows), stamp)
    hist = metrics.group_size_distribution(data.groups)
    write_json(out / "size_distribution.json", {
        "histogram": [{"N": k, "count": v} for k, v in hist.items()],
        "capped_groups": sum(1 for g in data.groups if g.capped),
        "missing_profiles": data.rows.attrs.get("missing_profiles", {}),
    }, stamp)


def stage_scaling(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    rows = _rows(data, out)
    rows = rows[~rows["capped"].astype(bool)]
    fit = scaling.fit_mean_work(rows)
    write_json(out / "powerlaw.json", fit.to_dict(), stamp)
    write_csv(out / "curve.csv", scaling.mean_work_curve(rows), stamp)
    if cfg.mode == "wikipedia" and (rows["edit_bytes"] > 0).any():
        write_json(out / "edit_scaling.json", scaling.fit_edit_size_scaling(rows).to_dict(), stamp)


def _ols_layout(report: ols.RegressionReport) -> dict:
    fit = report.fit
    return {
        "r2": fit.r2,
        "n_obs": fit.n_obs,
        "outliers_removed": report.n_outliers,
        "dropped_constant": report.dropped_constant,
        "pruned": {k: {"kept": v[0], "corr": v[1]} for k, v in report.pruned.items()},
        "coefficients": [
            {"variable": name, "notation": metrics.NOTATION.get(name, name), "beta": b,
             "std_err": s, "p": p}
            for name, b, s, p in zip(fit.names, fit.coef, fit.se, fit.pvalues)
        ],
    }


def stage_ols(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    rows = _rows(data, out)
    rows = rows[~rows["capped"].astype(bool)]
    groups = metrics.groups_frame(data.groups, rows)
    group_fit = ols.regress(groups, "mean_work", GROUP_OLS_FEATURES[cfg.mode], cfg.prune_threshold,
                            cfg.outlier_percentile, scale=True, scale_response=cfg.scale_response)
    user_fit = ols.regress(rows, "work", USER_OLS_FEATURES[cfg.mode], cfg.prune_threshold,
                           cfg.outlier_percentile, scale=False)
    write_json(out / "ols.json", {"group": _ols_layout(group_fit), "user": _ols_layout(user_fit)}, stamp)


def stage_lme(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    rows = _rows(data, out)
    rows = rows[~rows["capped"].astype(bool)]
    if cfg.outlier_percentile is not None:
        rows = ols.filter_outliers_p95(rows, "work", cfg.outlier_percentile)
    fixed = ["group_size", *(chained_mod.CONFOUNDS[cfg.mode] if cfg.lme_confounds else [])]
    table, pooled = [], []
    for attr in LME_GROUPINGS[cfg.mode]:
        spec = lme.BinSpec(attr, cfg.lme_bins)
        try:
            if attr == "user_id":
                fit = lme.fit_random_intercept(lme.filter_eligible(rows), "work", fixed, "user_id")
                sizes = lme.filter_eligible(rows).groupby("user_id").size()
                table.append({"grouping": attr, "coef": fit["group_size"], "std_err": fit.stderr("group_size"),
                              "p": float(fit.pvalues[fit.index("group_size")]), "bins": int(sizes.size),
                              "max_bin_size": int(sizes.max()), "mean_bin_size": float(sizes.mean()),
                              "sigma2_u": fit.sigma2_u, "sigma2": fit.sigma2, "n_obs": fit.n_obs})
            else:
                table.append(lme.fit_grouped_by(rows, spec, "work", fixed))
                pooled.append(lme.fit_binned(rows, spec, "work", fixed).summary())
        except (lme.NotIdentifiableError, ols.RankDeficientError, np.linalg.LinAlgError) as exc:
            table.append({"grouping": attr, "skipped": str(exc)})
    write_json(out / "lme.json", {"fixed": fixed, "table": table, "per_bin_pooled": pooled}, stamp)


def stage_chained(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    data.chained = chained_mod.fit_chained(_rows(data, out), cfg.range_spec(), cfg.mode,
                                           outlier_percentile=cfg.outlier_percentile,
                                        prune_threshold=cfg.prune_threshold)
    if not data.chained.entries:
        raise ValueError("no identifiable group-size range")
    write_csv(out / "chained.csv", data.chained.table(), stamp)
    if data.chained.skipped:
        write_json(out / "chained_skipped.json",
                   {"skipped": [{"range": f"{a}-{b}", "reason": r} for (a, b), r in data.chained.skipped.items()]},
                   stamp)


def stage_unify(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    if data.chained is None:
        table = read_csv(_require(str(out / "chained.csv"), "chained table (run chained first)"))
        data.chained = chained_mod.ChainedFit.from_table(table, cfg.mode)
    data.unified = chained_mod.unify(data.chained, cfg.wb1)
    write_csv(out / "unified.csv", data.unified.to_frame(), stamp)


def stage_s3d(cfg: RunConfig, data: StageData, out: Path, stamp: str) -> None:
    rows = _rows(data, out)
    rows = rows[~rows["capped"].astype(bool)]
    if cfg.outlier_percentile is not None:
        rows = ols.filter_outliers_p95(rows, "work", cfg.outlier_percentile)
    feats = S3D_FEATURES[cfg.mode]
    base = s3d.S3dConfig(max_features=cfg.s3d_max_features, cv_folds=cfg.s3d_folds,
                         min_cell_size=cfg.s3d_min_cell)
    best, scores = s3d.cross_validate_lambda(rows, "work", feats, cfg.s3d_lambdas, base, seed=cfg.seed)
    final = s3d.S3dConfig(max_features=cfg.s3d_max_features, lam=best, cv_folds=cfg.s3d_folds,
                          min_cell_size=cfg.s3d_min_cell)
    model = s3d.fit_s3d(rows, "work", feats, final)
    steps = s3d.feature_importance_steps(model)
    write_json(out / "s3d.json", {
        "lambda": best,
        "cv_scores": [{"lambda": k, "mse": v} for k, v in scores.items()],
        "selected": model.selected,
        "step_r2": model.step_r2,
        "total_r2": model.r2,
        "steps": steps.to_dict(orient="records"),
    }, stamp)
    write_csv(out / "s3d_cells.csv", model.cell_table(), stamp)


STAGES = [
    ("ingest", stage_ingest),
    ("metrics", stage_metrics),
    ("scaling", stage_scaling),
    ("ols", stage_ols),
    ("lme", stage_lme),
    ("chained", stage_chained),
    ("unify", stage_unify),
    ("s3d", stage_s3d),
]


def run_pipeline(cfg: RunConfig, stages: list[str] | None = None) -> Path:
    """Run the stages in order, writing every artifact under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = config_hash(cfg)
    data = StageData()
    wanted = set(stages) if stages else None
    for name, fn in STAGES:
        if wanted is not None and name not in wanted and name not in ("ingest", "metrics"):
            continue
        try:
            fn(cfg, data, out, stamp)
        except (FileNotFoundError, ingest.IngestError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        log.info("stage %s done", name)
    emit_plots(out, stamp, svg=cfg.emit_svg)
    write_json(out / "config.json", cfg.to_dict(), stamp)
    return out


# -- sensitivity over window length ---------------------------------------

@dataclass
class SensitivityReport:
    windows: list[int]
    curves: dict[int, chained_mod.UnifiedCurve]
    ratios: list[float]
    event_counts: dict[int, int]
    z: float
    skipped: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        used = [t for t in self.windows if t in self.curves]
        return {
            "windows": used,
            "event_counts": {str(t): self.event_counts[t] for t in used},
            "ratios": [{"t": a, "t_next": b, "alpha": r} for a, b, r in zip(used, used[1:], self.ratios)],
            "z": self.z,
            "alpha_fit": [{"t": t, "alpha": t / (t + self.z)} for t in used[:-1]],
            "skipped": {str(k): v for k, v in self.skipped.items()},
        }


def window_ratio(curve_a: chained_mod.UnifiedCurve, curve_b: chained_mod.UnifiedCurve) -> float:
    """Mean over shared sizes of ``w(N, later) / w(N, earlier)``."""
    common = np.intersect1d(curve_a.k, curve_b.k)
    if common.size == 0:
        raise ValueError("unified curves share no group sizes")
    a = np.array([curve_a.at(k) for k in common])
    b = np.array([curve_b.at(k) for k in common])
    return float(np.mean(b / a))


def fit_window_constant(windows, ratios) -> float:
    """Least-squares ``z`` in ``alpha(t) = t / (t + z)``."""
    t = np.asarray(windows, float)
    r = np.asarray(ratios, float)
    if t.size == 0:
        return math.nan
    lo = -t.min() + 1e-6
    res = minimize_scalar(lambda z: float(((t / (t + z) - r) ** 2).sum()),
                          bounds=(lo, 1e6), method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def sweep_windows(
    cfg: RunConfig,
    windows: list[int],
    events=None,
    projects=None,
    users=None,
    min_events: int = 100,
) -> SensitivityReport:
    """Chained + unified fit per window length, ratios between consecutive windows and the fitted ``z``.

    Each unified curve starts from the mean work of the smallest group size in
    that window, so curves from different windows are on a common scale.
    """
    if len(windows) < 2:
        raise ValueError("need at least two windows")
    if any(b < a for a, b in zip(windows, windows[1:])):
        raise ValueError("windows must be non-decreasing")
    if events is None:
        events, _ = ingest.load_events(_require(cfg.events, "events file"))
        projects = ingest.load_project_profiles(_require(cfg.projects, "projects file"))
        users = ingest.load_user_profiles(_require(cfg.users, "users file")) if cfg.users else {}
    bots = ingest.load_bot_list(cfg.bots) if cfg.bots else frozenset()
    curves, counts, skipped = {}, {}, {}
    cache: dict[int, chained_mod.UnifiedCurve] = {}
    for t in windows:
        if t in cache:
            curves[t] = cache[t]
            continue
        kept, _ = ingest.filter_window(events, projects, ingest.TimeWindow(t), bots)
        counts[t] = len(kept)
        if len(kept) < min_events:
            skipped[t] = f"only {len(kept)} events"
            continue
        groups = metrics.build_groups(kept, cap=cfg.cap)
        rows = metrics.assemble_rows(groups, projects, users)
        chain = chained_mod.fit_chained(rows, cfg.range_spec(), cfg.mode,
                                        outlier_percentile=cfg.outlier_percentile,
                                        prune_threshold=cfg.prune_threshold)
        if not chain.entries:
            skipped[t] = "no identifiable range"
            continue
        lo = chain.entries[0].lower
        base_rows = rows[rows["group_size"] == lo]
        wb1 = float(base_rows["work"].mean()) if len(base_rows) else cfg.wb1
        try:
            curves[t] = cache[t] = chained_mod.unify(chain, wb1)
        except ValueError as exc:
            skipped[t] = str(exc)
    used = [t for t in windows if t in curves]
    ratios = [window_ratio(curves[a], curves[b]) for a, b in zip(used, used[1:])]
    z = fit_window_constant(used[:-1], ratios) if ratios else math.nan
    return SensitivityReport(list(windows), curves, ratios, counts, z, skipped)


# -- plot data -------------------------------------------------------------

def emit_plots(out: Path, stamp: str | None = None, svg: bool = False) -> list[Path]:
    """Write one CSV per figure analogue from whatever stage artifacts exist."""
    out = Path(out)
    written = []
    if (out / "curve.csv").exists():
        curve = read_csv(out / "curve.csv")
        fig1 = curve.copy()
        if (out / "powerlaw.json").exists():
            pl = read_json(out / "powerlaw.json")
            fig1["fit"] = np.exp(pl["ln_c"]) * fig1["N"] ** pl["alpha"]
        write_csv(out / "fig1_mean_work.csv", fig1, stamp)
        written.append(out / "fig1_mean_work.csv")
    if (out / "size_distribution.json").exists():
        hist = pd.DataFrame(read_json(out / "size_distribution.json")["histogram"])
        write_csv(out / "fig1_inset_sizes.csv", hist, stamp)
        written.append(out / "fig1_inset_sizes.csv")
    if (out / "chained.csv").exists():
        table = read_csv(out / "chained.csv")
        report = chained_mod.marginal_gain_report(chained_mod.ChainedFit.from_table(table))
        write_csv(out / "fig2_marginal_gain.csv", report, stamp)
        written.append(out / "fig2_marginal_gain.csv")
    if (out / "unified.csv").exists():
        write_csv(out / "fig3_unified.csv", read_csv(out / "unified.csv"), stamp)
        written.append(out / "fig3_unified.csv")
    if (out / "activity.json").exists():
        act = pd.DataFrame(read_json(out / "activity.json")["activity_fraction"])
        write_csv(out / "fig5_activity.csv", act, stamp)
        written.append(out / "fig5_activity.csv")
    if svg:
        written.extend(_svg_plots(out))
    return written


def _svg_plots(out: Path) -> list[Path]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; skipping SVG output")
        return []
    written = []
    if (out / "fig1_mean_work.csv").exists():
        d = read_csv(out / "fig1_mean_work.csv")
        fig, ax = plt.subplots()
        ax.errorbar(d["N"], d["mean"], yerr=[d["mean"] - d["ci_low"], d["ci_high"] - d["mean"]], fmt="o")
        if "fit" in d:
            ax.plot(d["N"], d["fit"], ":")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("group size N")
        ax.set_ylabel("mean work per member")
        fig.savefig(out / "fig1.svg")
        plt.close(fig)
        written.append(out / "fig1.svg")
    if (out / "fig3_unified.csv").exists():
        d = read_csv(out / "fig3_unified.csv")
        fig, ax = plt.subplots()
        ax.plot(d["k"], d["w"])
        ax.fill_between(d["k"], d["ci_low"], d["ci_high"], alpha=0.3)
        ax.set_xlabel("group size")
        ax.set_ylabel("work")
        fig.savefig(out / "fig3.svg")
        plt.close(fig)
        written.append(out / "fig3.svg")
    return written


def load_outputs(out) -> dict:
    """Load stage artifacts in the shape :func:`collabscale.synth.truth_check` expects."""
    out = Path(out)
    outputs = {}
    if (out / "powerlaw.json").exists():
        outputs["powerlaw"] = read_json(out / "powerlaw.json")
    if (out / "lme.json").exists():
        table = read_json(out / "lme.json")["table"]
        outputs["lme"] = next((r for r in table if r.get("grouping") == "user_id" and "coef" in r), None)
    if (out / "chained.csv").exists():
        outputs["chained"] = read_csv(out / "chained.csv")
    if (out / "edit_scaling.json").exists():
        outputs["edit_scaling"] = read_json(out / "edit_scaling.json")
    return outputs
