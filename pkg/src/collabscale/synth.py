"""Generative model of individual productivity with known, planted parameters.

Rows are generated first (who works on which project, and how much), then
expanded into timestamped contribution events with matching profile tables.
Everything flows from one seed; identical configs give byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import (ContributionEvent, ProjectProfile, UserProfile, add_months,
                     write_events, write_project_profiles, write_user_profiles)

EPOCH = datetime(2015, 1, 1, tzinfo=timezone.utc)

# exogenous features whose effect on work can be planted
PLANTABLE = ("watchers", "forks", "description_len", "followers", "owned_repos", "created_pages")


@dataclass
class SynthConfig:
    n_users: int = 2000
    projects_per_user: tuple[int, int] = (2, 5)
    size_exponent: float = 2.0
    size_cap: int = 20
    curve: dict = field(default_factory=lambda: {"kind": "power", "c": math.exp(2.45), "alpha": 0.28})
    sigma_u: float = 3.0
    sigma: float = 2.0
    confound_effects: dict = field(default_factory=dict)
    seed: int = 0
    window_months: int = 3
    activity_months: int | None = None
    timing: str = "uniform"
    mode: str = "github"
    edit_size_beta: float = 1.2
    edit_size_sigma: float = 0.5
    edit_size_scale: float = 40.0
    n_bots: int = 0
    n_redirects: int = 0

    def __post_init__(self):
        self.projects_per_user = tuple(self.projects_per_user)
        lo, hi = self.projects_per_user
        if not 1 <= lo <= hi:
            raise ValueError("projects_per_user must satisfy 1 <= min <= max")
        if self.sigma < 0 or self.sigma_u < 0:
            raise ValueError("variances must be non-negative")
        if self.mode not in ("github", "wikipedia"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.timing not in ("uniform", "exponential"):
            raise ValueError(f"unknown timing {self.timing!r}")
        if self.size_cap < 1:
            raise ValueError("size_cap must be >= 1")
        if self.n_users < self.size_cap:
            raise ValueError(f"infeasible config: {self.n_users} users cannot fill groups of size {self.size_cap}")
        unknown = set(self.confound_effects) - set(PLANTABLE)
        if unknown:
            raise ValueError(f"cannot plant effects on {sorted(unknown)}; choose from {PLANTABLE}")
        make_curve(self.curve)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["projects_per_user"] = list(self.projects_per_user)
        return out


def make_curve(spec: dict):
    """Expected work as a function of group size, from a curve spec."""
    kind = spec.get("kind")
    if kind == "power":
        c, alpha = float(spec["c"]), float(spec["alpha"])
        return lambda N: c * np.asarray(N, float) ** alpha
    if kind == "linear":
        a, b = float(spec["intercept"]), float(spec["slope"])
        return lambda N: a + b * np.asarray(N, float)
    if kind == "piecewise":
        # slopes[i] applies between knots[i] and knots[i+1]; value at knots[0] is "start"
        knots = np.asarray(spec["knots"], float)
        slopes = np.asarray(spec["slopes"], float)
        if knots.size != slopes.size + 1:
            raise ValueError("piecewise curve needs one more knot than slopes")
        values = float(spec["start"]) + np.r_[0.0, np.cumsum(slopes * np.diff(knots))]
        return lambda N: np.interp(np.asarray(N, float), knots, values)
    if kind == "table":
        sizes = np.array(sorted(int(k) for k in spec["values"]), float)
        vals = np.array([spec["values"][str(int(k))] if str(int(k)) in spec["values"]
                         else spec["values"][int(k)] for k in sizes], float)
        return lambda N: np.interp(np.asarray(N, float), sizes, vals)
    raise ValueError(f"unknown curve kind {kind!r}")


def size_probabilities(exponent: float, cap: int) -> np.ndarray:
    sizes = np.arange(1, cap + 1, dtype=float)
    p = sizes ** -exponent
    return p / p.sum()


def sample_group_sizes(rng: np.random.Generator, n: int, exponent: float, cap: int) -> np.ndarray:
    """Discrete power law ``P(N) ~ N**-exponent`` truncated to ``1..cap``."""
    return rng.choice(np.arange(1, cap + 1), size=n, p=size_probabilities(exponent, cap))


def _assign_members(rng, slots: np.ndarray, sizes: np.ndarray) -> list[np.ndarray]:
    """Cut shuffled user slots into groups; repair repeated users by swapping across groups."""
    slots = slots[rng.permutation(slots.size)]
    bounds = np.r_[0, np.cumsum(sizes)]
    owner = np.repeat(np.arange(sizes.size), sizes)
    for _ in range(100):
        dup_positions = []
        for g in np.flatnonzero(sizes > 1):
            members = slots[bounds[g]:bounds[g + 1]]
            _, first = np.unique(members, return_index=True)
            if first.size < members.size:
                extra = np.setdiff1d(np.arange(members.size), first)
                dup_positions.extend(bounds[g] + extra)
        if not dup_positions:
            break
        for pos in dup_positions:
            g = owner[pos]
            for _ in range(50):
                other = int(rng.integers(slots.size))
                h = owner[other]
                if h == g:
                    continue
                mine = slots[bounds[g]:bounds[g + 1]]
                theirs = slots[bounds[h]:bounds[h + 1]]
                if slots[other] in mine or slots[pos] in theirs:
                    continue
                slots[pos], slots[other] = slots[other], slots[pos]
                break
    else:
        raise RuntimeError("could not place users into distinct group slots")
    return [slots[bounds[g]:bounds[g + 1]] for g in range(sizes.size)]


def _user_names(n: int, prefix: str = "u") -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


@dataclass
class SynthTruth:
    config: dict
    user_intercepts: dict[str, float]
    group_sizes: list[int]
    rows: pd.DataFrame

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "user_intercepts": self.user_intercepts,
            "group_sizes": self.group_sizes,
            "size_histogram": {str(k): int(v) for k, v in
                               sorted(pd.Series(self.group_sizes).value_counts().items())},
        }


def generate_rows(config: SynthConfig) -> tuple[pd.DataFrame, SynthTruth, dict]:
    """Draw memberships and planted work; returns rows, truth and the raw profile features."""
    rng = np.random.default_rng(config.seed)
    lo, hi = config.projects_per_user
    per_user = rng.integers(lo, hi + 1, size=config.n_users)
    total = int(per_user.sum())

    sizes = []
    drawn = 0
    while drawn < total:
        batch = sample_group_sizes(rng, max(64, (total - drawn) // 2), config.size_exponent, config.size_cap)
        for s in batch:
            s = int(min(s, total - drawn))
            sizes.append(s)
            drawn += s
            if drawn >= total:
                break
    sizes = np.array(sizes, dtype=int)
    if sizes.max() > config.n_users:
        raise ValueError("infeasible config: group larger than user population")
    slots = np.repeat(np.arange(config.n_users), per_user)
    members = _assign_members(rng, slots, sizes)

    users = _user_names(config.n_users)
    projects = _user_names(sizes.size, "p")
    n_proj = sizes.size
    # exogenous profile features
    followers = rng.geometric(0.05, config.n_users) - 1
    owned = rng.poisson(6, config.n_users)
    created_pages = rng.poisson(3, config.n_users)
    acct_age = rng.integers(30, 3000, config.n_users)
    watchers = rng.geometric(0.1, n_proj) - 1
    forks = rng.binomial(watchers, 0.3)
    desc = rng.integers(0, 200, n_proj)
    created_offset = rng.integers(0, 365 * 86400, n_proj)
    intercepts = rng.normal(0.0, config.sigma_u, config.n_users) if config.sigma_u > 0 else np.zeros(config.n_users)

    uidx = np.concatenate(members)
    pidx = np.repeat(np.arange(n_proj), sizes)
    N = sizes[pidx]
    curve = make_curve(config.curve)
    expected = curve(N) + intercepts[uidx]
    feats = {
        "followers": followers[uidx], "owned_repos": owned[uidx], "created_pages": created_pages[uidx],
        "watchers": watchers[pidx], "forks": forks[pidx], "description_len": desc[pidx],
    }
    for name, beta in config.confound_effects.items():
        expected = expected + float(beta) * feats[name]
    noise = rng.normal(0.0, config.sigma, uidx.size) if config.sigma > 0 else np.zeros(uidx.size)
    work = np.rint(np.maximum(1.0, expected + noise)).astype(np.int64)

    rows = pd.DataFrame({
        "user_id": [users[i] for i in uidx],
        "project_id": [projects[i] for i in pidx],
        "group_size": N,
        "work": work,
        "expected_work": expected,
        **feats,
    })
    rows = rows.sort_values(["project_id", "user_id"], kind="stable").reset_index(drop=True)
    truth = SynthTruth(
        config=config.to_dict(),
        user_intercepts={users[i]: float(intercepts[i]) for i in range(config.n_users)},
        group_sizes=[int(s) for s in sizes],
        rows=rows,
    )
    raw = {
        "users": users, "projects": projects, "followers": followers, "owned": owned,
        "created_pages": created_pages, "acct_age": acct_age, "watchers": watchers,
        "forks": forks, "desc": desc, "created_offset": created_offset,
    }
    return rows, truth, raw


def _event_offsets(rng, w: int, horizon_s: int, timing: str) -> np.ndarray:
    if timing == "uniform":
        return np.sort(rng.integers(0, horizon_s, w))
    # front-loaded activity: exponential with mean a quarter of the horizon, folded into range
    off = rng.exponential(horizon_s / 4, w).astype(np.int64) % horizon_s
    return np.sort(off)


def _split_bytes(rng, total: int, parts: int) -> np.ndarray:
    if parts == 1:
        return np.array([total])
    share = rng.dirichlet(np.ones(parts)) * total
    out = np.floor(share).astype(np.int64)
    rest = total - int(out.sum())
    if rest:
        order = np.argsort(-(share - out), kind="stable")[:rest]
        out[order] += 1
    return out


def generate(config: SynthConfig, out_dir=None):
    """Full corpus: events, project/user profiles and truth.

    Returns ``(events, project_profiles, user_profiles, truth)``; when ``out_dir``
    is given the ingest-compatible files and ``truth.json`` are written there too.
    """
    rows, truth, raw = generate_rows(config)
    rng = np.random.default_rng([config.seed, 1])
    months = config.activity_months or config.window_months

    created = [EPOCH + timedelta(seconds=int(s)) for s in raw["created_offset"]]
    proj_index = {p: i for i, p in enumerate(raw["projects"])}
    horizons = [int((add_months(c, months) - c).total_seconds()) for c in created]

    wiki = config.mode == "wikipedia"
    events: list[ContributionEvent] = []
    edit_bytes = np.zeros(len(rows), dtype=np.int64)
    for r, (uid, pid, w) in enumerate(zip(rows["user_id"], rows["project_id"], rows["work"])):
        j = proj_index[pid]
        offs = _event_offsets(rng, int(w), horizons[j], config.timing)
        sizes = [None] * int(w)
        if wiki:
            total = int(round(config.edit_size_scale * float(w) ** config.edit_size_beta
                              * math.exp(config.edit_size_sigma * rng.standard_normal())))
            sizes = _split_bytes(rng, max(total, 0), int(w)).tolist()
            edit_bytes[r] = sum(sizes)
        base = created[j]
        for off, sz in zip(offs, sizes):
            events.append(ContributionEvent(uid, pid, base + timedelta(seconds=int(off)), sz, False))
    rows["edit_bytes"] = edit_bytes

    bots = _user_names(config.n_bots, "bot") if config.n_bots else []
    for b in bots:
        for _ in range(5):
            j = int(rng.integers(len(created)))
            off = int(rng.integers(0, horizons[j]))
            events.append(ContributionEvent(b, raw["projects"][j], created[j] + timedelta(seconds=off),
                                            10 if wiki else None, True))
    redirects = _user_names(config.n_redirects, "r") if config.n_redirects else []
    for k, pid in enumerate(redirects):
        events.append(ContributionEvent(raw["users"][k % len(raw["users"])], pid,
                                        EPOCH + timedelta(days=1 + k), 10 if wiki else None, False))
    events.sort(key=lambda e: (e.timestamp, e.project_id, e.user_id))

    project_profiles = [
        ProjectProfile(p, created[i], int(raw["watchers"][i]), int(raw["forks"][i]),
                       int(raw["desc"][i]), False)
        for i, p in enumerate(raw["projects"])
    ] + [ProjectProfile(r, EPOCH, 0, 0, 0, True) for r in redirects]
    user_profiles = [
        UserProfile(u, EPOCH - timedelta(days=int(raw["acct_age"][i])), int(raw["followers"][i]),
                    int(raw["owned"][i]), int(raw["created_pages"][i]))
        for i, u in enumerate(raw["users"])
    ]
    truth.rows = rows

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_events(events, out / "events.csv")
        write_project_profiles(project_profiles, out / "projects.csv")
        write_user_profiles(user_profiles, out / "users.csv")
        if bots:
            (out / "bots.txt").write_text("".join(b + "\n" for b in bots))
        (out / "truth.json").write_text(json.dumps(truth.to_json(), indent=1, sort_keys=True) + "\n")
        rows.to_csv(out / "truth_rows.csv", index=False, float_format="%.10g")
    return events, project_profiles, user_profiles, truth


def calibrate_edit_noise(target_r2: float, beta: float, log_counts: np.ndarray,
                         tol: float = 1e-6) -> float:
    """Lognormal sigma giving an expected log-log R^2 of ``target_r2`` for the given counts.

    Bisection on the population R^2 ``b^2 v / (b^2 v + s^2)`` with ``v`` the
    variance of the log counts.
    """
    v = float(np.var(log_counts))
    if v <= 0:
        raise ValueError("log counts have zero variance")
    if not 0 < target_r2 < 1:
        raise ValueError("target R^2 must lie in (0, 1)")
    signal = beta * beta * v
    lo, hi = 0.0, 1.0
    while signal / (signal + hi * hi) > target_r2:
        hi *= 2
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if signal / (signal + mid * mid) > target_r2:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


# -- recovery checks -------------------------------------------------------

DEFAULT_TOLERANCES = {
    "alpha": 0.02,
    "ln_c": 0.1,
    "slope_se": 3.0,
    "slope_abs": 1e-6,
    "sigma2_u_rel": 0.25,
    "edit_beta": 0.05,
    "size_exponent": 0.1,
}


@dataclass
class Check:
    parameter: str
    planted: float
    recovered: float
    tolerance: float
    passed: bool


def truth_check(truth: SynthTruth | dict, outputs: dict, tolerances: dict | None = None) -> list[Check]:
    """Compare planted parameters against pipeline estimates.

    ``outputs`` maps stage names to their loaded artifacts: ``powerlaw``
    (dict), ``lme`` (dict with ``coef``, ``std_err``, ``sigma2_u``),
    ``chained`` (DataFrame) and ``edit_scaling`` (dict). Which checks run
    depends on the planted curve kind and mode.
    """
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    cfg = truth.config if isinstance(truth, SynthTruth) else truth["config"]
    curve = cfg["curve"]
    noiseless = cfg["sigma"] == 0 and cfg["sigma_u"] == 0
    checks: list[Check] = []

    def need(name):
        if name not in outputs or outputs[name] is None:
            raise KeyError(f"missing pipeline output {name!r}")
        return outputs[name]

    def add(param, planted, recovered, tolerance):
        checks.append(Check(param, float(planted), float(recovered), float(tolerance),
                            bool(abs(planted - recovered) <= tolerance)))

    if curve["kind"] == "power":
        fit = need("powerlaw")
        add("alpha", curve["alpha"], fit["alpha"], tol["slope_abs"] if noiseless else tol["alpha"])
        add("ln_c", math.log(curve["c"]), fit["ln_c"], tol["slope_abs"] if noiseless else tol["ln_c"])
    elif curve["kind"] == "linear":
        lme = need("lme")
        se = lme.get("std_err", 0.0) or 0.0
        add("slope", curve["slope"], lme["coef"], max(tol["slope_abs"], tol["slope_se"] * se))
        if not noiseless and "sigma2_u" in lme:
            planted = cfg["sigma_u"] ** 2
            add("sigma2_u", planted, lme["sigma2_u"], max(tol["sigma2_u_rel"] * planted, 1e-6))
    if curve["kind"] in ("piecewise", "table"):
        table = need("chained")
        f = make_curve(curve)
        for r in table.itertuples(index=False):
            chord = (f(r.upper) - f(r.lower)) / (r.upper - r.lower)
            add(f"slope[{r.lower}-{r.upper}]", chord, r.coef,
                max(tol["slope_abs"], tol["slope_se"] * float(r.std_err)))
    if cfg.get("mode") == "wikipedia" and "edit_scaling" in outputs:
        add("edit_size_beta", cfg["edit_size_beta"], outputs["edit_scaling"]["alpha"], tol["edit_beta"])
    if "size_exponent" in outputs:
        add("size_exponent", cfg["size_exponent"], outputs["size_exponent"], tol["size_exponent"])
    return checks
