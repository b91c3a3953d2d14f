import filecmp
import json
import math

import numpy as np
import pandas as pd
import pytest

from collabscale.ingest import filter_window, load_events, load_project_profiles, load_user_profiles, TimeWindow
from collabscale.lme import fit_random_intercept
from collabscale.metrics import assemble_rows, build_groups, group_size_distribution
from collabscale.ols import fit_ols
from collabscale.scaling import fit_mean_work, fit_power_law
from collabscale.synth import (
    SynthConfig, calibrate_edit_noise, generate, generate_rows, make_curve, sample_group_sizes,
    size_probabilities, truth_check,
)

LINEAR_N = {"kind": "linear", "intercept": 0.0, "slope": 1.0}


def test_noiseless_identity_curve(tmp_path):
    cfg = SynthConfig(n_users=400, curve=LINEAR_N, sigma=0, sigma_u=0, seed=3)
    events, projects, users, truth = generate(cfg, tmp_path)
    groups = build_groups(events)
    assert all(w == g.N for g in groups for w in g.member_work.values())
    assert sorted(g.N for g in groups) == sorted(truth.group_sizes)


def test_seed_determinism(tmp_path):
    cfg = SynthConfig(n_users=300, seed=5, mode="wikipedia", size_cap=30, n_bots=3, n_redirects=2)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "bots.txt" in names
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []
    other = SynthConfig(n_users=300, seed=6, mode="wikipedia", size_cap=30)
    generate(other, tmp_path / "c")
    assert not filecmp.cmp(tmp_path / "a" / "events.csv", tmp_path / "c" / "events.csv", shallow=False)


def test_size_law_slope():
    rng = np.random.default_rng(0)
    sizes = sample_group_sizes(rng, 100_000, 2.0, 20)
    counts = np.bincount(sizes, minlength=21)[1:]
    fit = fit_power_law(np.arange(1, 21), counts, aggregate="raw")
    assert abs(-fit.alpha - 2.0) < 0.1
    np.testing.assert_allclose(size_probabilities(2.0, 20).sum(), 1.0)


def test_histogram_matches_bookkeeping():
    cfg = SynthConfig(n_users=1500, seed=2)
    events, _, _, truth = generate(cfg)
    hist = group_size_distribution(build_groups(events))
    expected = pd.Series(truth.group_sizes).value_counts().sort_index()
    assert hist == {int(k): int(v) for k, v in expected.items()}


def test_files_ingest_cleanly_and_satisfy_row_invariants(tmp_path):
    cfg = SynthConfig(n_users=600, seed=4, mode="wikipedia", size_cap=40, n_bots=5, n_redirects=3)
    generate(cfg, tmp_path)
    events, report = load_events(tmp_path / "events.csv")
    assert report.n_malformed == 0
    projects = load_project_profiles(tmp_path / "projects.csv")
    users = load_user_profiles(tmp_path / "users.csv")
    kept, filt = filter_window(events, projects, TimeWindow(3))
    assert filt.bot_events == 25 and filt.redirect_events == 3 and filt.outside_window == 0
    rows = assemble_rows(build_groups(kept, cap=70), projects, users)
    truth = pd.read_csv(tmp_path / "truth_rows.csv", dtype={"user_id": str, "project_id": str})
    merged = rows.merge(truth, on=["user_id", "project_id"], suffixes=("", "_t"))
    assert len(merged) == len(rows) == len(truth)
    assert (merged.work == merged.work_t).all() and (merged.group_size == merged.group_size_t).all()
    assert (merged.edit_bytes == merged.edit_bytes_t).all()
    assert np.allclose(rows.groupby("user_id").focus_share.sum(), 1, atol=1e-12)
    assert (rows.effective_size <= rows.group_size + 1e-12).all() and (rows.effective_size >= 1 - 1e-12).all()


def test_mean_work_reproduces_curve():
    curve = {"kind": "power", "c": 10.0, "alpha": 0.28}
    cfg = SynthConfig(n_users=8000, projects_per_user=(2, 4), size_exponent=0.0, size_cap=5,
                      curve=curve, seed=8)
    rows, truth, _ = generate_rows(cfg)
    f = make_curve(curve)
    groups = rows.groupby("project_id").agg(N=("group_size", "first"), w=("work", "mean"))
    stats = groups.groupby("N").w.agg(["mean", "std", "count"])
    assert (stats["count"] >= 1000).all()
    se = stats["std"] / np.sqrt(stats["count"])
    assert (np.abs(stats["mean"] - f(stats.index.to_numpy())) < 3 * se).all()


def test_power_recovery_within_tolerance():
    rows, truth, _ = generate_rows(SynthConfig(n_users=4000, seed=1))
    fit = fit_mean_work(rows)
    checks = truth_check(truth, {"powerlaw": fit.to_dict()})
    assert [c.parameter for c in checks] == ["alpha", "ln_c"]
    assert all(c.passed for c in checks), checks
    assert abs(fit.alpha - 0.28) < 0.02


def test_noiseless_truth_check():
    curve = {"kind": "linear", "intercept": 5.0, "slope": 2.0}
    rows, truth, _ = generate_rows(SynthConfig(n_users=500, curve=curve, sigma=0, sigma_u=0, seed=2))
    fit = fit_random_intercept(rows, "work", ["group_size"])
    out = {"lme": {"coef": fit["group_size"], "std_err": fit.stderr("group_size"), "sigma2_u": fit.sigma2_u}}
    checks = truth_check(truth, out)
    assert checks and all(c.passed and abs(c.planted - c.recovered) < 1e-6 for c in checks)


def test_wrong_plant_flagged():
    rows, truth, _ = generate_rows(SynthConfig(n_users=2000, seed=1))
    fit = fit_mean_work(rows).to_dict()
    fit["alpha"] += 0.1
    checks = truth_check(truth, {"powerlaw": fit})
    assert not next(c for c in checks if c.parameter == "alpha").passed
    with pytest.raises(KeyError):
        truth_check(truth, {})


def test_planted_confound_effect():
    cfg = SynthConfig(n_users=3000, seed=3, curve={"kind": "linear", "intercept": 20, "slope": 1.0},
                      confound_effects={"watchers": 0.5}, sigma_u=0.0)
    rows, _, _ = generate_rows(cfg)
    fit = fit_ols(rows, "work", ["group_size", "watchers"])
    assert abs(fit["watchers"] - 0.5) < 3 * fit.se[2]
    assert abs(fit["group_size"] - 1.0) < 3 * fit.se[1]


def test_calibrated_edit_noise():
    rng = np.random.default_rng(0)
    logs = np.log(rng.integers(1, 100, 5000))
    s = calibrate_edit_noise(0.68, 1.2, logs)
    v = np.var(logs)
    assert 1.44 * v / (1.44 * v + s * s) == pytest.approx(0.68, abs=1e-5)


@pytest.mark.parametrize("bad", [
    dict(n_users=5, size_cap=20), dict(projects_per_user=(3, 2)), dict(sigma=-1),
    dict(confound_effects={"work": 1.0}), dict(curve={"kind": "cubic"}), dict(mode="reddit"),
    dict(timing="bursty"),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_config_json_round_trip(tmp_path):
    cfg = SynthConfig(n_users=100, seed=9, confound_effects={"forks": 0.2})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert SynthConfig.from_json(p) == cfg


def test_curve_kinds():
    pw = make_curve({"kind": "piecewise", "knots": [1, 7, 20], "slopes": [4, 1], "start": 10})
    assert pw(7) == 34 and pw(20) == 47
    tb = make_curve({"kind": "table", "values": {"1": 5, "3": 9}})
    assert tb(2) == 7
    assert make_curve({"kind": "power", "c": math.e, "alpha": 0.5})(4) == pytest.approx(2 * math.e)
