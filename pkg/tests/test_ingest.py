import json
import math
import random
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabscale.ingest import (
    ContributionEvent, IngestError, MalformedRowsError, TimeWindow, add_months,
    compute_activity_fraction, filter_window, load_bot_list, load_events,
    load_project_profiles, load_user_profiles, parse_timestamp, write_events,
    write_project_profiles, write_user_profiles,
)

from conftest import T0, ev, project, user

HEADER = "user_id,project_id,timestamp,size_bytes,is_bot\n"


def test_three_row_csv(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(HEADER + "u1,p1,2020-01-01T00:00:00Z,10,false\n"
                          "u2,p1,2020-01-02T00:00:00Z,,false\n"
                          "u1,p2,2020-01-03T05:00:00+02:00,3,true\n")
    events, report = load_events(p)
    assert len(events) == 3 and report.n_malformed == 0
    assert events[1].size_bytes is None
    assert events[2].is_bot
    assert events[2].timestamp == datetime(2020, 1, 3, 3, tzinfo=timezone.utc)


def test_bad_timestamp_row_reported(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(HEADER + "u1,p1,2020-01-01T00:00:00Z,,false\n"
                          "u2,p1,not-a-date,,false\n"
                          "u3,p1,2020-01-01T00:00:00Z,,false\n")
    events, report = load_events(p, max_malformed_fraction=0.5)
    assert len(events) == 2
    assert report.n_malformed == 1 and report.malformed[0][0] == 2


def test_malformed_above_threshold_is_fatal(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(HEADER + "u1,p1,2020-01-01T00:00:00Z,,false\n" + "u2,p1,not-a-date,,false\n")
    with pytest.raises(MalformedRowsError) as err:
        load_events(p)
    assert err.value.rows[0][0] == 2


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_events(tmp_path / "nope.csv")


@pytest.mark.parametrize("bad", ["2020-01-01T00:00:00", "", "2020-13-01T00:00:00Z"])
def test_naive_or_invalid_timestamps_rejected(bad):
    with pytest.raises(ValueError):
        parse_timestamp(bad)


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_round_trip_1000_rows(tmp_path, fmt):
    rng = random.Random(3)
    events = [
        ContributionEvent(f"u{rng.randrange(50)}", f"p{rng.randrange(20)}",
                          T0 + timedelta(seconds=rng.randrange(10**7)),
                          rng.choice([None, rng.randrange(10**6)]), rng.random() < 0.1)
        for _ in range(1000)
    ]
    path = tmp_path / f"events.{fmt}"
    write_events(events, path)
    back, report = load_events(path)
    assert report.n_malformed == 0
    assert back == events


def test_profiles_round_trip(tmp_path):
    projects = [project("p1", watchers=3, forks=1, description_len=10), project("p2", is_redirect=True)]
    users = [user("u1", followers=4, owned_repos=2, created_pages=1)]
    write_project_profiles(projects, tmp_path / "p.csv")
    write_user_profiles(users, tmp_path / "u.csv")
    assert list(load_project_profiles(tmp_path / "p.csv").values()) == projects
    assert list(load_user_profiles(tmp_path / "u.csv").values()) == users


def test_bot_list(tmp_path):
    p = tmp_path / "bots.txt"
    p.write_text("# bots\nbot1\n\n  bot2 \n")
    assert load_bot_list(p) == {"bot1", "bot2"}


def test_window_boundaries():
    profiles = {"p": project("p")}
    events = [ev("a", "p", T0), ev("b", "p", add_months(T0, 3)),
              ev("c", "p", add_months(T0, 3) - timedelta(seconds=1)), ev("d", "p", T0 - timedelta(seconds=1))]
    kept, report = filter_window(events, profiles, TimeWindow(3))
    assert [e.user_id for e in kept] == ["a", "c"]
    assert report.outside_window == 2


def test_month_clamping():
    start = datetime(2020, 1, 31, tzinfo=timezone.utc)
    assert add_months(start, 1) == datetime(2020, 2, 29, tzinfo=timezone.utc)


@pytest.mark.parametrize("months", [0, -1, 1.5])
def test_window_rejects_bad_length(months):
    with pytest.raises(ValueError):
        TimeWindow(months)


def test_exclusions_and_unknown_projects():
    profiles = {"p": project("p"), "r": project("r", is_redirect=True)}
    events = [ev("a", "p"), ev("bot", "p"), ev("x", "p", bot=True), ev("a", "r"), ev("a", "zzz")]
    kept, report = filter_window(events, profiles, TimeWindow(3), bot_ids={"bot"})
    assert [e.user_id for e in kept] == ["a"]
    assert (report.bot_events, report.redirect_events, report.unknown_project_events) == (2, 1, 1)
    with pytest.raises(IngestError):
        filter_window(events, profiles, TimeWindow(3), on_unknown="fail")


def _random_log(seed, n=400):
    rng = random.Random(seed)
    profiles = {f"p{i}": project(f"p{i}", T0 + timedelta(days=rng.randrange(400)),
                                 is_redirect=rng.random() < 0.1) for i in range(15)}
    events = []
    for _ in range(n):
        pid = f"p{rng.randrange(16)}"  # p15 has no profile
        base = profiles[pid].created_at if pid in profiles else T0
        events.append(ev(f"u{rng.randrange(30)}", pid, base + timedelta(days=rng.uniform(-20, 200)),
                         bot=rng.random() < 0.05))
    return events, profiles


@pytest.mark.parametrize("seed", range(5))
def test_window_matches_exhaustive_scan(seed):
    events, profiles = _random_log(seed)
    kept, _ = filter_window(events, profiles, TimeWindow(3))
    expected = []
    for e in events:
        p = profiles.get(e.project_id)
        if e.is_bot or p is None or p.is_redirect:
            continue
        m = p.created_at.month - 1 + 3
        end = p.created_at.replace(year=p.created_at.year + m // 12, month=m % 12 + 1)
        if p.created_at <= e.timestamp < end:
            expected.append(e)
    assert kept == expected


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.integers(0, 12))
def test_window_monotone(seed, t1, extra):
    events, profiles = _random_log(seed, 100)
    small, _ = filter_window(events, profiles, TimeWindow(t1))
    large, _ = filter_window(events, profiles, TimeWindow(t1 + extra))
    assert set(small) <= set(large)
    assert not any(e.is_bot or profiles[e.project_id].is_redirect for e in large)


def test_activity_all_at_creation():
    profiles = {"p": project("p"), "q": project("q", T0 + timedelta(days=3))}
    events = [ev("a", "p", T0), ev("b", "q", T0 + timedelta(days=3))]
    fr = compute_activity_fraction(events, profiles, [0, 1, 6, math.inf])
    assert set(fr.values()) == {1.0}


def test_activity_horizon_zero():
    profiles = {"p": project("p")}
    events = [ev("a", "p", T0 + timedelta(hours=1))]
    assert compute_activity_fraction(events, profiles, [0])[0] == 0.0


def test_activity_hand_count():
    profiles = {"p": project("p")}
    days = [0, 5, 20, 31, 40, 59, 70, 100, 200, 400]
    events = [ev("a", "p", T0 + timedelta(days=d)) for d in days]
    fr = compute_activity_fraction(events, profiles, [0, 1, 2, 3, 12, math.inf])
    # T0 is Jan 15: +1 month = Feb 15 (31 days), +2 = Mar 15 (60), +3 = Apr 15 (91), +12 = 366 days
    assert fr == {0: 0.1, 1: 0.4, 2: 0.6, 3: 0.7, 12: 0.9, math.inf: 1.0}


def test_activity_empty():
    with pytest.raises(IngestError):
        compute_activity_fraction([], {}, [1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.randoms())
def test_activity_order_invariant(seed, rnd):
    events, profiles = _random_log(seed, 80)
    a = compute_activity_fraction(events, profiles, [0, 1, 2, 3, 6])
    shuffled = list(events)
    rnd.shuffle(shuffled)
    assert compute_activity_fraction(shuffled, profiles, [0, 1, 2, 3, 6]) == a
