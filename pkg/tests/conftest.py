from datetime import datetime, timezone

import pytest

from collabscale.ingest import ContributionEvent, ProjectProfile, UserProfile

T0 = datetime(2020, 1, 15, tzinfo=timezone.utc)


def ev(user, project, ts=T0, size=None, bot=False):
    return ContributionEvent(user, project, ts, size, bot)


def project(pid, created=T0, **kw):
    return ProjectProfile(pid, created, **kw)


def user(uid, created=datetime(2015, 1, 1, tzinfo=timezone.utc), **kw):
    return UserProfile(uid, created, **kw)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte-Carlo checks")


@pytest.fixture
def t0():
    return T0


# acceptance lines: criterion -> list of (passed, detail); printed once per criterion
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  " + "; ".join(d for _, d in parts))
