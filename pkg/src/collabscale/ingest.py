"""Event-log and profile ingestion, exclusion rules and project-relative windows."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from dateutil.relativedelta import relativedelta

log = logging.getLogger(__name__)

EVENT_FIELDS = ("user_id", "project_id", "timestamp", "size_bytes", "is_bot")
PROJECT_FIELDS = ("project_id", "created_at", "watchers", "forks", "description_len", "is_redirect")
USER_FIELDS = ("user_id", "account_created_at", "followers", "owned_repos", "created_pages")

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class IngestError(ValueError):
    pass


class MalformedRowsError(IngestError):
    def __init__(self, path, rows: list[tuple[int, str]], total: int):
        self.rows = rows
        shown = ", ".join(str(n) for n, _ in rows[:20])
        more = "" if len(rows) <= 20 else f" (+{len(rows) - 20} more)"
        super().__init__(
            f"{path}: {len(rows)} of {total} rows malformed; rows {shown}{more}"
        )


@dataclass(frozen=True, slots=True)
class ContributionEvent:
    user_id: str
    project_id: str
    timestamp: datetime
    size_bytes: int | None = None
    is_bot: bool = False


@dataclass(frozen=True, slots=True)
class ProjectProfile:
    project_id: str
    created_at: datetime
    watchers: int = 0
    forks: int = 0
    description_len: int = 0
    is_redirect: bool = False


@dataclass(frozen=True, slots=True)
class UserProfile:
    user_id: str
    account_created_at: datetime
    followers: int = 0
    owned_repos: int = 0
    created_pages: int = 0


@dataclass(frozen=True)
class TimeWindow:
    months: int = 3

    def __post_init__(self):
        if int(self.months) != self.months or self.months < 1:
            raise ValueError(f"window must be a whole number of months >= 1, got {self.months}")

    def end(self, start: datetime) -> datetime:
        return add_months(start, self.months)


@dataclass
class LoadReport:
    total_rows: int = 0
    malformed: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_malformed(self) -> int:
        return len(self.malformed)


@dataclass
class FilterReport:
    input_events: int = 0
    bot_events: int = 0
    redirect_events: int = 0
    unknown_project_events: int = 0
    outside_window: int = 0
    retained: int = 0


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 instant; offsets are normalized to UTC, naive values are rejected."""
    text = text.strip()
    try:
        return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError:
        pass
    value = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if value.tzinfo is None:
        raise ValueError(f"timestamp without UTC designator: {text!r}")
    return value.astimezone(timezone.utc)


def format_timestamp(value: datetime) -> str:
    return value.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def add_months(start: datetime, months: int) -> datetime:
    # relativedelta clamps the day of month (Jan 31 + 1 month -> Feb 28/29)
    return start + relativedelta(months=months)


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if value is None:
        return False
    text = str(value).strip().lower()
    if text in ("", "0", "false", "f", "no", "n"):
        return False
    if text in ("1", "true", "t", "yes", "y"):
        return True
    raise ValueError(f"not a boolean: {value!r}")


def _parse_count(value, name: str, optional: bool = False) -> int | None:
    if value is None or (isinstance(value, str) and value.strip() == ""):
        if optional:
            return None
        raise ValueError(f"missing {name}")
    if isinstance(value, bool):
        raise ValueError(f"{name} must be an integer")
    number = float(value) if isinstance(value, str) else value
    if number != int(number):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    number = int(number)
    if number < 0:
        raise ValueError(f"{name} must be >= 0, got {number}")
    return number


def _event_from_record(rec: dict) -> ContributionEvent:
    user_id = str(rec.get("user_id") or "").strip()
    project_id = str(rec.get("project_id") or "").strip()
    if not user_id or not project_id:
        raise ValueError("empty user_id or project_id")
    ts = rec.get("timestamp")
    if not isinstance(ts, str):
        raise ValueError(f"bad timestamp {ts!r}")
    return ContributionEvent(
        user_id=user_id,
        project_id=project_id,
        timestamp=parse_timestamp(ts),
        size_bytes=_parse_count(rec.get("size_bytes"), "size_bytes", optional=True),
        is_bot=_parse_bool(rec.get("is_bot")),
    )


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "jsonl"):
            raise IngestError(f"unknown format {fmt!r}")
        return fmt
    return "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv"


def _iter_records(path: Path, fmt: str):
    """Yield (row_number, record-or-exception); row numbers are 1-based data rows."""
    if fmt == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in ("user_id", "project_id", "timestamp") if c not in (reader.fieldnames or [])]
            if missing:
                raise IngestError(f"{path}: header lacks columns {missing}")
            for i, rec in enumerate(reader, start=1):
                if None in rec:
                    yield i, ValueError("too many fields")
                else:
                    yield i, rec
    else:
        with path.open(encoding="utf-8") as fh:
            i = 0
            for line in fh:
                if not line.strip():
                    continue
                i += 1
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield i, exc
                    continue
                yield i, rec if isinstance(rec, dict) else ValueError("not an object")


def load_events(
    path, fmt: str | None = None, max_malformed_fraction: float = 0.01
) -> tuple[list[ContributionEvent], LoadReport]:
    """Read an event log.

    Malformed rows are skipped and listed in the report. More than
    ``max_malformed_fraction`` of them raises :class:`MalformedRowsError`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"event file not found: {path}")
    fmt = _infer_format(path, fmt)
    events: list[ContributionEvent] = []
    report = LoadReport()
    for row, rec in _iter_records(path, fmt):
        report.total_rows += 1
        if isinstance(rec, Exception):
            report.malformed.append((row, str(rec)))
            continue
        try:
            events.append(_event_from_record(rec))
        except (ValueError, TypeError) as exc:
            report.malformed.append((row, str(exc)))
    if report.malformed:
        log.warning("%s: %d malformed rows skipped", path, report.n_malformed)
        if report.n_malformed > max_malformed_fraction * report.total_rows:
            raise MalformedRowsError(path, report.malformed, report.total_rows)
    return events, report


def _event_record(ev: ContributionEvent) -> dict:
    return {
        "user_id": ev.user_id,
        "project_id": ev.project_id,
        "timestamp": format_timestamp(ev.timestamp),
        "size_bytes": ev.size_bytes,
        "is_bot": ev.is_bot,
    }


def write_events(events: Iterable[ContributionEvent], path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(EVENT_FIELDS)
            for ev in events:
                rec = _event_record(ev)
                writer.writerow([
                    rec["user_id"], rec["project_id"], rec["timestamp"],
                    "" if rec["size_bytes"] is None else rec["size_bytes"],
                    "true" if rec["is_bot"] else "false",
                ])
        else:
            for ev in events:
                fh.write(json.dumps(_event_record(ev), sort_keys=False) + "\n")


def _read_csv(path: Path, required: Sequence[str]) -> list[dict]:
    if not path.is_file():
        raise FileNotFoundError(f"profile file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"{path}: header lacks columns {missing}")
        return list(reader)


def load_project_profiles(path) -> dict[str, ProjectProfile]:
    profiles = {}
    for i, rec in enumerate(_read_csv(Path(path), ("project_id", "created_at")), start=1):
        try:
            prof = ProjectProfile(
                project_id=rec["project_id"].strip(),
                created_at=parse_timestamp(rec["created_at"]),
                watchers=_parse_count(rec.get("watchers") or 0, "watchers"),
                forks=_parse_count(rec.get("forks") or 0, "forks"),
                description_len=_parse_count(rec.get("description_len") or 0, "description_len"),
                is_redirect=_parse_bool(rec.get("is_redirect")),
            )
        except ValueError as exc:
            raise IngestError(f"{path}: row {i}: {exc}") from None
        profiles[prof.project_id] = prof
    return profiles


def load_user_profiles(path) -> dict[str, UserProfile]:
    profiles = {}
    for i, rec in enumerate(_read_csv(Path(path), ("user_id", "account_created_at")), start=1):
        try:
            prof = UserProfile(
                user_id=rec["user_id"].strip(),
                account_created_at=parse_timestamp(rec["account_created_at"]),
                followers=_parse_count(rec.get("followers") or 0, "followers"),
                owned_repos=_parse_count(rec.get("owned_repos") or 0, "owned_repos"),
                created_pages=_parse_count(rec.get("created_pages") or 0, "created_pages"),
            )
        except ValueError as exc:
            raise IngestError(f"{path}: row {i}: {exc}") from None
        profiles[prof.user_id] = prof
    return profiles


def write_project_profiles(profiles: Iterable[ProjectProfile], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROJECT_FIELDS)
        for p in profiles:
            writer.writerow([p.project_id, format_timestamp(p.created_at), p.watchers, p.forks,
                             p.description_len, "true" if p.is_redirect else "false"])


def write_user_profiles(profiles: Iterable[UserProfile], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(USER_FIELDS)
        for u in profiles:
            writer.writerow([u.user_id, format_timestamp(u.account_created_at), u.followers,
                             u.owned_repos, u.created_pages])


def load_bot_list(path) -> frozenset[str]:
    """One user id per line; blank lines and ``#`` comments ignored."""
    with Path(path).open(encoding="utf-8") as fh:
        return frozenset(
            line.strip() for line in fh if line.strip() and not line.lstrip().startswith("#")
        )


def filter_window(
    events: Iterable[ContributionEvent],
    profiles: dict[str, ProjectProfile],
    window: TimeWindow,
    bot_ids: Iterable[str] = (),
    on_unknown: str = "drop",
) -> tuple[list[ContributionEvent], FilterReport]:
    """Keep events inside ``[created_at, created_at + t months)`` of their project.

    Bot events (flagged or listed in ``bot_ids``) and events on redirect
    projects are removed first. Events on projects without a profile are
    dropped and counted, or raise when ``on_unknown="fail"``.
    """
    if on_unknown not in ("drop", "fail"):
        raise ValueError(f"on_unknown must be 'drop' or 'fail', got {on_unknown!r}")
    bots = frozenset(bot_ids)
    report = FilterReport()
    ends: dict[str, datetime] = {}
    kept = []
    for ev in events:
        report.input_events += 1
        if ev.is_bot or ev.user_id in bots:
            report.bot_events += 1
            continue
        prof = profiles.get(ev.project_id)
        if prof is None:
            if on_unknown == "fail":
                raise IngestError(f"event references unknown project {ev.project_id!r}")
            report.unknown_project_events += 1
            continue
        if prof.is_redirect:
            report.redirect_events += 1
            continue
        end = ends.get(ev.project_id)
        if end is None:
            end = ends[ev.project_id] = window.end(prof.created_at)
        if prof.created_at <= ev.timestamp < end:
            kept.append(ev)
        else:
            report.outside_window += 1
    report.retained = len(kept)
    if report.unknown_project_events:
        log.warning("dropped %d events on unknown projects", report.unknown_project_events)
    return kept, report


def compute_activity_fraction(
    events: Iterable[ContributionEvent],
    profiles: dict[str, ProjectProfile],
    horizons: Sequence[float],
) -> dict[float, float]:
    """Cumulative share of events made within each horizon (in months) of project creation.

    A horizon of ``math.inf`` always yields 1. Events on unknown or redirect
    projects and bot events are ignored.
    """
    offsets = []
    for ev in events:
        prof = profiles.get(ev.project_id)
        if ev.is_bot or prof is None or prof.is_redirect:
            continue
        offsets.append((prof.created_at, ev.timestamp))
    if not offsets:
        raise IngestError("no events")
    total = len(offsets)
    out = {}
    for h in horizons:
        if h < 0:
            raise ValueError(f"negative horizon {h}")
        if math.isinf(h):
            out[h] = 1.0
            continue
        if int(h) != h:
            raise ValueError(f"horizon must be whole months, got {h}")
        delta = relativedelta(months=int(h))
        cutoffs: dict[datetime, datetime] = {}
        inside = 0
        for created, ts in offsets:
            cut = cutoffs.get(created)
            if cut is None:
                cut = cutoffs[created] = created + delta
            inside += ts <= cut
        out[h] = inside / total
    return out
