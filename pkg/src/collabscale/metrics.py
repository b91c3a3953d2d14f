"""Collaboration groups and the per-group / per-membership features built from them."""

from __future__ import annotations

from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
import pandas as pd

from .ingest import ContributionEvent, ProjectProfile, UserProfile

GROUP_CAPS = {"github": 20, "wikipedia": 70}

# (column, notation) for every membership row; order is the rows.csv layout
ROW_COLUMNS = (
    ("user_id", "u"),
    ("project_id", "P"),
    ("work", "w"),
    ("group_size", "N"),
    ("effective_size", "n"),
    ("group_work", "W"),
    ("focus_share", "c_i"),
    ("aggregate_focus", "F"),
    ("n_projects", "G_s"),
    ("user_work", "W_user"),
    ("max_group", "N_max"),
    ("min_group", "N_min"),
    ("mean_group", "N_bar"),
    ("user_age", "A_u"),
    ("project_age", "A_r"),
    ("watchers", "W_c"),
    ("forks", "F_o"),
    ("followers", "F_l"),
    ("owned_repos", "O_r"),
    ("description_len", "D_sc"),
    ("created_pages", "P_c"),
    ("edit_bytes", "E_s"),
    ("capped", ""),
)
NOTATION = dict(ROW_COLUMNS)

GROUP_COLUMNS = (
    "project_id", "group_size", "group_work", "mean_work", "effective_size",
    "aggregate_focus", "mean_focus", "mean_projects", "watchers", "forks",
    "project_age", "description_len", "capped",
)


@dataclass
class GroupRecord:
    project_id: str
    member_work: dict[str, int]
    member_bytes: dict[str, int] = field(default_factory=dict)
    last_event: datetime | None = None
    cap: int | None = None

    @property
    def N(self) -> int:
        return len(self.member_work)

    @property
    def W(self) -> int:
        return sum(self.member_work.values())

    @property
    def n(self) -> float:
        return effective_group_size(list(self.member_work.values()))

    @property
    def mean_work(self) -> float:
        return self.W / self.N

    @property
    def capped(self) -> bool:
        return self.cap is not None and self.N > self.cap


def build_groups(events: Iterable[ContributionEvent], cap: int | None = 20) -> list[GroupRecord]:
    """One group per project, counting events per member. Oversized groups are flagged via ``cap``."""
    work: dict[str, Counter] = defaultdict(Counter)
    size: dict[str, Counter] = defaultdict(Counter)
    last: dict[str, datetime] = {}
    for ev in events:
        work[ev.project_id][ev.user_id] += 1
        if ev.size_bytes is not None:
            size[ev.project_id][ev.user_id] += ev.size_bytes
        prev = last.get(ev.project_id)
        if prev is None or ev.timestamp > prev:
            last[ev.project_id] = ev.timestamp
    groups = []
    for pid in sorted(work):
        members = work[pid]
        groups.append(GroupRecord(
            project_id=pid,
            member_work={u: members[u] for u in sorted(members)},
            member_bytes={u: size[pid][u] for u in sorted(size[pid])},
            last_event=last[pid],
            cap=cap,
        ))
    return groups


def effective_group_size(member_work: Sequence[float]) -> float:
    """Entropy-based head count ``2**H`` with ``H`` the base-2 entropy of work shares.

    Equal workloads return exactly ``len(member_work)``.
    """
    w = np.asarray(member_work, dtype=float)
    if w.size == 0:
        raise ValueError("effective size of an empty group")
    if np.any(w <= 0):
        raise ValueError("member work must be positive")
    if np.all(w == w[0]):
        return float(w.size)
    f = w / w.sum()
    return float(2.0 ** -(f * np.log2(f)).sum())


def effective_group_sizes(work: np.ndarray, group_index: np.ndarray, n_groups: int | None = None) -> np.ndarray:
    """Vectorized :func:`effective_group_size` over many groups.

    ``work[i]`` belongs to group ``group_index[i]`` (dense ids ``0..n_groups-1``).
    """
    work = np.asarray(work, dtype=float)
    idx = np.asarray(group_index, dtype=np.intp)
    if n_groups is None:
        n_groups = int(idx.max()) + 1 if idx.size else 0
    if np.any(work <= 0):
        raise ValueError("member work must be positive")
    total = np.bincount(idx, weights=work, minlength=n_groups)
    count = np.bincount(idx, minlength=n_groups)
    if np.any(count == 0):
        raise ValueError("empty group in index")
    f = work / total[idx]
    entropy = -np.bincount(idx, weights=f * np.log2(f), minlength=n_groups)
    out = 2.0 ** entropy
    lo = np.full(n_groups, np.inf)
    hi = np.full(n_groups, -np.inf)
    np.minimum.at(lo, idx, work)
    np.maximum.at(hi, idx, work)
    uniform = lo == hi
    out[uniform] = count[uniform]
    return out


def user_totals(groups: Iterable[GroupRecord]) -> dict[str, int]:
    totals: Counter = Counter()
    for g in groups:
        totals.update(g.member_work)
    return dict(totals)


def aggregate_focus(group: GroupRecord, totals: Mapping[str, int]) -> float:
    """Sum over members of the share of their total work spent on this project."""
    focus = 0.0
    for user, w in group.member_work.items():
        total = totals[user]
        assert total >= w > 0, f"user {user} has total work {total} below project work {w}"
        focus += w / total
    return focus


def group_size_distribution(groups: Iterable[GroupRecord]) -> dict[int, int]:
    counts = Counter(g.N for g in groups)
    return dict(sorted(counts.items()))


def _days(later: datetime | None, earlier: datetime | None) -> int:
    if later is None or earlier is None:
        return 0
    return max((later - earlier).days, 0)


def assemble_rows(
    groups: Sequence[GroupRecord],
    projects: Mapping[str, ProjectProfile] | None = None,
    users: Mapping[str, UserProfile] | None = None,
    data_end: datetime | None = None,
) -> pd.DataFrame:
    """Build one row per (user, project) membership with every feature column of ``ROW_COLUMNS``.

    ``data_end`` anchors user ages; it defaults to the latest event across groups.
    Missing profiles leave their columns at 0; how many were missing is kept in
    ``frame.attrs["missing_profiles"]``.
    """
    projects = projects or {}
    users = users or {}
    columns = [c for c, _ in ROW_COLUMNS]
    if not groups:
        frame = pd.DataFrame({c: pd.Series(dtype=object if c in ("user_id", "project_id") else float)
                              for c in columns})
        frame.attrs["missing_profiles"] = {"projects": 0, "users": 0}
        return frame
    if data_end is None:
        data_end = max(g.last_event for g in groups if g.last_event is not None)

    recs = []
    for gi, g in enumerate(groups):
        for u, w in g.member_work.items():
            recs.append((u, g.project_id, gi, w, g.member_bytes.get(u, 0)))
    long = pd.DataFrame(recs, columns=["user_id", "project_id", "gid", "work", "edit_bytes"])

    gid = long["gid"].to_numpy()
    work = long["work"].to_numpy(dtype=float)
    size = np.array([g.N for g in groups])
    long["group_size"] = size[gid]
    long["effective_size"] = effective_group_sizes(work, gid, len(groups))[gid]
    long["group_work"] = np.bincount(gid, weights=work, minlength=len(groups))[gid].astype(np.int64)

    by_user = long.groupby("user_id", sort=False)
    long["user_work"] = by_user["work"].transform("sum")
    long["focus_share"] = long["work"] / long["user_work"]
    long["aggregate_focus"] = np.bincount(
        gid, weights=long["focus_share"].to_numpy(), minlength=len(groups))[gid]
    long["n_projects"] = by_user["project_id"].transform("size")
    long["max_group"] = by_user["group_size"].transform("max")
    long["min_group"] = by_user["group_size"].transform("min")
    long["mean_group"] = by_user["group_size"].transform("mean")

    missing_projects = sum(1 for g in groups if g.project_id not in projects)
    proj_rows = []
    for g in groups:
        p = projects.get(g.project_id)
        proj_rows.append((
            _days(g.last_event, p.created_at) if p else 0,
            p.watchers if p else 0,
            p.forks if p else 0,
            p.description_len if p else 0,
            g.capped,
        ))
    proj = np.array(proj_rows, dtype=np.int64)
    for j, name in enumerate(("project_age", "watchers", "forks", "description_len")):
        long[name] = proj[gid, j]
    long["capped"] = proj[gid, 4].astype(bool)

    uids = long["user_id"].unique()
    missing_users = 0
    user_feats = {}
    for u in uids:
        prof = users.get(u)
        if prof is None:
            missing_users += 1
            user_feats[u] = (0, 0, 0, 0)
        else:
            user_feats[u] = (_days(data_end, prof.account_created_at), prof.followers,
                             prof.owned_repos, prof.created_pages)
    feats = np.array([user_feats[u] for u in long["user_id"]], dtype=np.int64).reshape(-1, 4)
    for j, name in enumerate(("user_age", "followers", "owned_repos", "created_pages")):
        long[name] = feats[:, j]

    frame = long[columns].reset_index(drop=True)
    frame.attrs["missing_profiles"] = {"projects": missing_projects, "users": missing_users}
    return frame


def groups_frame(groups: Sequence[GroupRecord], rows: pd.DataFrame) -> pd.DataFrame:
    """Group-level table (one row per project) for the group-performance regression."""
    if rows.empty:
        return pd.DataFrame(columns=list(GROUP_COLUMNS))
    agg = rows.groupby("project_id", sort=True).agg(
        group_size=("group_size", "first"),
        group_work=("group_work", "first"),
        effective_size=("effective_size", "first"),
        aggregate_focus=("aggregate_focus", "first"),
        mean_projects=("n_projects", "mean"),
        watchers=("watchers", "first"),
        forks=("forks", "first"),
        project_age=("project_age", "first"),
        description_len=("description_len", "first"),
        capped=("capped", "first"),
    )
    agg["mean_work"] = agg["group_work"] / agg["group_size"]
    agg["mean_focus"] = agg["aggregate_focus"] / agg["group_size"]
    agg = agg.reset_index()
    order = [g.project_id for g in groups]
    if set(order) == set(agg["project_id"]):
        agg = agg.set_index("project_id").loc[order].reset_index()
    return agg[list(GROUP_COLUMNS)]
