"""Behavior-log ingestion, positive-interaction rules, filtering, splits and synthetic data."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataIOError,
    EmptyDatasetError,
    InvalidConfigError,
    MalformedPublishingError,
    MalformedRecordError,
)
from .graph import TripartiteGraph, natural_key, read_edge_list, read_remap, write_edge_list, write_remap

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")

VIDEO_FLAGS = ("comment_post", "comment_read", "like", "share")
VLOGGER_FLAGS = ("follow", "homepage_enter")


@dataclass(frozen=True)
class RawBehaviorRecord:
    user: str
    video: str
    vlogger: str
    timestamp: int
    comment_post: bool = False
    comment_read: bool = False
    like: bool = False
    share: bool = False
    follow: bool = False
    homepage_enter: bool = False
    watch_time: float = 0.0
    play_progress: float = 0.0

    def __post_init__(self):
        if self.watch_time < 0 or self.play_progress < 0:
            raise MalformedRecordError(
                f"negative watch_time/play_progress for ({self.user}, {self.video})"
            )


RAW_COLUMNS = tuple(f.name for f in fields(RawBehaviorRecord))
_RAW_HEADER = ("user_id", "video_id", "vlogger_id") + RAW_COLUMNS[3:]
_REQUIRED = ("user_id", "video_id", "vlogger_id", "timestamp")


@dataclass(frozen=True)
class PositiveRuleConfig:
    progress_threshold: float = 1.5
    time_threshold_secs: float = 60.0
    min_user_interactions: int = 5
    min_video_interactions: int = 5
    min_vlogger_videos: int = 3
    uvlogger_min_videos: int = 2
    uvlogger_min_interactions: int = 5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise InvalidConfigError(f"{f.name} must be positive")

    @classmethod
    def wechat(cls) -> "PositiveRuleConfig":
        return cls()

    @classmethod
    def takatak(cls) -> "PositiveRuleConfig":
        return cls(progress_threshold=1.8, time_threshold_secs=15.0)


# --- raw log I/O ------------------------------------------------------------


def _parse_bool(text: str, where: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("", "0", "false", "no"):
        return False
    raise MalformedRecordError(f"{where}: cannot parse boolean {text!r}")


def read_raw_log(path: str | Path) -> list[RawBehaviorRecord]:
    """Read a tab-separated behavior log with a header row; unknown columns are ignored."""
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    with fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: raw log is empty")
        missing = [c for c in _REQUIRED if c not in header]
        if missing:
            raise MalformedRecordError(f"{path}:1: header lacks columns {missing}")
        col = {name: i for i, name in enumerate(header)}
        records = []
        for lineno, row in enumerate(reader, 2):
            if not row or row == [""]:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise MalformedRecordError(f"{where}: expected {len(header)} fields, found {len(row)}")
            try:
                kw = {
                    "user": row[col["user_id"]],
                    "video": row[col["video_id"]],
                    "vlogger": row[col["vlogger_id"]],
                    "timestamp": int(row[col["timestamp"]]),
                }
                for name in VIDEO_FLAGS + VLOGGER_FLAGS:
                    if name in col:
                        kw[name] = _parse_bool(row[col[name]], where)
                for name in ("watch_time", "play_progress"):
                    if name in col and row[col[name]] != "":
                        kw[name] = float(row[col[name]])
            except ValueError as exc:
                raise MalformedRecordError(f"{where}: {exc}") from exc
            if not (kw["user"] and kw["video"] and kw["vlogger"]):
                raise MalformedRecordError(f"{where}: empty id field")
            try:
                records.append(RawBehaviorRecord(**kw))
            except MalformedRecordError as exc:
                raise MalformedRecordError(f"{where}: {exc}") from exc
    return records


def write_raw_log(path: str | Path, records: Iterable[RawBehaviorRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(_RAW_HEADER) + "\n")
        for r in records:
            vals = []
            for name in RAW_COLUMNS:
                v = getattr(r, name)
                vals.append(str(int(v)) if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
            fh.write("\t".join(vals) + "\n")


# --- positive rules and filtering -------------------------------------------


def is_video_positive(r: RawBehaviorRecord, rules: PositiveRuleConfig) -> bool:
    return (
        any(getattr(r, f) for f in VIDEO_FLAGS)
        or r.play_progress > rules.progress_threshold
        or r.watch_time > rules.time_threshold_secs
    )


def derive_video_positives(
    records: Sequence[RawBehaviorRecord], rules: PositiveRuleConfig
) -> list[tuple[str, str, int]]:
    """(user, video, earliest positive timestamp), in order of first positive occurrence."""
    earliest: dict[tuple[str, str], int] = {}
    for r in records:
        if not is_video_positive(r, rules):
            continue
        key = (r.user, r.video)
        if key not in earliest or r.timestamp < earliest[key]:
            earliest[key] = r.timestamp
    return [(u, v, t) for (u, v), t in earliest.items()]


def derive_publishing(records: Sequence[RawBehaviorRecord]) -> dict[str, str]:
    pub: dict[str, str] = {}
    for r in records:
        seen = pub.setdefault(r.video, r.vlogger)
        if seen != r.vlogger:
            raise MalformedPublishingError(
                f"video {r.video} attributed to vloggers {seen} and {r.vlogger}"
            )
    return pub


def filter_graph(
    positives: Sequence[tuple[str, str, int]], publishing: dict[str, str], rules: PositiveRuleConfig
) -> tuple[list[tuple[str, str, int]], dict[str, str]]:
    """Drop sparse users, videos and vloggers repeatedly until nothing changes."""
    pos = list(positives)
    if not pos:
        raise EmptyDatasetError("no positive user-video interactions")
    missing = {v for _, v, _ in pos} - publishing.keys()
    if missing:
        raise MalformedPublishingError(f"video {sorted(missing)[0]} has no publisher")
    while True:
        users = Counter(u for u, _, _ in pos)
        videos = Counter(v for _, v, _ in pos)
        per_vlogger = Counter(publishing[v] for v in videos)
        weak_vloggers = {p for p, n in per_vlogger.items() if n < rules.min_vlogger_videos}
        kept = [
            (u, v, t)
            for u, v, t in pos
            if users[u] >= rules.min_user_interactions
            and videos[v] >= rules.min_video_interactions
            and publishing[v] not in weak_vloggers
        ]
        if len(kept) == len(pos):
            break
        pos = kept
        if not pos:
            raise EmptyDatasetError("filtering removed every interaction")
    surviving = {v for _, v, _ in pos}
    return pos, {v: p for v, p in publishing.items() if v in surviving}


def derive_vlogger_positives(
    records: Sequence[RawBehaviorRecord],
    video_positives: Sequence[tuple[str, str, int]],
    rules: PositiveRuleConfig,
    publishing: dict[str, str] | None = None,
) -> list[tuple[str, str]]:
    """User-vlogger positives over the users and vloggers of the filtered video graph."""
    if publishing is None:
        publishing = derive_publishing(records)
    users = {u for u, _, _ in video_positives}
    vloggers = {publishing[v] for _, v, _ in video_positives}
    pairs: set[tuple[str, str]] = set()
    for r in records:
        if (r.follow or r.homepage_enter) and r.user in users and r.vlogger in vloggers:
            pairs.add((r.user, r.vlogger))
    distinct = Counter((u, publishing[v]) for u, v in {(u, v) for u, v, _ in video_positives})
    pairs.update(k for k, n in distinct.items() if n > rules.uvlogger_min_videos)
    while True:
        ucount = Counter(u for u, _ in pairs)
        pcount = Counter(p for _, p in pairs)
        kept = {
            (u, p)
            for u, p in pairs
            if ucount[u] >= rules.uvlogger_min_interactions and pcount[p] >= rules.uvlogger_min_interactions
        }
        if len(kept) == len(pairs):
            break
        pairs = kept
    return sorted(pairs, key=lambda e: (natural_key(e[0]), natural_key(e[1])))


def leave_one_out_split(users: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    """Split codes per interaction: each user's last goes to test, the one before to validation.

    Ties keep input order. Users with fewer than three interactions keep all in train.
    """
    users = np.asarray(users)
    order = np.lexsort((np.arange(len(users)), np.asarray(timestamps), users))
    split = np.full(len(users), TRAIN, dtype=np.int8)
    start = 0
    while start < len(order):
        end = start
        while end < len(order) and users[order[end]] == users[order[start]]:
            end += 1
        if end - start >= 3:
            split[order[end - 1]] = TEST
            split[order[end - 2]] = VAL
        start = end
    return split


# --- dataset ----------------------------------------------------------------


@dataclass
class Dataset:
    """Dense-indexed interactions with a per-interaction split label.

    ``uv`` rows are (user, video) sorted by user, then chronologically.
    """

    user_ids: list[str]
    video_ids: list[str]
    vlogger_ids: list[str]
    uv: np.ndarray
    timestamps: np.ndarray
    split: np.ndarray
    up: np.ndarray
    publisher_of: np.ndarray
    _graph: TripartiteGraph | None = field(default=None, repr=False, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_videos(self) -> int:
        return len(self.video_ids)

    @property
    def n_vloggers(self) -> int:
        return len(self.vlogger_ids)

    def train_graph(self) -> TripartiteGraph:
        """Graph over training user-video edges plus all follow and publishing edges."""
        if self._graph is None:
            pv = np.column_stack([self.publisher_of, np.arange(self.n_videos)])
            self._graph = TripartiteGraph.from_indices(
                self.n_users,
                self.n_videos,
                self.n_vloggers,
                self.uv[self.split == TRAIN],
                self.up,
                pv,
                self.user_ids,
                self.video_ids,
                self.vlogger_ids,
            )
        return self._graph

    def pairs(self, split: int) -> np.ndarray:
        return self.uv[self.split == split]

    def targets(self, split: int) -> dict[int, int]:
        return {int(u): int(v) for u, v in self.pairs(split)}

    def exclusions(self, split: int) -> list[np.ndarray]:
        """Per-user watched videos hidden from ranking when evaluating ``split``."""
        mask = self.split == TRAIN
        if split == TEST:
            mask = mask | (self.split == VAL)
        seen = self.uv[mask]
        order = np.argsort(seen[:, 0], kind="stable")
        seen = seen[order]
        bounds = np.searchsorted(seen[:, 0], np.arange(self.n_users + 1))
        return [np.sort(seen[bounds[i]:bounds[i + 1], 1]) for i in range(self.n_users)]


def assemble_dataset(
    positives: Sequence[tuple[str, str, int]],
    publishing: dict[str, str],
    vlogger_positives: Sequence[tuple[str, str]],
) -> Dataset:
    user_ids = sorted({u for u, _, _ in positives}, key=natural_key)
    video_ids = sorted(publishing, key=natural_key)
    vlogger_ids = sorted(set(publishing.values()), key=natural_key)
    ui = {r: i for i, r in enumerate(user_ids)}
    vi = {r: i for i, r in enumerate(video_ids)}
    pi = {r: i for i, r in enumerate(vlogger_ids)}
    uv = np.array([(ui[u], vi[v]) for u, v, _ in positives], dtype=np.int64).reshape(-1, 2)
    ts = np.array([t for _, _, t in positives], dtype=np.int64)
    order = np.lexsort((np.arange(len(uv)), ts, uv[:, 0]))
    uv, ts = uv[order], ts[order]
    up = np.array([(ui[u], pi[p]) for u, p in vlogger_positives], dtype=np.int64).reshape(-1, 2)
    publisher_of = np.array([pi[publishing[v]] for v in video_ids], dtype=np.int64)
    return Dataset(user_ids, video_ids, vlogger_ids, uv, ts, leave_one_out_split(uv[:, 0], ts), up, publisher_of)


def preprocess(records: Sequence[RawBehaviorRecord], rules: PositiveRuleConfig) -> Dataset:
    if not records:
        raise EmptyDatasetError("raw log has no records")
    publishing = derive_publishing(records)
    positives, publishing = filter_graph(derive_video_positives(records, rules), publishing, rules)
    vlogger_pos = derive_vlogger_positives(records, positives, rules, publishing)
    return assemble_dataset(positives, publishing, vlogger_pos)


# Processed dataset directory layout.
USERS_MAP, VIDEOS_MAP, VLOGGERS_MAP = "users.map", "videos.map", "vloggers.map"
USER_VIDEO, USER_VLOGGER, VLOGGER_VIDEO, SPLIT_FILE = (
    "user_video.tsv",
    "user_vlogger.tsv",
    "vlogger_video.tsv",
    "split.tsv",
)


def write_dataset(directory: str | Path, ds: Dataset) -> None:
    """Write remap tables, training edge lists and the split file.

    ``user_video.tsv`` only carries training edges; held-out pairs live in
    ``split.tsv`` (rows per user in chronological order).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_remap(d / USERS_MAP, ds.user_ids)
    write_remap(d / VIDEOS_MAP, ds.video_ids)
    write_remap(d / VLOGGERS_MAP, ds.vlogger_ids)
    u, v, p = ds.user_ids, ds.video_ids, ds.vlogger_ids
    write_edge_list(d / USER_VIDEO, ((u[a], v[b]) for a, b in ds.pairs(TRAIN)))
    write_edge_list(d / USER_VLOGGER, ((u[a], p[b]) for a, b in ds.up))
    write_edge_list(d / VLOGGER_VIDEO, ((p[ds.publisher_of[i]], v[i]) for i in range(ds.n_videos)))
    with open(d / SPLIT_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for (a, b), s in zip(ds.uv, ds.split):
            fh.write(f"{u[a]}\t{v[b]}\t{SPLIT_NAMES[s]}\n")


def read_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise DataIOError(f"{d}: processed dataset directory not found")
    user_ids = read_remap(d / USERS_MAP)
    video_ids = read_remap(d / VIDEOS_MAP)
    vlogger_ids = read_remap(d / VLOGGERS_MAP)
    ui = {r: i for i, r in enumerate(user_ids)}
    vi = {r: i for i, r in enumerate(video_ids)}
    pi = {r: i for i, r in enumerate(vlogger_ids)}
    try:
        publisher_of = np.full(len(video_ids), -1, dtype=np.int64)
        for p, v in read_edge_list(d / VLOGGER_VIDEO):
            publisher_of[vi[v]] = pi[p]
        up = np.array([(ui[a], pi[b]) for a, b in read_edge_list(d / USER_VLOGGER)], dtype=np.int64)
        rows, split = [], []
        with open(d / SPLIT_FILE, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or parts[2] not in SPLIT_NAMES:
                    raise DataIOError(f"{d / SPLIT_FILE}:{lineno}: malformed split row")
                rows.append((ui[parts[0]], vi[parts[1]]))
                split.append(SPLIT_NAMES.index(parts[2]))
    except KeyError as exc:
        raise DataIOError(f"{d}: id {exc} missing from remap tables") from exc
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    if (publisher_of < 0).any():
        raise MalformedPublishingError("a video in the remap table has no publisher")
    uv = np.array(rows, dtype=np.int64).reshape(-1, 2)
    ts = np.arange(len(uv), dtype=np.int64)
    return Dataset(
        user_ids, video_ids, vlogger_ids, uv, ts, np.array(split, dtype=np.int8), up.reshape(-1, 2), publisher_of
    )


# --- synthetic planted data ------------------------------------------------------


def generate_synthetic_records(
    n_users: int,
    n_vloggers: int,
    videos_per_vlogger: int,
    affinity: float,
    noise: float,
    interactions_per_user: int,
    seed: int,
    preferred_per_user: int = 5,
    preference_concentration: float | None = None,
) -> list[RawBehaviorRecord]:
    """Behavior records with planted vlogger preferences.

    Each user gets ``preferred_per_user`` vloggers. An interaction picks a
    preferred vlogger's video with probability ``affinity``, otherwise a
    uniform video from the catalog. ``noise`` is the chance that an
    interaction also carries a follow flag for the video's vlogger.
    With ``preference_concentration`` set, the preferred vlogger is drawn
    from per-user Dirichlet weights instead of uniformly.
    Video ``k`` is published by vlogger ``k // videos_per_vlogger``.
    """
    if min(n_users, n_vloggers, videos_per_vlogger, interactions_per_user) <= 0:
        raise InvalidConfigError("synthetic sizes must be positive")
    if not 0 < affinity <= 1 or not 0 <= noise <= 1:
        raise InvalidConfigError("affinity must lie in (0, 1] and noise in [0, 1]")
    preferred_per_user = min(preferred_per_user, n_vloggers)
    rng = np.random.default_rng(seed)
    n_videos = n_vloggers * videos_per_vlogger
    records = []
    t = 0
    for u in range(n_users):
        preferred = rng.choice(n_vloggers, size=preferred_per_user, replace=False)
        weights = None
        if preference_concentration is not None:
            weights = rng.dirichlet(np.full(preferred_per_user, preference_concentration))
        for _ in range(interactions_per_user):
            if rng.random() < affinity:
                if weights is None:
                    p = int(preferred[rng.integers(preferred_per_user)])
                else:
                    p = int(preferred[rng.choice(preferred_per_user, p=weights)])
                v = p * videos_per_vlogger + int(rng.integers(videos_per_vlogger))
            else:
                v = int(rng.integers(n_videos))
                p = v // videos_per_vlogger
            follow = bool(rng.random() < noise)
            records.append(
                RawBehaviorRecord(
                    user=f"u{u}", video=f"v{v}", vlogger=f"p{p}", timestamp=t, like=True, follow=follow
                )
            )
            t += 1
    return records


def generate_synthetic(
    n_users: int,
    n_vloggers: int,
    videos_per_vlogger: int,
    affinity: float,
    noise: float,
    interactions_per_user: int,
    seed: int,
    preferred_per_user: int = 5,
    preference_concentration: float | None = None,
    rules: PositiveRuleConfig | None = None,
) -> Dataset:
    records = generate_synthetic_records(
        n_users, n_vloggers, videos_per_vlogger, affinity, noise, interactions_per_user, seed,
        preferred_per_user, preference_concentration,
    )
    return preprocess(records, rules or PositiveRuleConfig())
