"""User-video-vlogger graph, meta-path walk sampling and augmented neighborhoods."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataIOError,
    EmptyGraphError,
    InconsistencyError,
    InvalidConfigError,
    MalformedPublishingError,
)


class NodeKind(str, enum.Enum):
    USER = "user"
    VIDEO = "video"
    VLOGGER = "vlogger"


@dataclass(frozen=True)
class NodeId:
    kind: NodeKind
    index: int


def natural_key(raw: str):
    return (0, int(raw), "") if raw.isdigit() else (1, 0, raw)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _unique_pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(arr) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


def _adjacency(src: np.ndarray, dst: np.ndarray, n: int) -> tuple[np.ndarray, ...]:
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    bounds = np.searchsorted(src, np.arange(n + 1))
    return tuple(_readonly(dst[bounds[i]:bounds[i + 1]].copy()) for i in range(n))


@dataclass(frozen=True)
class TripartiteGraph:
    """Immutable adjacency over users, videos and vloggers.

    Edge arrays hold dense indices: ``uv`` is (user, video), ``up`` is
    (user, vlogger), ``pv`` is (vlogger, video). Neighbor tuples are sorted.
    """

    n_users: int
    n_videos: int
    n_vloggers: int
    uv: np.ndarray
    up: np.ndarray
    pv: np.ndarray
    publisher_of: np.ndarray
    user_videos: tuple[np.ndarray, ...] = field(repr=False)
    video_users: tuple[np.ndarray, ...] = field(repr=False)
    user_vloggers: tuple[np.ndarray, ...] = field(repr=False)
    vlogger_users: tuple[np.ndarray, ...] = field(repr=False)
    vlogger_videos: tuple[np.ndarray, ...] = field(repr=False)
    user_ids: tuple[str, ...] | None = field(default=None, repr=False)
    video_ids: tuple[str, ...] | None = field(default=None, repr=False)
    vlogger_ids: tuple[str, ...] | None = field(default=None, repr=False)

    @classmethod
    def from_indices(
        cls,
        n_users: int,
        n_videos: int,
        n_vloggers: int,
        uv,
        up,
        pv,
        user_ids: Sequence[str] | None = None,
        video_ids: Sequence[str] | None = None,
        vlogger_ids: Sequence[str] | None = None,
    ) -> "TripartiteGraph":
        uv = _unique_pairs(uv)
        up = _unique_pairs(up)
        pv = _unique_pairs(pv)
        if len(uv) == 0:
            raise EmptyGraphError("user-video edge list is empty")
        for name, arr, (na, nb) in (
            ("user-video", uv, (n_users, n_videos)),
            ("user-vlogger", up, (n_users, n_vloggers)),
            ("vlogger-video", pv, (n_vloggers, n_videos)),
        ):
            if len(arr) and (arr.min() < 0 or arr[:, 0].max() >= na or arr[:, 1].max() >= nb):
                raise InconsistencyError(f"{name} edge index out of range")

        publisher_of = np.full(n_videos, -1, dtype=np.int64)
        counts = np.bincount(pv[:, 1], minlength=n_videos) if len(pv) else np.zeros(n_videos, np.int64)
        multi = np.flatnonzero(counts > 1)
        if len(multi):
            raise MalformedPublishingError(
                f"video {_label(video_ids, multi[0])} has {counts[multi[0]]} publishers"
            )
        publisher_of[pv[:, 1]] = pv[:, 0]
        orphan = np.setdiff1d(uv[:, 1], pv[:, 1])
        if len(orphan):
            raise MalformedPublishingError(f"video {_label(video_ids, orphan[0])} has no publisher")

        return cls(
            n_users=n_users,
            n_videos=n_videos,
            n_vloggers=n_vloggers,
            uv=_readonly(uv),
            up=_readonly(up),
            pv=_readonly(pv),
            publisher_of=_readonly(publisher_of),
            user_videos=_adjacency(uv[:, 0], uv[:, 1], n_users),
            video_users=_adjacency(uv[:, 1], uv[:, 0], n_videos),
            user_vloggers=_adjacency(up[:, 0], up[:, 1], n_users),
            vlogger_users=_adjacency(up[:, 1], up[:, 0], n_vloggers),
            vlogger_videos=_adjacency(pv[:, 0], pv[:, 1], n_vloggers),
            user_ids=tuple(user_ids) if user_ids is not None else None,
            video_ids=tuple(video_ids) if video_ids is not None else None,
            vlogger_ids=tuple(vlogger_ids) if vlogger_ids is not None else None,
        )

    def degrees(self, relation: str) -> dict[str, np.ndarray]:
        lists = {
            "uv": {"user": self.user_videos, "video": self.video_users},
            "up": {"user": self.user_vloggers, "vlogger": self.vlogger_users},
            "pv": {"vlogger": self.vlogger_videos},
        }[relation]
        return {k: np.array([len(a) for a in v], dtype=np.int64) for k, v in lists.items()}

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.n_users, self.n_videos, self.n_vloggers


def _label(ids, idx):
    return ids[idx] if ids is not None else int(idx)


def _remap(raw: Iterable[str]) -> dict[str, int]:
    return {r: i for i, r in enumerate(sorted(set(raw), key=natural_key))}


def build_graph(
    user_video: Sequence[tuple[str, str]],
    user_vlogger: Sequence[tuple[str, str]],
    vlogger_video: Sequence[tuple[str, str]],
) -> TripartiteGraph:
    """Build a graph from raw-id edge lists, remapping ids to dense indices.

    Node counts are the numbers of distinct raw ids per class across all
    three lists. Duplicate edges are dropped.
    """
    if len(user_video) == 0:
        raise EmptyGraphError("user-video edge list is empty")
    users = _remap([u for u, _ in user_video] + [u for u, _ in user_vlogger])
    videos = _remap([v for _, v in user_video] + [v for _, v in vlogger_video])
    vloggers = _remap([p for _, p in user_vlogger] + [p for p, _ in vlogger_video])
    return TripartiteGraph.from_indices(
        len(users),
        len(videos),
        len(vloggers),
        [(users[u], videos[v]) for u, v in user_video],
        [(users[u], vloggers[p]) for u, p in user_vlogger],
        [(vloggers[p], videos[v]) for p, v in vlogger_video],
        user_ids=list(users),
        video_ids=list(videos),
        vlogger_ids=list(vloggers),
    )


def read_edge_list(path: str | Path) -> list[tuple[str, str]]:
    edges = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataIOError(f"{path}:{lineno}: expected 2 tab-separated fields")
                edges.append((parts[0], parts[1]))
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    return edges


def write_edge_list(path: str | Path, edges: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in edges:
            fh.write(f"{a}\t{b}\n")


def write_remap(path: str | Path, ids: Sequence[str]) -> None:
    write_edge_list(path, ((r, str(i)) for i, r in enumerate(ids)))


def read_remap(path: str | Path) -> list[str]:
    rows = read_edge_list(path)
    ids = [""] * len(rows)
    for raw, idx in rows:
        i = int(idx)
        if not 0 <= i < len(rows) or ids[i]:
            raise DataIOError(f"{path}: remap table is not a bijection onto 0..{len(rows) - 1}")
        ids[i] = raw
    return ids


# --- meta-path walks ---------------------------------------------------------


@dataclass(frozen=True)
class MetaPathConfig:
    q1: float = 0.5
    q2: float = 0.5
    walks_per_user: int = 10
    vlogger_view_walks_per_user: int = 10
    seed: int = 0
    uvu_in_video_view: bool = True

    def __post_init__(self):
        if not (0.0 <= self.q1 <= 1.0 and 0.0 <= self.q2 <= 1.0):
            raise InvalidConfigError(f"q1/q2 must lie in [0, 1], got {self.q1}, {self.q2}")
        if self.walks_per_user < 0 or self.vlogger_view_walks_per_user < 0:
            raise InvalidConfigError("walk counts must be non-negative")


@dataclass(frozen=True)
class MetaPathWalks:
    """Deduplicated walk endpoints.

    ``user_user``: unordered user pairs (a < b) from user-vlogger-user walks.
    ``user_video``: (start user, end video) from user-vlogger-video walks.
    ``vlogger_user``: (attributed vlogger, end user) from user-video-user walks.
    """

    user_user: np.ndarray
    user_video: np.ndarray
    vlogger_user: np.ndarray

    @classmethod
    def empty(cls) -> "MetaPathWalks":
        z = np.zeros((0, 2), dtype=np.int64)
        return cls(z, z.copy(), z.copy())


def _pick(rng: np.random.Generator, arr: np.ndarray) -> int:
    return int(arr[rng.integers(len(arr))])


def sample_meta_paths(graph: TripartiteGraph, cfg: MetaPathConfig) -> MetaPathWalks:
    rng = np.random.default_rng(cfg.seed)
    uu, uvid, pu = [], [], []
    for u in range(graph.n_users):
        vloggers = graph.user_vloggers[u]
        for _ in range(cfg.walks_per_user):
            if rng.random() >= cfg.q1 or len(vloggers) == 0:
                continue
            p = _pick(rng, vloggers)
            if rng.random() < cfg.q2:
                others = graph.vlogger_users[p]
                others = others[others != u]
                if len(others):
                    o = _pick(rng, others)
                    uu.append((min(u, o), max(u, o)))
            else:
                published = graph.vlogger_videos[p]
                if len(published):
                    uvid.append((u, _pick(rng, published)))
        videos = graph.user_videos[u]
        for _ in range(cfg.vlogger_view_walks_per_user):
            if rng.random() >= cfg.q1 or len(videos) == 0:
                continue
            v = _pick(rng, videos)
            others = graph.video_users[v]
            others = others[others != u]
            if len(others) == 0 or len(vloggers) == 0:
                continue
            o = _pick(rng, others)
            pu.append((_pick(rng, vloggers), o))
    return MetaPathWalks(
        _readonly(_unique_pairs(uu)), _readonly(_unique_pairs(uvid)), _readonly(_unique_pairs(pu))
    )


@dataclass(frozen=True)
class AugmentedNeighborhoods:
    """Per-view neighbor sets including walk endpoints.

    The video view indexes users as ``0..n_users-1`` and videos as
    ``n_users + v``; a user's set may contain both kinds. Edge arrays list
    every undirected edge once.
    """

    n_users: int
    n_videos: int
    n_vloggers: int
    video_view_edges: np.ndarray
    vlogger_view_edges: np.ndarray
    video_view_user_nbrs: tuple[np.ndarray, ...] = field(repr=False)
    video_view_video_nbrs: tuple[np.ndarray, ...] = field(repr=False)
    vlogger_view_user_nbrs: tuple[np.ndarray, ...] = field(repr=False)
    vlogger_view_vlogger_nbrs: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def aug_degrees(self) -> dict[str, np.ndarray]:
        def sizes(lists):
            return np.array([len(a) for a in lists], dtype=np.int64)

        return {
            "video_view_user": sizes(self.video_view_user_nbrs),
            "video_view_video": sizes(self.video_view_video_nbrs),
            "vlogger_view_user": sizes(self.vlogger_view_user_nbrs),
            "vlogger_view_vlogger": sizes(self.vlogger_view_vlogger_nbrs),
        }


def build_augmented_neighborhoods(
    graph: TripartiteGraph, walks: MetaPathWalks, uvu_in_video_view: bool = True
) -> AugmentedNeighborhoods:
    nu, nv, np_ = graph.counts
    for name, arr, (na, nb) in (
        ("user-user", walks.user_user, (nu, nu)),
        ("user-video", walks.user_video, (nu, nv)),
        ("vlogger-user", walks.vlogger_user, (np_, nu)),
    ):
        if len(arr) and (arr.min() < 0 or arr[:, 0].max() >= na or arr[:, 1].max() >= nb):
            raise InconsistencyError(f"{name} walk endpoint refers to a node absent from the graph")

    # video view: global ids, users first then videos
    uv = np.concatenate([graph.uv, walks.user_video]) if len(walks.user_video) else graph.uv
    edges = [np.column_stack([uv[:, 0], uv[:, 1] + nu])]
    if uvu_in_video_view and len(walks.user_user):
        edges.append(walks.user_user)
    video_edges = _unique_pairs(np.concatenate(edges))
    n_all = nu + nv
    src = np.concatenate([video_edges[:, 0], video_edges[:, 1]])
    dst = np.concatenate([video_edges[:, 1], video_edges[:, 0]])
    adj = _adjacency(src, dst, n_all)

    up = graph.up
    if len(walks.vlogger_user):
        up = np.concatenate([up, walks.vlogger_user[:, ::-1]])
    vlogger_edges = _unique_pairs(up)
    return AugmentedNeighborhoods(
        n_users=nu,
        n_videos=nv,
        n_vloggers=np_,
        video_view_edges=_readonly(video_edges),
        vlogger_view_edges=_readonly(vlogger_edges),
        video_view_user_nbrs=adj[:nu],
        video_view_video_nbrs=adj[nu:],
        vlogger_view_user_nbrs=_adjacency(vlogger_edges[:, 0], vlogger_edges[:, 1], nu),
        vlogger_view_vlogger_nbrs=_adjacency(vlogger_edges[:, 1], vlogger_edges[:, 0], np_),
    )


def augment(graph: TripartiteGraph, cfg: MetaPathConfig) -> AugmentedNeighborhoods:
    """Sample walks and build the augmented neighborhoods in one call."""
    return build_augmented_neighborhoods(graph, sample_meta_paths(graph, cfg), cfg.uvu_in_video_view)
