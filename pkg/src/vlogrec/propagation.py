"""Dual-view embedding propagation over the augmented neighborhoods.

Both views are linear: every layer is a symmetric-normalized sparse
adjacency applied to the previous layer, without activations or weights.
The entity that does not take part in a view's message passing (vloggers in
the video view, videos in the vlogger view) is mean-pooled per layer.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import CorruptCheckpointError, DataIOError, InvalidConfigError, NumericError, ShapeError
from .graph import AugmentedNeighborhoods, TripartiteGraph

Tensor = torch.Tensor

VIDEO_VIEW = "video-view"
VLOGGER_VIEW = "vlogger-view"


def normalized_adjacency(edges: np.ndarray, n: int, dtype=torch.float64) -> Tensor:
    """Sparse ``D^-1/2 A D^-1/2`` for an undirected edge list over ``n`` nodes."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    row = np.concatenate([edges[:, 0], edges[:, 1]])
    col = np.concatenate([edges[:, 1], edges[:, 0]])
    deg = np.bincount(row, minlength=n).astype(np.float64)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    vals = inv_sqrt[row] * inv_sqrt[col]
    adj = torch.sparse_coo_tensor(
        torch.from_numpy(np.vstack([row, col])), torch.from_numpy(vals), (n, n), dtype=dtype, check_invariants=False
    )
    return adj.coalesce()


def mean_pool_matrix(groups: Sequence[np.ndarray], n_cols: int, dtype=torch.float64) -> Tensor:
    """Sparse row-stochastic matrix averaging the listed members; empty groups give zero rows."""
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    rows = np.repeat(np.arange(len(groups)), sizes)
    cols = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups]) if len(rows) else np.zeros(0, np.int64)
    vals = 1.0 / np.repeat(sizes, sizes).astype(np.float64)
    mat = torch.sparse_coo_tensor(
        torch.from_numpy(np.vstack([rows, cols])), torch.from_numpy(vals), (len(groups), n_cols), dtype=dtype, check_invariants=False
    )
    return mat.coalesce()


@dataclass(frozen=True)
class PropagationOperators:
    """Precomputed sparse operators for one (graph, augmentation) pair."""

    n_users: int
    n_videos: int
    n_vloggers: int
    video_adj: Tensor
    vlogger_adj: Tensor
    vlogger_pool: Tensor
    video_pool: Tensor

    @classmethod
    def build(cls, graph: TripartiteGraph, aug: AugmentedNeighborhoods, dtype=torch.float64):
        nu, nv, np_ = graph.counts
        vlog_edges = aug.vlogger_view_edges.copy()
        vlog_edges[:, 1] += nu
        return cls(
            n_users=nu,
            n_videos=nv,
            n_vloggers=np_,
            video_adj=normalized_adjacency(aug.video_view_edges, nu + nv, dtype),
            vlogger_adj=normalized_adjacency(vlog_edges, nu + np_, dtype),
            vlogger_pool=mean_pool_matrix(graph.vlogger_videos, nv, dtype),
            video_pool=mean_pool_matrix(graph.video_users, nu, dtype),
        )


@dataclass
class ViewEmbeddings:
    view: str
    layers: dict[str, list[Tensor]]
    final: dict[str, Tensor]


def _check_finite(t: Tensor, what: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def propagate(adj: Tensor, base: Tensor, n_layers: int) -> list[Tensor]:
    if n_layers < 0:
        raise InvalidConfigError("layer count must be non-negative")
    layers = [base]
    for _ in range(n_layers):
        layers.append(torch.sparse.mm(adj, layers[-1]))
    return layers


def _split_stack(layers, n_first):
    return [x[:n_first] for x in layers], [x[n_first:] for x in layers]


def propagate_video_view(
    users: Tensor, videos: Tensor, aug: AugmentedNeighborhoods | Tensor, n_layers: int
) -> tuple[list[Tensor], list[Tensor]]:
    """Per-layer (user, video) tables for the video view, layers 0..L."""
    adj = aug if isinstance(aug, Tensor) else normalized_adjacency(
        aug.video_view_edges, aug.n_users + aug.n_videos, users.dtype
    )
    layers = propagate(adj, torch.cat([users, videos]), n_layers)
    _check_finite(layers[-1], "video-view propagation")
    return _split_stack(layers, users.shape[0])


def propagate_vlogger_view(
    users: Tensor, vloggers: Tensor, aug: AugmentedNeighborhoods | Tensor, n_layers: int
) -> tuple[list[Tensor], list[Tensor]]:
    """Per-layer (user, vlogger) tables for the vlogger view, layers 0..L."""
    if isinstance(aug, Tensor):
        adj = aug
    else:
        edges = aug.vlogger_view_edges.copy()
        edges[:, 1] += aug.n_users
        adj = normalized_adjacency(edges, aug.n_users + aug.n_vloggers, users.dtype)
    layers = propagate(adj, torch.cat([users, vloggers]), n_layers)
    _check_finite(layers[-1], "vlogger-view propagation")
    return _split_stack(layers, users.shape[0])


def aggregate_vloggers_video_view(
    video_layers: Sequence[Tensor], graph: TripartiteGraph | Tensor
) -> list[Tensor]:
    """Average each vlogger's published videos, layer by layer."""
    pool = graph if isinstance(graph, Tensor) else mean_pool_matrix(
        graph.vlogger_videos, graph.n_videos, video_layers[0].dtype
    )
    return [torch.sparse.mm(pool, x) for x in video_layers]


def aggregate_videos_vlogger_view(
    user_layers: Sequence[Tensor], graph: TripartiteGraph | Tensor
) -> list[Tensor]:
    """Average each video's interacting users, layer by layer."""
    pool = graph if isinstance(graph, Tensor) else mean_pool_matrix(
        graph.video_users, graph.n_users, user_layers[0].dtype
    )
    return [torch.sparse.mm(pool, x) for x in user_layers]


def average_layers(layers: Sequence[Tensor], denominator: str = "L_plus_1") -> Tensor:
    n_layers = len(layers) - 1
    if denominator == "L_plus_1":
        scale = 1.0 / (n_layers + 1)
    elif denominator == "L":
        if n_layers < 1:
            raise InvalidConfigError("layer_avg_denominator 'L' needs at least one layer")
        scale = 1.0 / n_layers
    else:
        raise InvalidConfigError(f"unknown layer_avg_denominator {denominator!r}")
    total = layers[0]
    for x in layers[1:]:
        total = total + x
    return total * scale


def concat_views(first: Tensor, second: Tensor) -> Tensor:
    if first.shape != second.shape:
        raise ShapeError(f"view widths differ: {tuple(first.shape)} vs {tuple(second.shape)}")
    return torch.cat([first, second], dim=-1)


def video_view(users, videos, vloggers, ops: PropagationOperators, n_layers: int, denominator="L_plus_1"):
    """Full video view; vlogger layer 0 is the base vlogger table."""
    u_layers, v_layers = propagate_video_view(users, videos, ops.video_adj, n_layers)
    p_layers = [vloggers] + aggregate_vloggers_video_view(v_layers[1:], ops.vlogger_pool)
    layers = {"user": u_layers, "video": v_layers, "vlogger": p_layers}
    return ViewEmbeddings(VIDEO_VIEW, layers, {k: average_layers(v, denominator) for k, v in layers.items()})


def vlogger_view(users, videos, vloggers, ops: PropagationOperators, n_layers: int, denominator="L_plus_1"):
    """Full vlogger view; video layer 0 is the base video table."""
    u_layers, p_layers = propagate_vlogger_view(users, vloggers, ops.vlogger_adj, n_layers)
    v_layers = [videos] + aggregate_videos_vlogger_view(u_layers[1:], ops.video_pool)
    layers = {"user": u_layers, "video": v_layers, "vlogger": p_layers}
    return ViewEmbeddings(VLOGGER_VIEW, layers, {k: average_layers(v, denominator) for k, v in layers.items()})


# --- embedding snapshots -----------------------------------------------------
#
# Layout (little-endian):
#   8s   magic b"VLGEMB01"
#   B    entity code (0 user, 1 video, 2 vlogger), then 3 pad bytes
#   i    layer tag (-1 for the layer-averaged table)
#   Q    row count
#   Q    dimension d
#   then count*d float64 values, row-major

_EMB_MAGIC = b"VLGEMB01"
_EMB_HEADER = struct.Struct("<8sB3xiQQ")
_ENTITY_CODES = {"user": 0, "video": 1, "vlogger": 2}


def save_embeddings(path: str | Path, table, entity: str, layer: int = -1) -> None:
    arr = np.ascontiguousarray(np.asarray(table, dtype="<f8"))
    if arr.ndim != 2:
        raise ShapeError("embedding table must be two-dimensional")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(_EMB_MAGIC, _ENTITY_CODES[entity], layer, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_embeddings(path: str | Path) -> tuple[str, int, np.ndarray]:
    """Return ``(entity, layer, table)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    if len(data) < _EMB_HEADER.size:
        raise CorruptCheckpointError(f"{path}: truncated embedding header")
    magic, code, layer, count, dim = _EMB_HEADER.unpack_from(data)
    if magic != _EMB_MAGIC:
        raise CorruptCheckpointError(f"{path}: not an embedding snapshot")
    body = data[_EMB_HEADER.size:]
    if len(body) != count * dim * 8:
        raise CorruptCheckpointError(f"{path}: expected {count * dim * 8} payload bytes, found {len(body)}")
    entity = {v: k for k, v in _ENTITY_CODES.items()}[code]
    return entity, layer, np.frombuffer(body, dtype="<f8").reshape(count, dim).copy()
