"""Trainable state, configuration and the differentiable forward pass."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np
import torch

from .errors import InvalidConfigError
from .graph import AugmentedNeighborhoods, MetaPathConfig, TripartiteGraph, augment
from .objective import (
    LossWeights,
    bpr_loss,
    contrastive_total,
    gate_weight,
    infonce_cross_view,
    score_user_video,
    score_user_vlogger,
    total_loss,
)
from .propagation import PropagationOperators, concat_views, video_view, vlogger_view

Tensor = torch.Tensor

PARAM_NAMES = ("users", "videos", "vloggers", "gate")
_STREAMS = {"init": 1, "walks": 2, "negatives": 3, "shuffle": 4}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named consumer of the root seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[name], *extra]))


def substream_seed(seed: int, name: str, *extra: int) -> int:
    lo, hi = np.random.SeedSequence([seed, _STREAMS[name], *extra]).generate_state(2)
    return int(hi) << 32 | int(lo)


@dataclass(frozen=True)
class TrainConfig:
    d: int = 64
    n_layers: int = 3
    lr: float = 0.001
    batch_size: int = 4096
    negatives_per_positive: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    metapath: MetaPathConfig = field(default_factory=MetaPathConfig)
    max_epochs: int = 200
    patience: int = 10
    seed: int = 2023
    init_std: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    layer_avg_denominator: str = "L_plus_1"
    use_video_view: bool = True
    use_vlogger_view: bool = True
    use_blending: bool = True
    ablated_view_fill: str = "base"
    contrastive_mode: str = "full"
    resample_walks_every: int = 0
    dtype: str = "float64"
    max_negative_retries: int = 50
    vlogger_batch: str = "spread"

    def __post_init__(self):
        if self.d <= 0 or self.n_layers <= 0 or self.batch_size <= 0 or self.max_epochs < 0:
            raise InvalidConfigError("d, n_layers and batch_size must be positive, max_epochs non-negative")
        if self.lr <= 0 or self.patience < 1 or self.negatives_per_positive < 1 or self.init_std < 0:
            raise InvalidConfigError("lr must be positive, patience and negatives_per_positive at least 1")
        if self.layer_avg_denominator not in ("L", "L_plus_1"):
            raise InvalidConfigError("layer_avg_denominator must be 'L' or 'L_plus_1'")
        if self.ablated_view_fill not in ("base", "zero"):
            raise InvalidConfigError("ablated_view_fill must be 'base' or 'zero'")
        if self.contrastive_mode not in ("full", "in_batch"):
            raise InvalidConfigError("contrastive_mode must be 'full' or 'in_batch'")
        if self.dtype not in ("float64", "float32"):
            raise InvalidConfigError("dtype must be 'float64' or 'float32'")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfigError(f"unknown training options: {sorted(unknown)}")
        if isinstance(raw.get("weights"), dict):
            raw["weights"] = LossWeights(**raw["weights"])
        if isinstance(raw.get("metapath"), dict):
            raw["metapath"] = MetaPathConfig(**raw["metapath"])
        return cls(**raw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lightgcn_config(cfg: TrainConfig) -> TrainConfig:
    """Reduce the model to plain bipartite propagation with a dot-product score."""
    return replace(
        cfg,
        metapath=replace(cfg.metapath, walks_per_user=0, vlogger_view_walks_per_user=0),
        use_vlogger_view=False,
        ablated_view_fill="zero",
        use_blending=False,
        weights=replace(cfg.weights, lambda1=0.0, lambda2=0.0),
    )


@dataclass
class ModelParams:
    users: Tensor
    videos: Tensor
    vloggers: Tensor
    gate: Tensor

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.items())

    def clone(self) -> "ModelParams":
        return ModelParams(**{k: v.detach().clone() for k, v in self.items()})


def init_params(cfg: TrainConfig, counts: tuple[int, int, int]) -> ModelParams:
    if min(counts) <= 0:
        raise InvalidConfigError(f"entity counts must be positive, got {counts}")
    rng = substream(cfg.seed, "init")
    shapes = [(counts[0], cfg.d), (counts[1], cfg.d), (counts[2], cfg.d), (2 * cfg.d, 2 * cfg.d)]
    tables = [torch.from_numpy(rng.normal(0.0, cfg.init_std, size=s)).to(cfg.torch_dtype) for s in shapes]
    return ModelParams(*tables)


@dataclass
class ModelContext:
    """Graph-derived, parameter-independent inputs of the forward pass."""

    graph: TripartiteGraph
    aug: AugmentedNeighborhoods
    ops: PropagationOperators
    publisher_of: Tensor

    @classmethod
    def build(cls, graph: TripartiteGraph, cfg: TrainConfig, resample: int = 0) -> "ModelContext":
        walk_cfg = replace(cfg.metapath, seed=substream_seed(cfg.seed, "walks", resample))
        aug = augment(graph, walk_cfg)
        return cls(graph, aug, PropagationOperators.build(graph, aug, cfg.torch_dtype),
                   torch.from_numpy(np.array(graph.publisher_of)))


@dataclass
class Embeddings:
    users: Tensor
    videos: Tensor
    vloggers: Tensor
    first: dict[str, Tensor]
    second: dict[str, Tensor]


def _fill(params: ModelParams, cfg: TrainConfig) -> dict[str, Tensor]:
    tables = {"user": params.users, "video": params.videos, "vlogger": params.vloggers}
    if cfg.ablated_view_fill == "zero":
        return {k: torch.zeros_like(v) for k, v in tables.items()}
    return tables


def embed(params: ModelParams, ctx: ModelContext, cfg: TrainConfig) -> Embeddings:
    args = (params.users, params.videos, params.vloggers, ctx.ops, cfg.n_layers, cfg.layer_avg_denominator)
    first = video_view(*args).final if cfg.use_video_view else _fill(params, cfg)
    second = vlogger_view(*args).final if cfg.use_vlogger_view else _fill(params, cfg)
    return Embeddings(
        concat_views(first["user"], second["user"]),
        concat_views(first["video"], second["video"]),
        concat_views(first["vlogger"], second["vlogger"]),
        first,
        second,
    )


@dataclass
class Batch:
    """Index tensors for one step. Negatives have shape (n, k)."""

    users: Tensor
    pos_videos: Tensor
    neg_videos: Tensor
    vlogger_users: Tensor | None = None
    pos_vloggers: Tensor | None = None
    neg_vloggers: Tensor | None = None

    @property
    def has_vlogger_task(self) -> bool:
        return self.vlogger_users is not None and len(self.vlogger_users) > 0


def video_scores(emb: Embeddings, params: ModelParams, ctx: ModelContext, cfg: TrainConfig, users, videos):
    e_u, e_v = emb.users[users], emb.videos[videos]
    if not cfg.use_blending:
        return (e_u * e_v).sum(-1)
    e_p = emb.vloggers[ctx.publisher_of[videos]]
    return score_user_video(e_u, e_v, e_p, params.gate)


def score_matrix(params: ModelParams, ctx: ModelContext, cfg: TrainConfig, users=None) -> np.ndarray:
    """Scores of the given users (default all) against every video."""
    with torch.no_grad():
        emb = embed(params, ctx, cfg)
        e_u = emb.users if users is None else emb.users[torch.as_tensor(users, dtype=torch.long)]
        direct = e_u @ emb.videos.T
        if cfg.use_blending:
            w = gate_weight(emb.videos, emb.vloggers[ctx.publisher_of], params.gate)
            via_vlogger = (e_u @ emb.vloggers.T)[:, ctx.publisher_of]
            direct = w * direct + (1 - w) * via_vlogger
    return direct.to(torch.float64).numpy()


def batch_entities(batch: Batch, ctx: ModelContext, cfg: TrainConfig) -> dict[str, Tensor]:
    """Unique indices of every entity whose final embedding the batch scores."""
    users = [batch.users]
    videos = [batch.pos_videos, batch.neg_videos.reshape(-1)]
    vloggers = []
    if cfg.use_blending:
        vloggers.append(ctx.publisher_of[torch.cat(videos)])
    if batch.has_vlogger_task and cfg.weights.lambda1 > 0:
        users.append(batch.vlogger_users)
        vloggers += [batch.pos_vloggers, batch.neg_vloggers.reshape(-1)]
    empty = torch.zeros(0, dtype=torch.long)
    return {
        "user": torch.unique(torch.cat(users)),
        "video": torch.unique(torch.cat(videos)),
        "vlogger": torch.unique(torch.cat(vloggers)) if vloggers else empty,
    }


def loss_terms(params: ModelParams, ctx: ModelContext, batch: Batch, cfg: TrainConfig) -> dict[str, Tensor]:
    w = cfg.weights
    emb = embed(params, ctx, cfg)
    k = batch.neg_videos.shape[1]
    pos = video_scores(emb, params, ctx, cfg, batch.users, batch.pos_videos)
    neg = video_scores(emb, params, ctx, cfg, batch.users.repeat_interleave(k), batch.neg_videos.reshape(-1))
    zero = params.users.new_zeros(())
    terms = {"video": bpr_loss(pos.repeat_interleave(k), neg)}

    terms["vlogger"] = zero
    if batch.has_vlogger_task and w.lambda1 > 0:
        kp = batch.neg_vloggers.shape[1]
        e_u = emb.users[batch.vlogger_users]
        pos_p = score_user_vlogger(e_u, emb.vloggers[batch.pos_vloggers])
        neg_p = score_user_vlogger(e_u.repeat_interleave(kp, 0), emb.vloggers[batch.neg_vloggers.reshape(-1)])
        terms["vlogger"] = bpr_loss(pos_p.repeat_interleave(kp), neg_p)

    touched = batch_entities(batch, ctx, cfg)
    terms["cl"] = zero
    if w.lambda2 > 0:
        parts = []
        for entity in ("user", "video", "vlogger"):
            cand = None if cfg.contrastive_mode == "full" else touched[entity]
            if cand is not None and len(cand) == 0:
                parts.append(zero)
                continue
            parts.append(infonce_cross_view(emb.first[entity], emb.second[entity], w.tau, cand))
        terms["cl"] = contrastive_total(*parts)

    reg = params.users[touched["user"]].square().sum() + params.videos[touched["video"]].square().sum()
    reg = reg + params.vloggers[touched["vlogger"]].square().sum()
    if cfg.use_blending:
        reg = reg + params.gate.square().sum()
    terms["reg"] = reg
    terms["total"] = total_loss(terms["video"], terms["vlogger"], terms["cl"], terms["reg"], w)
    return terms
