"""Negative sampling, gradients, Adam, the training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import TRAIN, VAL, Dataset
from .errors import (
    CheckpointVersionError,
    CorruptCheckpointError,
    DataIOError,
    NumericError,
    SamplingExhaustedError,
    ShapeError,
)
from .model import (
    PARAM_NAMES,
    Batch,
    ModelContext,
    ModelParams,
    TrainConfig,
    init_params,
    loss_terms,
    substream,
)

log = logging.getLogger(__name__)

Tensor = torch.Tensor


class InteractionIndex:
    """Membership test for observed (user, item) pairs."""

    def __init__(self, pairs: np.ndarray, n_users: int, n_items: int):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        self.n_items = n_items
        self.keys = np.unique(pairs[:, 0] * n_items + pairs[:, 1])
        self.per_user = np.bincount(pairs[:, 0], minlength=n_users) if len(pairs) else np.zeros(n_users, np.int64)
        # duplicates would inflate per-user counts
        if len(self.keys) != len(pairs):
            self.per_user = np.bincount(self.keys // n_items, minlength=n_users)

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.n_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        return (self.keys[pos] == keys) if len(self.keys) else np.zeros(len(keys), dtype=bool)

    def items_of(self, user: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.keys, [user * self.n_items, (user + 1) * self.n_items])
        return self.keys[lo:hi] - user * self.n_items


def sample_negatives(
    users: np.ndarray, index: InteractionIndex, k: int, rng: np.random.Generator, max_retries: int = 50
) -> np.ndarray:
    """``k`` uniform non-interacted items per user, shape (len(users), k)."""
    users = np.asarray(users, dtype=np.int64)
    full = index.per_user[users] >= index.n_items
    if full.any():
        raise SamplingExhaustedError(f"user {int(users[full][0])} has interacted with every item")
    flat_users = np.repeat(users, k)
    out = rng.integers(index.n_items, size=len(flat_users))
    bad = np.flatnonzero(index.contains(flat_users, out))
    for _ in range(max_retries):
        if len(bad) == 0:
            break
        out[bad] = rng.integers(index.n_items, size=len(bad))
        bad = bad[index.contains(flat_users[bad], out[bad])]
    for i in bad:
        # dense rows: draw straight from the complement
        complement = np.setdiff1d(np.arange(index.n_items), index.items_of(int(flat_users[i])))
        if len(complement) == 0:
            raise SamplingExhaustedError(f"user {int(flat_users[i])} has no negative candidates")
        out[i] = complement[rng.integers(len(complement))]
    return out.reshape(len(users), k)


def compute_gradients(
    params: ModelParams, ctx: ModelContext, batch: Batch, cfg: TrainConfig
) -> tuple[dict[str, Tensor], dict[str, float]]:
    """Reverse-mode gradients of the total loss for every parameter tensor."""
    leaves = ModelParams(**{k: v.detach().clone().requires_grad_(True) for k, v in params.items()})
    terms = loss_terms(leaves, ctx, batch, cfg)
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericError(f"loss term '{name}' is not finite ({float(value.detach())})")
    grads = torch.autograd.grad(terms["total"], [leaves.as_dict()[n] for n in PARAM_NAMES], allow_unused=True)
    out = {}
    for name, g, p in zip(PARAM_NAMES, grads, params.as_dict().values()):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"gradient of '{name}' is not finite")
        out[name] = g
    return out, {k: float(v.detach()) for k, v in terms.items()}


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, Tensor]
    v: dict[str, Tensor]
    step: int = 0
    epoch: int = 0
    best_recall: float = -1.0
    since_improvement: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = {k: torch.zeros_like(t) for k, t in params.items()}
        return cls(params, zeros, {k: t.clone() for k, t in zeros.items()})


def adam_step(
    state: TrainState,
    grads: dict[str, Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """Bias-corrected Adam; returns a new state and leaves the input untouched."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[name] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return TrainState(
        ModelParams(**new_p), new_m, new_v, t, state.epoch, state.best_recall, state.since_improvement
    )


@dataclass
class TrainResult:
    params: ModelParams
    state: TrainState
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    ctx: ModelContext | None = None


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


class _Cycler:
    """Endless shuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, size: int) -> np.ndarray:
        out = []
        while size > 0 and self.n > 0:
            if self.pos >= self.n:
                self.perm, self.pos = self.rng.permutation(self.n), 0
            chunk = self.perm[self.pos:self.pos + size]
            out.append(chunk)
            self.pos += len(chunk)
            size -= len(chunk)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def make_batch(
    pairs: np.ndarray,
    rows: np.ndarray,
    video_index: InteractionIndex,
    k: int,
    rng: np.random.Generator,
    vlogger_pairs: np.ndarray | None = None,
    vlogger_rows: np.ndarray | None = None,
    vlogger_index: InteractionIndex | None = None,
    max_retries: int = 50,
) -> Batch:
    users = pairs[rows, 0]
    neg = sample_negatives(users, video_index, k, rng, max_retries)
    batch = Batch(torch.from_numpy(users), torch.from_numpy(pairs[rows, 1]), torch.from_numpy(neg))
    if vlogger_pairs is not None and vlogger_rows is not None and len(vlogger_rows):
        pu = vlogger_pairs[vlogger_rows, 0]
        batch.vlogger_users = torch.from_numpy(pu)
        batch.pos_vloggers = torch.from_numpy(vlogger_pairs[vlogger_rows, 1])
        batch.neg_vloggers = torch.from_numpy(sample_negatives(pu, vlogger_index, k, rng, max_retries))
    return batch


def _drop_saturated(pairs: np.ndarray, index: InteractionIndex, what: str) -> np.ndarray:
    """Remove pairs of users who interacted with every item, since no negative exists for them."""
    full = index.per_user >= index.n_items
    if not full.any():
        return pairs
    keep = ~full[pairs[:, 0]]
    log.warning("%d users interacted with every %s; their %d pairs are left out of that task",
                int(full.sum()), what, int((~keep).sum()))
    return pairs[keep]


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    validate: Callable[[ModelParams, ModelContext], float] | None = None,
) -> TrainResult:
    """Multi-task training with early stopping on validation Recall@10.

    ``validate`` maps (params, ctx) to the early-stopping metric; the default
    runs the leave-one-out validation protocol.
    """
    from .evaluation import evaluate  # cyclic at import time

    graph = dataset.train_graph()
    ctx = ModelContext.build(graph, cfg)
    params = init_params(cfg, graph.counts)
    state = TrainState.fresh(params)
    result = TrainResult(params.clone(), state, ctx=ctx)
    if validate is None:
        def validate(p, c):
            return evaluate(p, c, cfg, dataset, VAL, (10,)).recall[10]

    pairs = dataset.pairs(TRAIN)
    video_index = InteractionIndex(pairs, graph.n_users, graph.n_videos)
    pairs = _drop_saturated(pairs, video_index, "video")
    if len(pairs) == 0:
        raise SamplingExhaustedError("every training user interacted with every video; no negatives exist")
    up = dataset.up
    use_vlogger = cfg.weights.lambda1 > 0 and len(up) > 0
    vlogger_index = InteractionIndex(up, graph.n_users, graph.n_vloggers) if use_vlogger else None
    if use_vlogger:
        up = _drop_saturated(up, vlogger_index, "vlogger")
        use_vlogger = len(up) > 0
    neg_rng = substream(cfg.seed, "negatives")
    shuffle_rng = substream(cfg.seed, "shuffle")
    cycler = _Cycler(len(up), shuffle_rng) if use_vlogger else None
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    best = None
    try:
        for epoch in range(cfg.max_epochs):
            if cfg.resample_walks_every and epoch and epoch % cfg.resample_walks_every == 0:
                ctx = ModelContext.build(graph, cfg, resample=epoch // cfg.resample_walks_every)
            sums = {"total": 0.0, "video": 0.0, "vlogger": 0.0, "cl": 0.0, "reg": 0.0}
            video_batches = _batches(len(pairs), cfg.batch_size, shuffle_rng)
            vsize = math.ceil(len(up) / len(video_batches)) if cfg.vlogger_batch == "spread" else cfg.batch_size
            for b, rows in enumerate(video_batches):
                vrows = cycler.take(vsize) if cycler else None
                batch = make_batch(pairs, rows, video_index, cfg.negatives_per_positive, neg_rng,
                                   up, vrows, vlogger_index, cfg.max_negative_retries)
                try:
                    grads, terms = compute_gradients(state.params, ctx, batch, cfg)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
                state = adam_step(state, grads, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                for k in sums:
                    sums[k] += terms[k]
            recall = float(validate(state.params, ctx))
            state.epoch = epoch + 1
            if recall > state.best_recall:
                state.best_recall, state.since_improvement = recall, 0
                best = (state.params.clone(), epoch)
            else:
                state.since_improvement += 1
            record = {"epoch": epoch, **{f"loss_{k}": v for k, v in sums.items()}, "val_recall@10": recall}
            result.log.append(record)
            log.info("epoch %d loss %.6f val recall@10 %.4f", epoch, sums["total"], recall)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
            if state.since_improvement >= cfg.patience:
                break
    finally:
        if sink:
            sink.close()
    result.state = state
    result.ctx = ctx
    if best is not None:
        result.params, result.best_epoch = best
    return result


# --- checkpoints -------------------------------------------------------------
#
# Layout (little-endian):
#   8s  magic b"VLGCKPT\0"
#   I   format version
#   I   header length in bytes
#   header: UTF-8 JSON with shapes, counters and the training config
#   payload: float64 row-major tensors, parameters then first moments then
#            second moments, each group in the order users, videos, vloggers, gate

CHECKPOINT_VERSION = 1
_CK_MAGIC = b"VLGCKPT\x00"
_CK_PREFIX = struct.Struct("<8sII")


def save_checkpoint(state: TrainState, path: str | Path, config: dict | None = None) -> None:
    header = {
        "shapes": {k: list(v.shape) for k, v in state.params.items()},
        "step": state.step,
        "epoch": state.epoch,
        "best_recall": state.best_recall,
        "since_improvement": state.since_improvement,
        "config": config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_PREFIX.pack(_CK_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for group in (state.params.as_dict(), state.m, state.v):
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(group[name].detach().to(torch.float64).numpy(), dtype="<f8").tobytes())


def load_checkpoint(
    path: str | Path, counts: Sequence[int] | None = None, d: int | None = None
) -> tuple[TrainState, dict]:
    """Read a checkpoint, optionally validating it against entity counts and ``d``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    if len(data) < _CK_PREFIX.size:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CK_PREFIX.unpack_from(data)
    if magic != _CK_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[_CK_PREFIX.size:_CK_PREFIX.size + hlen])
        shapes = {k: tuple(header["shapes"][k]) for k in PARAM_NAMES}
    except (ValueError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint header") from exc
    offset = _CK_PREFIX.size + hlen
    need = 3 * sum(math.prod(s) for s in shapes.values()) * 8
    if len(data) - offset != need:
        raise CorruptCheckpointError(f"{path}: expected {need} payload bytes, found {len(data) - offset}")
    stored_d = shapes["users"][1]
    if d is not None and d != stored_d:
        raise ShapeError(f"checkpoint embedding dim d={stored_d} does not match configured d={d}")
    if counts is not None:
        stored = (shapes["users"][0], shapes["videos"][0], shapes["vloggers"][0])
        if tuple(counts) != stored:
            raise ShapeError(f"checkpoint entity counts {stored} do not match graph counts {tuple(counts)}")
    groups = []
    for _ in range(3):
        group = {}
        for name in PARAM_NAMES:
            n = math.prod(shapes[name])
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shapes[name])
            group[name] = torch.from_numpy(arr.astype(np.float64))
            offset += n * 8
        groups.append(group)
    state = TrainState(
        ModelParams(**groups[0]),
        groups[1],
        groups[2],
        header["step"],
        header["epoch"],
        header["best_recall"],
        header["since_improvement"],
    )
    return state, header["config"]
