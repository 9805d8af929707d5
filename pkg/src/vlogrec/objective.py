"""Scores, gate and loss terms. All functions are batched over leading dims."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidConfigError, ShapeError

Tensor = torch.Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 5.0  # vlogger task
    lambda2: float = 0.0005  # contrastive
    lambda3: float = 1e-4  # L2 on batch parameters
    tau: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidConfigError(f"tau must be positive, got {self.tau}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidConfigError("loss weights must be non-negative")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_width(*xs: Tensor) -> None:
    widths = {x.shape[-1] for x in xs}
    if len(widths) != 1:
        raise ShapeError(f"embedding widths differ: {sorted(widths)}")


def score_user_vlogger(e_u, e_p) -> Tensor:
    e_u, e_p = _t(e_u), _t(e_p)
    _same_width(e_u, e_p)
    return (e_u * e_p).sum(-1)


def gate_weight(e_v, e_pv, q) -> Tensor:
    """sigmoid of the bilinear form ``e_v^T Q e_pv``."""
    e_v, e_pv, q = _t(e_v), _t(e_pv), _t(q)
    _same_width(e_v, e_pv)
    if q.shape != (e_v.shape[-1], e_v.shape[-1]):
        raise ShapeError(f"gate matrix shape {tuple(q.shape)} does not match width {e_v.shape[-1]}")
    return torch.sigmoid(((e_v @ q) * e_pv).sum(-1))


def score_user_video(e_u, e_v, e_pv, q) -> Tensor:
    e_u, e_v, e_pv = _t(e_u), _t(e_v), _t(e_pv)
    _same_width(e_u, e_v, e_pv)
    w = gate_weight(e_v, e_pv, q)
    return w * (e_u * e_v).sum(-1) + (1 - w) * (e_u * e_pv).sum(-1)


def bpr_loss(pos_scores, neg_scores) -> Tensor:
    """Summed ``-ln sigmoid(pos - neg)``, via ``log(1 + exp(neg - pos))``."""
    pos, neg = _t(pos_scores), _t(neg_scores)
    if pos.shape != neg.shape:
        raise ShapeError(f"positive/negative score shapes differ: {tuple(pos.shape)} vs {tuple(neg.shape)}")
    diff = neg - pos
    return torch.logaddexp(torch.zeros_like(diff), diff).sum()


def unit_rows(x: Tensor) -> Tensor:
    """Row-normalize; zero rows stay zero so their cosine with anything is 0."""
    sq = (x * x).sum(-1, keepdim=True)
    nonzero = sq > 0
    norm = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    return torch.where(nonzero, x / norm, torch.zeros_like(x))


def infonce_cross_view(view1, view2, tau: float, candidates=None, anchors=None) -> Tensor:
    """Mean cross-view InfoNCE over ``anchors`` against ``candidates``.

    Both index sets default to every row; anchors must be candidates.
    """
    if tau <= 0:
        raise InvalidConfigError(f"tau must be positive, got {tau}")
    view1, view2 = _t(view1), _t(view2)
    if view1.shape != view2.shape:
        raise ShapeError(f"view tables differ in shape: {tuple(view1.shape)} vs {tuple(view2.shape)}")
    n = view1.shape[0]
    cand = torch.arange(n) if candidates is None else torch.as_tensor(candidates, dtype=torch.long)
    anc = cand if anchors is None else torch.as_tensor(anchors, dtype=torch.long)
    if len(cand) == 0:
        raise InvalidConfigError("contrastive candidate set is empty")
    # position of every anchor inside the candidate list
    lookup = torch.full((n,), -1, dtype=torch.long)
    lookup[cand] = torch.arange(len(cand))
    pos = lookup[anc]
    if (pos < 0).any():
        raise InvalidConfigError("every contrastive anchor must be among the candidates")
    a = unit_rows(view1[anc])
    c = unit_rows(view2[cand])
    logits = (a @ c.T) / tau
    positive = logits.gather(1, pos[:, None]).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - positive).mean()


def contrastive_total(user_cl, video_cl, vlogger_cl):
    return (user_cl + video_cl + vlogger_cl) / 3


def total_loss(video_loss, vlogger_loss, cl_loss, reg_term, w: LossWeights):
    return video_loss + w.lambda1 * vlogger_loss + w.lambda2 * cl_loss + w.lambda3 * reg_term
