"""Full-catalog ranking, Recall@K / NDCG@K and the ablation driver."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import TEST, VAL, SPLIT_NAMES, Dataset
from .errors import EmptyCandidateError, InvalidConfigError, SplitLeakageError, ValidationError
from .model import ModelContext, ModelParams, TrainConfig, lightgcn_config, score_matrix

DEFAULT_KS = (10, 20, 50)


@dataclass
class RankingResult:
    user: int
    order: np.ndarray
    target_rank: int | None  # 1-based, None when no target was given


def rank_for_user(user: int, scores: np.ndarray, exclusion, target: int | None = None) -> RankingResult:
    """Sort non-excluded videos by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    excluded = np.zeros(len(scores), dtype=bool)
    excluded[np.asarray(exclusion, dtype=np.int64)] = True
    if target is not None and excluded[target]:
        raise SplitLeakageError(f"target video {target} of user {user} is in the exclusion set")
    cand = np.flatnonzero(~excluded)
    if len(cand) == 0:
        raise EmptyCandidateError(f"user {user} has no candidate videos")
    order = cand[np.lexsort((cand, -scores[cand]))]
    rank = None
    if target is not None:
        rank = int(np.flatnonzero(order == target)[0]) + 1
    return RankingResult(user, order, rank)


def target_rank(scores: np.ndarray, exclusion, target: int) -> int:
    """Rank of ``target`` under the same ordering as :func:`rank_for_user`, without sorting."""
    s = scores[target]
    ahead = (scores > s) | ((scores == s) & (np.arange(len(scores)) < target))
    ex = np.asarray(exclusion, dtype=np.int64)
    return int(ahead.sum() - ahead[ex].sum()) + 1


def _rank_of(result) -> int | None:
    return result.target_rank if isinstance(result, RankingResult) else result


def recall_at_k(result: RankingResult | int | None, k: int) -> float:
    if k < 1:
        raise InvalidConfigError("k must be at least 1")
    rank = _rank_of(result)
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(result: RankingResult | int | None, k: int) -> float:
    if k < 1:
        raise InvalidConfigError("k must be at least 1")
    rank = _rank_of(result)
    return 1.0 / math.log2(rank + 1) if rank is not None and rank <= k else 0.0


@dataclass
class MetricsReport:
    split: str
    ks: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    config_digest: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"split\t{self.split}", f"users\t{self.n_users}"]
        lines += [f"recall@{k}\t{self.recall[k]!r}" for k in self.ks]
        lines += [f"ndcg@{k}\t{self.ndcg[k]!r}" for k in self.ks]
        lines += [f"config_digest\t{self.config_digest}", f"seed\t{self.seed}"]
        lines += [f"{k}\t{v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "users": self.n_users,
                "recall": {str(k): v for k, v in self.recall.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "config_digest": self.config_digest,
                "seed": self.seed,
                **self.extra,
            },
            sort_keys=True,
            indent=1,
        )


def metrics_from_ranks(ranks: Sequence[int | None], ks: Sequence[int], split: str = "") -> MetricsReport:
    if len(ranks) == 0:
        raise ValidationError("no evaluable users")
    ks = tuple(ks)
    recall = {k: float(np.mean([recall_at_k(r, k) for r in ranks])) for k in ks}
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in ks}
    return MetricsReport(split, ks, recall, ndcg, len(ranks))


def evaluate_scores(scores: np.ndarray, dataset: Dataset, split: int, ks: Sequence[int] = DEFAULT_KS,
                    users: Sequence[int] | None = None) -> MetricsReport:
    """Metrics from a precomputed (users x videos) score matrix whose rows follow ``users``."""
    if split not in (VAL, TEST):
        raise InvalidConfigError("evaluation split must be validation or test")
    targets = dataset.targets(split)
    exclusions = dataset.exclusions(split)
    row_users = list(range(dataset.n_users)) if users is None else list(users)
    ranks = []
    for row, u in enumerate(row_users):
        if u not in targets:
            continue
        if np.any(exclusions[u] == targets[u]):
            raise SplitLeakageError(f"target video {targets[u]} of user {u} is in the exclusion set")
        ranks.append(target_rank(scores[row], exclusions[u], targets[u]))
    return metrics_from_ranks(ranks, ks, SPLIT_NAMES[split])


def evaluate(
    params: ModelParams,
    ctx: ModelContext,
    cfg: TrainConfig,
    dataset: Dataset,
    split: int,
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsReport:
    users = sorted(dataset.targets(split))
    if not users:
        raise ValidationError(f"no users with a {SPLIT_NAMES[split]} interaction")
    scores = score_matrix(params, ctx, cfg, users)
    report = evaluate_scores(scores, dataset, split, ks, users)
    report.config_digest, report.seed = cfg.digest(), cfg.seed
    return report


def recommend(
    params: ModelParams, ctx: ModelContext, cfg: TrainConfig, dataset: Dataset, user: int, k: int
) -> list[tuple[int, float]]:
    """Top-``k`` unwatched videos for ``user``; every watched video is excluded."""
    scores = score_matrix(params, ctx, cfg, [user])[0]
    watched = dataset.uv[dataset.uv[:, 0] == user, 1]
    result = rank_for_user(user, scores, watched)
    return [(int(v), float(scores[v])) for v in result.order[:k]]


ABLATIONS = {
    "VA-GNN": {},
    "A w/o CL loss": {"lambda2": 0.0},
    "B w/o vlogger loss": {"lambda1": 0.0},
    "C w/o video-view": {"use_video_view": False},
    "D w/o vlogger-view": {"use_vlogger_view": False},
    "E w/o vlogger score": {"use_blending": False},
}


def variant_config(cfg: TrainConfig, name: str) -> TrainConfig:
    if name == "LightGCN":
        return lightgcn_config(cfg)
    change = ABLATIONS[name]
    weight_fields = {k: v for k, v in change.items() if k.startswith("lambda")}
    flags = {k: v for k, v in change.items() if not k.startswith("lambda")}
    if weight_fields:
        cfg = replace(cfg, weights=replace(cfg.weights, **weight_fields))
    return replace(cfg, **flags)


@dataclass
class AblationRow:
    name: str
    config: TrainConfig
    report: MetricsReport
    best_epoch: int


def run_ablation_suite(
    dataset: Dataset, cfg: TrainConfig, ks: Sequence[int] = DEFAULT_KS, include_lightgcn: bool = True
) -> list[AblationRow]:
    from .training import train

    names = list(ABLATIONS) + (["LightGCN"] if include_lightgcn else [])
    rows = []
    for name in names:
        vcfg = variant_config(cfg, name)
        result = train(dataset, vcfg)
        report = evaluate(result.params, result.ctx, vcfg, dataset, TEST, ks)
        rows.append(AblationRow(name, vcfg, report, result.best_epoch))
    return rows


def comparison_table(rows: Sequence[AblationRow]) -> str:
    ks = rows[0].report.ks
    header = ["model"] + [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks] + ["best_epoch"]
    lines = ["\t".join(header)]
    for r in rows:
        vals = [f"{r.report.recall[k]:.4f}" for k in ks] + [f"{r.report.ndcg[k]:.4f}" for k in ks]
        lines.append("\t".join([r.name] + vals + [str(r.best_epoch)]))
    return "\n".join(lines) + "\n"
