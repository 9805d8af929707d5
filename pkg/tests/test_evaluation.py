import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlogrec.data import TEST, VAL, generate_synthetic
from vlogrec.errors import EmptyCandidateError, InvalidConfigError, SplitLeakageError, ValidationError
from vlogrec.evaluation import (
    ABLATIONS,
    comparison_table,
    evaluate_scores,
    metrics_from_ranks,
    ndcg_at_k,
    rank_for_user,
    recall_at_k,
    recommend,
    run_ablation_suite,
    target_rank,
    variant_config,
)
from vlogrec.graph import MetaPathConfig
from vlogrec.model import ModelContext, TrainConfig, init_params, lightgcn_config, score_matrix
from vlogrec.training import train

from conftest import random_tripartite


def test_rank_example():
    r = rank_for_user(0, np.array([0.9, 0.1, 0.5]), [])
    assert list(r.order) == [0, 2, 1]


def test_ties_by_ascending_index():
    r = rank_for_user(0, np.array([0.2, 0.7, 0.2, 0.7]), [], target=2)
    assert list(r.order) == [1, 3, 0, 2] and r.target_rank == 4


def test_rank_matches_sort_oracle(rng):
    for _ in range(20):
        scores = rng.integers(0, 8, size=50) / 4.0  # coarse values force ties
        excl = rng.choice(50, size=10, replace=False)
        oracle = sorted((v for v in range(50) if v not in set(excl)), key=lambda v: (-scores[v], v))
        r = rank_for_user(0, scores, excl)
        assert list(r.order) == oracle
        target = oracle[int(rng.integers(len(oracle)))]
        assert target_rank(scores, excl, target) == oracle.index(target) + 1


def test_leakage_and_empty_candidates():
    with pytest.raises(SplitLeakageError):
        rank_for_user(0, np.zeros(3), [1], target=1)
    with pytest.raises(EmptyCandidateError):
        rank_for_user(0, np.zeros(2), [0, 1])


@pytest.mark.parametrize("rank, k, rec, ndcg", [(1, 10, 1.0, 1.0), (11, 10, 0.0, 0.0), (3, 10, 1.0, 0.5),
                                                (None, 10, 0.0, 0.0), (10, 10, 1.0, 1 / math.log2(11))])
def test_metric_values(rank, k, rec, ndcg):
    assert recall_at_k(rank, k) == rec
    assert ndcg_at_k(rank, k) == pytest.approx(ndcg, abs=1e-15)


def test_metric_k_validation():
    with pytest.raises(InvalidConfigError):
        recall_at_k(1, 0)
    with pytest.raises(InvalidConfigError):
        ndcg_at_k(1, 0)


def test_all_first_and_all_missed():
    top = metrics_from_ranks([1, 1, 1], (10, 20))
    assert top.recall == {10: 1.0, 20: 1.0} and top.ndcg == {10: 1.0, 20: 1.0}
    miss = metrics_from_ranks([500, None], (10, 20))
    assert miss.recall == {10: 0.0, 20: 0.0} and miss.ndcg == {10: 0.0, 20: 0.0}
    with pytest.raises(ValidationError):
        metrics_from_ranks([], (10,))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 80), min_size=1, max_size=30))
def test_metrics_monotone_and_bounded(ranks):
    rep = metrics_from_ranks(ranks, (10, 20, 50))
    for a, b in ((10, 20), (20, 50)):
        assert rep.recall[a] <= rep.recall[b] and rep.ndcg[a] <= rep.ndcg[b]
    for k in (10, 20, 50):
        assert 0 <= rep.ndcg[k] <= rep.recall[k] <= 1


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(60, 6, 10, 0.9, 0.0, 15, seed=5)


def test_fixture_average_matches_oracle(ds):
    rng = np.random.default_rng(4)
    scores = rng.random((ds.n_users, ds.n_videos))
    rep = evaluate_scores(scores, ds, TEST, (10, 20))
    targets, excl = ds.targets(TEST), ds.exclusions(TEST)
    hits, dcg = {10: [], 20: []}, {10: [], 20: []}
    for u, t in targets.items():
        seen = set(excl[u].tolist())
        ranked = sorted((v for v in range(ds.n_videos) if v not in seen), key=lambda v: (-scores[u, v], v))
        r = ranked.index(t) + 1
        for k in (10, 20):
            hits[k].append(1.0 if r <= k else 0.0)
            dcg[k].append(1 / math.log2(r + 1) if r <= k else 0.0)
    for k in (10, 20):
        assert rep.recall[k] == pytest.approx(sum(hits[k]) / len(hits[k]), abs=1e-12)
        assert rep.ndcg[k] == pytest.approx(sum(dcg[k]) / len(dcg[k]), abs=1e-12)
    assert rep.n_users == len(targets)


def test_split_must_be_heldout(ds):
    with pytest.raises(InvalidConfigError):
        evaluate_scores(np.zeros((ds.n_users, ds.n_videos)), ds, 0)


def test_validation_excludes_train_only(ds):
    scores = np.zeros((ds.n_users, ds.n_videos))
    u, t = next(iter(ds.targets(VAL).items()))
    # make the test item of u the top scorer; it is a candidate during validation
    test_item = ds.targets(TEST)[u]
    scores[u, test_item] = 5.0
    scores[u, t] = 4.0
    assert evaluate_scores(scores[[u]], ds, VAL, (1,), users=[u]).recall[1] == 0.0
    assert evaluate_scores(scores[[u]], ds, TEST, (1,), users=[u]).recall[1] == 1.0


def test_lightgcn_reduction_matches_bipartite_propagation(rng):
    graph = random_tripartite(rng, 6, 7, 3)
    cfg = lightgcn_config(TrainConfig(d=4, n_layers=3, seed=8))
    ctx = ModelContext.build(graph, cfg)
    params = init_params(cfg, graph.counts)
    got = score_matrix(params, ctx, cfg)
    # dense bipartite propagation written out directly
    n = graph.n_users + graph.n_videos
    adj = np.zeros((n, n))
    for u, v in graph.uv:
        adj[u, graph.n_users + v] = adj[graph.n_users + v, u] = 1.0
    deg = adj.sum(1)
    inv = np.where(deg > 0, 1 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    norm = inv[:, None] * adj * inv[None, :]
    layer = np.vstack([params.users.numpy(), params.videos.numpy()])
    total = layer.copy()
    for _ in range(3):
        layer = norm @ layer
        total += layer
    final = total / 4
    expected = final[: graph.n_users] @ final[graph.n_users:].T
    assert np.abs(got - expected).max() <= 1e-10


def test_variant_configs_differ_by_one_field():
    base = TrainConfig()
    for name, change in ABLATIONS.items():
        cfg = variant_config(base, name)
        diff = {k for k, v in cfg.to_dict().items() if v != base.to_dict()[k]}
        if not change:
            assert diff == set()
        elif any(k.startswith("lambda") for k in change):
            assert diff == {"weights"}
            wdiff = {k for k, v in cfg.to_dict()["weights"].items() if v != base.to_dict()["weights"][k]}
            assert wdiff == set(change)
        else:
            assert diff == set(change)
    assert variant_config(base, "A w/o CL loss").weights.lambda2 == 0.0


def test_variant_e_gate_untouched(ds):
    cfg = variant_config(TrainConfig(d=8, n_layers=2, batch_size=256, max_epochs=2, seed=1,
                                     metapath=MetaPathConfig(walks_per_user=2, vlogger_view_walks_per_user=2)),
                         "E w/o vlogger score")
    r = train(ds, cfg)
    init = init_params(cfg, ds.train_graph().counts)
    assert np.array_equal(r.params.gate.numpy(), init.gate.numpy())
    assert not np.array_equal(r.params.users.numpy(), init.users.numpy())


def test_recommend_excludes_watched_and_agrees_with_ranking(ds):
    cfg = TrainConfig(d=8, n_layers=2, seed=2, metapath=MetaPathConfig(walks_per_user=2, vlogger_view_walks_per_user=2))
    ctx = ModelContext.build(ds.train_graph(), cfg)
    params = init_params(cfg, ds.train_graph().counts)
    user = 3
    recs = recommend(params, ctx, cfg, ds, user, 5)
    watched = set(ds.uv[ds.uv[:, 0] == user, 1].tolist())
    assert len(recs) == 5 and not watched & {v for v, _ in recs}
    scores = score_matrix(params, ctx, cfg, [user])[0]
    oracle = sorted((v for v in range(ds.n_videos) if v not in watched), key=lambda v: (-scores[v], v))[:5]
    assert [v for v, _ in recs] == oracle


def test_ablation_suite_table(ds):
    cfg = TrainConfig(d=8, n_layers=2, batch_size=512, max_epochs=1, seed=1,
                      metapath=MetaPathConfig(walks_per_user=2, vlogger_view_walks_per_user=2))
    rows = run_ablation_suite(ds, cfg, (10, 20))
    assert [r.name for r in rows] == list(ABLATIONS) + ["LightGCN"]
    table = comparison_table(rows).splitlines()
    assert table[0].split("\t") == ["model", "recall@10", "recall@20", "ndcg@10", "ndcg@20", "best_epoch"]
    assert len(table) == 8
