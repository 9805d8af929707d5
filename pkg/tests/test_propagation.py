import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vlogrec.errors import CorruptCheckpointError, InvalidConfigError, ShapeError
from vlogrec.graph import MetaPathConfig, MetaPathWalks, TripartiteGraph, augment, build_augmented_neighborhoods
from vlogrec.propagation import (
    aggregate_videos_vlogger_view,
    aggregate_vloggers_video_view,
    average_layers,
    concat_views,
    load_embeddings,
    propagate_video_view,
    propagate_vlogger_view,
    save_embeddings,
)

from conftest import random_tripartite


def dense_video_view_operator(aug):
    """Dense symmetric-normalized adjacency from the neighbor lists, users first."""
    nu, nv = aug.n_users, aug.n_videos
    n = nu + nv
    nbrs = list(aug.video_view_user_nbrs) + [np.asarray(x) + 0 for x in aug.video_view_video_nbrs]
    a = np.zeros((n, n))
    for i in range(nu):
        for j in aug.video_view_user_nbrs[i]:
            a[i, j] = 1.0
    for v in range(nv):
        for u in aug.video_view_video_nbrs[v]:
            a[nu + v, u] = 1.0
    deg = np.array([len(x) for x in nbrs], dtype=float)
    s = np.zeros_like(a)
    for i in range(n):
        for j in range(n):
            if a[i, j]:
                s[i, j] = 1.0 / (np.sqrt(deg[i]) * np.sqrt(deg[j]))
    return s


def dense_vlogger_view_operator(aug):
    nu, np_ = aug.n_users, aug.n_vloggers
    a = np.zeros((nu + np_, nu + np_))
    for u in range(nu):
        for p in aug.vlogger_view_user_nbrs[u]:
            a[u, nu + p] = 1.0
    for p in range(np_):
        for u in aug.vlogger_view_vlogger_nbrs[p]:
            a[nu + p, u] = 1.0
    deg = a.sum(1)
    inv = np.where(deg > 0, 1 / np.sqrt(np.maximum(deg, 1)), 0.0)
    return inv[:, None] * a * inv[None, :]


def _t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_single_edge_unit_coefficient():
    g = TripartiteGraph.from_indices(1, 1, 1, [(0, 0)], [(0, 0)], [(0, 0)])
    aug = build_augmented_neighborhoods(g, MetaPathWalks.empty())
    eu, ev, ep = _t([[1.0, 2.0]]), _t([[3.0, -1.0]]), _t([[0.5, 0.25]])
    users, videos = propagate_video_view(eu, ev, aug, 1)
    assert torch.equal(users[1], ev) and torch.equal(videos[1], eu)
    users2, vloggers2 = propagate_vlogger_view(eu, ep, aug, 1)
    assert torch.equal(users2[1], ep) and torch.equal(vloggers2[1], eu)


def test_isolated_user_gets_zero_layers():
    g = TripartiteGraph.from_indices(2, 1, 1, [(0, 0)], [], [(0, 0)])
    aug = build_augmented_neighborhoods(g, MetaPathWalks.empty())
    eu = _t([[1.0, 1.0], [2.0, -3.0]])
    users, _ = propagate_video_view(eu, _t([[1.0, 0.0]]), aug, 2)
    assert torch.count_nonzero(users[1][1]) == 0 and torch.count_nonzero(users[2][1]) == 0
    assert torch.allclose(average_layers(users)[1], eu[1] / 3, atol=0, rtol=0)


@pytest.mark.parametrize("trial", range(6))
def test_dense_oracle_random(trial):
    rng = np.random.default_rng(100 + trial)
    g = random_tripartite(rng, int(rng.integers(3, 9)), int(rng.integers(3, 10)), int(rng.integers(1, 4)))
    aug = augment(g, MetaPathConfig(q1=0.8, q2=0.5, walks_per_user=4, vlogger_view_walks_per_user=4, seed=trial))
    d, n_layers = 4, 3
    eu, ev, ep = (rng.normal(size=(n, d)) for n in g.counts)
    users, videos = propagate_video_view(_t(eu), _t(ev), aug, n_layers)
    s = dense_video_view_operator(aug)
    base = np.vstack([eu, ev])
    for layer in range(n_layers + 1):
        expect = np.linalg.matrix_power(s, layer) @ base
        got = torch.cat([users[layer], videos[layer]]).numpy()
        assert np.abs(got - expect).max() <= 1e-10
    users2, vloggers2 = propagate_vlogger_view(_t(eu), _t(ep), aug, n_layers)
    s2 = dense_vlogger_view_operator(aug)
    base2 = np.vstack([eu, ep])
    for layer in range(n_layers + 1):
        expect = np.linalg.matrix_power(s2, layer) @ base2
        assert np.abs(torch.cat([users2[layer], vloggers2[layer]]).numpy() - expect).max() <= 1e-10


def test_vlogger_view_without_augmentation_is_bipartite():
    rng = np.random.default_rng(8)
    g = random_tripartite(rng, 6, 7, 3)
    aug = augment(g, MetaPathConfig(q1=0.0, seed=1))
    s = dense_vlogger_view_operator(aug)
    a = np.zeros_like(s)
    deg_u = g.degrees("up")["user"]
    deg_p = g.degrees("up")["vlogger"]
    for u, p in g.up:
        a[u, g.n_users + p] = a[g.n_users + p, u] = 1 / np.sqrt(deg_u[u] * deg_p[p])
    assert np.abs(s - a).max() <= 1e-15


def test_aggregation_mean_pooling():
    g = TripartiteGraph.from_indices(2, 4, 3, [(0, 0), (1, 1), (1, 2), (0, 3)], [],
                                     [(0, 0), (1, 1), (1, 2), (1, 3)])
    x = _t([[1.0, 2.0], [3.0, 4.0], [-3.0, -4.0], [0.5, 0.5]])
    (pooled,) = aggregate_vloggers_video_view([x], g)
    assert torch.equal(pooled[0], x[0])  # singleton
    assert torch.equal(pooled[2], torch.zeros(2, dtype=torch.float64))  # vlogger without videos
    expect = (x[1] + x[2] + x[3]) / 3
    assert torch.abs(pooled[1] - expect).max() <= 1e-12
    # x and -x cancel
    (pooled,) = aggregate_vloggers_video_view([_t([[1.0, 1.0], [2.0, 1.0], [-2.0, -1.0], [0.0, 0.0]])],
                                              TripartiteGraph.from_indices(1, 4, 2, [(0, 0)], [], [(0, 0), (1, 1), (1, 2), (0, 3)]))
    assert torch.equal(pooled[1], torch.zeros(2, dtype=torch.float64))


def test_video_aggregation_over_users():
    g = TripartiteGraph.from_indices(3, 3, 1, [(0, 0), (1, 1), (2, 1), (0, 1)], [], [(0, 0), (0, 1), (0, 2)])
    users = _t(np.random.default_rng(2).normal(size=(3, 5)))
    (pooled,) = aggregate_videos_vlogger_view([users], g)
    assert torch.equal(pooled[0], users[0])
    manual = np.zeros(5)
    for u in (0, 1, 2):
        manual += users[u].numpy()
    assert np.abs(pooled[1].numpy() - manual / 3).max() <= 1e-12
    assert torch.count_nonzero(pooled[2]) == 0  # nobody watched video 2


def test_average_layers():
    a = _t(np.ones((2, 3)))
    assert torch.equal(average_layers([a]), a)
    b, c = 2 * a, 6 * a
    assert torch.allclose(average_layers([a, b, c]), 3 * a, rtol=0, atol=1e-15)
    assert torch.allclose(average_layers([a, b, c], "L"), 4.5 * a, rtol=0, atol=1e-15)
    with pytest.raises(InvalidConfigError):
        average_layers([a], "L")
    rng = np.random.default_rng(5)
    layers = [rng.normal(size=(4, 8)) for _ in range(4)]
    acc = np.zeros((4, 8))
    for x in layers:
        acc = acc + x
    assert np.abs(average_layers([_t(x) for x in layers]).numpy() - acc / 4).max() <= 1e-12


def test_concat_views():
    out = concat_views(_t([[1.0, 2.0]]), _t([[3.0, 4.0]]))
    assert out.tolist() == [[1.0, 2.0, 3.0, 4.0]]
    zero = concat_views(_t([[1.0, 2.0]]), _t([[0.0, 0.0]]))
    assert zero[0, 2:].tolist() == [0.0, 0.0]
    rng = np.random.default_rng(3)
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(3, 4)))
    both = concat_views(a, b)
    assert torch.equal(both[:, :4], a) and torch.equal(both[:, 4:], b)
    with pytest.raises(ShapeError):
        concat_views(_t([[1.0]]), _t([[1.0, 2.0]]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_linearity_and_zero_preservation(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    g = random_tripartite(rng, 5, 6, 2)
    aug = augment(g, MetaPathConfig(seed=seed))
    e1u, e1v, e2u, e2v = (_t(rng.normal(size=(n, 3))) for n in (5, 6, 5, 6))
    lin_u, lin_v = propagate_video_view(alpha * e1u + beta * e2u, alpha * e1v + beta * e2v, aug, 3)
    a_u, a_v = propagate_video_view(e1u, e1v, aug, 3)
    b_u, b_v = propagate_video_view(e2u, e2v, aug, 3)
    for layer in range(4):
        assert torch.allclose(lin_u[layer], alpha * a_u[layer] + beta * b_u[layer], atol=1e-10, rtol=0)
        assert torch.allclose(lin_v[layer], alpha * a_v[layer] + beta * b_v[layer], atol=1e-10, rtol=0)
    zu, zv = propagate_video_view(torch.zeros_like(e1u), torch.zeros_like(e1v), aug, 3)
    assert all(torch.count_nonzero(x) == 0 for x in zu + zv)
    assert torch.isfinite(average_layers(a_u)).all()


def test_embedding_snapshot_roundtrip(tmp_path):
    table = np.random.default_rng(0).normal(size=(7, 3))
    save_embeddings(tmp_path / "u.emb", table, "user", layer=2)
    entity, layer, back = load_embeddings(tmp_path / "u.emb")
    assert (entity, layer) == ("user", 2) and np.array_equal(back, table)
    raw = (tmp_path / "u.emb").read_bytes()
    assert len(raw) == 32 + 7 * 3 * 8
    (tmp_path / "cut.emb").write_bytes(raw[:-5])
    with pytest.raises(CorruptCheckpointError):
        load_embeddings(tmp_path / "cut.emb")
