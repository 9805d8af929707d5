import warnings

import numpy as np
import pytest

from vlogrec.graph import TripartiteGraph

warnings.filterwarnings("ignore", message="Sparse invariant checks")


def random_tripartite(rng: np.random.Generator, nu: int, nv: int, np_: int, density: float = 0.35) -> TripartiteGraph:
    """Random instance where every video has one publisher and every user at least one video."""
    publisher = rng.integers(np_, size=nv)
    uv = [(u, v) for u in range(nu) for v in range(nv) if rng.random() < density]
    uv += [(u, int(rng.integers(nv))) for u in range(nu)]
    up = [(u, p) for u in range(nu) for p in range(np_) if rng.random() < density]
    pv = [(int(publisher[v]), v) for v in range(nv)]
    return TripartiteGraph.from_indices(nu, nv, np_, uv, up, pv)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_graph():
    """5 users, 6 videos, 2 vloggers; 12 user-video, 4 user-vlogger, 6 publishing edges."""
    uv = [("u0", "v0"), ("u0", "v1"), ("u0", "v3"), ("u1", "v1"), ("u1", "v2"), ("u2", "v2"),
          ("u2", "v4"), ("u3", "v3"), ("u3", "v5"), ("u4", "v4"), ("u4", "v5"), ("u4", "v0")]
    up = [("u0", "p0"), ("u1", "p0"), ("u2", "p1"), ("u4", "p1")]
    pv = [("p0", "v0"), ("p0", "v1"), ("p0", "v2"), ("p1", "v3"), ("p1", "v4"), ("p1", "v5")]
    return uv, up, pv
