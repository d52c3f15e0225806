from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from meshphys.fileio import packaged_topology_path, read_topology
from meshphys.model import ArchitectureSpec, make_hierarchy
from meshphys.pooling import (build_hierarchy, compute_clusters, laplacian, normalized_adjacency,
                              pool_adjacency, pool_features, pooling_matrix)
from meshphys.stgraph import build_adjacency


def test_cluster_counts():
    rng = np.random.default_rng(0)
    assert compute_clusters(rng.normal(size=(852, 3)), ratio=4).max() + 1 == 213
    assert compute_clusters(rng.normal(size=(10, 3)), ratio=4).max() + 1 == 2
    assert compute_clusters(rng.normal(size=(1, 3)), ratio=4).tolist() == [0]
    with pytest.raises(ValueError):
        compute_clusters(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        compute_clusters(rng.normal(size=(5, 3)), ratio=1)


@given(st.integers(1, 60), st.integers(2, 5), st.integers(0, 1000))
def test_assignment_total_and_surjective(n, ratio, seed):
    pos = np.random.default_rng(seed).normal(size=(n, 3))
    a = compute_clusters(pos, ratio=ratio, seed=seed)
    k = max(1, n // ratio)
    assert a.shape == (n,) and set(a.tolist()) == set(range(k))


@given(st.integers(4, 40), st.integers(0, 1000))
def test_clusters_equivariant_under_relabeling(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    a = compute_clusters(pos, ratio=4)
    b = compute_clusters(pos[perm], ratio=4)
    # same partition, node i of the permuted set is node perm[i] of the original
    pairs = set(zip(a[perm].tolist(), b.tolist()))
    assert len(pairs) == len(set(a.tolist()))


def test_pool_features_examples():
    x = np.arange(24, dtype=float).reshape(2, 3, 4)
    assert np.allclose(pool_features(x, np.zeros(4, int)), x.mean(-1, keepdims=True))
    assert np.array_equal(pool_features(x, np.arange(4)), x)
    assert np.allclose(pool_features(x, np.array([0, 0, 1, 1])),
                       np.stack([(x[..., 0] + x[..., 1]) / 2, (x[..., 2] + x[..., 3]) / 2], -1))


@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_pool_features_linear_and_constant_preserving(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, size=9)
    a[:3] = [0, 1, 2]
    x, y = rng.normal(size=(2, 5, 9)), rng.normal(size=(2, 5, 9))
    lhs = pool_features(alpha * x + beta * y, a)
    rhs = alpha * pool_features(x, a) + beta * pool_features(y, a)
    assert np.allclose(lhs, rhs, atol=1e-12)
    assert np.allclose(pool_features(np.full((2, 5, 9), 0.7), a), 0.7)


def test_pool_adjacency_examples():
    a = np.array([0, 1, 1, 2, 2, 2])
    assert np.array_equal(pool_adjacency(sp.eye_array(6), a).toarray(), np.eye(3))
    assert np.array_equal(pool_adjacency(np.ones((6, 6)), a).toarray(), np.ones((3, 3)))
    path = sp.csr_array(np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], float))
    assert np.array_equal(pool_adjacency(path, np.array([0, 1, 1])).toarray(), np.ones((2, 2)))


@given(st.integers(0, 1000))
def test_pool_adjacency_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 12
    m = rng.uniform(size=(n, n)) < 0.2
    adj = ((m | m.T) | np.eye(n, dtype=bool)).astype(float)
    assign = compute_clusters(rng.normal(size=(n, 3)), ratio=3)
    k = assign.max() + 1
    ref = np.eye(k)
    for i in range(n):
        for j in range(n):
            if adj[i, j]:
                ref[assign[i], assign[j]] = 1
    got = pool_adjacency(adj, assign).toarray()
    assert np.array_equal(got, ref) and np.array_equal(got, got.T)


def test_default_hierarchy_chain():
    topo = read_topology(packaged_topology_path())
    adj = build_adjacency(topo, "shared_vertex")
    h = make_hierarchy(ArchitectureSpec(), topo.face_centroids(), adj)
    assert h.node_counts == [852, 213, 53, 13]
    for a in h.adjacencies:
        d = a.toarray()
        assert np.array_equal(d, d.T) and np.all(np.diag(d) == 1)


def test_hierarchy_is_deterministic():
    rng = np.random.default_rng(3)
    pos = rng.normal(size=(50, 3))
    adj = sp.eye_array(50)
    h1, h2 = build_hierarchy(pos, adj, 2), build_hierarchy(pos, adj, 2)
    for a, b in zip(h1.assignments, h2.assignments):
        assert np.array_equal(a, b)


def test_pooling_matrix_rows_average():
    m = pooling_matrix(np.array([0, 0, 1, 2, 2, 2])).toarray()
    assert np.allclose(m.sum(1), 1.0)


def test_normalized_adjacency_and_laplacian():
    a = sp.csr_array(np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], float))
    n = normalized_adjacency(a).toarray()
    d = np.array([2, 3, 2.0])
    assert np.allclose(n, a.toarray() / np.sqrt(np.outer(d, d)))
    lap = laplacian(a).toarray()
    assert np.allclose(lap.sum(1), 0) and np.all(np.linalg.eigvalsh(lap) > -1e-12)
