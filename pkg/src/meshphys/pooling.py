"""Deterministic cluster hierarchy on canonical node positions.

Clusters are seeded by farthest-point sampling (starting from the node closest
to the mean position) and every node joins its nearest seed.  The hierarchy
is computed once and reused for every frame, clip and checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


def num_clusters(n: int, ratio: int) -> int:
    return max(1, n // ratio)


def compute_clusters(positions: np.ndarray, adjacency=None, ratio: int = 4, seed: int = 0,
                     k: int | None = None) -> np.ndarray:
    """Assign each of N nodes to one of ``K = max(1, N // ratio)`` clusters.

    ``k`` overrides the cluster count (used when coarsening straight to a target).
    ``seed`` only perturbs the order in which exact distance ties are broken.
    Cluster ``j`` is the one grown from the ``j``-th farthest-point seed.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n == 0:
        raise ValueError("cannot cluster an empty node set")
    if k is None:
        if ratio < 2:
            raise ValueError("pooling ratio must be >= 2")
        k = num_clusters(n, ratio)
    if not 1 <= k <= n:
        raise ValueError(f"cluster count {k} invalid for {n} nodes")
    if adjacency is not None and adjacency.shape != (n, n):
        raise ValueError("adjacency shape does not match positions")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")

    # tie-breaking priority: tiny seeded rank used only when distances are equal
    rank = np.random.default_rng(seed).permutation(n)

    def argmax_tie(values):
        best = values.max()
        cand = np.flatnonzero(values == best)
        return int(cand[np.argmin(rank[cand])])

    center = positions.mean(axis=0)
    d0 = np.linalg.norm(positions - center, axis=1)
    first = argmax_tie(-d0)
    seeds = [first]
    mind = np.linalg.norm(positions - positions[first], axis=1)
    for _ in range(1, k):
        nxt = argmax_tie(mind)
        seeds.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(positions - positions[nxt], axis=1))
    seeds = np.array(seeds)
    dist = np.linalg.norm(positions[:, None, :] - positions[seeds][None, :, :], axis=2)
    best = dist.min(axis=1, keepdims=True)
    ties = dist == best
    # nearest seed; ties go to the earlier seed
    assign = np.argmax(ties, axis=1)
    assign[seeds] = np.arange(k)
    return assign


def pooling_matrix(assignment: np.ndarray, k: int | None = None) -> sp.csr_array:
    """K x N averaging matrix for an assignment map."""
    assignment = np.asarray(assignment, dtype=np.int64)
    n = len(assignment)
    if k is None:
        k = int(assignment.max()) + 1
    counts = np.bincount(assignment, minlength=k)
    assert np.all(counts > 0), "empty cluster"
    data = 1.0 / counts[assignment]
    return sp.csr_array((data, (assignment, np.arange(n))), shape=(k, n))


def pool_features(features: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Unweighted per-cluster mean along the last (node) axis."""
    features = np.asarray(features)
    m = pooling_matrix(assignment)
    flat = features.reshape(-1, features.shape[-1])
    out = (m @ flat.T).T
    return np.asarray(out).reshape(features.shape[:-1] + (m.shape[0],))


def pool_adjacency(adjacency, assignment: np.ndarray) -> sp.csr_array:
    """Clusters p, q are linked iff some member of p neighbours some member of q."""
    assignment = np.asarray(assignment, dtype=np.int64)
    k = int(assignment.max()) + 1
    n = len(assignment)
    s = sp.csr_array((np.ones(n), (assignment, np.arange(n))), shape=(k, n))
    a = sp.csr_array(adjacency)
    pooled = (s @ a @ s.T) + sp.eye_array(k, format="csr")
    pooled = sp.csr_array((pooled > 0).astype(np.float64))
    pooled.sum_duplicates()
    return pooled


@dataclass
class PoolingHierarchy:
    assignments: list[np.ndarray]      # level l -> l+1 maps
    adjacencies: list[sp.csr_array]    # adjacency at every level, len = len(assignments) + 1
    positions: list[np.ndarray]

    @property
    def node_counts(self) -> list[int]:
        return [a.shape[0] for a in self.adjacencies]

    @property
    def num_levels(self) -> int:
        return len(self.adjacencies)


def build_hierarchy(positions: np.ndarray, adjacency, levels: int, ratio: int = 4,
                    seed: int = 0) -> PoolingHierarchy:
    """Stack ``levels`` pooling steps on top of the input graph."""
    positions = np.asarray(positions, dtype=np.float64)
    adj = sp.csr_array(adjacency, dtype=np.float64)
    assignments, adjs, pos = [], [adj], [positions]
    for _ in range(levels):
        a = compute_clusters(pos[-1], adjs[-1], ratio=ratio, seed=seed)
        assignments.append(a)
        adjs.append(pool_adjacency(adjs[-1], a))
        pos.append(pool_features(pos[-1].T, a).T)
    return PoolingHierarchy(assignments, adjs, pos)


def normalized_adjacency(adjacency) -> sp.csr_array:
    """Symmetric normalisation D^-1/2 A D^-1/2 of an adjacency with self-loops."""
    a = sp.csr_array(adjacency, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    d = sp.diags_array(inv)
    return sp.csr_array(d @ a @ d)


def laplacian(adjacency) -> sp.csr_array:
    """Unnormalised Laplacian D - A; self-loops cancel out."""
    a = sp.csr_array(adjacency, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sp.csr_array(sp.diags_array(deg) - a)
