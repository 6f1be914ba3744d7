"""Recursive nearest agglomeration (ReNA) over a pixel lattice.

Every pixel starts as its own cluster. Each round links every cluster to its
most similar adjacent cluster and merges along those links, using the mean
of member pixels as the cluster representative for the next round.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .core import InvalidArgument, LatticeGraph


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # (m,) cluster id per pixel, ids numbered by first occurrence
    k: int

    @property
    def m(self):
        return int(self.labels.shape[0])

    def sizes(self):
        return np.bincount(self.labels, minlength=self.k)


@dataclass(frozen=True)
class Converged:
    assignment: ClusterAssignment
    rounds: int

    converged = True


@dataclass(frozen=True)
class NotConverged:
    clusters_remaining: int
    labels: np.ndarray
    rounds: int

    converged = False


@dataclass(frozen=True)
class GroupingMatrix:
    """Sparse ``k x m`` matrix with one nonzero ``alpha_i`` per column."""

    matrix: sparse.csr_matrix
    alpha: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def toarray(self):
        return self.matrix.toarray()


@dataclass(frozen=True)
class MergeRound:
    labels: np.ndarray
    n_clusters: int
    stalled: bool


def _check_graph(data, graph):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise InvalidArgument(f"data must be a non-empty (n, m) matrix, got {data.shape}")
    if data.shape[1] != graph.node_count:
        raise InvalidArgument(
            f"data has {data.shape[1]} features but the graph has {graph.node_count} nodes"
        )
    return data


def edge_similarity(data, graph):
    """Squared Euclidean distance across samples for each lattice edge."""
    data = _check_graph(data, graph)
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    diff = data[:, u] - data[:, v]
    return np.einsum("ne,ne->e", diff, diff)


def relabel(labels):
    """Renumber cluster ids by order of first appearance."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse].astype(np.int64)


def cluster_means(data, labels, k):
    """Per-cluster mean of the member columns, shape ``(n, k)``."""
    m = labels.shape[0]
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    onehot = sparse.csr_matrix((1.0 / counts[labels], (np.arange(m), labels)), shape=(m, k))
    return np.asarray(data @ onehot)


class _UnionFind:
    def __init__(self, size):
        self.parent = list(range(size))

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # keep the lower id as root so relabeling stays deterministic
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True


def nearest_neighbor_links(reps, labels, graph):
    """1-NN graph over clusters: ``(src, dst, weight)`` sorted by ``(weight, src, dst)``.

    Ties in the nearest-neighbor choice go to the lowest cluster id.
    """
    k = reps.shape[1]
    a = labels[graph.edges[:, 0]]
    b = labels[graph.edges[:, 1]]
    keep = a != b
    if not np.any(keep):
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    pairs = np.unique(np.minimum(a[keep], b[keep]) * k + np.maximum(a[keep], b[keep]))
    lo, hi = pairs // k, pairs % k
    diff = reps[:, lo] - reps[:, hi]
    dist = np.einsum("ne,ne->e", diff, diff)

    src = np.concatenate([lo, hi])
    dst = np.concatenate([hi, lo])
    dist = np.concatenate([dist, dist])
    order = np.lexsort((dst, dist, src))
    src, dst, dist = src[order], dst[order], dist[order]
    first = np.ones(src.size, dtype=bool)
    first[1:] = src[1:] != src[:-1]
    src, dst, dist = src[first], dst[first], dist[first]

    order = np.lexsort((dst, src, dist))
    return src[order], dst[order], dist[order]


def one_nn_merge_round(labels, data, graph, max_merges=None):
    """Merge clusters along their nearest-neighbor links.

    ``labels`` maps pixels to the current clusters. With ``max_merges`` set,
    links are applied cheapest first and merging stops once that many
    clusters have been absorbed. A round with no inter-cluster edges returns
    the input unchanged with ``stalled=True``.
    """
    data = _check_graph(data, graph)
    labels = relabel(np.asarray(labels))
    k = int(labels.max()) + 1
    reps = cluster_means(data, labels, k)
    src, dst, _ = nearest_neighbor_links(reps, labels, graph)
    if src.size == 0:
        return MergeRound(labels, k, True)

    uf = _UnionFind(k)
    merged = 0
    for a, b in zip(src.tolist(), dst.tolist()):
        if max_merges is not None and merged >= max_merges:
            break
        if uf.union(a, b):
            merged += 1
    roots = np.array([uf.find(i) for i in range(k)])
    new_labels = relabel(roots[labels])
    return MergeRound(new_labels, k - merged, False)


def rena_fit(data, graph, k_target, max_iter=1000, halving=True):
    """Cluster the ``m`` columns of ``data`` into ``k_target`` connected groups.

    With ``halving`` (the default) a round absorbs at most half of the
    clusters still in excess of ``k_target``, cheapest links first, so a
    finished region is never forced into a dissimilar neighbor while other
    regions still have cheaper merges pending. With ``halving=False`` every
    round merges all 1-NN components and only the final round is trimmed to
    land on ``k_target``.
    """
    data = _check_graph(data, graph)
    m = graph.node_count
    if not 1 <= k_target <= m:
        raise InvalidArgument(f"k_target must lie in [1, {m}], got {k_target}")
    if max_iter < 1:
        raise InvalidArgument(f"max_iter must be >= 1, got {max_iter}")

    labels = np.arange(m, dtype=np.int64)
    count = m
    rounds = 0
    while count > k_target:
        if rounds >= max_iter:
            return NotConverged(count, labels, rounds)
        excess = count - k_target
        cap = (excess + 1) // 2 if halving else excess
        step = one_nn_merge_round(labels, data, graph, max_merges=cap)
        rounds += 1
        if step.stalled:
            return NotConverged(count, labels, rounds)
        labels, count = step.labels, step.n_clusters
    return Converged(ClusterAssignment(labels, count), rounds)


def grouping_matrix(assignment):
    labels = np.asarray(assignment.labels)
    k, m = assignment.k, labels.shape[0]
    alpha = 1.0 / np.sqrt(np.bincount(labels, minlength=k).astype(np.float64))
    matrix = sparse.csr_matrix((alpha[labels], (labels, np.arange(m))), shape=(k, m))
    return GroupingMatrix(matrix, alpha)


def reduce_and_reconstruct(x, phi):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != phi.shape[1]:
        raise InvalidArgument(f"vector of length {x.shape} does not match {phi.shape}")
    reduced = phi.matrix @ x
    return reduced, phi.matrix.T @ reduced
