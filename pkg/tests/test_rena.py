from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from dropcluster.core import InvalidArgument, LatticeGraph, RandomSource, build_lattice_graph, flatten_channel
from dropcluster.data import halves_partition, random_connected_partition, synthetic_planted
from dropcluster.rena import (
    ClusterAssignment,
    edge_similarity,
    grouping_matrix,
    one_nn_merge_round,
    reduce_and_reconstruct,
    relabel,
    rena_fit,
)


def is_connected(nodes, graph):
    nodes = set(nodes)
    start = next(iter(nodes))
    seen, queue = {start}, deque([start])
    while queue:
        node = queue.popleft()
        for other in graph.neighbors(node).tolist():
            if other in nodes and other not in seen:
                seen.add(other)
                queue.append(other)
    return seen == nodes


def edgeless_graph(count):
    empty = np.empty(0, dtype=np.int64)
    return LatticeGraph(count, 1, np.empty((0, 2), dtype=np.int64), np.zeros(count + 1, dtype=np.int64), empty)


class TestEdgeSimilarity:
    def test_identical_columns(self):
        g = build_lattice_graph(1, 2)
        assert edge_similarity(np.array([[1.0, 1.0], [2.0, 2.0]]), g)[0] == 0

    def test_single_sample(self):
        g = build_lattice_graph(1, 2)
        assert edge_similarity(np.array([[0.0, 3.0]]), g)[0] == 9.0

    def test_matches_double_loop(self):
        g = build_lattice_graph(4, 4)
        data = np.random.default_rng(0).normal(size=(4, 16))
        expected = []
        for u, v in g.edges.tolist():
            total = 0.0
            for s in range(data.shape[0]):
                total += (data[s, u] - data[s, v]) ** 2
            expected.append(total)
        np.testing.assert_allclose(edge_similarity(data, g), expected, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            edge_similarity(np.zeros((2, 5)), build_lattice_graph(2, 2))


class TestMergeRound:
    def test_two_clusters_one_edge(self):
        step = one_nn_merge_round(np.arange(2), np.array([[0.0, 1.0]]), build_lattice_graph(1, 2))
        assert step.n_clusters == 1
        np.testing.assert_array_equal(step.labels, [0, 0])

    def test_line_of_equal_pairs(self):
        g = build_lattice_graph(1, 4)
        data = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
        step = one_nn_merge_round(np.arange(4), data, g)
        np.testing.assert_array_equal(step.labels, [0, 0, 1, 1])

    def test_stall_without_edges(self):
        step = one_nn_merge_round(np.arange(3), np.zeros((1, 3)), edgeless_graph(3))
        assert step.stalled
        assert step.n_clusters == 3
        np.testing.assert_array_equal(step.labels, [0, 1, 2])

    def test_tie_goes_to_lowest_id(self):
        # pixel 1 is equidistant from 0 and 2; it must link to 0
        g = build_lattice_graph(1, 3)
        step = one_nn_merge_round(np.arange(3), np.array([[0.0, 1.0, 2.0]]), g, max_merges=1)
        np.testing.assert_array_equal(step.labels, [0, 0, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 2**32 - 1))
    def test_never_increases_count(self, w, h, seed):
        g = build_lattice_graph(w, h)
        data = np.random.default_rng(seed).normal(size=(3, w * h))
        labels, count = np.arange(w * h), w * h
        while count > 1:
            step = one_nn_merge_round(labels, data, g)
            assert step.n_clusters < count
            assert step.n_clusters == len(np.unique(step.labels))
            labels, count = step.labels, step.n_clusters


class TestRenaFit:
    def test_k_equals_m_is_identity(self):
        g = build_lattice_graph(3, 3)
        out = rena_fit(np.random.default_rng(0).normal(size=(2, 9)), g, 9)
        assert out.converged and out.rounds == 0
        np.testing.assert_array_equal(out.assignment.labels, np.arange(9))

    def test_left_right_columns(self):
        g = build_lattice_graph(2, 2)
        # pixel (x, y) -> node 2x + y; "left column" is y == 0
        data = np.tile([1.0, 0.0, 1.0, 0.0], (5, 1))
        out = rena_fit(data, g, 2)
        assert out.converged
        labels = out.assignment.labels
        assert labels[0] == labels[2] and labels[1] == labels[3] and labels[0] != labels[1]

    def test_constant_data_round_count(self):
        # 2x2 constant: round 1 absorbs ceil(3/2) = 2 clusters (0-1, 0-2 links),
        # round 2 the last one, so exactly 2 rounds
        g = build_lattice_graph(2, 2)
        out = rena_fit(np.ones((3, 4)), g, 1)
        assert out.converged and out.rounds == 2
        np.testing.assert_array_equal(out.assignment.labels, [0, 0, 0, 0])
        # without halving one round links all four pixels at once
        out = rena_fit(np.ones((3, 4)), g, 1, halving=False)
        assert out.converged and out.rounds == 1

    def test_constant_data_logarithmic_rounds(self):
        g = build_lattice_graph(16, 16)
        out = rena_fit(np.zeros((2, 256)), g, 1)
        assert out.converged
        assert out.rounds == int(np.ceil(np.log2(256)))

    def test_not_converged_after_max_iter(self):
        g = build_lattice_graph(16, 16)
        data = np.random.default_rng(1).normal(size=(8, 256))
        out = rena_fit(data, g, 15, max_iter=1)
        assert not out.converged
        assert out.clusters_remaining > 15

    def test_stall_reported(self):
        out = rena_fit(np.zeros((1, 3)), edgeless_graph(3), 1)
        assert not out.converged and out.clusters_remaining == 3

    @pytest.mark.parametrize("k", [0, 17])
    def test_bad_target(self, k):
        with pytest.raises(InvalidArgument):
            rena_fit(np.zeros((1, 16)), build_lattice_graph(4, 4), k)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 10), st.integers(0, 2**32 - 1))
    def test_clusters_are_connected(self, w, h, k, seed):
        k = min(k, w * h)
        g = build_lattice_graph(w, h)
        data = np.random.default_rng(seed).normal(size=(4, w * h))
        out = rena_fit(data, g, k)
        assert out.converged and out.assignment.k == k
        labels = out.assignment.labels
        assert set(labels.tolist()) == set(range(k))
        for c in range(k):
            assert is_connected(np.flatnonzero(labels == c).tolist(), g)

    @pytest.mark.parametrize("seed", range(10))
    def test_planted_recovery(self, seed):
        k = 2 + seed % 7
        batch, truth = synthetic_planted(6, 1, 12, 12, k, 0.0, RandomSource(seed))
        out = rena_fit(flatten_channel(batch, 0), build_lattice_graph(12, 12), k)
        assert adjusted_rand_score(truth[0], out.assignment.labels) == 1.0

    def test_deterministic(self):
        g = build_lattice_graph(8, 8)
        data = RandomSource(3).normal(size=(5, 64))
        a = rena_fit(data, g, 6).assignment.labels
        b = rena_fit(data.copy(), g, 6).assignment.labels
        np.testing.assert_array_equal(a, b)


class TestGroupingMatrix:
    def test_single_cluster(self):
        phi = grouping_matrix(ClusterAssignment(np.array([0, 0]), 1))
        np.testing.assert_allclose(phi.toarray(), [[2**-0.5, 2**-0.5]])

    def test_identity(self):
        phi = grouping_matrix(ClusterAssignment(np.arange(5), 5))
        np.testing.assert_array_equal(phi.toarray(), np.eye(5))

    @pytest.mark.parametrize("seed", range(5))
    def test_orthonormal_rows(self, seed):
        rng = np.random.default_rng(seed)
        labels = relabel(rng.integers(0, 6, size=40))
        assignment = ClusterAssignment(labels, int(labels.max()) + 1)
        phi = grouping_matrix(assignment).toarray()
        assert np.abs(phi @ phi.T - np.eye(assignment.k)).max() < 1e-12
        assert np.all((phi != 0).sum(axis=0) == 1)
        for i, size in enumerate(assignment.sizes()):
            row = phi[i][phi[i] != 0]
            assert row.size == size
            np.testing.assert_allclose(row, size**-0.5)


class TestReduceReconstruct:
    def test_constant_vector(self):
        phi = grouping_matrix(ClusterAssignment(np.array([0, 0, 1, 1, 1]), 2))
        _, rec = reduce_and_reconstruct(np.full(5, 2.5), phi)
        np.testing.assert_allclose(rec, 2.5)

    def test_identity(self):
        phi = grouping_matrix(ClusterAssignment(np.arange(4), 4))
        x = np.array([1.0, -2.0, 3.0, 0.5])
        reduced, rec = reduce_and_reconstruct(x, phi)
        np.testing.assert_allclose(reduced, x)
        np.testing.assert_allclose(rec, x)

    def test_matches_cluster_means(self):
        rng = np.random.default_rng(4)
        labels = random_connected_partition(6, 6, 5, RandomSource(4))
        x = rng.normal(size=36)
        phi = grouping_matrix(ClusterAssignment(labels, 5))
        _, rec = reduce_and_reconstruct(x, phi)
        means = {c: x[labels == c].mean() for c in range(5)}
        np.testing.assert_allclose(rec, [means[c] for c in labels], rtol=1e-12)

    def test_dimension_mismatch(self):
        phi = grouping_matrix(ClusterAssignment(np.arange(3), 3))
        with pytest.raises(InvalidArgument):
            reduce_and_reconstruct(np.zeros(4), phi)


def test_halves_partition_recovered():
    batch, truth = synthetic_planted(4, 1, 8, 8, 2, 0.0, RandomSource(0), partition=halves_partition(8, 8))
    out = rena_fit(flatten_channel(batch, 0), build_lattice_graph(8, 8), 2)
    assert adjusted_rand_score(truth[0], out.assignment.labels) == 1.0
