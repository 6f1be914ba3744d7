import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from dropcluster.core import FeatureMapBatch, InvalidArgument, RandomSource, StateError
from dropcluster.data import synthetic_planted
from dropcluster.regularizers import (
    ClusterState,
    DegenerateMask,
    DropClusterRegularizer,
    DropMask,
    Mode,
    RegularizerConfig,
    apply_mask,
    build_mask,
    compute_clusters,
    dropblock_gamma,
    dropblock_mask,
    dropout_mask,
    mask_gradient,
    schedule_should_recompute,
    spatial_dropout_mask,
)


def planted_state(t=3, w=8, h=8, n=15, seed=0):
    batch, _ = synthetic_planted(6, t, w, h, n, 0.0, RandomSource(seed))
    return compute_clusters(batch, n), batch


def manual_state(unstructured, t=2, n=2, w=2, h=2):
    """Each structured channel split into its first row and the rest."""
    T = np.zeros((t, n, w, h), dtype=np.uint8)
    for i in range(t):
        if i in unstructured:
            continue
        T[i, 0, 0, :] = 1
        T[i, 1, 1:, :] = 1
    return ClusterState(T, frozenset(unstructured), n)


class TestComputeClusters:
    def test_constant_channels_single_cluster(self):
        state = compute_clusters(FeatureMapBatch(np.ones((4, 3, 5, 5))), 1)
        assert state.unstructured == frozenset()
        np.testing.assert_array_equal(state.T, 1)
        state.check()

    def test_noise_channel_unstructured_when_merging_stalls(self):
        # without halving a constant channel links up in one round, while
        # 256 noise pixels form far more than 15 link components
        values = RandomSource(0).normal(size=(8, 2, 16, 16))
        values[:, 0] = 1.0
        state = compute_clusters(FeatureMapBatch(values), 15, max_iter=1, halving=False)
        assert state.unstructured == frozenset({1})
        assert not state.T[1].any()
        state.check()

    def test_halving_rounds_are_channel_independent(self):
        values = RandomSource(0).normal(size=(8, 2, 16, 16))
        values[:, 0] = 1.0
        assert compute_clusters(FeatureMapBatch(values), 15, max_iter=1).unstructured == frozenset({0, 1})
        assert compute_clusters(FeatureMapBatch(values), 15).unstructured == frozenset()

    def test_planted_partition(self):
        batch, truth = synthetic_planted(5, 2, 8, 8, 2, 0.0, RandomSource(2))
        state = compute_clusters(batch, 2)
        for i in range(2):
            assert adjusted_rand_score(truth[i], state.labels(i).ravel()) == 1.0

    def test_partition_property(self):
        state, _ = planted_state()
        state.check()
        for i in range(state.t):
            np.testing.assert_array_equal(state.T[i].sum(axis=0), 1)

    def test_too_many_clusters(self):
        with pytest.raises(InvalidArgument):
            compute_clusters(FeatureMapBatch(np.zeros((1, 1, 3, 3))), 10)


class TestBuildMask:
    def test_one_cluster_dropped_per_channel(self):
        state, _ = planted_state()
        cfg = RegularizerConfig(p=0.1, n=15)
        rng = RandomSource(1)
        for _ in range(50):
            mask = build_mask(state, cfg, rng)
            for i in range(state.t):
                dropped = [l for l in range(15) if not mask.M[i][state.T[i, l] == 1].any()]
                kept = [l for l in range(15) if mask.M[i][state.T[i, l] == 1].all()]
                assert len(dropped) == 1 and len(kept) == 14
                assert (mask.M[i] == 0).sum() == state.T[i, dropped[0]].sum()

    def test_inference_all_ones(self):
        state, _ = planted_state()
        mask = build_mask(state, RegularizerConfig(p=0.3, n=15, mode=Mode.INFERENCE), RandomSource(0))
        np.testing.assert_array_equal(mask.M, 1)
        assert mask.scale == 1.0

    def test_scale_with_unstructured_channel(self):
        mask = build_mask(manual_state({1}), RegularizerConfig(p=0.0, n=2), RandomSource(0))
        assert mask.scale == 2.0
        np.testing.assert_array_equal(mask.M[1], 0)
        np.testing.assert_array_equal(mask.M[0], 1)

    def test_inference_normalization_switch(self):
        state = manual_state({1})
        literal = build_mask(state, RegularizerConfig(p=0.5, n=2, mode=Mode.INFERENCE), RandomSource(0))
        plain = build_mask(state, RegularizerConfig(p=0.5, n=2, mode=Mode.INFERENCE, normalize_inference=False), RandomSource(0))
        assert literal.scale == 2.0 and plain.scale == 1.0
        np.testing.assert_array_equal(literal.M, plain.M)

    def test_floor_of_pn_zero_is_noop(self):
        state, _ = planted_state()
        mask = build_mask(state, RegularizerConfig(p=0.05, n=15), RandomSource(0))
        np.testing.assert_array_equal(mask.M, 1)

    def test_all_unstructured_is_degenerate(self):
        with pytest.raises(DegenerateMask):
            build_mask(manual_state({0, 1}), RegularizerConfig(p=0.1, n=2), RandomSource(0))

    def test_n_mismatch(self):
        with pytest.raises(InvalidArgument):
            build_mask(manual_state(set()), RegularizerConfig(p=0.1, n=3), RandomSource(0))

    def test_deterministic(self):
        state, _ = planted_state()
        cfg = RegularizerConfig(p=0.3, n=15)
        a = build_mask(state, cfg, RandomSource(5))
        b = build_mask(state, cfg, RandomSource(5))
        np.testing.assert_array_equal(a.M, b.M)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.9]), st.integers(0, 1000))
    def test_scale_identity(self, p, seed):
        state, _ = planted_state(seed=seed % 5)
        mask = build_mask(state, RegularizerConfig(p=p, n=15), RandomSource(seed))
        assert mask.ratio * np.count_nonzero(mask.M) == mask.M.size
        assert mask.scale == mask.M.size / np.count_nonzero(mask.M)


class TestApplyMask:
    def test_all_ones(self):
        A = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        mask = DropMask.from_mask(np.ones((3, 4, 4), dtype=np.uint8))
        np.testing.assert_array_equal(apply_mask(A, mask), A)

    def test_half_zeroed_doubles(self):
        A = np.random.default_rng(0).normal(size=(2, 2, 2, 2))
        M = np.zeros((2, 2, 2), dtype=np.uint8)
        M[0] = 1
        out = apply_mask(A, DropMask.from_mask(M))
        np.testing.assert_array_equal(out[:, 0], 2 * A[:, 0])
        np.testing.assert_array_equal(out[:, 1], 0)

    def test_same_mask_every_sample(self):
        A = np.ones((5, 2, 3, 3))
        out = apply_mask(A, dropout_mask((2, 3, 3), 0.5, RandomSource(0)))
        for s in range(1, 5):
            np.testing.assert_array_equal(out[s], out[0])

    def test_expected_value_preserved(self):
        state, _ = planted_state()
        A = np.random.default_rng(1).uniform(0.5, 1.5, size=(4, state.t, 8, 8))
        cfg = RegularizerConfig(p=0.1, n=15)
        rng = RandomSource(2)
        means = [apply_mask(A, build_mask(state, cfg, rng)).mean() for _ in range(1000)]
        assert np.mean(means) == pytest.approx(A.mean(), rel=0.02)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        A, B = rng.normal(size=(2, 2, 3, 3, 3))
        mask = dropout_mask((3, 3, 3), 0.4, RandomSource(0))
        np.testing.assert_allclose(
            apply_mask(2.5 * A - 0.5 * B, mask), 2.5 * apply_mask(A, mask) - 0.5 * apply_mask(B, mask), atol=1e-12
        )

    def test_shape_mismatch(self):
        mask = DropMask.from_mask(np.ones((2, 3, 3), dtype=np.uint8))
        with pytest.raises(InvalidArgument):
            apply_mask(np.zeros((1, 3, 3, 3)), mask)

    def test_feature_map_batch_in_and_out(self):
        batch = FeatureMapBatch(np.ones((1, 1, 2, 2)))
        out = apply_mask(batch, DropMask.from_mask(np.ones((1, 2, 2), dtype=np.uint8)))
        assert isinstance(out, FeatureMapBatch)


class TestMaskGradient:
    def test_passthrough(self):
        G = np.random.default_rng(0).normal(size=(2, 2, 3, 3))
        np.testing.assert_array_equal(mask_gradient(G, DropMask.from_mask(np.ones((2, 3, 3), dtype=np.uint8))), G)

    def test_zeroed_channel(self):
        M = np.ones((2, 3, 3), dtype=np.uint8)
        M[1] = 0
        out = mask_gradient(np.ones((1, 2, 3, 3)), DropMask.from_mask(M))
        np.testing.assert_array_equal(out[:, 1], 0)

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        A = rng.normal(size=(2, 3, 4, 4))
        G = rng.normal(size=A.shape)
        state = manual_state({2}, t=3, n=2, w=4, h=4)
        mask = build_mask(state, RegularizerConfig(p=0.5, n=2), RandomSource(1))

        def loss(x):
            return float((G * apply_mask(x, mask)).sum())

        analytic = mask_gradient(G, mask)
        numeric = np.zeros_like(A)
        step = 1e-4
        for idx in np.ndindex(A.shape):
            plus, minus = A.copy(), A.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric[idx] = (loss(plus) - loss(minus)) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.where((analytic == 0) & (np.abs(numeric) < 1e-9), 0.0, np.abs(analytic - numeric) / denom)
        assert rel.max() < 1e-5


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, False), (49, False), (50, True), (75, False), (100, True)])
    def test_every_s_epochs_from_s(self, epoch, expected):
        assert schedule_should_recompute(epoch, 50) is expected

    def test_negative_epoch(self):
        with pytest.raises(InvalidArgument):
            schedule_should_recompute(-1, 50)


class TestBaselines:
    @pytest.mark.parametrize("make", [
        lambda rng: dropout_mask((4, 8, 8), 0.0, rng),
        lambda rng: spatial_dropout_mask((4, 8, 8), 0.0, rng),
        lambda rng: dropblock_mask((4, 8, 8), 0.0, 3, rng),
    ])
    def test_p_zero_identity(self, make):
        mask = make(RandomSource(0))
        np.testing.assert_array_equal(mask.M, 1)
        assert mask.scale == 1.0

    def test_dropout_rate(self):
        mask = dropout_mask((10, 32, 32), 0.25, RandomSource(0))
        assert 1 - mask.M.mean() == pytest.approx(0.25, abs=0.01)
        assert mask.ratio * np.count_nonzero(mask.M) == mask.M.size

    def test_spatial_dropout_fraction(self):
        mask = spatial_dropout_mask(1000, 0.3, RandomSource(0))
        dropped = (mask.M.reshape(1000, -1).max(axis=1) == 0).mean()
        assert dropped == pytest.approx(0.3, abs=0.03)

    def test_spatial_dropout_whole_channels(self):
        mask = spatial_dropout_mask((20, 5, 5), 0.5, RandomSource(1))
        for ch in mask.M:
            assert ch.min() == ch.max()

    def test_dropblock_fraction_matches_gamma(self):
        w = h = 16
        b = 5
        p = 0.1
        gamma = dropblock_gamma(p, w, h, b)
        # oracle: a pixel survives iff none of the seed positions covering it fires
        valid = w - b + 1
        cover = np.zeros((w, h))
        for i in range(valid):
            for j in range(valid):
                cover[i:i + b, j:j + b] += 1
        expected = np.mean(1 - (1 - gamma) ** cover)
        rng = RandomSource(0)
        dropped = np.mean([1 - dropblock_mask((1, w, h), p, b, rng).M.mean() for _ in range(1000)])
        assert dropped == pytest.approx(expected, abs=0.005)
        assert dropped == pytest.approx(0.1, abs=0.02)

    def test_dropblock_blocks_are_squares(self):
        rng = RandomSource(3)
        mask = dropblock_mask((1, 16, 16), 0.02, 5, rng)
        zeros = np.argwhere(mask.M[0] == 0)
        if zeros.size:
            x0, y0 = zeros.min(axis=0)
            assert mask.M[0, x0:x0 + 5, y0:y0 + 5].max() == 0

    @pytest.mark.parametrize("block", [4, 17])
    def test_dropblock_bad_block(self, block):
        with pytest.raises(InvalidArgument):
            dropblock_mask((1, 16, 16), 0.1, block, RandomSource(0))

    @pytest.mark.parametrize("p", [-0.1, 1.0])
    def test_bad_p(self, p):
        with pytest.raises(InvalidArgument):
            dropout_mask((1, 2, 2), p, RandomSource(0))


class TestClusterStateIO:
    def test_roundtrip(self, tmp_path):
        state = manual_state({1}, t=3, n=2, w=4, h=5)
        state.epoch_computed = 50
        path = tmp_path / "state.npz"
        state.save(path)
        loaded = ClusterState.load(path)
        np.testing.assert_array_equal(loaded.T, state.T)
        assert loaded.unstructured == frozenset({1})
        assert (loaded.n_clusters, loaded.epoch_computed) == (2, 50)

    def test_labels_of_unstructured(self):
        state = manual_state({1})
        np.testing.assert_array_equal(state.labels(1), -1)
        np.testing.assert_array_equal(state.labels(0), [[0, 0], [1, 1]])


class TestDropClusterRegularizer:
    def test_inactive_before_s(self):
        reg = DropClusterRegularizer(RegularizerConfig(p=0.1, n=2, s=5), RandomSource(0))
        assert reg.mask((2, 2, 2), Mode.TRAINING, 4) is None

    def test_missing_state(self):
        reg = DropClusterRegularizer(RegularizerConfig(p=0.1, n=2, s=5), RandomSource(0))
        with pytest.raises(StateError):
            reg.mask((2, 2, 2), Mode.TRAINING, 5)

    def test_unstructured_zero_in_both_modes(self):
        reg = DropClusterRegularizer(RegularizerConfig(p=0.5, n=2, s=1), RandomSource(0), manual_state({1}))
        A = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
        for mode in Mode:
            out = apply_mask(A, reg.mask((2, 2, 2), mode, 1))
            np.testing.assert_array_equal(out[:, 1], 0)
