import numpy as np
import pytest

from popgrid.pretext import (
    BarlowConfig,
    ClusterState,
    barlow_loss,
    barlow_loss_grad,
    deepcluster_epoch,
    kmeans_fit,
    make_views,
    run_deepcluster,
)

from conftest import model_chip
from oracles import barlow_oracle, kmeans_oracle, same_partition


def orthogonal_views(batch=8, dim=6):
    """Columns from a Hadamard basis: mean zero, mutually orthogonal."""
    from scipy.linalg import hadamard

    h = hadamard(batch).astype(float)
    return h[:, 1 : dim + 1] * np.arange(1.0, dim + 1.0)  # non-unit scales


class TestBarlowLoss:
    def test_identical_views_give_zero_loss(self):
        z = orthogonal_views()
        loss, c = barlow_loss(z, z, 5e-3)
        assert loss < 1e-6
        np.testing.assert_allclose(c, np.eye(6), atol=1e-9)

    def test_identical_views_diagonal_is_one(self):
        # any non-degenerate views: self-correlation diagonal is exactly 1
        rng = np.random.default_rng(0)
        z = rng.normal(size=(16, 6))
        _, c = barlow_loss(z, z, 5e-3)
        np.testing.assert_allclose(np.diag(c), 1.0, atol=1e-9)

    def test_orthogonal_views_loss_equals_dim(self):
        # +-1 patterns with exactly zero cross-correlation in every column
        d = 5
        z_a = np.tile(np.array([1.0, 1.0, -1.0, -1.0])[:, None], (1, d))
        z_b = np.tile(np.array([1.0, -1.0, 1.0, -1.0])[:, None], (1, d))
        loss, c = barlow_loss(z_a, z_b, 5e-3)
        assert loss == float(d)
        np.testing.assert_array_equal(c, np.zeros((d, d)))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for lam in (5e-3, 0.1, 1.0):
            z_a = rng.normal(size=(8, 4))
            z_b = rng.normal(size=(8, 4))
            loss, c = barlow_loss(z_a, z_b, lam)
            oracle_loss, oracle_c = barlow_oracle(z_a, z_b, lam)
            assert loss == pytest.approx(oracle_loss, abs=1e-9)
            np.testing.assert_allclose(c, oracle_c, atol=1e-9)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(2)
        z_a = rng.normal(size=(10, 3))
        z_b = rng.normal(size=(10, 3))
        la, _ = barlow_loss(z_a, z_b, 5e-3)
        lb, _ = barlow_loss(z_b, z_a, 5e-3)
        assert la == pytest.approx(lb, abs=1e-9)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            z_a = rng.normal(size=(6, 4))
            z_b = rng.normal(size=(6, 4))
            loss, _ = barlow_loss(z_a, z_b, 5e-3)
            assert loss >= 0.0

    def test_zero_variance_column_names_dimension(self):
        z_a = np.random.default_rng(0).normal(size=(8, 3))
        z_a[:, 1] = 4.2
        z_b = np.random.default_rng(1).normal(size=(8, 3))
        with pytest.raises(ValueError, match="dimension 1"):
            barlow_loss(z_a, z_b, 5e-3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        z_a = rng.normal(size=(4, 3))
        z_b = rng.normal(size=(4, 3))
        lam = 5e-3
        grad = barlow_loss_grad(z_a, z_b, lam)
        eps = 1e-6
        for i in range(4):
            for j in range(3):
                zp = z_a.copy()
                zp[i, j] += eps
                zm = z_a.copy()
                zm[i, j] -= eps
                fd = (barlow_loss(zp, z_b, lam)[0] - barlow_loss(zm, z_b, lam)[0]) / (2 * eps)
                denom = max(abs(fd), abs(grad[i, j]), 1e-8)
                assert abs(grad[i, j] - fd) / denom < 1e-4

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            barlow_loss(np.ones((1, 3)), np.ones((1, 3)), 5e-3)


class TestMakeViews:
    def test_empty_augmentations_identity(self):
        chip = model_chip("t", np.random.default_rng(0))
        cfg = BarlowConfig(view_augmentations=())
        va, vb = make_views(chip, cfg, seed=1)
        np.testing.assert_array_equal(va.pixels_model, chip.pixels_model)
        np.testing.assert_array_equal(vb.pixels_model, chip.pixels_model)

    def test_same_seed_same_views(self):
        chip = model_chip("t", np.random.default_rng(0))
        cfg = BarlowConfig()
        va1, vb1 = make_views(chip, cfg, seed=7)
        va2, vb2 = make_views(chip, cfg, seed=7)
        np.testing.assert_array_equal(va1.pixels_model, va2.pixels_model)
        np.testing.assert_array_equal(vb1.pixels_model, vb2.pixels_model)

    def test_different_seed_differs(self):
        chip = model_chip("t", np.random.default_rng(0))
        cfg = BarlowConfig()
        va1, _ = make_views(chip, cfg, seed=7)
        va2, _ = make_views(chip, cfg, seed=8)
        assert not np.array_equal(va1.pixels_model, va2.pixels_model)

    def test_grayscale_only_equalizes_channels(self):
        chip = model_chip("t", np.random.default_rng(0))
        cfg = BarlowConfig(view_augmentations=("grayscale",))
        va, vb = make_views(chip, cfg, seed=3)
        for view in (va, vb):
            np.testing.assert_allclose(
                view.pixels_model[:, :, 0], view.pixels_model[:, :, 1], atol=1e-6
            )
            np.testing.assert_allclose(
                view.pixels_model[:, :, 1], view.pixels_model[:, :, 2], atol=1e-6
            )

    def test_views_keep_shape(self):
        chip = model_chip("t", np.random.default_rng(0))
        va, vb = make_views(chip, BarlowConfig(), seed=0)
        assert va.pixels_model.shape == (224, 224, 3)
        assert vb.pixels_model.shape == (224, 224, 3)

    def test_unknown_augmentation_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            BarlowConfig(view_augmentations=("vertical flip",))


def two_blob_points(n=16, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(loc=(-10, 0), scale=0.4, size=(n // 2, 2))
    b = rng.normal(loc=(10, 4), scale=0.4, size=(n - n // 2, 2))
    return np.vstack([a, b]), np.array([0] * (n // 2) + [1] * (n - n // 2))


class TestKMeans:
    def test_two_blobs_match_brute_force(self):
        points, truth = two_blob_points()
        result = kmeans_fit(points, k=2, seed=0)
        oracle_assign, oracle_wcss = kmeans_oracle(points, 2)
        assert same_partition(result.assignments, oracle_assign)
        assert same_partition(result.assignments, truth)
        assert result.wcss_history[-1] == pytest.approx(oracle_wcss, rel=1e-9)

    def test_wcss_non_increasing(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(40, 3))
        result = kmeans_fit(points, k=4, seed=1)
        wcss = result.wcss_history
        assert all(wcss[i + 1] <= wcss[i] + 1e-9 for i in range(len(wcss) - 1))

    def test_k_exceeding_points_rejected(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.zeros((3, 2)), k=4)

    def test_empty_cluster_reseeded(self):
        # two far points repeated: a centroid will empty out with k=2 warm-started badly
        points = np.array([[0.0, 0.0]] * 5 + [[100.0, 0.0]] * 5)
        init = np.array([[0.0, 0.0], [0.5, 0.0]])  # both near the left blob
        result = kmeans_fit(points, k=2, seed=0, init_centroids=init)
        assert set(result.assignments) == {0, 1}

    def test_seeded_determinism(self):
        rng = np.random.default_rng(7)
        points = rng.normal(size=(30, 4))
        r1 = kmeans_fit(points, k=3, seed=9)
        r2 = kmeans_fit(points, k=3, seed=9)
        np.testing.assert_array_equal(r1.assignments, r2.assignments)


class StubEncoder:
    """Deterministic representations chosen by tile_id index."""

    def __init__(self, vectors):
        self.vectors = vectors

    def represent(self, chips):
        return np.stack([self.vectors[int(c.tile_id)] for c in chips])


class TestDeepClusterEpoch:
    def make_chips(self, n):
        rng = np.random.default_rng(0)
        return [model_chip(str(i), rng) for i in range(n)]

    def test_two_blobs_recovered(self):
        points, truth = two_blob_points(n=16)
        chips = self.make_chips(16)
        encoder = StubEncoder(points)
        _, state, stats = deepcluster_epoch(encoder, chips, ClusterState(k=2), seed=0, lr=0.0)
        assigned = np.array([state.assignments[str(i)] for i in range(16)])
        oracle_assign, _ = kmeans_oracle(points, 2)
        assert same_partition(assigned, oracle_assign)
        assert sorted(stats.cluster_sizes) == [8, 8]

    def test_single_cluster_loss_zero(self):
        points = np.random.default_rng(1).normal(size=(6, 3))
        chips = self.make_chips(6)
        _, state, stats = deepcluster_epoch(
            StubEncoder(points), chips, ClusterState(k=1), seed=0, lr=0.0
        )
        assert stats.classifier_loss == pytest.approx(0.0, abs=1e-7)
        assert set(state.assignments.values()) == {0}

    def test_fixed_encoder_assignments_stable(self):
        points, _ = two_blob_points(n=12, seed=3)
        chips = self.make_chips(12)
        encoder = StubEncoder(points)
        state = ClusterState(k=2)
        _, state1, _ = deepcluster_epoch(encoder, chips, state, seed=0, lr=0.0)
        _, state2, _ = deepcluster_epoch(encoder, chips, state1, seed=1, lr=0.0)
        assert state1.assignments == state2.assignments
        assert state2.iteration == 2

    def test_k_larger_than_chips_rejected(self):
        points = np.zeros((3, 2))
        with pytest.raises(ValueError):
            deepcluster_epoch(StubEncoder(points), self.make_chips(3), ClusterState(k=5))

    def test_trains_torch_encoder(self, tiny_encoder):
        rng = np.random.default_rng(0)
        chips = [model_chip(str(i), rng) for i in range(8)]
        before = tiny_encoder.net.stages[0][0].weight.detach().clone()
        _, state, stats = deepcluster_epoch(
            tiny_encoder, chips, ClusterState(k=2), seed=0, lr=1e-3
        )
        after = tiny_encoder.net.stages[0][0].weight.detach()
        assert not bool((before == after).all())
        assert len(state.assignments) == 8

    def test_run_deepcluster_logs(self, tiny_encoder, tmp_path):
        rng = np.random.default_rng(0)
        chips = [model_chip(str(i), rng) for i in range(6)]
        log = tmp_path / "log.csv"
        state = run_deepcluster(tiny_encoder, chips, k=2, epochs=2, lr=0.0, log_path=log)
        assert state.iteration == 2
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 3
