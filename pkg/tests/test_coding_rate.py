import numpy as np
import pytest

from oracles import central_diff, central_diff_at, rel_err, sample_coords
from ratecut.coding_rate import (
    EmbeddingBatch,
    Membership,
    rate_R,
    rate_Rc,
    rate_reduction_loss,
)


def unit_columns(rng, d, n):
    z = rng.standard_normal((d, n))
    return z / np.linalg.norm(z, axis=0)


def row_stochastic(rng, n, k):
    pi = rng.random((n, k)) + 1e-3
    return pi / pi.sum(axis=1, keepdims=True)


def r_value(z, eps):
    return rate_R(EmbeddingBatch(z, eps, validate=False))[0]


def rc_value(z, pi, eps):
    return rate_Rc(EmbeddingBatch(z, eps, validate=False), Membership(pi, validate=False))[0]


class TestTypes:
    def test_rejects_non_unit_columns(self):
        with pytest.raises(ValueError, match="unit norm"):
            EmbeddingBatch(np.ones((3, 2)), eps=0.5)

    def test_rejects_bad_row_sums(self):
        with pytest.raises(ValueError, match="sum to 1"):
            Membership(np.full((2, 2), 0.4))

    def test_rejects_negative_entries(self):
        pi = np.array([[1.2, -0.2], [0.5, 0.5]])
        with pytest.raises(ValueError, match="nonnegative"):
            Membership(pi)


class TestRateR:
    def test_single_column_analytic(self):
        z = np.zeros((4, 1))
        z[0, 0] = 1.0
        value, _ = rate_R(EmbeddingBatch(z, eps=0.5))
        # alpha = d / (n eps^2) = 16; logdet(I + 16 z z^T) = log(17)
        assert value == pytest.approx(np.log(17.0), rel=1e-12)

    def test_orthonormal_columns_analytic(self):
        z = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 8)))[0]
        value, _ = rate_R(EmbeddingBatch(z, eps=1.0))
        assert value == pytest.approx(8 * np.log(2.0), rel=1e-10)

    def test_empty_batch_errors(self):
        with pytest.raises(ValueError, match="empty"):
            rate_R(EmbeddingBatch(np.zeros((4, 0)), eps=0.5))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        z = unit_columns(rng, 16, 32)
        _, grad = rate_R(EmbeddingBatch(z, eps=0.5))
        fd = central_diff(lambda zz: r_value(zz, 0.5), z)
        assert rel_err(grad, fd) < 1e-5

    def test_rotation_invariance(self):
        rng = np.random.default_rng(9)
        z = unit_columns(rng, 12, 20)
        q = np.linalg.qr(rng.standard_normal((12, 12)))[0]
        assert abs(r_value(q @ z, 0.5) - r_value(z, 0.5)) < 1e-9


class TestRateRc:
    def test_single_cluster_equals_rate_r(self):
        rng = np.random.default_rng(2)
        z = unit_columns(rng, 6, 9)
        pi = np.ones((9, 1))
        r, _ = rate_R(EmbeddingBatch(z, 0.5))
        rc, _, _ = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi))
        assert rc == pytest.approx(r, abs=1e-12)

    def test_orthogonal_groups_reduce_rate(self):
        rng = np.random.default_rng(3)
        basis = np.linalg.qr(rng.standard_normal((16, 16)))[0]
        left = basis[:, :4] @ rng.standard_normal((4, 10))
        right = basis[:, 8:12] @ rng.standard_normal((4, 10))
        z = np.hstack([left, right])
        z /= np.linalg.norm(z, axis=0)
        pi = np.zeros((20, 2))
        pi[:10, 0] = 1.0
        pi[10:, 1] = 1.0
        r, _ = rate_R(EmbeddingBatch(z, 0.5))
        rc, _, _ = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi))
        assert rc < r

    def test_shape_mismatch_errors(self):
        rng = np.random.default_rng(4)
        z = unit_columns(rng, 4, 6)
        with pytest.raises(ValueError, match="rows"):
            rate_Rc(EmbeddingBatch(z, 0.5), Membership(row_stochastic(rng, 7, 2)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        z = unit_columns(rng, 16, 32)
        pi = row_stochastic(rng, 32, 4)
        _, grad_z, grad_pi = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi))
        fd_z = central_diff(lambda zz: rc_value(zz, pi, 0.5), z)
        fd_pi = central_diff(lambda pp: rc_value(z, pp, 0.5), pi)
        assert rel_err(grad_z, fd_z) < 1e-5
        assert rel_err(grad_pi, fd_pi) < 1e-5

    def test_near_empty_cluster_is_dropped(self):
        rng = np.random.default_rng(8)
        z = unit_columns(rng, 5, 7)
        pi = np.zeros((7, 3))
        pi[:, 0] = 1.0 - 1e-12
        pi[:, 2] = 1e-12
        value, _, grad_pi = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi, validate=False))
        assert np.isfinite(value)
        assert np.all(grad_pi[:, 2] == 0.0)
        assert np.all(grad_pi[:, 1] == 0.0)


class TestLoss:
    def test_single_cluster_cancels(self):
        rng = np.random.default_rng(10)
        z = unit_columns(rng, 5, 8)
        value, _, _ = rate_reduction_loss(EmbeddingBatch(z, 0.5), Membership(np.ones((8, 1))))
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_groups_negative(self):
        rng = np.random.default_rng(11)
        basis = np.linalg.qr(rng.standard_normal((12, 12)))[0]
        z = np.hstack([basis[:, :3] @ rng.standard_normal((3, 6)),
                       basis[:, 6:9] @ rng.standard_normal((3, 6))])
        z /= np.linalg.norm(z, axis=0)
        pi = np.zeros((12, 2))
        pi[:6, 0] = 1.0
        pi[6:, 1] = 1.0
        value, _, _ = rate_reduction_loss(EmbeddingBatch(z, 0.5), Membership(pi))
        assert value < 0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        z = unit_columns(rng, 8, 14)
        pi = row_stochastic(rng, 14, 3)
        _, grad_z, grad_pi = rate_reduction_loss(EmbeddingBatch(z, 0.5), Membership(pi))

        def loss_z(zz):
            return rate_reduction_loss(
                EmbeddingBatch(zz, 0.5, validate=False), Membership(pi, validate=False))[0]

        def loss_pi(pp):
            return rate_reduction_loss(
                EmbeddingBatch(z, 0.5, validate=False), Membership(pp, validate=False))[0]

        assert rel_err(grad_z, central_diff(loss_z, z)) < 1e-5
        assert rel_err(grad_pi, central_diff(loss_pi, pi)) < 1e-5


class TestProperties:
    def test_column_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        z = unit_columns(rng, 6, 10)
        pi = row_stochastic(rng, 10, 3)
        perm = rng.permutation(10)
        v1, gz1, gp1 = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi))
        v2, gz2, gp2 = rate_Rc(EmbeddingBatch(z[:, perm], 0.5), Membership(pi[perm]))
        assert abs(v1 - v2) < 1e-12
        assert np.abs(gz1[:, perm] - gz2).max() < 1e-12
        assert np.abs(gp1[perm] - gp2).max() < 1e-12

    def test_rate_reduction_nonnegative(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            d = int(rng.integers(3, 12))
            n = int(rng.integers(4, 24))
            k = int(rng.integers(1, 5))
            z = unit_columns(rng, d, n)
            pi = row_stochastic(rng, n, k)
            r, _ = rate_R(EmbeddingBatch(z, 0.5))
            rc, _, _ = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi))
            assert r - rc >= -1e-9

    def test_gradient_sweep(self):
        # Sizes span the full contract ranges; FD is sampled per instance to
        # keep the sweep fast while still probing every instance.
        rng = np.random.default_rng(15)
        for _ in range(50):
            d = int(rng.integers(4, 65))
            n = int(rng.integers(8, 129))
            k = int(rng.integers(2, 11))
            z = unit_columns(rng, d, n)
            pi = row_stochastic(rng, n, k)
            _, grad_z, grad_pi = rate_Rc(EmbeddingBatch(z, 0.5), Membership(pi))
            cz = sample_coords(rng, z.size, 8)
            cp = sample_coords(rng, pi.size, 8)
            fd_z = central_diff_at(lambda zz: rc_value(zz, pi, 0.5), z, cz)
            fd_pi = central_diff_at(lambda pp: rc_value(z, pp, 0.5), pi, cp)
            scale = max(np.abs(grad_z).max(), 1e-8)
            assert np.abs(grad_z.ravel()[cz] - fd_z).max() / scale < 1e-4
            scale = max(np.abs(grad_pi).max(), 1e-8)
            assert np.abs(grad_pi.ravel()[cp] - fd_pi).max() / scale < 1e-4
