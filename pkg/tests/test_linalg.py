import numpy as np
import pytest

from oracles import jacobi_eig
from ratecut.linalg import FactorizationError, logdet_ipsd, solve_spd, sym_eig


def random_symmetric(rng, n):
    m = rng.standard_normal((n, n))
    return (m + m.T) / 2.0


class TestSymEig:
    def test_identity(self):
        res = sym_eig(np.eye(3))
        assert np.allclose(res.eigenvalues, [1.0, 1.0, 1.0])
        assert np.allclose(res.eigenvectors @ res.eigenvectors.T, np.eye(3), atol=1e-10)

    def test_diagonal_sorted_ascending(self):
        res = sym_eig(np.diag([3.0, 1.0, 2.0]))
        assert np.allclose(res.eigenvalues, [1.0, 2.0, 3.0])

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(0)
        m = random_symmetric(rng, 50)
        res = sym_eig(m)
        w_oracle, _ = jacobi_eig(m)
        assert np.abs(res.eigenvalues - w_oracle).max() < 1e-8

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError, match="square"):
            sym_eig(np.zeros((2, 3)))

    def test_rejects_asymmetric(self):
        m = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            sym_eig(m)

    def test_reconstruction_and_orthonormality_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(2, 65))
            m = random_symmetric(rng, n)
            res = sym_eig(m)
            v, w = res.eigenvectors, res.eigenvalues
            recon = v @ np.diag(w) @ v.T
            rel = np.linalg.norm(recon - m) / max(np.linalg.norm(m), 1e-30)
            assert rel < 1e-8
            assert np.abs(v.T @ v - np.eye(n)).max() < 1e-10


class TestLogdetIpsd:
    def test_zero_matrix(self):
        assert logdet_ipsd(np.zeros((5, 5)), 1.0) == 0.0

    def test_identity_analytic(self):
        c = 2.5
        assert logdet_ipsd(np.eye(4), c) == pytest.approx(4 * np.log(1 + c), rel=1e-12)

    def test_both_gram_sides_agree(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((8, 4))
        alpha = 0.7
        lhs = logdet_ipsd(z @ z.T, alpha)
        rhs = logdet_ipsd(z.T @ z, alpha)
        assert abs(lhs - rhs) < 1e-10

    def test_rejects_negative_eigenvalue(self):
        with pytest.raises(ValueError, match="PSD"):
            logdet_ipsd(np.diag([1.0, -0.5]), 1.0)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError, match="scale"):
            logdet_ipsd(np.eye(2), 0.0)


class TestSolveSpd:
    def test_residual_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            a = rng.standard_normal((n, n))
            m = a @ a.T + n * np.eye(n)
            b = rng.standard_normal((n, 3))
            x = solve_spd(m, b)
            rel = np.linalg.norm(m @ x - b) / np.linalg.norm(b)
            assert rel < 1e-8

    def test_rejects_indefinite(self):
        with pytest.raises(FactorizationError):
            solve_spd(np.diag([1.0, -1.0]), np.ones(2))
