import numpy as np
import pytest
import scipy.sparse as sp

from cutflux.linalg import LinearSolveError, SaddleSolveError, solve_saddle, solve_spd


class TestSolveSpd:
    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        assert np.allclose(solve_spd(sp.eye(3, format="csc"), b), b)

    def test_tridiagonal_laplacian(self):
        A = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(3, 3), format="csc")
        x = solve_spd(A, np.ones(3))
        assert np.allclose(x, [1.5, 2.0, 1.5], atol=1e-12)

    def test_random_spd_residual(self):
        rng = np.random.default_rng(0)
        B = rng.normal(size=(10, 10))
        A = sp.csc_matrix(B @ B.T + 10 * np.eye(10))
        b = rng.normal(size=10)
        x = solve_spd(A, b)
        assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_badly_scaled_rows(self):
        scales = np.array([1.0, 1e-12, 1e6])
        A = sp.csc_matrix(np.diag(scales))
        b = scales * np.array([1.0, 2.0, 3.0])
        assert np.allclose(solve_spd(A, b), [1.0, 2.0, 3.0])

    def test_singular_rejected(self):
        A = sp.csc_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(LinearSolveError):
            solve_spd(A, np.ones(2))


class TestSolveSaddle:
    def test_identity(self):
        rhs = np.array([2.0, -1.0])
        assert np.allclose(solve_saddle(np.eye(2), rhs), rhs)

    def test_small_indefinite(self):
        M = np.array([[2.0, 1.0], [1.0, 0.0]])
        x = solve_saddle(M, np.array([1.0, 1.0]))
        assert np.allclose(M @ x, [1.0, 1.0], atol=1e-12)
        assert np.allclose(x, [1.0, -1.0])

    def test_kkt_projection(self):
        # minimize 0.5|x - c|^2 subject to x1 + x2 = 0
        c = np.array([1.0, 3.0])
        K = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
        x = solve_saddle(K, np.array([c[0], c[1], 0.0]))
        assert x[0] + x[1] == pytest.approx(0.0, abs=1e-13)
        assert np.allclose(x[:2], c - c.mean())

    def test_singular_carries_context(self):
        M = np.zeros((2, 2))
        with pytest.raises(SaddleSolveError):
            solve_saddle(M, np.ones(2), context="patch 17")

    def test_asymmetric_path(self):
        rng = np.random.default_rng(1)
        M = rng.normal(size=(6, 6)) + 6 * np.eye(6)
        rhs = rng.normal(size=6)
        x = solve_saddle(M, rhs, sym=False)
        assert np.linalg.norm(M @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_extreme_scaling(self):
        M = np.array([[1e-14, 1.0], [1.0, 0.0]])
        rhs = np.array([1.0, 1.0])
        x = solve_saddle(M, rhs)
        assert np.linalg.norm(M @ x - rhs) <= 1e-10 * max(1.0, np.linalg.norm(x))
