import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddhinf.matlin import (
    Ellipsoid,
    SingularityError,
    SymMatrix,
    bmat,
    ellipsoid_support,
    psd_margin,
    psd_tol,
    schur_reduce,
    spd_inv,
    spd_solve,
)


def power_min_eig(M, iters=5000):
    """Smallest eigenvalue by power iteration on a shifted matrix."""
    M = np.asarray(M, dtype=float)
    shift = np.sum(np.abs(M))  # Gershgorin-type bound on the spectral radius
    S = shift * np.eye(len(M)) - M
    v = np.ones(len(M)) / np.sqrt(len(M))
    for _ in range(iters):
        v = S @ v
        v /= np.linalg.norm(v)
    return float(v @ M @ v)


def random_spd(rng, n, cond=10.0):
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.logspace(0, np.log10(cond), n)
    return Qm @ np.diag(ev) @ Qm.T


class TestPsdMargin:
    def test_identity(self):
        assert psd_margin(np.eye(3)) == pytest.approx(1.0)

    def test_diag(self):
        assert psd_margin(np.diag([1.0, -2.0])) == pytest.approx(-2.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            psd_margin(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_theta_regression(self, bench):
        theta = bench["spec"].form.Theta
        oracle = power_min_eig(theta, iters=20000)
        assert psd_margin(theta) == pytest.approx(oracle, rel=1e-6)
        assert psd_margin(theta) == pytest.approx(-3474.1183449004993, rel=1e-9)

    def test_tolerance_scales(self):
        assert psd_tol(np.eye(2)) == pytest.approx(2e-7)
        assert psd_tol(1e6 * np.eye(2)) == pytest.approx(1e-7 * (1 + 1e6))


class TestSymMatrix:
    def test_symmetrizes(self):
        S = SymMatrix([[1.0, 2.0], [0.0, 1.0]])
        assert S[0, 1] == S[1, 0] == 1.0
        assert S.dim == 2

    def test_idempotent(self, rng):
        A = rng.standard_normal((4, 4))
        A = A + A.T
        assert np.array_equal(np.asarray(SymMatrix(A)), A)

    def test_read_only(self):
        S = SymMatrix(np.eye(2))
        with pytest.raises(ValueError):
            S[0, 0] = 3.0


class TestSchurReduce:
    def test_two_by_two(self):
        assert schur_reduce([[2.0, 1.0], [1.0, 2.0]], 1) == pytest.approx(np.array([[1.5]]))

    def test_block_diagonal(self, rng):
        C = rng.standard_normal((3, 3))
        C = C + C.T
        M = bmat([[2 * np.eye(2), None], [None, C]])
        assert np.allclose(schur_reduce(M, 2), C)

    def test_singular_leading_block(self):
        with pytest.raises(SingularityError):
            schur_reduce(np.diag([0.0, 1.0]), 1)

    def test_equivalence_random(self, rng):
        """Sign of the Schur complement tracks definiteness of the whole matrix."""
        agree = 0
        for _ in range(150):
            A = random_spd(rng, 3, cond=rng.uniform(1, 100))
            B = rng.standard_normal((3, 3))
            C = rng.standard_normal((3, 3))
            C = C @ C.T + rng.uniform(-3, 3) * np.eye(3)
            M = np.block([[A, B], [B.T, C]])
            whole = np.min(np.linalg.eigvalsh(M)) > 0
            red = np.min(np.linalg.eigvalsh(schur_reduce(M, 3))) > 0
            agree += whole == red
            assert (psd_margin(M) > 0) == whole
        assert agree == 150


class TestSolves:
    def test_spd_solve(self, rng):
        A = random_spd(rng, 4)
        b = rng.standard_normal(4)
        assert np.allclose(A @ spd_solve(A, b), b)

    def test_spd_inv_symmetric(self, rng):
        A = random_spd(rng, 4, cond=1e4)
        Ai = spd_inv(A)
        assert np.array_equal(Ai, Ai.T)
        assert np.allclose(Ai @ A, np.eye(4), atol=1e-9)

    def test_indefinite_rejected(self):
        with pytest.raises(SingularityError):
            spd_solve(np.diag([1.0, -1.0]), np.ones(2))


class TestEllipsoid:
    def test_unit(self):
        assert ellipsoid_support(Ellipsoid(np.eye(2), 4.0), [1.0, 0.0]) == pytest.approx(2.0)

    def test_scaled(self):
        assert ellipsoid_support(Ellipsoid(4 * np.eye(2), 1.0), [1.0, 0.0]) == pytest.approx(0.5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Ellipsoid(np.eye(2), 0.0)
        with pytest.raises(ValueError):
            Ellipsoid(np.diag([1.0, -1.0]), 1.0)

    def test_contains(self):
        E = Ellipsoid(np.eye(2), 1.0)
        assert E.contains([0.5, 0.5])
        assert not E.contains([1.0, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(
        zeta=arrays(np.float64, 3, elements=st.floats(-10, 10)),
        a=st.floats(1e-3, 1e3),
    )
    def test_homogeneous(self, zeta, a):
        E = Ellipsoid(np.diag([1.0, 2.0, 5.0]), 3.0)
        lhs = ellipsoid_support(E, a * zeta)
        rhs = a * ellipsoid_support(E, zeta)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)

    def test_monte_carlo_support(self, rng):
        for _ in range(100):
            n = 3
            P = random_spd(rng, n, cond=rng.uniform(1, 50))
            r = rng.uniform(0.1, 10)
            zeta = rng.standard_normal(n)
            L = np.linalg.cholesky(np.linalg.inv(P) * r)
            g = rng.standard_normal((n, 20000))
            boundary = L @ (g / np.linalg.norm(g, axis=0))
            mc = np.max(zeta @ boundary)
            exact = ellipsoid_support(Ellipsoid(P, r), zeta)
            assert mc <= exact * (1 + 1e-12)
            assert mc == pytest.approx(exact, rel=1e-3)


def test_bmat_zero_blocks():
    M = bmat([[np.eye(2), None], [None, np.ones((1, 1))]])
    assert M.shape == (3, 3)
    assert M[0, 2] == 0.0 and M[2, 2] == 1.0
