import numpy as np
import pytest

from weakiv.designs import (
    NS_C22,
    DesignSpec,
    anti_diagonal,
    assemble,
    draw_r0,
    draw_vec_r0,
    structural_to_reduced,
)
from weakiv.kronecker import detect_kronecker
from weakiv.numerics import NumericalError, RngStream


class TestSpec:
    def test_ns_constants(self):
        spec = DesignSpec(kind="ns", k=5)
        assert spec.c11 == 1.0
        assert spec.c12 == 100.0
        assert spec.c22 == pytest.approx(10000.000001)
        assert NS_C22 == pytest.approx(100.0**2 + 100.0**-3)

    def test_mu_shape_defaults(self):
        assert DesignSpec(kind="ns", k=4).mu_shape == "e1"
        assert DesignSpec(kind="homoskedastic", k=4, rho=0.5).mu_shape == "ones"

    def test_validation(self):
        with pytest.raises(ValueError):
            DesignSpec(kind="nope", k=5)
        with pytest.raises(ValueError):
            DesignSpec(kind="ns", k=1)
        with pytest.raises(ValueError):
            DesignSpec(kind="homoskedastic", k=5, rho=1.0)
        with pytest.raises(ValueError):
            DesignSpec(kind="custom", k=3)


class TestAssemble:
    def test_anti_diagonal_is_involution(self):
        for k in range(2, 11):
            j = anti_diagonal(k)
            np.testing.assert_array_equal(j @ j, np.eye(k))

    def test_ns_blocks(self):
        k = 5
        sig0, mu = assemble(DesignSpec(kind="ns", k=k))
        s = sig0.values
        j = anti_diagonal(k)
        np.testing.assert_allclose(s[:k, :k], np.eye(k))
        np.testing.assert_allclose(s[:k, k:], 100.0 * j)
        np.testing.assert_allclose(s[k:, k:], 10000.000001 * np.eye(k))
        lam = 2.0 * k
        expected = np.zeros(k)
        expected[0] = np.sqrt(lam)
        np.testing.assert_allclose(mu, expected)

    def test_homoskedastic_zero_rho_is_identity(self):
        sig0, mu = assemble(DesignSpec(kind="homoskedastic", k=3, rho=0.0))
        np.testing.assert_allclose(sig0.values, np.eye(6))
        np.testing.assert_allclose(mu, np.full(3, np.sqrt(6.0) / np.sqrt(3.0)))

    def test_homoskedastic_is_kronecker(self):
        sig0, _ = assemble(DesignSpec(kind="homoskedastic", k=5, rho=0.9))
        kf = detect_kronecker(sig0, 5)
        assert kf is not None
        np.testing.assert_allclose(
            kf.omega.values, np.array([[1.0, 0.9], [0.9, 1.0]]), atol=1e-10
        )

    def test_structural_map(self):
        psi = np.array([[1.0, 0.3], [0.3, 2.0]])
        om = structural_to_reduced(psi, beta=0.5)
        # v1 = u + 0.5 v2
        assert om[0, 0] == pytest.approx(1.0 + 2 * 0.5 * 0.3 + 0.25 * 2.0)
        assert om[0, 1] == pytest.approx(0.3 + 0.5 * 2.0)
        assert om[1, 1] == pytest.approx(2.0)

    def test_custom_blocks_pd_check(self):
        k = 2
        s11 = np.eye(k)
        s12 = 2.0 * np.eye(k)  # makes the assembly indefinite
        s22 = np.eye(k)
        with pytest.raises(NumericalError, match="eigenvalue"):
            assemble(
                DesignSpec(kind="custom", k=k, custom_blocks=(s11, s12, s22))
            )

    def test_custom_blocks_valid(self):
        k = 3
        rng = np.random.default_rng(0)
        a = rng.standard_normal((2 * k, 2 * k))
        sig = a @ a.T + 2 * k * np.eye(2 * k)
        spec = DesignSpec(
            kind="custom",
            k=k,
            custom_blocks=(sig[:k, :k], sig[:k, k:], sig[k:, k:]),
        )
        sig0, _ = assemble(spec)
        np.testing.assert_allclose(sig0.values, 0.5 * (sig + sig.T), atol=1e-12)


class TestDraws:
    def test_null_first_column_mean(self):
        spec = DesignSpec(kind="ns", k=4)
        sig0, mu = assemble(spec)
        batch = draw_r0(sig0, mu, delta=0.0, n_draws=50_000, rng=RngStream(0))
        first_col_mean = batch.draws[:, :, 0].mean(axis=0)
        sd = np.sqrt(np.diag(sig0.values)[:4] / 50_000)
        assert np.all(np.abs(first_col_mean) < 5 * sd)

    def test_covariance_oracle(self):
        rng = np.random.default_rng(1)
        k = 3
        a = rng.standard_normal((2 * k, 2 * k))
        from weakiv.numerics import SymPD

        sig0 = SymPD(a @ a.T + 2 * k * np.eye(2 * k))
        mu = rng.standard_normal(k)
        vecs = draw_vec_r0(sig0, mu, delta=0.5, n_draws=100_000, rng=RngStream(7))
        cov = np.cov(vecs.T)
        err = np.linalg.norm(cov - sig0.values) / np.linalg.norm(sig0.values)
        assert err < 0.05

    def test_mean_pattern(self):
        spec = DesignSpec(kind="ns", k=3, lambda_per_k=3.0)
        sig0, mu = assemble(spec)
        n = 100_000
        batch = draw_r0(sig0, mu, delta=1.0, n_draws=n, rng=RngStream(3))
        col_means = batch.draws.mean(axis=0)
        sd = np.sqrt(np.diag(sig0.values) / n)
        np.testing.assert_array_less(
            np.abs(col_means[:, 0] - mu), 5 * sd[:3] + 1e-12
        )
        np.testing.assert_array_less(
            np.abs(col_means[:, 1] - mu), 5 * sd[3:] + 1e-12
        )

    def test_reproducible_and_order_free(self):
        spec = DesignSpec(kind="homoskedastic", k=3, rho=0.5)
        sig0, mu = assemble(spec)
        a = draw_vec_r0(sig0, mu, 0.3, 100, RngStream(5, 9))
        b = draw_vec_r0(sig0, mu, 0.3, 100, RngStream(5, 9))
        np.testing.assert_array_equal(a, b)

    def test_truth_metadata(self):
        spec = DesignSpec(kind="ns", k=4)
        sig0, mu = assemble(spec)
        batch = draw_r0(sig0, mu, delta=0.7, n_draws=10, rng=RngStream(0))
        assert batch.truth.delta == 0.7
        assert batch.truth.lam == pytest.approx(float(mu @ mu))
        assert batch.draws.shape == (10, 4, 2)
