"""Latent-field tests: Matern covariance, lattice precision, sampling, priors."""

import math

import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from lgcpthin.cholesky import BandedCholesky, banded_from_sparse
from lgcpthin.geo import Grid
from lgcpthin.grf import (
    MaternParams,
    PcPriorSpec,
    build_precision,
    matern_cov,
    pc_prior_logdensity,
    sample_field,
    sample_matern_field,
    sigma_from_tau,
    tau_from_sigma,
)


def bessel_k1_quadrature(x: float) -> float:
    """Independent K_1 oracle via the integral representation
    K_1(x) = int_0^inf exp(-x cosh t) cosh t dt."""
    val, _ = quad(lambda t: math.exp(-x * math.cosh(t)) * math.cosh(t), 0.0, 30.0,
                  limit=200)
    return val


class TestMaternCov:
    def test_zero_lag_is_variance(self):
        params = MaternParams(sigma=math.sqrt(0.7), rho=34.0)
        assert matern_cov(0.0, params) == pytest.approx(0.7, abs=1e-15)

    def test_correlation_at_practical_range(self):
        # oracle: high-accuracy quadrature evaluation of K_1 at sqrt(8)
        params = MaternParams(sigma=1.7, rho=2.3)
        x = math.sqrt(8.0)
        oracle = x * bessel_k1_quadrature(x) * params.sigma ** 2
        got = matern_cov(params.rho, params)
        assert got == pytest.approx(oracle, rel=1e-8)
        assert got == pytest.approx(0.139 * params.sigma ** 2, abs=0.005 * params.sigma ** 2)

    def test_negligible_at_ten_ranges(self):
        params = MaternParams(sigma=2.0, rho=0.8)
        assert matern_cov(10 * params.rho, params) < 1e-6 * params.sigma ** 2

    def test_strictly_decreasing_and_positive(self):
        params = MaternParams(sigma=0.9, rho=1.4)
        lags = np.linspace(0.0, 5 * params.rho, 100)
        vals = matern_cov(lags, params)
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) < 0)

    def test_rejects_bad_inputs(self):
        params = MaternParams(sigma=1.0, rho=1.0)
        with pytest.raises(ValueError):
            matern_cov(-0.1, params)
        with pytest.raises(ValueError):
            matern_cov(np.nan, params)
        with pytest.raises(ValueError):
            MaternParams(sigma=-1.0, rho=1.0)

    def test_tau_sigma_roundtrip(self):
        params = MaternParams(sigma=0.83666, rho=34.0)
        tau = tau_from_sigma(params.sigma, params.kappa)
        assert sigma_from_tau(tau, params.kappa) == pytest.approx(params.sigma, rel=1e-12)
        assert params.kappa == pytest.approx(math.sqrt(8.0) / params.rho, rel=1e-15)


class TestBuildPrecision:
    def test_symmetry_and_sparsity(self):
        grid = Grid(0.0, 0.0, 1.0 / 16, 16, 16)
        prec = build_precision(grid, MaternParams(sigma=1.0, rho=0.3))
        q = prec.matrix
        asym = (q - q.T)
        assert np.max(np.abs(asym.data)) if asym.nnz else 0.0 <= 1e-12
        row_nnz = np.diff(q.tocsr().indptr)
        assert row_nnz.max() <= 13

    def test_cholesky_succeeds(self):
        grid = Grid(0.0, 0.0, 0.1, 12, 9)
        prec = build_precision(grid, MaternParams(sigma=0.5, rho=0.4))
        assert np.isfinite(prec.logdet())

    def test_deterministic_construction(self):
        grid = Grid(0.0, 0.0, 0.05, 20, 20)
        params = MaternParams(sigma=1.2, rho=0.25)
        a = build_precision(grid, params).matrix
        b = build_precision(grid, params).matrix
        assert np.array_equal(a.indptr, b.indptr)
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.data, b.data)

    def test_white_noise_limit(self):
        # kappa large (rho tiny): off-diagonal mass vanishes relative to diagonal
        grid = Grid(0.0, 0.0, 1.0, 8, 8)
        prec = build_precision(grid, MaternParams(sigma=1.0, rho=1e-3)).matrix.tocsr()
        diag = prec.diagonal()
        off = prec - __import__("scipy.sparse", fromlist=["diags"]).diags(diag)
        ratio = np.max(np.abs(off.data)) / diag.min()
        assert ratio < 1e-4

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            build_precision(Grid(0, 0, 1.0, 3, 8), MaternParams(sigma=1, rho=1))

    def test_gmrf_matches_matern_covariance(self):
        # Monte Carlo oracle: empirical lag covariance of 2000 samples vs the
        # analytic covariance, interior nodes, lags up to one range.
        grid = Grid(0.0, 0.0, 1.0 / 32, 32, 32)
        params = MaternParams(sigma=1.0, rho=0.4)
        fields = sample_matern_field(grid, params, seed=101, size=2000)
        flat = fields.reshape(2000, -1)
        centered = flat - flat.mean(axis=0)
        nx = grid.nx
        for dx, dy in ((1, 0), (0, 2), (3, 3), (6, 0), (0, 9), (12, 0)):
            lag = math.hypot(dx, dy) * grid.cell_size
            a = centered.reshape(2000, nx, nx)[:, : nx - dy, : nx - dx].reshape(2000, -1)
            b = centered.reshape(2000, nx, nx)[:, dy:, dx:].reshape(2000, -1)
            emp = np.mean(np.sum(a * b, axis=1) / a.shape[1]) * 2000 / (2000 - 1)
            assert emp == pytest.approx(matern_cov(lag, params), abs=0.05 * params.sigma ** 2)


class TestSampleField:
    def test_zero_mean_and_variance(self):
        grid = Grid(0.0, 0.0, 1.0 / 24, 24, 24)
        params = MaternParams(sigma=0.8, rho=0.3)
        fields = sample_matern_field(grid, params, seed=7, size=5000)
        center = fields[:, 12, 12]
        assert abs(center.mean()) < 4 * params.sigma / math.sqrt(5000)
        assert center.var(ddof=1) == pytest.approx(params.sigma ** 2, rel=0.10)

    def test_seed_determinism(self):
        grid = Grid(0.0, 0.0, 0.1, 10, 10)
        prec = build_precision(grid, MaternParams(sigma=1.0, rho=0.4))
        f1 = sample_field(prec, seed=42)
        f2 = sample_field(prec, seed=42)
        np.testing.assert_array_equal(f1, f2)
        f3 = sample_field(prec, seed=43)
        assert not np.array_equal(f1, f3)

    def test_banded_cholesky_against_dense(self):
        grid = Grid(0.0, 0.0, 0.2, 6, 5)
        prec = build_precision(grid, MaternParams(sigma=1.0, rho=0.5))
        dense = prec.matrix.toarray()
        chol = BandedCholesky(banded_from_sparse(prec.matrix, prec.bandwidth))
        sign, logdet = np.linalg.slogdet(dense)
        assert sign > 0
        assert chol.logdet() == pytest.approx(logdet, rel=1e-12)
        rng = np.random.default_rng(1)
        b = rng.normal(size=30)
        np.testing.assert_allclose(chol.solve(b), np.linalg.solve(dense, b), atol=1e-10)
        l_dense = np.linalg.cholesky(dense)
        np.testing.assert_allclose(chol.solve_lt(b), np.linalg.solve(l_dense.T, b), atol=1e-10)


class TestPcPrior:
    SPEC = PcPriorSpec(rho0=15.0, alpha_rho=0.05, sigma0=1.0, alpha_sigma=0.05)

    def _rho_density(self, r):
        # isolate the range factor by dividing out the sigma factor at sigma=1
        sig_log = pc_prior_logdensity(1e9, 1.0, self.SPEC) - (
            math.log(self.SPEC.lambda_rho) - 2.0 * math.log(1e9)
            - self.SPEC.lambda_rho / 1e9)
        return math.exp(pc_prior_logdensity(r, 1.0, self.SPEC) - sig_log)

    def test_range_tail_probability(self):
        cdf, err = quad(self._rho_density, 0.0, 15.0, limit=200)
        assert err < 1e-8
        assert cdf == pytest.approx(0.05, abs=1e-6)

    def test_sigma_tail_probability(self):
        # closed-form exponential tail: P(sigma > sigma0) = exp(-lambda sigma0)
        tail = math.exp(-self.SPEC.lambda_sigma * self.SPEC.sigma0)
        assert tail == pytest.approx(0.05, abs=1e-12)

    def test_joint_density_integrates_to_one(self):
        val, _ = dblquad(
            lambda s, r: math.exp(pc_prior_logdensity(r, s, self.SPEC)),
            1e-9, np.inf, 1e-9, np.inf, epsabs=1e-6, epsrel=1e-6)
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            pc_prior_logdensity(-1.0, 1.0, self.SPEC)
        with pytest.raises(ValueError):
            pc_prior_logdensity(1.0, 0.0, self.SPEC)

    def test_prior_medians(self):
        # medians follow from the closed-form CDFs; used as optimizer starts
        lam = self.SPEC.lambda_rho
        assert math.exp(-lam / self.SPEC.rho_median) == pytest.approx(0.5, rel=1e-12)
        assert math.exp(-self.SPEC.lambda_sigma * self.SPEC.sigma_median) == pytest.approx(0.5, rel=1e-12)
