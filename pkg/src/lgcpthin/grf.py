"""Matern Gaussian random fields on a regular grid with sparse precision.

The field is parameterized by its marginal standard deviation ``sigma`` and
practical range ``rho`` (smoothness fixed at 1).  On a lattice the field is
represented as a Gaussian Markov random field whose precision discretizes
(kappa^2 - Laplacian) applied twice, giving a 13-point stencil; Neumann
boundary artifacts are controlled by building on an extended grid and
cropping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import k1

from lgcpthin.cholesky import BandedCholesky, banded_from_sparse
from lgcpthin.errors import NotSpdError
from lgcpthin.geo import Grid

NU = 1.0  # smoothness is fixed; the stencil below is specific to this value


@dataclass(frozen=True)
class MaternParams:
    """Marginal standard deviation and practical range of the latent field."""

    sigma: float
    rho: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive and finite")
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise ValueError("rho must be positive and finite")

    @property
    def nu(self) -> float:
        return NU

    @property
    def kappa(self) -> float:
        """Spatial scale parameter, sqrt(8 nu) / rho."""
        return math.sqrt(8.0 * NU) / self.rho

    @property
    def tau(self) -> float:
        """Precision scale giving marginal variance sigma^2."""
        return tau_from_sigma(self.sigma, self.kappa)


def tau_from_sigma(sigma: float, kappa: float) -> float:
    """sigma^2 = 1 / (4 pi kappa^2 tau^2), solved for tau."""
    return 1.0 / (2.0 * math.sqrt(math.pi) * kappa * sigma)


def sigma_from_tau(tau: float, kappa: float) -> float:
    return 1.0 / (2.0 * math.sqrt(math.pi) * kappa * tau)


def matern_cov(distance, params: MaternParams):
    """Matern covariance at the given lag(s); equals sigma^2 at lag zero.

    With smoothness 1 the covariance is sigma^2 (kappa h) K_1(kappa h),
    strictly decreasing in h and vanishing at infinity.
    """
    h = np.asarray(distance, dtype=float)
    if not np.all(np.isfinite(h)):
        raise ValueError("distance must be finite")
    if np.any(h < 0):
        raise ValueError("distance must be nonnegative")
    x = params.kappa * h
    with np.errstate(invalid="ignore", over="ignore"):
        val = np.where(x > 0, x * k1(np.maximum(x, 1e-300)), 1.0)
    out = params.sigma ** 2 * val
    return float(out) if np.ndim(distance) == 0 else out


@dataclass(frozen=True)
class PcPriorSpec:
    """Tail-probability specification of the field hyperpriors.

    P(rho < rho0) = alpha_rho and P(sigma > sigma0) = alpha_sigma.
    """

    rho0: float = 15.0
    alpha_rho: float = 0.05
    sigma0: float = 1.0
    alpha_sigma: float = 0.05

    def __post_init__(self):
        if self.rho0 <= 0 or self.sigma0 <= 0:
            raise ValueError("rho0 and sigma0 must be positive")
        if not (0 < self.alpha_rho < 1 and 0 < self.alpha_sigma < 1):
            raise ValueError("tail probabilities must lie in (0, 1)")

    @property
    def lambda_rho(self) -> float:
        # d = 2 spatial dimensions
        return -math.log(self.alpha_rho) * self.rho0

    @property
    def lambda_sigma(self) -> float:
        return -math.log(self.alpha_sigma) / self.sigma0

    @property
    def rho_median(self) -> float:
        return self.lambda_rho / math.log(2.0)

    @property
    def sigma_median(self) -> float:
        return math.log(2.0) / self.lambda_sigma


def pc_prior_logdensity(rho: float, sigma: float, spec: PcPriorSpec) -> float:
    """Joint log density of the range and standard deviation priors.

    pi(rho) = lam_r rho^-2 exp(-lam_r / rho)  (d = 2)
    pi(sigma) = lam_s exp(-lam_s sigma)
    """
    if rho <= 0 or sigma <= 0:
        raise ValueError("rho and sigma must be positive")
    lam_r, lam_s = spec.lambda_rho, spec.lambda_sigma
    log_rho = math.log(lam_r) - 2.0 * math.log(rho) - lam_r / rho
    log_sigma = math.log(lam_s) - lam_s * sigma
    return log_rho + log_sigma


# ---------------------------------------------------------------------------
# Lattice precision construction
# ---------------------------------------------------------------------------

def _stiffness(nx: int, ny: int) -> sp.csr_matrix:
    """Graph Laplacian of the 4-neighbor lattice (dimensionless stiffness)."""
    n = nx * ny
    idx = np.arange(n)
    i = idx % nx
    j = idx // nx
    rows, cols = [], []
    for di, dj in ((1, 0), (0, 1)):
        ok = (i + di < nx) & (j + dj < ny)
        a = idx[ok]
        b = a + di + dj * nx
        rows.extend([a, b])
        cols.extend([b, a])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    off = sp.csr_matrix((-np.ones(rows.size), (rows, cols)), shape=(n, n))
    deg = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(deg)).tocsr()


class GmrfPrecision:
    """Sparse SPD precision of the lattice field, with its Cholesky factor."""

    def __init__(self, grid: Grid, matrix: sp.csr_matrix, params: MaternParams):
        self.grid = grid
        self.matrix = matrix
        self.params = params
        self._chol: BandedCholesky | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def bandwidth(self) -> int:
        return 2 * self.grid.nx

    def chol(self) -> BandedCholesky:
        if self._chol is None:
            self._chol = BandedCholesky(banded_from_sparse(self.matrix, self.bandwidth))
        return self._chol

    def logdet(self) -> float:
        return self.chol().logdet()


class _LatticeOperators:
    """Cached stiffness pieces for one grid shape; precision assembly is a
    three-term linear combination of these, kept both sparse and in banded
    storage so repeated assembly costs only array arithmetic."""

    def __init__(self, grid: Grid):
        h = grid.cell_size
        n = grid.n_cells
        g = _stiffness(grid.nx, grid.ny)
        self.identity = sp.identity(n, format="csr") * (h * h)  # lumped mass C
        self.g = g
        self.gg = (g @ g) / (h * h)  # G C^-1 G
        self.bandwidth = 2 * grid.nx
        from lgcpthin.cholesky import banded_from_sparse

        self._ab_c = banded_from_sparse(self.identity, self.bandwidth)
        self._ab_g = banded_from_sparse(self.g, self.bandwidth)
        self._ab_gg = banded_from_sparse(self.gg, self.bandwidth)

    def assemble(self, params: MaternParams) -> sp.csr_matrix:
        kappa, tau = params.kappa, params.tau
        q = tau * tau * (kappa ** 4 * self.identity + 2.0 * kappa ** 2 * self.g + self.gg)
        return q.tocsr()

    def assemble_banded(self, params: MaternParams) -> np.ndarray:
        """Same precision in LAPACK lower-banded storage."""
        kappa, tau = params.kappa, params.tau
        t2 = tau * tau
        return t2 * (kappa ** 4 * self._ab_c + 2.0 * kappa ** 2 * self._ab_g + self._ab_gg)


_OPERATOR_CACHE: dict[tuple, _LatticeOperators] = {}


def _operators(grid: Grid) -> _LatticeOperators:
    key = (grid.nx, grid.ny, grid.cell_size)
    ops = _OPERATOR_CACHE.get(key)
    if ops is None:
        ops = _LatticeOperators(grid)
        if len(_OPERATOR_CACHE) > 8:
            _OPERATOR_CACHE.clear()
        _OPERATOR_CACHE[key] = ops
    return ops


def build_precision(grid: Grid, params: MaternParams) -> GmrfPrecision:
    """Precision of the lattice Matern field on the given grid.

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G) with C the lumped mass
    matrix (cell areas) and G the 5-point stiffness matrix; tau is chosen so
    the stationary marginal variance equals sigma^2.  Raises
    :class:`NotSpdError` if the result cannot be factored.
    """
    if grid.nx < 4 or grid.ny < 4:
        raise ValueError("grid must have at least 4 nodes per dimension")
    prec = GmrfPrecision(grid, _operators(grid).assemble(params), params)
    prec.chol()  # fail fast if not SPD
    return prec


def sample_field(precision: GmrfPrecision, seed, size: int = 1) -> np.ndarray:
    """Draw zero-mean field samples; shape (ny, nx) or (size, ny, nx).

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    try:
        draws = precision.chol().sample(rng, size)
    except NotSpdError:
        raise
    g = precision.grid
    fields = draws.T.reshape(size, g.ny, g.nx)
    return fields[0] if size == 1 else fields


def extension_margin(grid: Grid, params: MaternParams, extension_factor: float) -> int:
    """Number of padding cells so the pad is >= extension_factor * rho."""
    return int(math.ceil(extension_factor * params.rho / grid.cell_size))


def sample_matern_field(grid: Grid, params: MaternParams, seed,
                        size: int = 1, extension_factor: float = 1.5) -> np.ndarray:
    """Sample the field on ``grid`` with boundary extension and cropping.

    The precision is built on a grid padded by ``extension_factor * rho`` on
    every side, samples are drawn there, and the padding is discarded; this
    suppresses the variance inflation of the Neumann boundary.
    """
    m = extension_margin(grid, params, extension_factor)
    prec = build_precision(grid.extended(m), params)
    fields = sample_field(prec, seed, size)
    if size == 1:
        return fields[m:m + grid.ny, m:m + grid.nx]
    return fields[:, m:m + grid.ny, m:m + grid.nx]
