"""Gaussian process machinery.

Covers the full approximation ladder used by the classifier heads:

* exact log marginal likelihood (dense Cholesky, small N),
* the variational free energy bound for sparse regression, evaluated
  through Woodbury / matrix-determinant-lemma identities in O(N M^2),
* structured kernel interpolation on regular inducing grids, with
  Toeplitz matrix-vector products per dimension and a Kronecker
  factorization across dimensions,
* whitened variational posteriors over inducing values with Bernoulli
  classification objectives (Gauss-Hermite expected log-likelihood).

All math runs in float64. Kernel hyperparameters are stored as
unconstrained logs so optimizers work on the real line.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bayeslayers import softplus_inverse
from .errors import (
    ConfigurationError,
    DimensionError,
    ExtrapolationError,
    NumericError,
)

LOG_2PI = math.log(2.0 * math.pi)

# Relative jitter ladder applied before every Cholesky factorization.
JITTER_START = 1e-8
JITTER_MAX = 1e-4

_GH_DEGREE = 20
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(_GH_DEGREE)
_GH_NODES_T = torch.tensor(_GH_NODES, dtype=torch.float64)
_GH_WEIGHTS_T = torch.tensor(_GH_WEIGHTS / math.sqrt(math.pi), dtype=torch.float64)


class RbfKernelParams(nn.Module):
    """RBF kernel hyperparameters (per-dimension lengthscale, output
    scale, observation noise variance), stored as logs."""

    def __init__(self, lengthscale, outputscale: float, noise_var: float):
        super().__init__()
        ls = torch.as_tensor(lengthscale, dtype=torch.float64).reshape(-1)
        if (ls <= 0).any() or outputscale <= 0:
            raise ConfigurationError("lengthscale and outputscale must be positive")
        if noise_var < 0:
            raise ConfigurationError("noise_var must be non-negative")
        self.log_lengthscale = nn.Parameter(torch.log(ls))
        self.log_outputscale = nn.Parameter(
            torch.log(torch.tensor(float(outputscale), dtype=torch.float64))
        )
        self.log_noise = nn.Parameter(
            torch.log(torch.tensor(float(noise_var), dtype=torch.float64))
        )

    @property
    def lengthscale(self) -> torch.Tensor:
        return self.log_lengthscale.exp()

    @property
    def outputscale(self) -> torch.Tensor:
        return self.log_outputscale.exp()

    @property
    def noise_var(self) -> torch.Tensor:
        return self.log_noise.exp()

    @property
    def dim(self) -> int:
        return self.log_lengthscale.numel()


def _as_2d(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    return x[:, None] if x.dim() == 1 else x


def rbf_kernel_matrix(
    x1: torch.Tensor, x2: torch.Tensor, params: RbfKernelParams
) -> torch.Tensor:
    """K[i, j] = outputscale * exp(-sum_d (x1_id - x2_jd)^2 / (2 l_d^2))."""
    x1, x2 = _as_2d(x1), _as_2d(x2)
    if x1.shape[1] != x2.shape[1]:
        raise DimensionError(f"input dims differ: {x1.shape[1]} vs {x2.shape[1]}")
    if x1.shape[1] != params.dim and params.dim != 1:
        raise DimensionError(
            f"kernel has {params.dim} lengthscales but inputs have dim {x1.shape[1]}"
        )
    ls = params.lengthscale
    if params.dim == 1 and x1.shape[1] > 1:
        ls = ls.expand(x1.shape[1])
    diff = x1[:, None, :] - x2[None, :, :]
    sq = (diff / ls).pow(2).sum(-1)
    return params.outputscale * torch.exp(-0.5 * sq)


def rbf_kernel_diag(x: torch.Tensor, params: RbfKernelParams) -> torch.Tensor:
    x = _as_2d(x)
    return params.outputscale * torch.ones(x.shape[0], dtype=torch.float64)


def cholesky_with_jitter(matrix: torch.Tensor) -> torch.Tensor:
    """Cholesky with an escalating relative jitter: 1e-8 * mean(diag),
    multiplied by 10 up to 1e-4 * mean(diag), then NumericError."""
    mean_diag = matrix.diagonal().mean().detach().abs().clamp_min(1e-300)
    jitter = JITTER_START
    eye = torch.eye(matrix.shape[0], dtype=matrix.dtype)
    while jitter <= JITTER_MAX * (1.0 + 1e-12):
        try:
            shifted = matrix + (jitter * mean_diag) * eye
            chol, info = torch.linalg.cholesky_ex(shifted)
            if int(info) == 0:
                return chol
        except RuntimeError:
            pass
        jitter *= 10.0
    raise NumericError("Cholesky failed after jitter escalation to 1e-4")


def exact_log_marginal(
    y: torch.Tensor,
    x: torch.Tensor,
    params: RbfKernelParams,
    dense_limit: int = 2048,
) -> torch.Tensor:
    """Dense GP log marginal likelihood via Cholesky."""
    y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
    x = _as_2d(x)
    n = y.numel()
    if x.shape[0] != n:
        raise DimensionError(f"{n} targets but {x.shape[0]} inputs")
    if n > dense_limit:
        raise ConfigurationError(f"N={n} exceeds dense limit {dense_limit}")
    kn = rbf_kernel_matrix(x, x, params) + params.noise_var * torch.eye(
        n, dtype=torch.float64
    )
    chol = cholesky_with_jitter(kn)
    alpha = torch.cholesky_solve(y[:, None], chol)[:, 0]
    return (
        -0.5 * (y * alpha).sum()
        - chol.diagonal().log().sum()
        - 0.5 * n * LOG_2PI
    )


def vfe_elbo(
    y: torch.Tensor,
    x: torch.Tensor,
    inducing,
    params: RbfKernelParams,
) -> torch.Tensor:
    """Variational free energy bound for sparse GP regression.

    With A = Luu^-1 Kuf / sigma and B = I + A A^T:
        log|Qff + s2 I| = N log s2 + log|B|
        y^T (Qff + s2 I)^-1 y = (y^T y - ||LB^-1 A y||^2) / s2
    so the bound costs O(N M^2 + M^3) and never forms an N x N matrix.
    ``inducing`` is a plain location tensor or an InducingGrid.
    """
    y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
    x = _as_2d(x)
    n = y.numel()
    z = inducing.points() if isinstance(inducing, InducingGrid) else _as_2d(inducing)
    m = z.shape[0]
    s2 = params.noise_var
    kuf = rbf_kernel_matrix(z, x, params)
    kuu = rbf_kernel_matrix(z, z, params)
    luu = cholesky_with_jitter(kuu)
    a = torch.linalg.solve_triangular(luu, kuf, upper=False) / s2.sqrt()
    b = torch.eye(m, dtype=torch.float64) + a @ a.T
    lb = cholesky_with_jitter(b)
    ay = a @ (y / s2.sqrt())
    c = torch.linalg.solve_triangular(lb, ay[:, None], upper=False)[:, 0]
    quad = -0.5 * ((y * y).sum() / s2 - (c * c).sum())
    logdet = -lb.diagonal().log().sum() - 0.5 * n * s2.log()
    trace_k = rbf_kernel_diag(x, params).sum()
    trace_q = s2 * a.pow(2).sum()
    t = trace_k - trace_q
    return quad + logdet - 0.5 * n * LOG_2PI - t / (2.0 * s2)


# --------------------------------------------------------------------------
# Toeplitz and Kronecker structure
# --------------------------------------------------------------------------


def toeplitz_matvec(first_col: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Multiply a symmetric Toeplitz matrix (given by its first column)
    by a vector via circulant embedding and FFT, O(M log M)."""
    first_col = torch.as_tensor(first_col, dtype=torch.float64).reshape(-1)
    v = torch.as_tensor(v, dtype=torch.float64)
    if first_col.numel() != v.shape[0]:
        raise DimensionError(
            f"first_col length {first_col.numel()} != vector length {v.shape[0]}"
        )
    return toeplitz_matmat(first_col, v.reshape(-1, 1))[:, 0] if v.dim() == 1 else toeplitz_matmat(first_col, v)


def toeplitz_matmat(first_col: torch.Tensor, mat: torch.Tensor) -> torch.Tensor:
    """Batched symmetric-Toeplitz multiply: (M, B) columns at once."""
    m = first_col.numel()
    if m == 1:
        return first_col[0] * mat
    # circulant of size 2M-1: [t0, ..., t_{M-1}, t_{M-1}, ..., t_1]
    circ = torch.cat([first_col, first_col[1:].flip(0)])
    p = circ.numel()
    fc = torch.fft.rfft(circ, n=p)
    fv = torch.fft.rfft(mat, n=p, dim=0)
    out = torch.fft.irfft(fc[:, None] * fv, n=p, dim=0)
    return out[:m]


def kron_matmat(factors: list, x: torch.Tensor) -> torch.Tensor:
    """Apply (F_0 kron F_1 kron ... kron F_{D-1}) to columns of x.

    Each factor is a dense (m_d, m_d) tensor or a 1-D tensor interpreted
    as the first column of a symmetric Toeplitz factor. Row order is
    C-order over the per-dimension indices (dimension 0 slowest).
    """
    single = x.dim() == 1
    if single:
        x = x[:, None]
    total, batch = x.shape
    for factor in factors:
        size = factor.shape[0]
        rest = total // size
        block = x.reshape(size, rest * batch)
        if factor.dim() == 1:
            block = toeplitz_matmat(factor, block)
        else:
            block = factor @ block
        x = (
            block.reshape(size, rest, batch)
            .permute(1, 0, 2)
            .reshape(total, batch)
        )
    return x[:, 0] if single else x


# --------------------------------------------------------------------------
# Inducing grids and local linear interpolation
# --------------------------------------------------------------------------


class InducingGrid:
    """Regularly spaced per-dimension inducing locations.

    Each dimension contributes a strictly increasing, equally spaced
    axis, so the per-dimension kernel matrices are Toeplitz and the full
    K_uu factors as a Kronecker product across dimensions. The hull is
    built to cover the observed data range plus one spacing of margin.
    """

    def __init__(self, axes: list[torch.Tensor]):
        self.axes = [torch.as_tensor(a, dtype=torch.float64).reshape(-1) for a in axes]
        self.spacings = []
        for axis in self.axes:
            if axis.numel() < 2:
                raise ConfigurationError("grid axes need at least 2 points")
            diffs = axis[1:] - axis[:-1]
            if (diffs <= 0).any():
                raise ConfigurationError("grid axis not strictly increasing")
            if not torch.allclose(diffs, diffs[0], rtol=1e-9, atol=1e-12):
                raise ConfigurationError("grid axis not equally spaced")
            self.spacings.append(float(diffs[0]))
        self.counts = [int(a.numel()) for a in self.axes]
        self._first_col_cache: tuple | None = None

    @classmethod
    def covering(cls, lows, highs, counts) -> "InducingGrid":
        """Grid whose hull is [lo - h, hi + h] per dimension, with the
        spacing h implied by the point count (needs >= 4 points)."""
        axes = []
        for lo, hi, m in zip(np.atleast_1d(lows), np.atleast_1d(highs), np.atleast_1d(counts)):
            m = int(m)
            if m < 4:
                raise ConfigurationError("covering grid needs at least 4 points per dim")
            span = float(hi) - float(lo)
            if span <= 0:
                raise ConfigurationError("grid range is empty")
            h = span / (m - 3)
            axes.append(torch.linspace(float(lo) - h, float(hi) + h, m, dtype=torch.float64))
        return cls(axes)

    @classmethod
    def from_data(cls, x: torch.Tensor, counts) -> "InducingGrid":
        x = _as_2d(x)
        lows = x.min(0).values.numpy()
        highs = x.max(0).values.numpy()
        counts = np.broadcast_to(np.atleast_1d(counts), (x.shape[1],))
        return cls.covering(lows, highs, counts)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.counts))

    def points(self) -> torch.Tensor:
        """Full cross-product locations, C-ordered (dim 0 slowest)."""
        mesh = torch.meshgrid(*self.axes, indexing="ij")
        return torch.stack([m.reshape(-1) for m in mesh], dim=-1)

    def unit_toeplitz_columns(self, params: RbfKernelParams) -> list[torch.Tensor]:
        """First column of each per-dimension kernel factor at unit
        output scale; cached per hyperparameter value."""
        ls = params.lengthscale
        if ls.numel() == 1 and self.dim > 1:
            ls = ls.expand(self.dim)
        key = tuple(float(v) for v in ls.detach()) if not ls.requires_grad else None
        if key is not None and self._first_col_cache is not None:
            cached_key, cached = self._first_col_cache
            if cached_key == key:
                return cached
        cols = []
        for d, axis in enumerate(self.axes):
            delta = axis - axis[0]
            cols.append(torch.exp(-0.5 * (delta / ls[d]) ** 2))
        if key is not None:
            self._first_col_cache = (key, cols)
        return cols

    def dense_factors(self, params: RbfKernelParams) -> list[torch.Tensor]:
        """Dense per-dimension unit-scale kernel matrices."""
        factors = []
        for col in self.unit_toeplitz_columns(params):
            m = col.numel()
            idx = torch.arange(m)
            factors.append(col[(idx[:, None] - idx[None, :]).abs()])
        return factors

    def kuu_matvec(self, params: RbfKernelParams, v: torch.Tensor) -> torch.Tensor:
        """K_uu v through the Toeplitz/Kronecker factorization."""
        cols = self.unit_toeplitz_columns(params)
        return params.outputscale * kron_matmat(cols, v)

    def root_factors(self, params: RbfKernelParams) -> list[torch.Tensor]:
        """Per-dimension Cholesky factors; their Kronecker product times
        sqrt(outputscale) is a root of K_uu."""
        return [cholesky_with_jitter(f) for f in self.dense_factors(params)]


@dataclass
class SparseInterpolation:
    """Local linear interpolation weights onto a grid.

    Per data point and dimension: the two bracketing axis indices and
    their convex weights. Multi-dimensional weights are products across
    dimensions, giving 2^d nonzeros per point.
    """

    indices: torch.Tensor  # (n, d, 2) long
    weights: torch.Tensor  # (n, d, 2) float64
    grid_counts: tuple[int, ...]

    @property
    def n_points(self) -> int:
        return self.indices.shape[0]

    @property
    def dim(self) -> int:
        return self.indices.shape[1]

    def combos(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Flattened grid indices (n, 2^d) and weights (n, 2^d)."""
        strides = []
        acc = 1
        for m in reversed(self.grid_counts):
            strides.append(acc)
            acc *= m
        strides = list(reversed(strides))
        flat_parts, weight_parts = [], []
        for choice in itertools.product((0, 1), repeat=self.dim):
            flat = sum(
                self.indices[:, d, c] * strides[d] for d, c in enumerate(choice)
            )
            w = self.weights[:, 0, choice[0]]
            for d in range(1, self.dim):
                w = w * self.weights[:, d, choice[d]]
            flat_parts.append(flat)
            weight_parts.append(w)
        return torch.stack(flat_parts, dim=1), torch.stack(weight_parts, dim=1)

    def project_to_grid(self, v: torch.Tensor) -> torch.Tensor:
        """W v: scatter point values onto grid nodes (result length M)."""
        flat, w = self.combos()
        total = int(np.prod(self.grid_counts))
        single = v.dim() == 1
        if single:
            v = v[:, None]
        out = torch.zeros(total, v.shape[1], dtype=torch.float64)
        for c in range(flat.shape[1]):
            out = out.index_add(0, flat[:, c], w[:, c : c + 1] * v)
        return out[:, 0] if single else out

    def interpolate_from_grid(self, u: torch.Tensor) -> torch.Tensor:
        """W^T u: gather grid values back to the data points."""
        flat, w = self.combos()
        single = u.dim() == 1
        if single:
            u = u[:, None]
        out = torch.zeros(self.n_points, u.shape[1], dtype=torch.float64)
        for c in range(flat.shape[1]):
            out = out + w[:, c : c + 1] * u[flat[:, c]]
        return out[:, 0] if single else out

    def dense_matrix(self) -> torch.Tensor:
        """Materialized (M, n) weight matrix; small cases and tests only."""
        flat, w = self.combos()
        total = int(np.prod(self.grid_counts))
        dense = torch.zeros(total, self.n_points, dtype=torch.float64)
        cols = torch.arange(self.n_points)
        for c in range(flat.shape[1]):
            dense.index_put_((flat[:, c], cols), w[:, c], accumulate=True)
        return dense


def interpolation_weights(x: torch.Tensor, grid: InducingGrid) -> SparseInterpolation:
    """Bracketing indices and convex weights for every point.

    Points must lie inside the grid hull; differentiable with respect to
    x through the weights (piecewise linear).
    """
    x = _as_2d(x)
    if x.shape[1] != grid.dim:
        raise DimensionError(f"points have dim {x.shape[1]}, grid has dim {grid.dim}")
    index_cols, weight_cols = [], []
    for d, axis in enumerate(grid.axes):
        col = x[:, d]
        lo_val, hi_val = float(axis[0]), float(axis[-1])
        outside = (col < lo_val) | (col > hi_val)
        if bool(outside.any()):
            bad = int(torch.nonzero(outside)[0])
            raise ExtrapolationError(
                f"point {bad} at {float(col[bad]):.6g} is outside grid hull "
                f"[{lo_val:.6g}, {hi_val:.6g}] in dim {d}; rebuild the grid"
            )
        lo = torch.searchsorted(axis, col.detach().contiguous(), right=True) - 1
        lo = lo.clamp(0, axis.numel() - 2)
        h = grid.spacings[d]
        left = axis[lo]
        t = (col - left) / h
        index_cols.append(torch.stack([lo, lo + 1], dim=-1))
        weight_cols.append(torch.stack([1.0 - t, t], dim=-1))
    return SparseInterpolation(
        indices=torch.stack(index_cols, dim=1),
        weights=torch.stack(weight_cols, dim=1),
        grid_counts=tuple(grid.counts),
    )


class SkiCrossCovariance:
    """Implicit K_uf operator under structured kernel interpolation:
    K_uf ~= K_uu W, applied through structured matvecs only."""

    def __init__(self, interp: SparseInterpolation, grid: InducingGrid, params: RbfKernelParams):
        self.interp = interp
        self.grid = grid
        self.params = params

    def matvec(self, v: torch.Tensor) -> torch.Tensor:
        """K_uf v for point-space v (length n) -> grid space (length M)."""
        return self.grid.kuu_matvec(self.params, self.interp.project_to_grid(v))

    def rmatvec(self, u: torch.Tensor) -> torch.Tensor:
        """K_fu u for grid-space u (length M) -> point space (length n)."""
        return self.interp.interpolate_from_grid(self.grid.kuu_matvec(self.params, u))


def ski_cross_cov(
    interp: SparseInterpolation, grid: InducingGrid, params: RbfKernelParams
) -> SkiCrossCovariance:
    return SkiCrossCovariance(interp, grid, params)


def ski_qff_quadform(
    interp: SparseInterpolation,
    grid: InducingGrid,
    params: RbfKernelParams,
    v: torch.Tensor,
) -> torch.Tensor:
    """Q_ff v = W^T K_uu (W v), never materializing Q_ff."""
    v = torch.as_tensor(v, dtype=torch.float64)
    if v.shape[0] != interp.n_points:
        raise DimensionError(f"vector length {v.shape[0]} != {interp.n_points} points")
    return interp.interpolate_from_grid(grid.kuu_matvec(params, interp.project_to_grid(v)))


# --------------------------------------------------------------------------
# Whitened variational state and prediction
# --------------------------------------------------------------------------


class WhitenedVariationalState(nn.Module):
    """Variational distribution over inducing values in whitened
    coordinates, where the prior is N(0, I).

    The covariance factor L is parameterized with a softplus diagonal so
    diag(L) > 0 always holds.
    """

    whitened = True

    def __init__(self, n_inducing: int):
        super().__init__()
        self.n_inducing = n_inducing
        self.mean = nn.Parameter(torch.zeros(n_inducing, dtype=torch.float64))
        raw = torch.zeros(n_inducing, n_inducing, dtype=torch.float64)
        raw.diagonal().fill_(softplus_inverse(1.0))
        self.raw_cov = nn.Parameter(raw)

    @property
    def cov_factor(self) -> torch.Tensor:
        lower = torch.tril(self.raw_cov, diagonal=-1)
        diag = nn.functional.softplus(self.raw_cov.diagonal())
        return lower + torch.diag(diag)

    def set_from(self, mean: torch.Tensor, cov_factor: torch.Tensor) -> None:
        """Load a concrete (m, L) pair, e.g. an analytic optimum."""
        with torch.no_grad():
            self.mean.copy_(mean.reshape(-1))
            raw = torch.tril(cov_factor, diagonal=-1).clone()
            raw.diagonal().copy_(
                torch.log(torch.expm1(cov_factor.diagonal().clamp_min(1e-12)))
            )
            self.raw_cov.copy_(raw)

    def kl(self) -> torch.Tensor:
        """KL(N(m, L L^T) || N(0, I)) in whitened coordinates."""
        chol = self.cov_factor
        frob = chol.pow(2).sum()
        logdet = chol.diagonal().log().sum()
        return 0.5 * ((self.mean * self.mean).sum() + frob - self.n_inducing) - logdet


def whitened_features(
    inducing,
    x: torch.Tensor,
    params: RbfKernelParams,
) -> torch.Tensor:
    """The (M, n) matrix A with columns a_i = K_uu^{-1/2} K_u,xi.

    Free-point inducing sets use a triangular solve against the Cholesky
    of K_uu; grids use A = L_uu^T W with L_uu the Kronecker product of
    per-dimension Cholesky factors and W the sparse interpolation.
    """
    x = _as_2d(x)
    if isinstance(inducing, InducingGrid):
        interp = interpolation_weights(x, inducing)
        w_dense = interp.project_to_grid(
            torch.eye(x.shape[0], dtype=torch.float64)
        )
        roots = [f.T for f in inducing.root_factors(params)]
        return params.outputscale.sqrt() * kron_matmat(roots, w_dense)
    z = _as_2d(inducing)
    kuz = rbf_kernel_matrix(z, x, params)
    luu = cholesky_with_jitter(rbf_kernel_matrix(z, z, params))
    return torch.linalg.solve_triangular(luu, kuz, upper=False)


def latent_posterior_predict(
    state: WhitenedVariationalState,
    inducing,
    x: torch.Tensor,
    params: RbfKernelParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Whitened sparse-GP predictive marginals at x.

    mean = A^T m,  var = k** - colsum(A^2) + colsum((L^T A)^2).
    An untrained state (m = 0, L = I) reproduces the prior.
    """
    a = whitened_features(inducing, x, params)
    mean = a.T @ state.mean
    chol = state.cov_factor
    prior = rbf_kernel_diag(x, params)
    var = prior - a.pow(2).sum(0) + (chol.T @ a).pow(2).sum(0)
    floor = -1e-6 * float(prior.detach().max())
    if bool((var < floor).any()):
        raise NumericError("non-positive predictive variance")
    return mean, var.clamp_min(1e-12)


def bernoulli_expected_loglik(
    labels: torch.Tensor, mean: torch.Tensor, var: torch.Tensor
) -> torch.Tensor:
    """E_{f ~ N(mean, var)}[log Bernoulli(y | sigmoid(f))] per point,
    by 20-node Gauss-Hermite quadrature."""
    signs = 2.0 * torch.as_tensor(labels, dtype=torch.float64) - 1.0
    f = mean[:, None] + torch.sqrt(2.0 * var)[:, None] * _GH_NODES_T[None, :]
    logp = nn.functional.logsigmoid(signs[:, None] * f)
    return logp @ _GH_WEIGHTS_T


def classification_elbo(
    labels: torch.Tensor,
    x: torch.Tensor,
    inducing,
    params: RbfKernelParams,
    state: WhitenedVariationalState,
    n_train: int | None = None,
) -> torch.Tensor:
    """Bernoulli sparse variational objective: summed expected
    log-likelihood minus KL(q(u) || p(u)), the KL scaled by
    batch_size / n_train so minibatch objectives sum to the full bound."""
    mean, var = latent_posterior_predict(state, inducing, x, params)
    ell = bernoulli_expected_loglik(labels, mean, var).sum()
    batch = mean.numel()
    scale = batch / float(n_train if n_train is not None else batch)
    return ell - scale * state.kl()


def regression_elbo(
    y: torch.Tensor,
    x: torch.Tensor,
    inducing,
    params: RbfKernelParams,
    state: WhitenedVariationalState,
    n_train: int | None = None,
) -> torch.Tensor:
    """Gaussian-likelihood counterpart of classification_elbo (the
    uncollapsed whitened bound), used by regression oracles."""
    y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
    mean, var = latent_posterior_predict(state, inducing, x, params)
    s2 = params.noise_var
    ell = (
        -0.5 * LOG_2PI
        - 0.5 * s2.log()
        - 0.5 * ((y - mean).pow(2) + var) / s2
    ).sum()
    batch = mean.numel()
    scale = batch / float(n_train if n_train is not None else batch)
    return ell - scale * state.kl()


def fit_optimal_regression_state(
    y: torch.Tensor,
    x: torch.Tensor,
    inducing,
    params: RbfKernelParams,
) -> WhitenedVariationalState:
    """Analytically optimal whitened q(u) for Gaussian likelihood.

    In whitened coordinates the model is Bayesian linear regression with
    features A, so the optimum is S = (I + A A^T / s2)^-1 and
    m = S A y / s2.
    """
    y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
    a = whitened_features(inducing, x, params)
    m_ind = a.shape[0]
    s2 = params.noise_var
    precision = torch.eye(m_ind, dtype=torch.float64) + (a @ a.T) / s2
    lp = cholesky_with_jitter(precision)
    cov = torch.cholesky_inverse(lp)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (a @ y) / s2
    state = WhitenedVariationalState(m_ind)
    state.set_from(mean.detach(), cholesky_with_jitter(cov).detach())
    return state


def bernoulli_predict(
    latent_mean,
    latent_var,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw latent samples f ~ N(mean, var) and return sigmoid(f).

    Returns (n, S) probabilities; the sample mean estimates p(y=1)."""
    mean = np.atleast_1d(np.asarray(latent_mean, dtype=np.float64))
    var = np.atleast_1d(np.asarray(latent_var, dtype=np.float64))
    if (var < 0).any():
        raise NumericError("negative latent variance")
    if n_samples < 1:
        raise ConfigurationError("need at least one sample")
    eps = rng.standard_normal((mean.size, n_samples))
    f = mean[:, None] + np.sqrt(var)[:, None] * eps
    return 1.0 / (1.0 + np.exp(-f))
