"""Seeded sampling and log-densities for the distributions both models use.

Everything takes an explicit :class:`RandomSource`; there is no module-level
random state. Functions whose names start with ``_nb`` are numba kernels shared
with the chain samplers in :mod:`msprior.dpmm` and :mod:`msprior.ctab`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import gammaln

from .errors import DomainError, ParameterError

__all__ = [
    "RandomSource",
    "NiwParams",
    "DirichletParams",
    "as_generator",
    "sample_gamma",
    "sample_log_gamma",
    "sample_dirichlet",
    "logpdf_dirichlet",
    "sample_niw",
    "niw_posterior",
    "niw_predictive",
    "logpdf_mvt",
    "logpdf_mvn",
]

_SIMPLEX_TOL = 1e-9


class RandomSource:
    """Reproducible random stream identified by ``(seed, stream)``.

    Backed by numpy's counter-based Philox bit generator. Child streams are
    derived from the parent seed plus a stream path, so replicate ``i`` of a
    study gets the same numbers no matter which worker runs it or in which
    order.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit seed.
    stream : tuple of int, optional
        Stream path; ``()`` is the root stream.
    """

    def __init__(self, seed=0, stream=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *ids):
        """Independent stream for ``ids`` below this one."""
        return RandomSource(self.seed, self.stream + tuple(ids))

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, stream={self.stream})"


def as_generator(rng):
    """Return the numpy Generator behind ``rng``."""
    if isinstance(rng, RandomSource):
        return rng.gen
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RandomSource or numpy Generator, got {type(rng).__name__}")


def _check_spd(matrix, name):
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"{name} must be a square matrix, got shape {a.shape}")
    a = 0.5 * (a + a.T)
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ParameterError(f"{name} is not positive definite") from None
    return a


@dataclass(frozen=True)
class NiwParams:
    """Normal-inverse-Wishart base measure for ``(mu, Sigma)``.

    ``Sigma ~ inverse-Wishart`` with ``E[Sigma] = S0 / (nu0 - p - 1)`` and
    ``mu | Sigma ~ normal(mu0, Sigma / kappa0)``.
    """

    mu0: np.ndarray
    kappa0: float
    S0: np.ndarray
    nu0: float

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        if mu0.ndim != 1 or not np.all(np.isfinite(mu0)):
            raise ParameterError("mu0 must be a finite vector")
        S0 = _check_spd(np.atleast_2d(self.S0), "S0")
        if S0.shape[0] != mu0.size:
            raise ParameterError(f"S0 is {S0.shape} but mu0 has length {mu0.size}")
        kappa0 = float(self.kappa0)
        nu0 = float(self.nu0)
        if not kappa0 > 0 or not np.isfinite(kappa0):
            raise ParameterError(f"kappa0 must be positive, got {self.kappa0}")
        if not nu0 > mu0.size - 1:
            raise ParameterError(f"nu0 must exceed p - 1 = {mu0.size - 1}, got {self.nu0}")
        mu0.setflags(write=False)
        S0.setflags(write=False)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "S0", S0)
        object.__setattr__(self, "kappa0", kappa0)
        object.__setattr__(self, "nu0", nu0)

    @property
    def p(self):
        return self.mu0.size

    def sigma_mean(self):
        """``E[Sigma]``; only finite when ``nu0 > p + 1``."""
        if self.nu0 <= self.p + 1:
            return np.full((self.p, self.p), np.inf)
        return self.S0 / (self.nu0 - self.p - 1)


@dataclass(frozen=True)
class DirichletParams:
    """Dirichlet concentration vector."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float)).copy()
        if a.ndim != 1 or a.size == 0:
            raise ParameterError("alpha must be a non-empty vector")
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ParameterError("Dirichlet concentrations must be positive and finite")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    def __len__(self):
        return self.alpha.size

    @property
    def total(self):
        return float(self.alpha.sum())

    def mean(self):
        return self.alpha / self.alpha.sum()


def _alpha_of(params):
    if isinstance(params, DirichletParams):
        return params.alpha
    return DirichletParams(params).alpha


# --------------------------------------------------------------------------
# gamma, beta, Dirichlet
# --------------------------------------------------------------------------

def sample_gamma(shape, rate, rng, size=None):
    """Draw from gamma(shape, rate).

    Shapes >= 1 use numpy's Marsaglia-Tsang sampler directly; smaller shapes
    are boosted, ``G(a) = G(a + 1) * U**(1/a)``.
    """
    shape = float(shape)
    rate = float(rate)
    if not shape > 0 or not rate > 0 or not np.isfinite(shape) or not np.isfinite(rate):
        raise ParameterError(f"gamma needs shape > 0 and rate > 0, got ({shape}, {rate})")
    gen = as_generator(rng)
    if shape >= 1.0:
        return gen.standard_gamma(shape, size) / rate
    g = gen.standard_gamma(shape + 1.0, size)
    u = gen.random(size)
    return g * u ** (1.0 / shape) / rate


def sample_log_gamma(shape, rng, size=None):
    """Draw ``log Z`` for ``Z ~ gamma(shape, 1)`` without underflow.

    ``shape`` may be an array, in which case one draw per entry is returned.
    """
    a = np.asarray(shape, dtype=float)
    if not np.all(a > 0) or not np.all(np.isfinite(a)):
        raise ParameterError("gamma shapes must be positive and finite")
    gen = as_generator(rng)
    if a.ndim == 0:
        out = np.array([_nb_log_gamma(gen, float(a)) for _ in range(1 if size is None else int(np.prod(size)))])
        return float(out[0]) if size is None else out.reshape(size)
    if size is not None:
        raise ParameterError("size is only supported for a scalar shape")
    return _nb_log_gamma_vec(gen, a.ravel()).reshape(a.shape)


@numba.njit(cache=True)
def _nb_log_gamma(gen, a):
    if a >= 1.0:
        return math.log(gen.standard_gamma(a))
    g = gen.standard_gamma(a + 1.0)
    u = gen.random()
    return math.log(g) + math.log(u) / a


@numba.njit(cache=True)
def _nb_log_gamma_vec(gen, a):
    out = np.empty(a.size)
    for i in range(a.size):
        out[i] = _nb_log_gamma(gen, a[i])
    return out


@numba.njit(cache=True)
def _nb_gamma(gen, a):
    if a >= 1.0:
        return gen.standard_gamma(a)
    g = gen.standard_gamma(a + 1.0)
    return g * gen.random() ** (1.0 / a)


@numba.njit(cache=True)
def _nb_beta(gen, a, b):
    # ratio in log space so tiny shapes cannot give 0/0
    la = _nb_log_gamma(gen, a)
    lb = _nb_log_gamma(gen, b)
    m = max(la, lb)
    ea = math.exp(la - m)
    return ea / (ea + math.exp(lb - m))


@numba.njit(cache=True)
def _nb_dirichlet(gen, alpha, out):
    k = alpha.size
    m = -np.inf
    for i in range(k):
        out[i] = _nb_log_gamma(gen, alpha[i])
        if out[i] > m:
            m = out[i]
    s = 0.0
    for i in range(k):
        out[i] = math.exp(out[i] - m)
        s += out[i]
    for i in range(k):
        out[i] /= s


def sample_dirichlet(params, rng, size=None):
    """Dirichlet draw(s) as normalized gamma variables.

    Gammas are drawn on the log scale and normalized with max-subtraction, so
    very small concentrations still give a valid simplex point.
    """
    alpha = _alpha_of(params)
    gen = as_generator(rng)
    if size is None:
        out = np.empty(alpha.size)
        _nb_dirichlet(gen, alpha, out)
        return out
    n = int(np.prod(size))
    out = np.empty((n, alpha.size))
    for i in range(n):
        _nb_dirichlet(gen, alpha, out[i])
    return out.reshape(tuple(np.atleast_1d(size)) + (alpha.size,))


def logpdf_dirichlet(params, x):
    """Exact Dirichlet log-density at a point of the open simplex."""
    alpha = _alpha_of(params)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != alpha.size:
        raise DomainError(f"x has {x.shape[-1]} categories, alpha has {alpha.size}")
    if np.any(x <= 0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > _SIMPLEX_TOL):
        raise DomainError("x is not in the open simplex")
    norm = gammaln(alpha.sum()) - gammaln(alpha).sum()
    return norm + np.sum((alpha - 1.0) * np.log(x), axis=-1)


# --------------------------------------------------------------------------
# normal-inverse-Wishart
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _nb_iw_factor(gen, S_chol, nu, B):
    """Fill B with a factor of Sigma ~ IW(S, nu): Sigma = B B^T.

    Bartlett decomposition of the Wishart(S^-1, nu) precision; with
    S = C C^T, Sigma = (C A^-T)(C A^-T)^T.
    """
    p = S_chol.shape[0]
    A = np.zeros((p, p))
    for i in range(p):
        A[i, i] = math.sqrt(2.0 * gen.standard_gamma(0.5 * (nu - i)))
        for j in range(i):
            A[i, j] = gen.standard_normal()
    # Ainv = A^-1 (lower triangular)
    Ainv = np.zeros((p, p))
    for i in range(p):
        Ainv[i, i] = 1.0 / A[i, i]
        for j in range(i):
            s = 0.0
            for k in range(j, i):
                s += A[i, k] * Ainv[k, j]
            Ainv[i, j] = -s / A[i, i]
    # B = C Ainv^T
    for i in range(p):
        for j in range(p):
            s = 0.0
            for k in range(p):
                s += S_chol[i, k] * Ainv[j, k]
            B[i, j] = s


@numba.njit(cache=True)
def _nb_niw_draw(gen, mu0, kappa, S_chol, nu, mu_out, sigma_out):
    p = mu0.size
    B = np.empty((p, p))
    _nb_iw_factor(gen, S_chol, nu, B)
    z = np.empty(p)
    for i in range(p):
        z[i] = gen.standard_normal()
    sk = 1.0 / math.sqrt(kappa)
    for i in range(p):
        s = 0.0
        for k in range(p):
            s += B[i, k] * z[k]
        mu_out[i] = mu0[i] + sk * s
    for i in range(p):
        for j in range(i + 1):
            s = 0.0
            for k in range(p):
                s += B[i, k] * B[j, k]
            sigma_out[i, j] = s
            sigma_out[j, i] = s


def sample_niw(params, rng, size=None):
    """Draw ``(mu, Sigma)`` from a normal-inverse-Wishart.

    Returns a single pair, or stacked arrays of shape ``(size, p)`` and
    ``(size, p, p)``.
    """
    if not isinstance(params, NiwParams):
        raise ParameterError("sample_niw needs NiwParams")
    gen = as_generator(rng)
    C = np.linalg.cholesky(params.S0)
    p = params.p
    n = 1 if size is None else int(size)
    mu = np.empty((n, p))
    sigma = np.empty((n, p, p))
    for i in range(n):
        _nb_niw_draw(gen, params.mu0, params.kappa0, C, params.nu0, mu[i], sigma[i])
    if size is None:
        return mu[0], sigma[0]
    return mu, sigma


def niw_posterior(params, n, sum_y, sum_yy):
    """Conjugate update of a NIW from sufficient statistics.

    ``sum_y`` is the vector sum of the observations and ``sum_yy`` the sum of
    their outer products.
    """
    if n == 0:
        return params
    sum_y = np.asarray(sum_y, dtype=float)
    sum_yy = np.asarray(sum_yy, dtype=float)
    ybar = sum_y / n
    scatter = sum_yy - n * np.outer(ybar, ybar)
    kn = params.kappa0 + n
    d = ybar - params.mu0
    Sn = params.S0 + scatter + (params.kappa0 * n / kn) * np.outer(d, d)
    mun = (params.kappa0 * params.mu0 + sum_y) / kn
    return NiwParams(mun, kn, Sn, params.nu0 + n)


def niw_predictive(params):
    """Location, scale matrix and dof of the NIW posterior-predictive Student-t."""
    p = params.p
    dof = params.nu0 - p + 1
    scale = params.S0 * (params.kappa0 + 1.0) / (params.kappa0 * dof)
    return params.mu0, scale, dof


def logpdf_mvt(location, scale, dof, y):
    """Multivariate Student-t log-density.

    ``y`` may hold one point or a stack of points in its last axis.
    """
    loc = np.atleast_1d(np.asarray(location, dtype=float))
    p = loc.size
    dof = float(dof)
    if not dof > 0:
        raise ParameterError(f"dof must be positive, got {dof}")
    try:
        L = np.linalg.cholesky(0.5 * (np.atleast_2d(scale) + np.atleast_2d(scale).T))
    except np.linalg.LinAlgError:
        raise DomainError("scale matrix is singular or not positive definite") from None
    y = np.asarray(y, dtype=float)
    diff = np.atleast_2d(y - loc)
    z = np.linalg.solve(L, diff.T)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = (
        gammaln(0.5 * (dof + p))
        - gammaln(0.5 * dof)
        - 0.5 * p * np.log(dof * np.pi)
        - 0.5 * logdet
        - 0.5 * (dof + p) * np.log1p(maha / dof)
    )
    return float(out[0]) if y.ndim <= 1 else out


def logpdf_mvn(mean, cov, y):
    """Multivariate normal log-density (vectorized over leading axes of ``y``)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    p = mean.size
    try:
        L = np.linalg.cholesky(np.atleast_2d(cov))
    except np.linalg.LinAlgError:
        raise DomainError("covariance is singular or not positive definite") from None
    y = np.asarray(y, dtype=float)
    diff = np.atleast_2d(y - mean)
    z = np.linalg.solve(L, diff.T)
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * p * np.log(2 * np.pi)
    return float(out[0]) if y.ndim <= 1 else out
