"""Multivariate skew-t density (Azzalini-Capitanio form) with a likelihood fit.

The density is

    2 t_d(x; xi, Omega, nu) T_1(alpha' w^-1 (x - xi) sqrt((nu + d)/(Q + nu)); nu + d)

with ``w = sqrt(diag Omega)`` and ``Q`` the Mahalanobis form of ``x - xi``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize, special, stats

from .errors import FitError

_NU_MIN, _NU_MAX = 1.0, 300.0


def _log_tcdf(x, df):
    # stdtr is much cheaper than stats.t.logcdf; fall back only deep in the tail
    p = special.stdtr(df, x)
    out = np.log(np.maximum(p, 1e-300))
    tail = p < 1e-200
    if np.any(tail):
        out[tail] = stats.t.logcdf(x[tail], df)
    return out


class SkewT:
    """Frozen multivariate skew-t distribution.

    Parameters
    ----------
    xi : (d,) array
        Location.
    omega : (d, d) array
        Scale matrix.
    alpha : (d,) array
        Slant.
    nu : float
        Degrees of freedom.
    """

    def __init__(self, xi, omega, alpha, nu):
        self.xi = np.asarray(xi, dtype=float)
        self.omega = np.asarray(omega, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.nu = float(nu)
        self.d = self.xi.size
        self._chol = np.linalg.cholesky(self.omega)
        self._w = np.sqrt(np.diag(self.omega))
        self._logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        d, nu = self.d, self.nu
        self._const = (
            math.log(2.0)
            + special.gammaln(0.5 * (nu + d))
            - special.gammaln(0.5 * nu)
            - 0.5 * d * math.log(nu * math.pi)
            - 0.5 * self._logdet
        )

    def to_dict(self):
        return {
            "xi": self.xi.tolist(),
            "omega": self.omega.tolist(),
            "alpha": self.alpha.tolist(),
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["xi"], d["omega"], d["alpha"], d["nu"])

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        diff = X - self.xi
        z = np.linalg.solve(self._chol, diff.T)
        Q = np.sum(z * z, axis=0)
        nu, d = self.nu, self.d
        t_part = self._const - 0.5 * (nu + d) * np.log1p(Q / nu)
        arg = (diff / self._w) @ self.alpha * np.sqrt((nu + d) / (Q + nu))
        out = t_part + _log_tcdf(arg, nu + d)
        return float(out[0]) if single else out

    def sample(self, rng, size):
        """Draw ``size`` points via the normal/chi-square mixture representation."""
        d = self.d
        wi = 1.0 / self._w
        obar = self.omega * np.outer(wi, wi)
        oa = obar @ self.alpha
        delta = oa / math.sqrt(1.0 + self.alpha @ oa)
        big = np.empty((d + 1, d + 1))
        big[0, 0] = 1.0
        big[0, 1:] = delta
        big[1:, 0] = delta
        big[1:, 1:] = obar
        L = np.linalg.cholesky(big)
        u = rng.standard_normal((size, d + 1)) @ L.T
        z = np.where(u[:, :1] > 0, u[:, 1:], -u[:, 1:])
        v = rng.chisquare(self.nu, size) / self.nu
        return self.xi + self._w * z / np.sqrt(v)[:, None]


def _moment_start(x):
    """Skew-normal method-of-moments start, per coordinate."""
    m = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    sd = np.sqrt(np.diag(cov))
    g1 = stats.skew(x, axis=0)
    # invert the skew-normal skewness; |g1| is capped just below its bound 0.9953
    c = np.clip(np.abs(g1), 0, 0.99) ** (2.0 / 3.0)
    k = ((4.0 - math.pi) / 2.0) ** (2.0 / 3.0)
    delta = np.sign(g1) * np.sqrt(0.5 * math.pi * c / (c + k))
    delta = np.clip(delta, -0.95, 0.95)
    mu_z = delta * math.sqrt(2.0 / math.pi)
    w = sd / np.sqrt(1.0 - mu_z**2)
    xi = m - w * mu_z
    corr = cov / np.outer(sd, sd)
    obar = corr * np.outer(np.sqrt(1.0 - mu_z**2), np.sqrt(1.0 - mu_z**2))
    obar += np.outer(mu_z, mu_z)
    np.fill_diagonal(obar, 1.0)
    # nearest usable matrix
    evals, evecs = np.linalg.eigh(obar)
    if evals.min() < 1e-6:
        obar = evecs @ np.diag(np.maximum(evals, 1e-6)) @ evecs.T
    oinv_delta = np.linalg.solve(obar, delta)
    denom = 1.0 - delta @ oinv_delta
    alpha = oinv_delta / math.sqrt(max(denom, 1e-3))
    omega = obar * np.outer(w, w)
    return xi, omega, alpha


def _pack(xi, omega, alpha, nu):
    L = np.linalg.cholesky(omega)
    d = xi.size
    il = np.tril_indices(d)
    Lp = L.copy()
    Lp[np.diag_indices(d)] = np.log(np.diag(L))
    eta = math.log((nu - _NU_MIN) / (_NU_MAX - nu))
    return np.concatenate([xi, Lp[il], alpha, [eta]])


def _unpack(par, d):
    il = np.tril_indices(d)
    nl = len(il[0])
    xi = par[:d]
    L = np.zeros((d, d))
    L[il] = par[d : d + nl]
    L[np.diag_indices(d)] = np.exp(np.clip(np.diag(L), -30, 30))
    alpha = par[d + nl : d + nl + d]
    nu = _NU_MIN + (_NU_MAX - _NU_MIN) * special.expit(par[-1])
    return xi, L @ L.T, alpha, nu


def fit_skew_t(x, nu_grid=(3.0, 5.0, 10.0, 30.0)):
    """Fit a skew-t to the rows of ``x``.

    Starts from moment matching (mean, covariance, marginal skewness) with the
    dof profiled over ``nu_grid``, then refines all parameters by maximum
    likelihood.

    Returns
    -------
    SkewT
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 2:
        raise FitError(f"need at least {d + 2} draws to fit a skew-t, got {n}")
    sd = x.std(axis=0)
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise FitError("sample has a constant or non-finite coordinate")
    # work on the standardized scale so the optimizer is well conditioned
    m = x.mean(axis=0)
    xs = (x - m) / sd
    xi0, om0, al0 = _moment_start(xs)

    def nll(par):
        xi, om, al, nu = _unpack(par, d)
        try:
            val = -np.sum(SkewT(xi, om, al, nu).logpdf(xs)) / n
        except np.linalg.LinAlgError:
            return 1e10
        return val if np.isfinite(val) else 1e10

    best = None
    for nu0 in nu_grid:
        start = _pack(xi0, om0, al0, nu0)
        val = nll(start)
        if best is None or val < best[0]:
            best = (val, start)
    res = optimize.minimize(nll, best[1], method="L-BFGS-B", options={"maxiter": 2000})
    par = res.x if res.fun <= best[0] else best[1]
    xi, om, al, nu = _unpack(par, d)
    # back to the original scale; alpha is scale-free
    return SkewT(m + sd * xi, om * np.outer(sd, sd), al, nu)
