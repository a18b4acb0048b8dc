"""Compiled evaluation of ``ln p1 - ln p0`` for use inside numba chain kernels.

Target priors and induced-marginal estimates are flattened into plain arrays
(an "encoding") so the kernels can evaluate the acceptance adjustment without
returning to Python. Only the families the chains need are supported; the
Python objects in :mod:`msprior.core` remain the reference implementation.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy import stats

from .core import InducedMarginalEstimate, MarginalTargetPrior
from .errors import ParameterError

# p1 coordinate families
FAM_NORMAL, FAM_INVGAMMA, FAM_UNIFORM = 0, 1, 2
# p0 modes
P0_IDENTITY, P0_SKEWT, P0_KDE, P0_NONE = 0, 1, 2, 3

_LOG2PI = math.log(2.0 * math.pi)


def encode_p1(p1, q):
    """Per-coordinate (family, a, b, const) arrays for a product target."""
    fam = np.full(q, -1, dtype=np.int64)
    a = np.zeros(q)
    b = np.zeros(q)
    if not isinstance(p1, MarginalTargetPrior):
        raise ParameterError("compiled chains need a MarginalTargetPrior for p1")
    for f in p1.factors:
        for i, c in enumerate(f.coords):
            if f.family == "normal":
                fam[c], a[c], b[c] = FAM_NORMAL, f.params["mean"][i], f.params["sd"][i]
            elif f.family == "inverse-gamma":
                fam[c], a[c], b[c] = FAM_INVGAMMA, f.params["shape"][i], f.params["scale"][i]
            elif f.family == "uniform":
                fam[c], a[c], b[c] = FAM_UNIFORM, f.params["low"][i], f.params["high"][i]
            else:
                raise ParameterError(f"family {f.family!r} is not supported in compiled chains")
    if np.any(fam < 0) or p1.dim != q:
        raise ParameterError(f"p1 must cover exactly {q} coordinates")
    return fam, a, b


def encode_p0(p0, q, identity=False, none=False):
    """Flatten an induced-marginal estimate into numba-friendly arrays."""
    log_mask = np.zeros(q, dtype=np.bool_)
    xi = np.zeros(q)
    linv = np.eye(q)
    winv = np.ones(q)
    alpha = np.zeros(q)
    scal = np.zeros(2)  # nu, const
    data = np.zeros((1, q))
    if identity:
        mode = P0_IDENTITY
    elif none:
        mode = P0_NONE
    else:
        if not isinstance(p0, InducedMarginalEstimate):
            raise ParameterError("p0 must be an InducedMarginalEstimate")
        log_mask[list(p0.log_coords)] = True
        par = p0.params
        if p0.kind == "moment-fit-skew-t":
            mode = P0_SKEWT
            from .skewt import SkewT

            st = SkewT(par["xi"], par["omega"], par["alpha"], par["nu"])
            xi = st.xi.copy()
            linv = np.linalg.inv(st._chol)
            winv = 1.0 / st._w
            alpha = st.alpha.copy()
            scal = np.array([st.nu, st._const])
        elif p0.kind == "gaussian-kde":
            mode = P0_KDE
            data = np.ascontiguousarray(np.asarray(par["data"], dtype=float))
            kde = stats.gaussian_kde(data.T, bw_method="scott")
            L = np.linalg.cholesky(np.atleast_2d(kde.covariance))
            linv = np.linalg.inv(L)
            const = -np.sum(np.log(np.diag(L))) - 0.5 * q * _LOG2PI - math.log(data.shape[0])
            scal = np.array([0.0, const])
        else:
            raise ParameterError(f"p0 kind {p0.kind!r} is not supported in compiled chains")
    return (np.int64(mode), log_mask, xi, linv, winv, alpha, scal, data)


# --------------------------------------------------------------------------
# special functions
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _betacf(a, b, x):
    # modified Lentz continued fraction for the incomplete beta
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        de = d * c
        h *= de
        if abs(de - 1.0) < 1e-15:
            break
    return h


@numba.njit(cache=True)
def log_betainc(a, b, x):
    """log of the regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return -np.inf
    if x >= 1.0:
        return 0.0
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return lbt + math.log(_betacf(a, b, x)) - math.log(a)
    comp = math.exp(lbt + math.log(_betacf(b, a, 1.0 - x)) - math.log(b))
    return math.log1p(-comp)


@numba.njit(cache=True)
def log_t_cdf(x, df):
    """log CDF of the standard Student-t."""
    if x == 0.0:
        return math.log(0.5)
    lt = math.log(0.5) + log_betainc(0.5 * df, 0.5, df / (df + x * x))
    if x < 0.0:
        return lt
    return math.log1p(-math.exp(lt))


# --------------------------------------------------------------------------
# densities
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def p1_logpdf(theta, fam, a, b):
    total = 0.0
    for j in range(theta.size):
        x = theta[j]
        f = fam[j]
        if f == 0:
            z = (x - a[j]) / b[j]
            total += -0.5 * z * z - math.log(b[j]) - 0.5 * _LOG2PI
        elif f == 1:
            if x <= 0.0:
                return -np.inf
            total += a[j] * math.log(b[j]) - math.lgamma(a[j]) - (a[j] + 1.0) * math.log(x) - b[j] / x
        else:
            if x < a[j] or x > b[j]:
                return -np.inf
            total -= math.log(b[j] - a[j])
    return total


@numba.njit(cache=True)
def p0_logpdf(theta, mode, log_mask, xi, linv, winv, alpha, scal, data):
    q = theta.size
    x = np.empty(q)
    jac = 0.0
    for j in range(q):
        if log_mask[j]:
            if theta[j] <= 0.0:
                return -np.inf
            x[j] = math.log(theta[j])
            jac -= x[j]
        else:
            x[j] = theta[j]
    if mode == 1:
        nu = scal[0]
        Q = 0.0
        for i in range(q):
            s = 0.0
            for k in range(i + 1):
                s += linv[i, k] * (x[k] - xi[k])
            Q += s * s
        lin = 0.0
        for j in range(q):
            lin += alpha[j] * (x[j] - xi[j]) * winv[j]
        arg = lin * math.sqrt((nu + q) / (Q + nu))
        return scal[1] - 0.5 * (nu + q) * math.log1p(Q / nu) + log_t_cdf(arg, nu + q) + jac
    # kde: log-sum-exp over kernel centres
    S = data.shape[0]
    m = -np.inf
    buf = np.empty(S)
    for r in range(S):
        Q = 0.0
        for i in range(q):
            s = 0.0
            for k in range(i + 1):
                s += linv[i, k] * (x[k] - data[r, k])
            Q += s * s
        buf[r] = -0.5 * Q
        if buf[r] > m:
            m = buf[r]
    tot = 0.0
    for r in range(S):
        tot += math.exp(buf[r] - m)
    return scal[1] + m + math.log(tot) + jac


@numba.njit(cache=True)
def log_ratio(theta, fam, a, b, mode, log_mask, xi, linv, winv, alpha, scal, data):
    """ln p1(theta) - ln p0(theta) under an encoding; mode 0 means p1 is p0."""
    if mode == 0:
        return 0.0
    lp1 = p1_logpdf(theta, fam, a, b)
    if lp1 == -np.inf:
        return -np.inf
    if mode == 3:
        return lp1
    return lp1 - p0_logpdf(theta, mode, log_mask, xi, linv, winv, alpha, scal, data)
