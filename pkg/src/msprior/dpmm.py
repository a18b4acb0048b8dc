"""Dirichlet-process mixture of multivariate normals with a conjugate NIW base.

The functional of interest is ``theta(Q) = (m_1..m_p, v_1..v_p)``, the
marginal means and variances of the mixture. Posterior sampling uses collapsed
Gibbs updates of the assignment vector ``g``; ``theta`` is drawn from a
finite-atom representation of ``Q`` given the partition. Under a marginally
specified prior each assignment update is a Metropolis proposal corrected by
``p1(theta)/p0(theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _dpmm_kernels as K_
from ._compiled import encode_p0, encode_p1
from .core import (
    ChainConfig,
    ChainOutput,
    MarginalTargetPrior,
    check_absolute_continuity,
    drive_chain,
    estimate_induced_marginal,
    log_ratio_term,
)
from .distributions import NiwParams, RandomSource, as_generator, logpdf_mvn
from .errors import ConfigError, InvariantError, NumericError, ParameterError

__all__ = [
    "Dataset",
    "NiwHyper",
    "DpmmState",
    "QDraw",
    "informative_hyperparameters",
    "noninformative_hyperparameters",
    "assignment_full_conditional",
    "sample_q_given_partition",
    "functionals_from_q",
    "prior_theta_sampler",
    "initial_state",
    "msp_sweep",
    "gibbs_sweep",
    "run_dpmm_chain",
    "posterior_predictive_density",
    "marginal_predictive_density",
    "yamato_mean_prior",
    "theta_names",
    "fit_product_target",
    "priors_from_prior_sample",
    "count_modes",
]

DEFAULT_ATOMS = 1000
DEFAULT_FIT_S = 10_000


class Dataset:
    """``n x p`` matrix of observations."""

    def __init__(self, y, names=None):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise ParameterError(f"data must be an n x p matrix with n, p >= 1, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ParameterError("data contain non-finite values")
        self.y = np.ascontiguousarray(y)
        self.y.setflags(write=False)
        self.names = list(names) if names is not None else [f"y{j + 1}" for j in range(y.shape[1])]

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.y.shape[1]


@dataclass(frozen=True)
class NiwHyper:
    """NIW base measure plus the DP concentration ``alpha``."""

    niw: NiwParams
    alpha: float = 1.0

    def __post_init__(self):
        a = float(self.alpha)
        if not a >= 0 or not math.isfinite(a):
            raise ParameterError(f"alpha must be a nonnegative finite number, got {self.alpha}")
        object.__setattr__(self, "alpha", a)

    @property
    def p(self):
        return self.niw.p

    def to_dict(self):
        return {
            "mu0": self.niw.mu0.tolist(),
            "kappa0": self.niw.kappa0,
            "S0": self.niw.S0.tolist(),
            "nu0": self.niw.nu0,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(NiwParams(d["mu0"], d["kappa0"], d["S0"], d["nu0"]), d.get("alpha", 1.0))


def theta_names(p):
    return [f"m{j + 1}" for j in range(p)] + [f"v{j + 1}" for j in range(p)]


def informative_hyperparameters(m0, v0, n0, alpha, R):
    """Base measure whose induced prior on (m, V) carries a prior sample's moments.

    ``mu0 = m0``, ``kappa0 = n0/(alpha + 1)``, ``nu0 = n0`` and
    ``S0 = nu0 * V0`` with ``V0 = diag(sqrt v0) R diag(sqrt v0)``.
    """
    m0 = np.atleast_1d(np.asarray(m0, dtype=float))
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    p = m0.size
    if v0.shape != (p,) or R.shape != (p, p):
        raise ParameterError("m0, v0 and R have inconsistent dimensions")
    if np.any(v0 <= 0):
        raise ParameterError("v0 must be positive")
    if not np.allclose(np.diag(R), 1.0) or not np.allclose(R, R.T):
        raise ParameterError("R must be a symmetric correlation matrix")
    if n0 <= p + 1:
        raise ConfigError(f"nu0 = n0 = {n0} must exceed p + 1 = {p + 1} for E[Sigma] to exist")
    sd = np.sqrt(v0)
    V0 = R * np.outer(sd, sd)
    niw = NiwParams(m0, n0 / (alpha + 1.0), n0 * V0, n0)
    return NiwHyper(niw, alpha)


def noninformative_hyperparameters(data, alpha=1.0):
    """Unit-information base measure centred on the data.

    ``mu0 = ybar``, ``kappa0 = 1/10``, ``nu0 = p + 2``, ``S0 = S_y``.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    if data.n < 2:
        raise ParameterError("need at least 2 observations for a sample covariance")
    Sy = np.atleast_2d(np.cov(data.y, rowvar=False))
    try:
        np.linalg.cholesky(Sy)
    except np.linalg.LinAlgError:
        raise ParameterError(
            "sample covariance is singular (constant or collinear columns); "
            "add a small jitter to the data or drop redundant columns"
        ) from None
    return NiwHyper(NiwParams(data.y.mean(axis=0), 0.1, Sy, data.p + 2), alpha)


def yamato_mean_prior(q0_mean, q0_cov, alpha):
    """Approximate normal law of the DP mean functional: ``(mean, cov/(alpha+1))``."""
    q0_cov = np.atleast_2d(np.asarray(q0_cov, dtype=float))
    try:
        np.linalg.cholesky(q0_cov)
    except np.linalg.LinAlgError:
        raise ParameterError("q0_cov is not positive definite") from None
    if alpha < 0:
        raise ParameterError("alpha must be nonnegative")
    return np.asarray(q0_mean, dtype=float), q0_cov / (alpha + 1.0)


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------

class DpmmState:
    """Assignments, per-component sufficient statistics and current theta.

    Labels are 0-based and contiguous in ``0..K-1``.
    """

    def __init__(self, g, y, theta=None, alpha=1.0):
        g = np.asarray(g, dtype=np.int64).copy()
        y = np.asarray(y, dtype=float)
        n, p = y.shape
        if g.shape != (n,):
            raise ParameterError("g must have one label per observation")
        labels = np.unique(g)
        if labels[0] != 0 or labels[-1] != labels.size - 1:
            raise InvariantError("component labels must be contiguous from 0")
        self.g = g
        self.K = int(labels.size)
        self.counts = np.zeros(n + 1, dtype=np.int64)
        self.sum_y = np.zeros((n + 1, p))
        self.sum_yy = np.zeros((n + 1, p, p))
        K_.recompute_stats(y, self.g, self.counts, self.sum_y, self.sum_yy)
        self.theta = None if theta is None else np.asarray(theta, dtype=float).copy()
        self.alpha = float(alpha)

    def copy(self):
        new = object.__new__(DpmmState)
        new.g = self.g.copy()
        new.K = self.K
        new.counts = self.counts.copy()
        new.sum_y = self.sum_y.copy()
        new.sum_yy = self.sum_yy.copy()
        new.theta = None if self.theta is None else self.theta.copy()
        new.alpha = self.alpha
        return new

    def check(self, y, tol=1e-9):
        """Raise if the cached statistics disagree with a recomputation."""
        n, p = y.shape
        c = np.zeros(n + 1, dtype=np.int64)
        s1 = np.zeros((n + 1, p))
        s2 = np.zeros((n + 1, p, p))
        K_.recompute_stats(np.asarray(y, dtype=float), self.g, c, s1, s2)
        if (c != self.counts).any() or c[: self.K].min() < 1 or c[self.K :].any():
            raise InvariantError("component counts are inconsistent with g")
        scale = 1.0 + np.abs(s2).max()
        if np.abs(s1 - self.sum_y).max() > tol * scale or np.abs(s2 - self.sum_yy).max() > tol * scale:
            raise InvariantError("sufficient statistics drifted from g")
        if self.theta is not None and (not np.all(np.isfinite(self.theta)) or np.any(self.theta[p:] <= 0)):
            raise InvariantError("theta must be finite with positive variances")


def initial_state(data, alpha=1.0):
    """All observations in a single component."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    return DpmmState(np.zeros(data.n, dtype=np.int64), data.y, alpha=alpha)


def _hyper_arrays(hyper):
    niw = hyper.niw
    return (np.ascontiguousarray(niw.mu0), float(niw.kappa0), np.ascontiguousarray(niw.S0), float(niw.nu0))


# --------------------------------------------------------------------------
# assignment update and Q draws
# --------------------------------------------------------------------------

def assignment_full_conditional(state, k, data, hyper, flat=False):
    """Full conditional of ``g_k`` given the other labels.

    Returns
    -------
    labels : (K_-k + 1,) int array
        Candidate labels of the components that remain occupied without
        observation ``k``, followed by ``-1`` for a new component.
    probs : (K_-k + 1,) array
        Probabilities, proportional to ``n_-k,c`` times the Student-t
        predictive for existing components and ``alpha`` times the prior
        predictive for a new one.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    if not 0 <= k < data.n:
        raise ParameterError(f"k must be in 0..{data.n - 1}")
    s = state.copy()
    old = s.g[k]
    y = data.y
    s.counts[old] -= 1
    s.sum_y[old] -= y[k]
    s.sum_yy[old] -= np.outer(y[k], y[k])
    s.counts[s.K] = 0
    s.sum_y[s.K] = 0
    s.sum_yy[s.K] = 0
    logw = np.empty(s.K + 1)
    K_.assignment_logweights(k, y, s.g, s.counts, s.sum_y, s.sum_yy, s.K, *_hyper_arrays(hyper),
                             hyper.alpha, flat, logw)
    labels = np.append(np.arange(s.K), -1)
    keep = np.append(s.counts[: s.K] > 0, True)
    labels, logw = labels[keep], logw[keep]
    if np.all(logw == -np.inf):
        raise InvariantError("no admissible assignment for this observation")
    w = np.exp(logw - logw.max())
    # fsum is order-free, so relabelling permutes the probabilities exactly
    return labels, w / math.fsum(w)


@dataclass
class QDraw:
    """Finite-atom draw of the mixing measure.

    ``mu`` is ``(A, p)``, ``sigma`` ``(A, p, p)``, ``weight`` ``(A,)``. The
    first ``n_occupied`` atoms belong to occupied components and carry total
    weight ``gamma``; ``s`` is the residual count that sized the fresh block.
    """

    mu: np.ndarray
    sigma: np.ndarray
    weight: np.ndarray
    gamma: float
    n_occupied: int
    s: int


def sample_q_given_partition(state, data, hyper, S=DEFAULT_ATOMS, rng=None, flat=False):
    """Draw Q given the partition in ``state``.

    ``gamma ~ Beta(n, alpha)``, ``w ~ Dirichlet(n_1..n_K)``, occupied atoms
    from their NIW posteriors; ``s ~`` residual count of a multinomial
    ``(S, {gamma w, 1 - gamma})`` allocation sizes a Chinese-restaurant
    partition whose tables get fresh atoms from the base measure. Weights are
    ``gamma w_k`` for occupied atoms and ``(1 - gamma) * table/size`` for the
    fresh ones, so they sum to one exactly.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    S = int(S)
    if S < 1:
        raise ParameterError("S must be positive")
    gen = as_generator(rng)
    n, p = data.n, data.p
    amax = n + max(S, 1)
    mu = np.empty((amax, p))
    sig = np.empty((amax, p, p))
    w = np.empty(amax)
    A, s, gam = K_.q_draw(gen, n, state.K, state.counts, state.sum_y, state.sum_yy, *_hyper_arrays(hyper),
                          hyper.alpha, S, flat, mu, sig, w)
    return QDraw(mu[:A].copy(), sig[:A].copy(), w[:A].copy(), float(gam), state.K if n > 0 else 0, int(s))


def functionals_from_q(q):
    """theta = (marginal means, marginal variances) of the mixture."""
    mu = np.ascontiguousarray(q.mu, dtype=float)
    sig = np.ascontiguousarray(q.sigma, dtype=float)
    w = np.ascontiguousarray(q.weight, dtype=float)
    theta = np.empty(2 * mu.shape[1])
    if not K_.functionals(mu, sig, w, w.size, theta):
        raise NumericError("a mixture variance is not positive")
    return theta


def prior_theta_sampler(hyper, n, S=DEFAULT_ATOMS):
    """Callable ``(rng, size) -> theta draws`` under the base prior.

    Each draw partitions ``n`` points by a Chinese restaurant process and then
    draws Q exactly as the chain does under a flat likelihood, so the fitted
    p0 describes the same construction the chain proposes from.
    """
    args = _hyper_arrays(hyper)

    def sampler(rng, size):
        out = np.empty((int(size), 2 * hyper.p))
        _, ok = K_.prior_theta_draws(as_generator(rng), int(size), int(n), *args, hyper.alpha, int(S), out)
        if not ok:
            raise NumericError("a prior mixture variance is not positive")
        return out

    return sampler


# --------------------------------------------------------------------------
# chains
# --------------------------------------------------------------------------

class _Chain:
    """Double-buffered chain state shared by the base and MSP samplers."""

    def __init__(self, data, hyper, state, S, flat, rng):
        self.data = data
        self.hyper = hyper
        self.S = int(S)
        self.flat = bool(flat)
        n, p = data.n, data.p
        self.rng = rng if isinstance(rng, RandomSource) else RandomSource(int(rng or 0))
        self.gen_g = self.rng.child(0).gen
        self.gen_q = self.rng.child(1).gen
        self.gen_u = self.rng.child(2).gen
        amax = n + max(self.S, 1)
        self.G = np.zeros((2, n), dtype=np.int64)
        self.COUNTS = np.zeros((2, n + 1), dtype=np.int64)
        self.SY = np.zeros((2, n + 1, p))
        self.SYY = np.zeros((2, n + 1, p, p))
        self.KK = np.zeros(2, dtype=np.int64)
        self.MU = np.zeros((2, amax, p))
        self.SIG = np.zeros((2, amax, p, p))
        self.W = np.zeros((2, amax))
        self.THETA = np.zeros((2, 2 * p))
        self.NATOMS = np.zeros(2, dtype=np.int64)
        self.c = 0
        self.G[0] = state.g
        self.COUNTS[0] = state.counts
        self.SY[0] = state.sum_y
        self.SYY[0] = state.sum_yy
        self.KK[0] = state.K
        self.hargs = _hyper_arrays(hyper)

    def draw_theta(self):
        c = self.c
        A, s, gam = K_.q_draw(self.gen_q, self.data.n, int(self.KK[c]), self.COUNTS[c], self.SY[c], self.SYY[c],
                              *self.hargs, self.hyper.alpha, self.S, self.flat, self.MU[c], self.SIG[c], self.W[c])
        self.NATOMS[c] = A
        if not K_.functionals(self.MU[c], self.SIG[c], self.W[c], A, self.THETA[c]):
            raise NumericError("a mixture variance is not positive")

    def state(self):
        c = self.c
        s = DpmmState(self.G[c], self.data.y, self.THETA[c], self.hyper.alpha)
        return s

    def record(self):
        c = self.c
        A = int(self.NATOMS[c])
        return {
            "g": self.G[c].copy(),
            "mu": self.MU[c, :A].copy(),
            "sigma": self.SIG[c, :A].copy(),
            "weight": self.W[c, :A].copy(),
        }


_STATUS_ERRORS = {
    K_.NAN_RATIO: (NumericError, "acceptance log-ratio is NaN"),
    K_.ZERO_CURRENT: (InvariantError, "chain occupies a state with zero target density"),
    K_.BAD_VARIANCE: (NumericError, "a mixture variance is not positive"),
}


def _check_status(status):
    if status != K_.OK:
        cls, msg = _STATUS_ERRORS[status]
        raise cls(msg)


def gibbs_sweep(state, data, hyper, rng, flat=False):
    """One collapsed-Gibbs sweep of the base sampler (fresh random order).

    Returns a new state; theta is not updated.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    new = state.copy()
    gen = as_generator(rng)
    K, status = K_.base_sweeps(gen, gen, 1, data.y, new.g, new.counts, new.sum_y, new.sum_yy, new.K,
                               *_hyper_arrays(hyper), hyper.alpha, 1, flat, False,
                               np.zeros((1, data.p)), np.zeros((1, data.p, data.p)), np.zeros(1),
                               np.zeros(2 * data.p), np.zeros(1, dtype=np.int64))
    _check_status(status)
    new.K = int(K)
    return new


def msp_sweep(state, data, hyper, p1, p0, S=DEFAULT_ATOMS, rng=None, flat=False):
    """One MSP-adjusted sweep through the observations in random order.

    Each ``g_k`` proposal from the base full conditional comes with a fresh
    ``theta* ~ pi0(theta | g*, y)``; the pair is accepted with probability
    ``1 ^ [p1(theta*)/p0(theta*)] / [p1(theta)/p0(theta)]``, otherwise both
    revert. ``state.theta`` must be set.

    Returns
    -------
    new_state : DpmmState
    n_accepted : int
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    if state.theta is None:
        raise ParameterError("state.theta must be initialized before an MSP sweep")
    rng = rng if isinstance(rng, RandomSource) else RandomSource(0)
    ch = _Chain(data, hyper, state, S, flat, rng)
    ch.THETA[0] = state.theta
    enc1, enc0 = _encodings(p1, p0, 2 * data.p)
    a_cur = _a_cur(p1, p0, state.theta)
    log = np.zeros(0, dtype=np.bool_)
    ch.c, a_cur, acc, prop, status = K_.msp_sweeps(
        ch.gen_g, ch.gen_q, ch.gen_u, 1, data.y, ch.G, ch.COUNTS, ch.SY, ch.SYY, ch.KK, ch.c, *ch.hargs,
        hyper.alpha, ch.S, ch.flat, ch.MU, ch.SIG, ch.W, ch.THETA, ch.NATOMS, a_cur, *enc1, *enc0,
        log, np.zeros(1, dtype=np.int64))
    _check_status(status)
    new = ch.state()
    new.K = int(ch.KK[ch.c])
    return new, int(acc)


def _encodings(p1, p0, q):
    if p1 is None:
        return _p1_placeholder(q), encode_p0(None, q, none=True)
    if p1 is p0:
        return _p1_placeholder(q), encode_p0(None, q, identity=True)
    if p0 is None:
        return encode_p1(p1, q), encode_p0(None, q, none=True)
    return encode_p1(p1, q), encode_p0(p0, q)


def _p1_placeholder(q):
    return np.zeros(q, dtype=np.int64), np.zeros(q), np.ones(q)


def _a_cur(p1, p0, theta):
    if p1 is p0:
        return 0.0
    if p0 is None:
        return float(p1.logpdf(theta))
    return log_ratio_term(p1, p0, theta)


def run_dpmm_chain(data, prior, config, hyper=None, p1=None, p0=None, S=None, flat=False,
                   theta_each_step=False, record_decisions=False, state=None, fit_S=None, p0_kind=None,
                   adjustment="exact"):
    """Run a DPMM chain under an informative, noninformative or MSP prior.

    Parameters
    ----------
    data : Dataset or array
    prior : {"informative", "noninformative", "msp"}
    config : ChainConfig
        One iteration is one sweep over all observations.
    hyper : NiwHyper, optional
        Base measure. Required for ``informative``; for ``noninformative`` and
        ``msp`` it defaults to :func:`noninformative_hyperparameters`.
    p1 : MarginalTargetPrior
        Target theta-margin (``msp`` only).
    p0 : InducedMarginalEstimate or None
        Estimate of the base theta-margin. Fitted from prior draws when
        omitted. Passing ``p0 is p1`` gives the identity adjustment.
    S : int
        Atoms per Q draw (default 1000, or ``config.tuning["S"]``).
    flat : bool
        Drop the likelihood: the chain then targets the prior.
    theta_each_step : bool
        Base priors only: redraw theta after every assignment, using the
        random stream exactly as the MSP sampler does.
    adjustment : {"exact", "approx"}
        ``"approx"`` uses ``p1(theta*)/p1(theta)`` alone (p1 must be bounded).

    Returns
    -------
    ChainOutput
        ``states`` holds, per saved draw, the labels and the atoms of the Q
        draw behind the saved theta.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    if not isinstance(config, ChainConfig):
        raise ConfigError("config must be a ChainConfig")
    if prior not in ("informative", "noninformative", "msp"):
        raise ConfigError(f"unknown prior {prior!r}")
    tuning = dict(config.tuning)
    S = int(S if S is not None else tuning.get("S", DEFAULT_ATOMS))
    fit_S = int(fit_S if fit_S is not None else tuning.get("fit_S", DEFAULT_FIT_S))
    p0_kind = p0_kind or tuning.get("p0_kind", "moment-fit-skew-t")
    if hyper is None:
        if prior == "informative":
            raise ConfigError("the informative prior needs explicit hyperparameters")
        hyper = noninformative_hyperparameters(data)
    if hyper.p != data.p:
        raise ConfigError("hyperparameter dimension does not match the data")
    root = RandomSource(config.seed)
    q = 2 * data.p
    names = theta_names(data.p)
    st = state.copy() if state is not None else initial_state(data, hyper.alpha)
    ch = _Chain(data, hyper, st, S, flat, root.child(1))
    extra = {"S": S}

    if prior != "msp":
        n_dec = config.iterations * data.n
        ch.draw_theta()

        def advance(m):
            K, status = K_.base_sweeps(
                ch.gen_g, ch.gen_q, m, data.y, ch.G[0], ch.COUNTS[0], ch.SY[0], ch.SYY[0], int(ch.KK[0]),
                *ch.hargs, hyper.alpha, S, flat, theta_each_step, ch.MU[0], ch.SIG[0], ch.W[0], ch.THETA[0],
                ch.NATOMS)
            _check_status(status)
            ch.KK[0] = K
            if not theta_each_step:
                ch.draw_theta()
            return m * data.n, m * data.n

        out = drive_chain(advance, lambda: ch.THETA[0].copy(), ch.record, config, names)
        if record_decisions:
            extra["accept_log"] = np.ones(n_dec, dtype=bool)
        out.extra.update(extra)
        return out

    if p1 is None:
        raise ConfigError("the msp prior needs a p1 specification")
    if adjustment not in ("exact", "approx"):
        raise ConfigError("adjustment must be 'exact' or 'approx'")
    if adjustment == "approx":
        p0 = None
    elif p0 is None:
        p0 = estimate_induced_marginal(prior_theta_sampler(hyper, data.n, S), fit_S, p0_kind, root.child(2),
                                       log_coords=range(data.p, q))
        extra["p0"] = p0
    if p0 is not None and p0 is not p1:
        check_absolute_continuity(p1, p0, root.child(3))
    enc1, enc0 = _encodings(p1, p0, q)
    ch.draw_theta()
    a_cur = [_a_cur(p1, p0, ch.THETA[0])]
    if a_cur[0] == -math.inf:
        # start from a theta inside the support of p1
        for _ in range(10_000):
            ch.draw_theta()
            a_cur[0] = _a_cur(p1, p0, ch.THETA[0])
            if a_cur[0] > -math.inf:
                break
        else:
            raise ConfigError("could not find an initial theta with positive p1 density")
    log = np.zeros(config.iterations * data.n if record_decisions else 0, dtype=np.bool_)
    pos = np.zeros(1, dtype=np.int64)

    def advance(m):
        ch.c, a_cur[0], acc, prop, status = K_.msp_sweeps(
            ch.gen_g, ch.gen_q, ch.gen_u, m, data.y, ch.G, ch.COUNTS, ch.SY, ch.SYY, ch.KK, ch.c, *ch.hargs,
            hyper.alpha, S, flat, ch.MU, ch.SIG, ch.W, ch.THETA, ch.NATOMS, a_cur[0], *enc1, *enc0, log, pos)
        _check_status(status)
        return acc, prop

    out = drive_chain(advance, lambda: ch.THETA[ch.c].copy(), ch.record, config, names)
    if record_decisions:
        extra["accept_log"] = log
    out.extra.update(extra)
    return out


# --------------------------------------------------------------------------
# predictive densities
# --------------------------------------------------------------------------

def _records(chain):
    recs = chain.states if isinstance(chain, ChainOutput) else chain
    return [r if isinstance(r, dict) else {"mu": r.mu, "sigma": r.sigma, "weight": r.weight} for r in recs]


def posterior_predictive_density(chain, grid):
    """Average over saved draws of the normal-mixture density on ``grid``.

    ``grid`` is an ``(m, p)`` array of points (or a list of vectors).
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        return np.zeros(0)
    recs = _records(chain)
    if not recs:
        raise ParameterError("chain has no saved mixture records")
    grid = np.atleast_2d(grid)
    total = np.zeros(grid.shape[0])
    for r in recs:
        dens = np.zeros(grid.shape[0])
        for mu, sig, w in zip(r["mu"], r["sigma"], r["weight"]):
            dens += w * np.exp(logpdf_mvn(mu, sig, grid))
        total += dens
    return total / len(recs)


def marginal_predictive_density(chain, grid, coord):
    """Posterior predictive density of one coordinate on a 1-D grid."""
    grid = np.asarray(grid, dtype=float).ravel()
    recs = _records(chain)
    if not recs:
        raise ParameterError("chain has no saved mixture records")
    total = np.zeros(grid.size)
    for r in recs:
        mu = r["mu"][:, coord]
        sd = np.sqrt(r["sigma"][:, coord, coord])
        z = (grid[:, None] - mu) / sd
        total += (np.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi))) @ r["weight"]
    return total / len(recs)


# --------------------------------------------------------------------------
# prior construction from a prior sample
# --------------------------------------------------------------------------

def fit_product_target(draws, p):
    """Product of normals (means) and inverse-gammas (variances) fitted to theta draws.

    Normal factors use the sample mean and sd; inverse-gamma factors are
    maximum-likelihood fits with the location fixed at zero.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != 2 * p:
        raise ParameterError(f"draws must have {2 * p} columns")
    mean = draws[:, :p].mean(axis=0)
    sd = draws[:, :p].std(axis=0, ddof=1)
    shape, scale = np.empty(p), np.empty(p)
    for j in range(p):
        v = draws[:, p + j]
        if np.any(v <= 0):
            raise ParameterError("variance draws must be positive")
        a, _, b = stats.invgamma.fit(v, floc=0)
        shape[j], scale[j] = a, b
    return MarginalTargetPrior([
        {"family": "normal", "coords": list(range(p)), "params": {"mean": mean, "sd": sd}},
        {"family": "inverse-gamma", "coords": list(range(p, 2 * p)), "params": {"shape": shape, "scale": scale}},
    ])


def priors_from_prior_sample(prior_sample, observed, alpha=1.0, S=DEFAULT_ATOMS, n_draws=10_000, rng=None):
    """Informative, noninformative and marginally specified priors.

    Only the marginal means ``m0`` and variances ``v0`` of ``prior_sample``
    are used. The informative base takes its correlation from the observed
    data; the noninformative base is the unit-information prior of
    ``observed``; the target ``p1`` is fitted to ``n_draws`` theta draws
    under the informative prior.

    Returns
    -------
    dict with keys ``informative``, ``noninformative`` (NiwHyper), ``p1``
    (MarginalTargetPrior) and ``n0``.
    """
    x0 = np.atleast_2d(np.asarray(prior_sample, dtype=float))
    obs = observed if isinstance(observed, Dataset) else Dataset(observed)
    n0, p = x0.shape
    if p != obs.p:
        raise ParameterError("prior sample and data have different dimensions")
    R = np.atleast_2d(np.corrcoef(obs.y, rowvar=False))
    hi = informative_hyperparameters(x0.mean(axis=0), x0.var(axis=0, ddof=1), n0, alpha, R)
    hn = noninformative_hyperparameters(obs, alpha)
    draws = prior_theta_sampler(hi, obs.n, S)(rng if rng is not None else RandomSource(0), int(n_draws))
    return {"informative": hi, "noninformative": hn, "p1": fit_product_target(draws, p), "n0": n0}


def count_modes(density, rel_tol=1e-3):
    """Number of strict local maxima of a density evaluated on a 1-D grid.

    Maxima below ``rel_tol`` times the global maximum are ignored.
    """
    d = np.asarray(density, dtype=float)
    if d.size < 3:
        return int(d.size > 0)
    thr = rel_tol * d.max()
    inner = (d[1:-1] > d[:-2]) & (d[1:-1] >= d[2:]) & (d[1:-1] > thr)
    return int(inner.sum() + (d[0] > d[1] and d[0] > thr) + (d[-1] > d[-2] and d[-1] > thr))
