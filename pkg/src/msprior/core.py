"""Model-agnostic machinery for marginally specified priors.

A marginally specified prior replaces the law of a functional ``theta`` under a
base prior with a chosen density ``p1``. Any Metropolis-Hastings sampler for the
base posterior is turned into one for the adjusted posterior by multiplying its
acceptance ratio by

    [p1(theta*) / p0(theta*)] / [p1(theta) / p0(theta)]

where ``p0`` is the base-prior density of ``theta``. ``p0`` is rarely
available, so it is estimated once from prior draws and then held fixed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .distributions import DirichletParams, as_generator, logpdf_dirichlet
from .errors import ConfigError, DomainError, FitError, InvariantError, NumericError, ParameterError
from .skewt import SkewT, fit_skew_t

__all__ = [
    "Factor",
    "MarginalTargetPrior",
    "InducedMarginalEstimate",
    "ChainConfig",
    "ChainOutput",
    "estimate_induced_marginal",
    "product_dirichlet_estimate",
    "check_absolute_continuity",
    "log_ratio_term",
    "msp_log_adjustment",
    "approx_target_log_adjustment",
    "metropolis_accept",
    "effective_sample_size",
    "drive_chain",
    "DegenerateSeriesWarning",
]

MIN_FIT_SAMPLES = 100
LOG_SUPPORT_FLOOR = -700.0

KINDS = ("gaussian-kde", "moment-fit-skew-t", "product-of-dirichlet")


class DegenerateSeriesWarning(UserWarning):
    """Raised when an ESS is requested for a constant series."""


# --------------------------------------------------------------------------
# target prior p1
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Factor:
    """One named parametric density on a block of theta coordinates.

    Families and their parameters:

    ``normal``         mean, sd (scalars or one per coordinate)
    ``inverse-gamma``  shape, scale (density ``b^a / G(a) x^(-a-1) exp(-b/x)``)
    ``dirichlet``      alpha (one per coordinate of the block)
    ``uniform``        low, high (flat box; used for bounded approximate targets)
    """

    family: str
    coords: tuple
    params: dict

    def __post_init__(self):
        coords = tuple(int(c) for c in self.coords)
        object.__setattr__(self, "coords", coords)
        k = len(coords)
        if k == 0:
            raise ParameterError("a factor needs at least one coordinate")
        p = {key: np.broadcast_to(np.asarray(v, dtype=float), (k,)).copy() for key, v in self.params.items()}
        fam = self.family
        if fam == "normal":
            _need(p, ("mean", "sd"), fam)
            if np.any(p["sd"] <= 0):
                raise ParameterError("normal sd must be positive")
        elif fam == "inverse-gamma":
            _need(p, ("shape", "scale"), fam)
            if np.any(p["shape"] <= 0) or np.any(p["scale"] <= 0):
                raise ParameterError("inverse-gamma shape and scale must be positive")
        elif fam == "dirichlet":
            _need(p, ("alpha",), fam)
            DirichletParams(p["alpha"])
            if k < 2:
                raise ParameterError("a Dirichlet factor needs at least two coordinates")
        elif fam == "uniform":
            _need(p, ("low", "high"), fam)
            if np.any(p["high"] <= p["low"]):
                raise ParameterError("uniform needs high > low")
        else:
            raise ParameterError(f"unknown factor family {fam!r}")
        for v in p.values():
            if not np.all(np.isfinite(v)):
                raise ParameterError(f"{fam} parameters must be finite")
        object.__setattr__(self, "params", p)

    def logpdf(self, x):
        p = self.params
        fam = self.family
        if fam == "normal":
            z = (x - p["mean"]) / p["sd"]
            return float(np.sum(-0.5 * z * z - np.log(p["sd"])) - 0.5 * len(x) * math.log(2 * math.pi))
        if fam == "inverse-gamma":
            if np.any(x <= 0):
                return -math.inf
            a, b = p["shape"], p["scale"]
            return float(np.sum(a * np.log(b) - special.gammaln(a) - (a + 1) * np.log(x) - b / x))
        if fam == "dirichlet":
            if np.any(x <= 0) or abs(x.sum() - 1.0) > 1e-9:
                return -math.inf
            return float(logpdf_dirichlet(p["alpha"], x))
        inside = np.all(x >= p["low"]) and np.all(x <= p["high"])
        return -float(np.sum(np.log(p["high"] - p["low"]))) if inside else -math.inf

    def sample(self, gen, size):
        p = self.params
        k = len(self.coords)
        fam = self.family
        if fam == "normal":
            return p["mean"] + p["sd"] * gen.standard_normal((size, k))
        if fam == "inverse-gamma":
            return p["scale"] / gen.gamma(p["shape"], 1.0, (size, k))
        if fam == "dirichlet":
            return gen.dirichlet(p["alpha"], size)
        return gen.uniform(p["low"], p["high"], (size, k))

    def to_dict(self):
        return {
            "family": self.family,
            "coords": list(self.coords),
            "params": {k: v.tolist() for k, v in self.params.items()},
        }


def _need(p, keys, fam):
    missing = [k for k in keys if k not in p]
    if missing:
        raise ParameterError(f"{fam} factor is missing {missing}")


class MarginalTargetPrior:
    """Product of parametric factors whose blocks partition theta.

    Parameters
    ----------
    factors : list of Factor or dict
    dim : int, optional
        Dimension of theta; defaults to the number of coordinates covered.
    """

    def __init__(self, factors, dim=None):
        fs = [f if isinstance(f, Factor) else Factor(f["family"], f["coords"], f.get("params", {}))
              for f in factors]
        covered = sorted(c for f in fs for c in f.coords)
        q = len(covered) if dim is None else int(dim)
        if covered != list(range(q)):
            raise ParameterError(f"factor blocks must partition coordinates 0..{q - 1}, got {covered}")
        self.factors = tuple(fs)
        self.dim = q

    def logpdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DomainError(f"theta must have shape ({self.dim},), got {theta.shape}")
        total = 0.0
        for f in self.factors:
            lp = f.logpdf(theta[list(f.coords)])
            if lp == -math.inf:
                return -math.inf
            total += lp
        return total

    def sample(self, rng, size):
        gen = as_generator(rng)
        out = np.empty((size, self.dim))
        for f in self.factors:
            out[:, list(f.coords)] = f.sample(gen, size)
        return out

    def to_dict(self):
        return {"dim": self.dim, "factors": [f.to_dict() for f in self.factors]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["factors"], d.get("dim"))


# --------------------------------------------------------------------------
# induced marginal p0
# --------------------------------------------------------------------------

class InducedMarginalEstimate:
    """Frozen estimate of the base-prior density of theta.

    ``log_coords`` lists theta coordinates that were log-transformed before
    fitting; :meth:`logpdf` takes theta on its natural scale and adds the
    Jacobian of that transform.
    """

    __slots__ = ("kind", "S", "log_coords", "diagnostics", "_params", "_impl")

    def __init__(self, kind, params, S, log_coords=(), diagnostics=None):
        if kind not in KINDS:
            raise ParameterError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "S", int(S))
        object.__setattr__(self, "log_coords", tuple(int(c) for c in log_coords))
        object.__setattr__(self, "diagnostics", dict(diagnostics or {}))
        object.__setattr__(self, "_params", _freeze_params(params))
        object.__setattr__(self, "_impl", _build_impl(kind, self._params))

    def __setattr__(self, name, value):
        raise AttributeError("InducedMarginalEstimate is immutable")

    @property
    def params(self):
        return _thaw_params(self._params)

    def logpdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        x = theta
        jac = 0.0
        if self.log_coords:
            lc = list(self.log_coords)
            v = theta[..., lc]
            if np.any(v <= 0):
                return -math.inf if theta.ndim == 1 else np.where(np.any(v <= 0, axis=-1), -np.inf, np.nan)
            x = theta.copy()
            x[..., lc] = np.log(v)
            jac = -np.sum(x[..., lc], axis=-1)
        return self._impl(x) + jac

    def to_dict(self):
        return {
            "kind": self.kind,
            "S": self.S,
            "log_coords": list(self.log_coords),
            "params": self.params,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["params"], d["S"], d.get("log_coords", ()), d.get("diagnostics"))


def _freeze_params(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, (int, float, str)):
            out[k] = v
            continue
        try:
            out[k] = _ro(np.asarray(v, dtype=float))
        except ValueError:
            # ragged, e.g. Dirichlet blocks of different sizes
            out[k] = tuple(_ro(np.asarray(r, dtype=float)) for r in v)
    return out


def _ro(a):
    a = a.copy()
    a.setflags(write=False)
    return a


def _thaw_params(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, tuple):
            out[k] = [r.tolist() for r in v]
        else:
            out[k] = v
    return out


def _build_impl(kind, p):
    if kind == "gaussian-kde":
        data = np.asarray(p["data"])
        kde = stats.gaussian_kde(data.T, bw_method="scott")

        def f(x):
            x = np.asarray(x, dtype=float)
            out = kde.logpdf(np.atleast_2d(x).reshape(-1, data.shape[1]).T)
            return float(out[0]) if x.ndim == 1 else out

        return f
    if kind == "moment-fit-skew-t":
        st = SkewT(p["xi"], p["omega"], p["alpha"], float(np.asarray(p["nu"])))
        return st.logpdf
    blocks = [np.asarray(b, dtype=int) for b in p["blocks"]]
    alphas = [np.asarray(a, dtype=float) for a in p["alphas"]]

    def g(x):
        x = np.asarray(x, dtype=float)
        total = 0.0
        for b, a in zip(blocks, alphas):
            xb = x[..., b]
            if np.any(xb <= 0) or np.any(np.abs(xb.sum(axis=-1) - 1.0) > 1e-9):
                if x.ndim == 1:
                    return -math.inf
                raise DomainError("product-of-dirichlet evaluated off the simplex")
            total = total + logpdf_dirichlet(a, xb)
        return float(total) if x.ndim == 1 else total

    return g


def product_dirichlet_estimate(alphas, blocks=None):
    """Closed-form product-of-Dirichlet p0 from known block concentrations."""
    alphas = [DirichletParams(a).alpha for a in alphas]
    if blocks is None:
        blocks, start = [], 0
        for a in alphas:
            blocks.append(list(range(start, start + a.size)))
            start += a.size
    return InducedMarginalEstimate(
        "product-of-dirichlet",
        {"blocks": [list(b) for b in blocks], "alphas": [a.tolist() for a in alphas]},
        S=0,
        diagnostics={"method": "closed-form"},
    )


def estimate_induced_marginal(prior_sampler: Callable, S: int = 10_000, kind: str = "moment-fit-skew-t",
                              rng=None, log_coords: Sequence[int] = (), blocks=None, holdout: int = 0):
    """Fit p0 from ``S`` i.i.d. draws of theta under the base prior.

    Parameters
    ----------
    prior_sampler : callable
        ``prior_sampler(rng, size)`` returns a ``(size, q)`` array of theta
        draws on the natural scale.
    S : int
        Number of draws used for the fit. Fewer than 100 draws is allowed but
        sets ``diagnostics["small_sample"]`` and issues a warning.
    kind : str
        ``"gaussian-kde"`` (Scott's rule), ``"moment-fit-skew-t"`` or
        ``"product-of-dirichlet"`` (moment-matched Dirichlet per block).
    log_coords : sequence of int
        Coordinates fitted on the log scale.
    blocks : list of index lists
        Simplex blocks, required for ``product-of-dirichlet``.
    holdout : int
        Extra draws used only to report a held-out mean log-score.

    Returns
    -------
    InducedMarginalEstimate
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown estimator kind {kind!r}")
    S = int(S)
    if S < 2:
        raise ParameterError("S must be at least 2")
    diag = {"small_sample": S < MIN_FIT_SAMPLES}
    if S < MIN_FIT_SAMPLES:
        warnings.warn(f"fitting p0 from only {S} draws (recommended minimum {MIN_FIT_SAMPLES})", stacklevel=2)
    draws = np.asarray(prior_sampler(rng, S), dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    if not np.all(np.isfinite(draws)):
        raise FitError("prior sampler returned non-finite theta")
    log_coords = tuple(int(c) for c in log_coords)
    x = draws.copy()
    if log_coords:
        if np.any(x[:, list(log_coords)] <= 0):
            raise FitError("log-transformed coordinates must be positive")
        x[:, list(log_coords)] = np.log(x[:, list(log_coords)])
    if np.any(x.std(axis=0) <= 0):
        raise FitError("degenerate prior sample: a coordinate has zero variance")

    if kind == "gaussian-kde":
        try:
            params = {"data": x.tolist()}
            est = InducedMarginalEstimate(kind, params, S, log_coords, diag)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"KDE covariance is singular: {exc}") from None
    elif kind == "moment-fit-skew-t":
        st = fit_skew_t(x)
        est = InducedMarginalEstimate(kind, st.to_dict(), S, log_coords, diag)
    else:
        if blocks is None:
            raise ParameterError("product-of-dirichlet needs the simplex blocks")
        alphas = []
        for b in blocks:
            xb = x[:, list(b)]
            m = xb.mean(axis=0)
            v = xb.var(axis=0, ddof=1)
            # Var x_i = m_i (1 - m_i) / (A + 1), pooled over coordinates
            A = np.sum(m * (1 - m)) / np.sum(v) - 1.0
            if not A > 0:
                raise FitError("Dirichlet moment fit gave a non-positive concentration")
            alphas.append((A * m).tolist())
        est = InducedMarginalEstimate(kind, {"blocks": [list(b) for b in blocks], "alphas": alphas},
                                      S, log_coords, diag)
    if holdout:
        ho = np.asarray(prior_sampler(rng, int(holdout)), dtype=float).reshape(int(holdout), -1)
        scores = np.array([est.logpdf(t) for t in ho])
        d = dict(est.diagnostics)
        d["holdout_size"] = int(holdout)
        d["holdout_mean_log_score"] = float(np.mean(scores))
        est = InducedMarginalEstimate(kind, est.params, S, log_coords, d)
    return est


def check_absolute_continuity(p1, p0, rng, n=1000):
    """Reject ``p1`` if some of its draws fall where ``p0`` is numerically zero."""
    pts = p1.sample(rng, n)
    worst = min(float(p0.logpdf(t)) for t in pts)
    if not worst >= LOG_SUPPORT_FLOOR:
        raise ConfigError(
            f"p1 puts mass where the estimated p0 is numerically zero (log p0 = {worst:.1f}); "
            "the adjusted prior would not be well defined"
        )
    return worst


# --------------------------------------------------------------------------
# acceptance-ratio pieces
# --------------------------------------------------------------------------

def log_ratio_term(p1, p0, theta):
    """``ln p1(theta) - ln p0(theta)``; ``-inf`` when ``p1`` vanishes."""
    lp1 = p1.logpdf(theta)
    if math.isnan(lp1):
        raise NumericError("p1 log-density is NaN")
    if lp1 == -math.inf:
        return -math.inf
    if p1 is p0:
        return 0.0
    lp0 = p0.logpdf(theta)
    if math.isnan(lp0) or lp0 == -math.inf:
        raise NumericError("p0 log-density is not finite where p1 is positive")
    return lp1 - lp0


def _combine(a_prop, a_cur):
    if a_cur == -math.inf:
        raise InvariantError("current state has zero target density")
    if a_prop == -math.inf:
        return -math.inf
    return a_prop - a_cur


def msp_log_adjustment(p1, p0, theta_prop, theta_cur):
    """Log of ``[p1(theta*)/p0(theta*)] / [p1(theta)/p0(theta)]``."""
    a_cur = log_ratio_term(p1, p0, theta_cur)
    a_prop = log_ratio_term(p1, p0, theta_prop)
    return _combine(a_prop, a_cur)


def approx_target_log_adjustment(p1_tilde, theta_prop, theta_cur):
    """Log of ``p1~(theta*) / p1~(theta)``.

    With this ratio the induced theta-margin is proportional to
    ``p0 * p1~`` rather than ``p1~`` itself; ``p1~`` should be bounded.
    """
    a_cur = p1_tilde.logpdf(theta_cur)
    a_prop = p1_tilde.logpdf(theta_prop)
    if math.isnan(a_cur) or math.isnan(a_prop):
        raise NumericError("approximate target log-density is NaN")
    return _combine(a_prop, a_cur)


def metropolis_accept(log_r, rng):
    """Accept with probability ``min(1, exp(log_r))``.

    No uniform is consumed when ``log_r >= 0`` or ``log_r == -inf``, so a
    chain whose ratios are all zero uses its stream exactly like the base
    sampler.
    """
    log_r = float(log_r)
    if math.isnan(log_r):
        raise NumericError("log acceptance ratio is NaN")
    if log_r >= 0.0:
        return True
    if log_r == -math.inf:
        return False
    return math.log(as_generator(rng).random()) < log_r


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def _autocorr(x):
    n = x.size
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov / acov[0]


def effective_sample_size(series, return_flag=False):
    """Effective sample size with Geyer's initial monotone sequence.

    ``n / tau`` where ``tau = -1 + 2 * sum(Gamma_k)`` and ``Gamma_k`` are
    sums of adjacent autocorrelation pairs, truncated at the first
    non-positive pair and forced non-increasing. The result is capped at ``n``.
    A constant series gets ESS 0 and a :class:`DegenerateSeriesWarning`.

    Parameters
    ----------
    series : (n,) array
    return_flag : bool
        Also return whether the series was degenerate.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ParameterError("ESS needs at least 4 values")
    if not np.all(np.isfinite(x)):
        raise NumericError("series has non-finite values")
    if np.ptp(x) == 0:
        warnings.warn("ESS of a constant series is reported as 0", DegenerateSeriesWarning, stacklevel=2)
        return (0.0, True) if return_flag else 0.0
    rho = _autocorr(x)
    m = (n - 1) // 2
    gam = rho[0 : 2 * m : 2] + rho[1 : 2 * m : 2]
    pos = np.nonzero(gam <= 0)[0]
    k = pos[0] if pos.size else gam.size
    gam = np.minimum.accumulate(gam[:k])
    tau = -1.0 + 2.0 * gam.sum()
    ess = float(n) if tau <= 1.0 else n / tau
    return (ess, False) if return_flag else ess


def ess_columns(samples):
    """Per-column ESS of a draws matrix, plus degenerate flags."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    out = np.empty(samples.shape[1])
    flags = np.zeros(samples.shape[1], dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSeriesWarning)
        for j in range(samples.shape[1]):
            out[j], flags[j] = effective_sample_size(samples[:, j], return_flag=True)
    return out, flags


# --------------------------------------------------------------------------
# chain bookkeeping
# --------------------------------------------------------------------------

@dataclass
class ChainConfig:
    """Length, thinning and seeding of one chain.

    ``burn_in`` defaults to 10% of ``iterations``. ``iterations - burn_in``
    must be a positive multiple of ``thin``. ``tuning`` carries model-specific
    proposal settings.
    """

    iterations: int
    thin: int = 1
    burn_in: int | None = None
    seed: int = 0
    tuning: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations <= 0:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}")
        if int(self.thin) != self.thin or self.thin <= 0:
            raise ConfigError(f"thin must be a positive integer, got {self.thin}")
        self.iterations = int(self.iterations)
        self.thin = int(self.thin)
        if self.burn_in is None:
            self.burn_in = self.iterations // 10
            self.burn_in += (self.iterations - self.burn_in) % self.thin
        if self.burn_in < 0 or int(self.burn_in) != self.burn_in:
            raise ConfigError(f"burn_in must be a nonnegative integer, got {self.burn_in}")
        self.burn_in = int(self.burn_in)
        if self.burn_in >= self.iterations:
            raise ConfigError("burn_in must be smaller than iterations (no draws would be saved)")
        if (self.iterations - self.burn_in) % self.thin:
            raise ConfigError("iterations - burn_in must be a multiple of thin")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.seed = int(self.seed)

    @property
    def n_saved(self):
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class ChainOutput:
    """Saved draws and summary statistics of one chain."""

    theta_samples: np.ndarray
    theta_names: list
    states: list
    acceptance_rate: float
    n_accepted: int
    n_proposed: int
    ess: np.ndarray
    ess_degenerate: np.ndarray
    extra: dict = field(default_factory=dict)


def drive_chain(advance, theta_of, snapshot, config: ChainConfig, names):
    """Run burn-in then the thinned sampling phase.

    Parameters
    ----------
    advance : callable
        ``advance(n_iter)`` moves the chain ``n_iter`` iterations and returns
        ``(n_accepted, n_proposed)`` for those iterations.
    theta_of : callable
        Returns the current theta (copied).
    snapshot : callable or None
        Returns a per-draw model record to keep alongside theta.
    """
    if config.burn_in:
        advance(config.burn_in)
    rows = np.empty((config.n_saved, len(names)))
    states = []
    acc = prop = 0
    for i in range(config.n_saved):
        a, p = advance(config.thin)
        acc += a
        prop += p
        rows[i] = theta_of()
        if snapshot is not None:
            states.append(snapshot())
    ess, flags = ess_columns(rows) if config.n_saved >= 4 else (np.full(len(names), np.nan), np.zeros(len(names), bool))
    return ChainOutput(
        theta_samples=rows,
        theta_names=list(names),
        states=states,
        acceptance_rate=acc / prop if prop else 1.0,
        n_accepted=int(acc),
        n_proposed=int(prop),
        ess=ess,
        ess_degenerate=flags,
    )
