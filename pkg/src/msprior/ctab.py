"""Dirichlet-prior multiway contingency tables.

Cells are ordered lexicographically with the last variable varying fastest,
i.e. the C-order ravel of an array of shape ``(d_1, ..., d_p)``. Variable and
level indices are 0-based throughout.

Posterior sampling under a marginally specified prior uses a random walk on
``log Z`` where ``f = Z / sum(Z)`` and ``Z_c ~ gamma(alpha_c, 1)`` under the
base prior; the one-way margins ``theta_j`` get their own prior through the
ratio of target and induced Dirichlet densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _ctab_kernels as K_
from .core import ChainConfig, drive_chain
from .distributions import DirichletParams, RandomSource, as_generator, logpdf_dirichlet, sample_log_gamma
from .errors import ConfigError, ConvergenceError, DomainError, InvariantError, NumericError, ParameterError

__all__ = [
    "TableShape",
    "CountTable",
    "LogGammaState",
    "MetricsReport",
    "cell_marginals",
    "all_marginals",
    "induced_dirichlet_margin",
    "ipf_iproject",
    "informative_prior",
    "noninformative_prior",
    "conjugate_posterior_mean",
    "propose_subset",
    "marginal_adjustment",
    "run_ctab_chain",
    "tune_delta",
    "ldf",
    "metric_M",
    "metric_L",
    "metrics",
    "smooth_zero_cells",
    "simulate_dataset",
    "latent_class_table",
    "synthetic_truth",
    "study_posterior_means",
    "product_margin_diagnostic",
]


class TableShape:
    """Categories per variable; at least two variables with two levels each."""

    def __init__(self, d):
        d = tuple(int(x) for x in np.atleast_1d(d))
        if len(d) < 2 or min(d) < 2:
            raise ParameterError(f"need p >= 2 variables with d_j >= 2, got {d}")
        self.d = d
        self.p = len(d)
        self.size = int(np.prod(d))
        self.offsets = np.concatenate([[0], np.cumsum(d)]).astype(np.int64)
        self.levels = np.ascontiguousarray(np.array(np.unravel_index(np.arange(self.size), d)).T.astype(np.int64))

    @classmethod
    def flat(cls, n_cells):
        """Single-variable shape over ``n_cells`` cells (no margin structure).

        Useful for running the log-gamma walk on a bare Dirichlet vector such
        as a two-cell table.
        """
        n_cells = int(n_cells)
        if n_cells < 2:
            raise ParameterError("need at least two cells")
        new = object.__new__(cls)
        new.d = (n_cells,)
        new.p = 1
        new.size = n_cells
        new.offsets = np.array([0, n_cells], dtype=np.int64)
        new.levels = np.arange(n_cells, dtype=np.int64).reshape(-1, 1)
        return new

    def __eq__(self, other):
        return isinstance(other, TableShape) and other.d == self.d

    def __repr__(self):
        return f"TableShape({self.d})"

    def check_index(self, j):
        if not 0 <= int(j) < self.p:
            raise ParameterError(f"variable index {j} out of range 0..{self.p - 1}")
        return int(j)

    def check_vector(self, x, name="vector"):
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.size:
            raise ParameterError(f"{name} has {x.size} cells, table has {self.size}")
        return x


@dataclass
class CountTable:
    """Nonnegative integer counts in cell order."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
            raise ParameterError("counts must be a vector of nonnegative integers")
        self.counts = c.astype(np.int64)

    @property
    def n(self):
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    M: float
    L: float


def _as_counts(data):
    return data.counts if isinstance(data, CountTable) else CountTable(data).counts


# --------------------------------------------------------------------------
# margins and priors
# --------------------------------------------------------------------------

def cell_marginals(f, shape, j):
    """One-way margin of variable ``j``."""
    j = shape.check_index(j)
    f = shape.check_vector(f, "f")
    axes = tuple(k for k in range(shape.p) if k != j)
    return f.reshape(shape.d).sum(axis=axes)


def all_marginals(f, shape):
    return [cell_marginals(f, shape, j) for j in range(shape.p)]


def induced_dirichlet_margin(alpha, shape, j):
    """Dirichlet law of ``theta_j`` when ``f ~ Dirichlet(alpha)``: summed alphas."""
    a = DirichletParams(alpha).alpha if not isinstance(alpha, DirichletParams) else alpha.alpha
    j = shape.check_index(j)
    a = shape.check_vector(a, "alpha")
    axes = tuple(k for k in range(shape.p) if k != j)
    return DirichletParams(a.reshape(shape.d).sum(axis=axes))


def _margin_residual(f, shape, targets):
    return max(np.max(np.abs(cell_marginals(f, shape, j) - targets[j])) for j in range(shape.p))


def ipf_iproject(shape, target_margins, tol=1e-12, max_iters=1000, history=False):
    """I-projection of the uniform table onto fixed one-way margins.

    Iterative proportional fitting from the uniform table, cycling over the
    variables until every margin is within ``tol`` (max abs) of its target.

    Returns
    -------
    f : (|C|,) array
    residuals : list of float
        Max margin error after each cycle, when ``history`` is true.
    """
    if len(target_margins) != shape.p:
        raise ParameterError(f"need {shape.p} target margins, got {len(target_margins)}")
    if not tol > 0:
        raise ParameterError("tol must be positive")
    targets = []
    for j, t in enumerate(target_margins):
        t = np.asarray(t, dtype=float)
        if t.shape != (shape.d[j],) or np.any(t <= 0) or abs(t.sum() - 1.0) > 1e-9:
            raise ParameterError(f"target margin {j} must be a positive simplex vector of length {shape.d[j]}")
        targets.append(t / t.sum())
    F = np.full(shape.d, 1.0 / shape.size)
    res = []
    for _ in range(int(max_iters)):
        for j in range(shape.p):
            axes = tuple(k for k in range(shape.p) if k != j)
            cur = F.sum(axis=axes)
            if np.max(np.abs(cur - targets[j])) <= tol:
                continue  # already fitted; rescaling would only add rounding
            ratio = targets[j] / cur
            bshape = [1] * shape.p
            bshape[j] = shape.d[j]
            F = F * ratio.reshape(bshape)
        r = _margin_residual(F.ravel(), shape, targets)
        res.append(r)
        if r <= tol:
            f = F.ravel()
            return (f, res) if history else f
    raise ConvergenceError(f"IPF did not reach tol={tol} in {max_iters} cycles", res[-1])


def informative_prior(shape, target_margins, tol=1e-12):
    """Dirichlet with total mass ``|C|`` centred on the I-projection."""
    f0 = ipf_iproject(shape, target_margins, tol=tol)
    return DirichletParams(shape.size * f0)


def noninformative_prior(shape):
    """Symmetric Dirichlet with total mass ``sqrt(|C|)``."""
    return DirichletParams(np.full(shape.size, 1.0 / math.sqrt(shape.size)))


def conjugate_posterior_mean(prior, data):
    """``(alpha_c + y_c) / (sum alpha + n)``."""
    a = prior.alpha if isinstance(prior, DirichletParams) else DirichletParams(prior).alpha
    y = _as_counts(data)
    if y.size != a.size:
        raise ParameterError(f"counts have {y.size} cells, prior has {a.size}")
    return (a + y) / (a.sum() + y.sum())


# --------------------------------------------------------------------------
# log-gamma state and moves
# --------------------------------------------------------------------------

class LogGammaState:
    """``log Z`` with cached ``f``, margins and totals.

    Parameters
    ----------
    logZ : (|C|,) array
    shape : TableShape
    counts : CountTable or array
        Data (all zeros for a flat likelihood).
    alpha : DirichletParams or array
        Base prior concentrations.
    """

    def __init__(self, logZ, shape, counts, alpha):
        self.shape = shape
        self.logZ = shape.check_vector(logZ, "logZ").copy()
        if not np.all(np.isfinite(self.logZ)):
            raise NumericError("logZ must be finite")
        if np.any(np.abs(self.logZ) > K_.LOGZ_LIMIT):
            raise NumericError(f"|logZ| exceeds {K_.LOGZ_LIMIT}")
        self.counts = _as_counts(counts)
        a = alpha.alpha if isinstance(alpha, DirichletParams) else DirichletParams(alpha).alpha
        self.alpha = np.asarray(a, dtype=float)
        if self.counts.size != shape.size or self.alpha.size != shape.size:
            raise ParameterError("counts and alpha must have one entry per cell")
        self.Z = np.empty(shape.size)
        self.A = np.empty(int(shape.offsets[-1]))
        self.refresh()

    def refresh(self):
        s = self.shape
        self.T = K_.refresh(self.logZ, self.Z, self.A, s.levels, s.offsets, 0.0)

    def copy(self):
        new = object.__new__(LogGammaState)
        new.shape = self.shape
        new.logZ = self.logZ.copy()
        new.counts = self.counts
        new.alpha = self.alpha
        new.Z = self.Z.copy()
        new.A = self.A.copy()
        new.T = self.T
        return new

    @property
    def f(self):
        return np.exp(self.logZ - logsumexp(self.logZ))

    @property
    def margins(self):
        s = self.shape
        return [self.A[s.offsets[j]: s.offsets[j + 1]] / self.T for j in range(s.p)]

    def check_caches(self, tol=1e-12):
        f = self.f
        if np.max(np.abs(self.Z / self.T - f)) > tol:
            raise InvariantError("cached f disagrees with logZ")
        for j, m in enumerate(self.margins):
            if np.max(np.abs(m - cell_marginals(f, self.shape, j))) > tol:
                raise InvariantError(f"cached margin {j} disagrees with logZ")

    def log_target0(self, include_jacobian=True):
        """Unnormalized log posterior density of ``log Z`` under the base prior."""
        y = self.counts
        lf = self.logZ - math.log(self.T)
        jac = 1.0 if include_jacobian else 0.0
        return float(np.sum(y * lf) + np.sum((self.alpha - 1.0 + jac) * self.logZ - self.Z)
                     - np.sum(gammaln(self.alpha)))


def default_subset_size(shape):
    return max(1, math.ceil(shape.size / 20))


def propose_subset(state, subset_size, delta, rng, include_jacobian=True):
    """Random-walk proposal on a uniformly chosen subset of ``log Z``.

    ``delta`` is the proposal variance. Returns the proposed state and
    ``log r0`` (likelihood, gamma prior and log-scale Jacobian).
    """
    C = state.shape.size
    m = int(subset_size)
    if not 1 <= m <= C:
        raise ParameterError(f"subset_size must be in 1..{C}")
    if delta < 0:
        raise ParameterError("delta must be nonnegative")
    gen = as_generator(rng)
    perm = np.arange(C)
    swaps = np.empty(m, dtype=np.int64)
    K_.choose_subset(gen, perm, m, swaps)
    cells = perm[:m].copy()
    eps = math.sqrt(delta) * np.array([gen.standard_normal() for _ in range(m)])
    prop = state.copy()
    prop.logZ[cells] += eps
    if np.any(np.abs(prop.logZ) > K_.LOGZ_LIMIT):
        raise NumericError(f"proposal leaves |logZ| <= {K_.LOGZ_LIMIT}")
    prop.refresh()
    log_r0 = prop.log_target0(include_jacobian) - state.log_target0(include_jacobian)
    if delta == 0:
        log_r0 = 0.0
    return prop, log_r0


def marginal_adjustment(state, proposal, p1_margins, p0_margins):
    """``log r1`` from per-variable Dirichlet targets and induced margins."""
    total = 0.0
    for st, sign in ((proposal, 1.0), (state, -1.0)):
        for j, th in enumerate(st.margins):
            a1 = p1_margins[j].alpha if isinstance(p1_margins[j], DirichletParams) else np.asarray(p1_margins[j])
            a0 = p0_margins[j].alpha if isinstance(p0_margins[j], DirichletParams) else np.asarray(p0_margins[j])
            if np.any(th <= 0):
                if sign > 0:
                    return -math.inf
                raise InvariantError("current state has a margin on the simplex boundary")
            th = th / th.sum()
            total += sign * (logpdf_dirichlet(a1, th) - logpdf_dirichlet(a0, th))
    return float(total)


def product_margin_diagnostic(alpha, shape, rng, n_draws=10_000):
    """How far the margins are from independent under ``f ~ Dirichlet(alpha)``.

    The margin adjustment treats the induced law of ``(theta_1..theta_p)`` as
    a product of its Dirichlet margins. This simulates ``f`` and reports the
    largest absolute correlation between entries of margins of different
    variables (zero under the product approximation, up to Monte Carlo noise
    of order ``1/sqrt(n_draws)``).

    Returns
    -------
    dict with ``max_abs_cross_correlation``, ``pair`` (the two variables
    attaining it) and ``n_draws``.
    """
    a = alpha.alpha if isinstance(alpha, DirichletParams) else DirichletParams(alpha).alpha
    a = shape.check_vector(a, "alpha")
    gen = as_generator(rng)
    lg = sample_log_gamma(np.broadcast_to(a, (int(n_draws), a.size)), gen)
    f = np.exp(lg - logsumexp(lg, axis=1, keepdims=True))
    F = f.reshape((int(n_draws),) + shape.d)
    th = []
    for j in range(shape.p):
        axes = tuple(k + 1 for k in range(shape.p) if k != j)
        th.append(F.sum(axis=axes))
    best, pair = 0.0, None
    for j1, j2 in combinations(range(shape.p), 2):
        x = np.column_stack([th[j1], th[j2]])
        sd = x.std(axis=0)
        if np.any(sd == 0):
            continue
        c = np.corrcoef(x, rowvar=False)[: shape.d[j1], shape.d[j1]:]
        m = float(np.max(np.abs(c)))
        if m > best:
            best, pair = m, (j1, j2)
    return {"max_abs_cross_correlation": best, "pair": pair, "n_draws": int(n_draws)}


def initial_log_z(shape, counts, alpha, rng):
    """Exact draw of ``log Z`` from the base posterior.

    ``f ~ Dirichlet(alpha + y)`` and an independent ``T ~ gamma(sum alpha)``.
    """
    y = _as_counts(counts)
    a = np.asarray(alpha, dtype=float)
    lg = sample_log_gamma(a + y, rng)
    lf = lg - logsumexp(lg)
    lT = sample_log_gamma(a.sum(), rng)
    return lf + lT


class _CtabChain:
    def __init__(self, state, m, delta, gen, da, include_jacobian):
        self.s = state
        self.m = int(m)
        self.sd = math.sqrt(delta)
        self.gen = gen
        self.da = np.zeros_like(state.A) if da is None else da
        self.use_r1 = da is not None
        self.da_tot = float(self.da.sum())
        self.jac = 1.0 if include_jacobian else 0.0
        self.since = 0
        self.n = float(state.counts.sum())
        self.counts = state.counts.astype(float)
        self.dec = np.zeros(0, dtype=np.bool_)
        self.dec_pos = 0

    def advance(self, n_iter):
        s = self.s
        if self.dec.size and self.dec_pos + n_iter > self.dec.size:
            self.dec = np.concatenate([self.dec, np.zeros(max(n_iter, self.dec.size), dtype=np.bool_)])
        acc, s.T, self.since, self.dec_pos, status = K_.advance(
            self.gen, int(n_iter), s.logZ, s.Z, s.A, s.T, self.counts, s.alpha, self.n, s.shape.levels,
            s.shape.offsets, self.m, self.sd, self.use_r1, self.da, self.da_tot, self.jac, self.since,
            self.dec, self.dec_pos)
        if status == K_.OVERFLOW:
            raise NumericError(f"a proposal pushed |logZ| beyond {K_.LOGZ_LIMIT}")
        if status == K_.NAN_RATIO:
            raise NumericError("acceptance log-ratio is NaN")
        return int(acc), int(n_iter)


def tune_delta(chain, delta, batches=10, batch_size=2000, low=0.6, high=0.9):
    """Pilot tuning: halve or double the proposal variance per batch."""
    for _ in range(batches):
        chain.sd = math.sqrt(delta)
        acc, prop = chain.advance(batch_size)
        rate = acc / prop
        if rate < low:
            delta /= 2.0
        elif rate > high:
            delta *= 2.0
    chain.sd = math.sqrt(delta)
    return delta


def run_ctab_chain(data, shape, base_prior, p1_margins=None, config=None, p0_margins=None,
                   include_jacobian=True, init=None, save_f=True, record_decisions=False):
    """Metropolis chain on ``log Z`` with optional margin adjustment.

    Parameters
    ----------
    data : CountTable or array
    shape : TableShape
    base_prior : DirichletParams
    p1_margins : list of DirichletParams, optional
        Target Dirichlet law of each one-way margin. ``None`` runs the base
        posterior.
    config : ChainConfig
        ``tuning`` may set ``subset_size``, ``delta`` (proposal variance;
        tuned by a pilot when absent), ``pilot_batches``, ``pilot_size``.
    p0_margins : list of DirichletParams, optional
        Induced margins of the base prior; computed when omitted.
    include_jacobian : bool
        Keep the ``prod Z*/Z`` factor. Only switched off to demonstrate that
        the chain is then wrong.
    init : array, optional
        Starting ``log Z``; defaults to an exact base-posterior draw.
    record_decisions : bool
        Keep every accept/reject decision (pilot included) in
        ``extra["accept_log"]``.

    Returns
    -------
    ChainOutput
        ``theta_samples`` holds the concatenated margins; ``extra["f_samples"]``
        the saved cell probabilities and ``extra["delta"]`` the variance used.
    """
    if config is None or not isinstance(config, ChainConfig):
        raise ConfigError("config must be a ChainConfig")
    y = _as_counts(data)
    if y.size != shape.size:
        raise ConfigError(f"data have {y.size} cells, shape has {shape.size}")
    alpha = base_prior.alpha if isinstance(base_prior, DirichletParams) else DirichletParams(base_prior).alpha
    if alpha.size != shape.size:
        raise ConfigError("base prior does not match the table shape")
    root = RandomSource(config.seed)
    gen = root.child(0).gen
    da = None
    if p1_margins is not None:
        if len(p1_margins) != shape.p:
            raise ConfigError(f"need {shape.p} p1 margins")
        if p0_margins is None:
            p0_margins = [induced_dirichlet_margin(alpha, shape, j) for j in range(shape.p)]
        parts = []
        for j in range(shape.p):
            a1 = np.asarray(p1_margins[j].alpha if isinstance(p1_margins[j], DirichletParams) else p1_margins[j],
                            dtype=float)
            a0 = np.asarray(p0_margins[j].alpha if isinstance(p0_margins[j], DirichletParams) else p0_margins[j],
                            dtype=float)
            if a1.shape != (shape.d[j],) or a0.shape != (shape.d[j],):
                raise ConfigError(f"margin {j} parameters must have length {shape.d[j]}")
            DirichletParams(a1)
            parts.append(a1 - a0)
        da = np.concatenate(parts)
    tuning = dict(config.tuning)
    m = int(tuning.get("subset_size", default_subset_size(shape)))
    if not 1 <= m <= shape.size:
        raise ConfigError(f"subset_size must be in 1..{shape.size}")
    logZ = initial_log_z(shape, y, alpha, root.child(1)) if init is None else np.asarray(init, dtype=float)
    state = LogGammaState(logZ, shape, y, alpha)
    chain = _CtabChain(state, m, 1.0, gen, da, include_jacobian)
    if record_decisions:
        chain.dec = np.zeros(config.iterations, dtype=np.bool_)
    if "delta" in tuning:
        delta = float(tuning["delta"])
        if not delta > 0:
            raise ConfigError("delta must be positive")
        chain.sd = math.sqrt(delta)
    else:
        delta = tune_delta(chain, float(tuning.get("delta_start", 1.0)), int(tuning.get("pilot_batches", 10)),
                           int(tuning.get("pilot_size", 2000)))
    f_rows = []

    def theta_of():
        s = chain.s
        return s.A / s.T

    def snapshot():
        if save_f:
            f_rows.append(chain.s.Z / chain.s.T)
        return None

    out = drive_chain(chain.advance, theta_of, snapshot, config,
                      [f"theta{j + 1}_{l + 1}" for j in range(shape.p) for l in range(shape.d[j])])
    out.states = []
    out.extra.update({
        "delta": delta,
        "subset_size": m,
        "f_samples": np.array(f_rows) if save_f else None,
        "final_log_z": chain.s.logZ.copy(),
    })
    if record_decisions:
        out.extra["accept_log"] = chain.dec[:chain.dec_pos].copy()
    return out


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _two_way(f, shape, j1, j2):
    axes = tuple(k for k in range(shape.p) if k not in (j1, j2))
    t = f.reshape(shape.d).sum(axis=axes)
    return t if j1 < j2 else t.T


def ldf(f, shape, j1, j2):
    """Local dependence function of the ``(j1, j2)`` two-way margin.

    ``ln[f(c1, c2) f(c1+1, c2+1) / (f(c1, c2+1) f(c1+1, c2))]``.
    """
    j1, j2 = shape.check_index(j1), shape.check_index(j2)
    if j1 == j2:
        raise ParameterError("ldf needs two different variables")
    f = shape.check_vector(f, "f")
    t = _two_way(f, shape, j1, j2)
    if np.any(t <= 0):
        raise DomainError("two-way margin has empty cells; smooth the table first")
    lt = np.log(t)
    return lt[:-1, :-1] + lt[1:, 1:] - lt[:-1, 1:] - lt[1:, :-1]


def metric_M(theta_hat, theta_true):
    """Mean over variables of ``|sum_c theta~ ln(theta^ / theta~)|``."""
    if len(theta_hat) != len(theta_true):
        raise ParameterError("margin lists differ in length")
    total = 0.0
    for h, t in zip(theta_hat, theta_true):
        h = np.asarray(h, dtype=float)
        t = np.asarray(t, dtype=float)
        if h.shape != t.shape:
            raise ParameterError("margin lengths differ")
        if np.any(h <= 0) or np.any(t <= 0):
            raise DomainError("margins must be strictly positive")
        total += abs(np.sum(t * np.log(h / t)))
    return total / len(theta_hat)


def metric_L(f_hat, f_true, shape):
    """Mean squared LDF error, averaged within and then across variable pairs."""
    pairs = list(combinations(range(shape.p), 2))
    total = 0.0
    for j1, j2 in pairs:
        d = ldf(f_hat, shape, j1, j2) - ldf(f_true, shape, j1, j2)
        total += np.mean(d * d)
    return total / len(pairs)


def metrics(f_hat, f_true, shape):
    th = all_marginals(f_hat, shape)
    tt = all_marginals(f_true, shape)
    return MetricsReport(metric_M(th, tt), metric_L(f_hat, f_true, shape))


def smooth_zero_cells(counts, epsilon=0.1):
    """Normalize ``max(count, epsilon)``."""
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    y = _as_counts(counts).astype(float)
    x = np.where(y > 0, y, epsilon)
    return x / x.sum()


def simulate_dataset(f_true, n, rng):
    """Multinomial(n, f) counts."""
    f = np.asarray(f_true, dtype=float)
    if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ParameterError("f must be a probability vector")
    n = int(n)
    if n < 0:
        raise ParameterError("n must be nonnegative")
    return CountTable(as_generator(rng).multinomial(n, f / f.sum()))


def latent_class_table(shape, rng, n_classes=3, concentration=0.5, dominant=None):
    """Random joint distribution from a latent-class mixture of independence tables.

    Each class has its own one-way margins drawn from ``Dirichlet``;
    ``dominant`` optionally maps a variable index to the probability mass of
    its first level in every class, mimicking survey variables dominated by a
    single category.
    """
    gen = as_generator(rng)
    w = gen.dirichlet(np.full(n_classes, 2.0))
    F = np.zeros(shape.d)
    for k in range(n_classes):
        comp = np.ones(())
        for j, dj in enumerate(shape.d):
            th = gen.dirichlet(np.full(dj, concentration))
            if dominant and j in dominant:
                rest = gen.dirichlet(np.full(dj - 1, concentration))
                th = np.concatenate([[dominant[j]], (1 - dominant[j]) * rest])
            comp = np.multiply.outer(comp, th)
        F += w[k] * comp
    return F.ravel() / F.sum()


def synthetic_truth(shape, rng, n_source=2000, epsilon=0.1, n_classes=3, dominant=None):
    """Truth table built by smoothing a sparse count table.

    Counts of size ``n_source`` are drawn from a latent-class table, zero
    cells get ``epsilon`` fractional counts and the result is normalized.
    By default the last two variables are dominated by their first level
    (about 64% and 92%), as in survey data on worker class and commuting mode.
    """
    gen = as_generator(rng)
    if dominant is None:
        dominant = {shape.p - 2: 0.6375, shape.p - 1: 0.9197} if shape.p >= 4 else {}
    f = latent_class_table(shape, gen, n_classes=n_classes, dominant=dominant)
    y = simulate_dataset(f, n_source, gen)
    return smooth_zero_cells(y, epsilon)


def study_posterior_means(data, shape, theta_true, config, priors=("informative", "noninformative", "msp")):
    """Posterior-mean cell probabilities under the three study priors.

    The informative prior is centred on the I-projection of ``theta_true``
    with total mass ``|C|``; the noninformative prior is symmetric with mass
    ``sqrt(|C|)``; the marginally specified prior keeps the noninformative
    base and replaces its margins by the informative ones,
    ``Dirichlet(|C| theta_true_j)``. The first two are closed-form, the last
    runs :func:`run_ctab_chain` with ``config``.

    Returns
    -------
    dict
        prior name -> (f_hat, acceptance rate or None)
    """
    out = {}
    base = noninformative_prior(shape)
    for name in priors:
        if name == "informative":
            out[name] = (conjugate_posterior_mean(informative_prior(shape, theta_true), data), None)
        elif name == "noninformative":
            out[name] = (conjugate_posterior_mean(base, data), None)
        elif name == "msp":
            p1 = [DirichletParams(shape.size * np.asarray(t, dtype=float)) for t in theta_true]
            ch = run_ctab_chain(data, shape, base, p1_margins=p1, config=config)
            out[name] = (ch.extra["f_samples"].mean(axis=0), ch.acceptance_rate)
        else:
            raise ConfigError(f"unknown prior {name!r}")
    return out
