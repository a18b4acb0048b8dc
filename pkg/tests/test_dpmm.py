import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from msprior.core import ChainConfig, MarginalTargetPrior, estimate_induced_marginal
from msprior.distributions import NiwParams, RandomSource, logpdf_mvn, logpdf_mvt, niw_posterior, niw_predictive
from msprior.dpmm import (
    Dataset,
    DpmmState,
    NiwHyper,
    QDraw,
    assignment_full_conditional,
    count_modes,
    fit_product_target,
    functionals_from_q,
    gibbs_sweep,
    informative_hyperparameters,
    initial_state,
    marginal_predictive_density,
    msp_sweep,
    noninformative_hyperparameters,
    posterior_predictive_density,
    prior_theta_sampler,
    priors_from_prior_sample,
    run_dpmm_chain,
    sample_q_given_partition,
    yamato_mean_prior,
)
from msprior.errors import ConfigError, InvariantError, NumericError, ParameterError
from msprior.io import load_old_faithful
from msprior.skewt import SkewT


def unit_hyper(alpha=1.0, p=1):
    return NiwHyper(NiwParams(np.zeros(p), 0.5, np.eye(p), p + 3.0), alpha)


def small_data(n=10, p=1, seed=0):
    return np.random.default_rng(seed).normal(size=(n, p))


# hyperparameters --------------------------------------------------------

def test_informative_settings_prior_sample_scenario():
    R = np.array([[1.0, 0.9], [0.9, 1.0]])
    h = informative_hyperparameters([3.07, 71.3], [1.3, 180.0], 30, 1.0, R)
    assert h.niw.kappa0 == 15
    assert h.niw.nu0 == 30
    np.testing.assert_allclose(h.niw.mu0, [3.07, 71.3])
    V0 = R * np.sqrt(np.outer([1.3, 180.0], [1.3, 180.0]))
    np.testing.assert_allclose(h.niw.S0, 30 * V0, rtol=1e-14)


def test_informative_alpha_zero_gives_kappa_n0():
    assert informative_hyperparameters([0.0], [1.0], 20, 0.0, [[1.0]]).niw.kappa0 == 20


def test_informative_needs_nu_above_p_plus_one():
    with pytest.raises(ConfigError):
        informative_hyperparameters([0.0, 0.0], [1.0, 1.0], 3, 1.0, np.eye(2))


def test_informative_rejects_bad_correlation():
    with pytest.raises(ParameterError):
        informative_hyperparameters([0.0, 0.0], [1.0, 1.0], 30, 1.0, [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ParameterError):
        informative_hyperparameters([0.0], [-1.0], 30, 1.0, [[1.0]])


def test_informative_prior_mean_functional_centered():
    h = informative_hyperparameters([0.0], [1.0], 20, 1.0, [[1.0]])
    th = prior_theta_sampler(h, 20, 1000)(RandomSource(21), 10_000)
    m = th[:, 0]
    assert abs(m.mean()) < 3 * m.std(ddof=1) / math.sqrt(m.size)


def test_noninformative_settings():
    y = small_data(40, 2)
    h = noninformative_hyperparameters(y)
    assert h.niw.nu0 == 4 and h.niw.kappa0 == 0.1
    np.testing.assert_allclose(h.niw.mu0, y.mean(0))
    np.testing.assert_allclose(h.niw.S0, np.cov(y, rowvar=False))


def test_noninformative_singular_covariance():
    y = np.tile([[1.0, 2.0]], (5, 1))
    with pytest.raises(ParameterError, match="jitter"):
        noninformative_hyperparameters(y)


def test_noninformative_standardized_data():
    y = small_data(50, 3, seed=1) @ np.array([[1, 0.5, 0], [0, 1, 0.3], [0, 0, 2.0]])
    z = (y - y.mean(0)) / y.std(0, ddof=1)
    h = noninformative_hyperparameters(z)
    np.testing.assert_allclose(h.niw.mu0, 0.0, atol=1e-12)
    np.testing.assert_allclose(h.niw.S0, np.corrcoef(z, rowvar=False), atol=1e-12)


def test_dataset_validation():
    with pytest.raises(ParameterError):
        Dataset([[1.0, np.nan]])
    with pytest.raises(ParameterError):
        Dataset(np.zeros((0, 2)))
    assert Dataset([1.0, 2.0, 3.0]).p == 1


# full conditional -------------------------------------------------------

def test_full_conditional_single_point_is_new():
    y = np.array([[0.3]])
    labels, probs = assignment_full_conditional(initial_state(y), 0, y, unit_hyper())
    np.testing.assert_array_equal(labels, [-1])
    np.testing.assert_array_equal(probs, [1.0])


def test_full_conditional_separated_clusters():
    rng = np.random.default_rng(2)
    y = np.vstack([rng.normal(0, 0.01, size=(5, 2)), rng.normal(1.0, 0.01, size=(5, 2))])
    g = np.repeat([0, 1], 5)
    hyper = NiwHyper(NiwParams([0.5, 0.5], 0.01, 1e-4 * np.eye(2), 4.0), 1.0)
    state = DpmmState(g, y)
    labels, probs = assignment_full_conditional(state, 0, y, hyper)
    # direct computation of the collapsed weights
    logw = []
    for c in (0, 1):
        idx = np.flatnonzero((g == c) & (np.arange(10) != 0))
        post = niw_posterior(hyper.niw, idx.size, y[idx].sum(0), y[idx].T @ y[idx])
        logw.append(math.log(idx.size) + logpdf_mvt(*niw_predictive(post), y[0]))
    logw.append(math.log(hyper.alpha) + logpdf_mvt(*niw_predictive(hyper.niw), y[0]))
    ref = np.exp(np.array(logw) - max(logw))
    np.testing.assert_allclose(probs, ref / ref.sum(), rtol=1e-9, atol=1e-300)
    assert probs[list(labels).index(0)] > 0.99


def test_full_conditional_tiny_alpha():
    y = small_data(10)
    state = DpmmState(np.zeros(10, dtype=int), y)
    labels, probs = assignment_full_conditional(state, 3, y, unit_hyper(alpha=1e-8))
    assert probs[labels == -1][0] < 1e-6
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_full_conditional_drops_emptied_component():
    y = small_data(4)
    state = DpmmState([0, 1, 1, 2], y)
    labels, probs = assignment_full_conditional(state, 0, y, unit_hyper())
    np.testing.assert_array_equal(labels, [1, 2, -1])


@settings(max_examples=20, deadline=None)
@given(st.permutations([0, 1, 2]), st.integers(0, 7))
def test_full_conditional_label_exchangeable(perm, k):
    y = small_data(8, 2, seed=3)
    g = np.array([0, 0, 1, 1, 1, 2, 2, 0])
    hyper = unit_hyper(p=2)
    la, pa = assignment_full_conditional(DpmmState(g, y), k, y, hyper)
    gb = np.asarray(perm)[g]
    lb, pb = assignment_full_conditional(DpmmState(gb, y), k, y, hyper)
    mapped = {perm[a]: p for a, p in zip(la, pa) if a >= 0}
    for b, p in zip(lb, pb):
        assert p == (mapped[b] if b >= 0 else pa[-1])


def test_full_conditional_bad_index():
    y = small_data(3)
    with pytest.raises(ParameterError):
        assignment_full_conditional(initial_state(y), 3, y, unit_hyper())


def test_state_rejects_gapped_labels():
    with pytest.raises(InvariantError):
        DpmmState([0, 2, 2], small_data(3))


# Q draws ----------------------------------------------------------------

def test_q_draw_residual_count_mean():
    y = small_data(30)
    state = DpmmState(np.arange(30) % 3, y)
    gen = np.random.default_rng(4)
    s = np.array([sample_q_given_partition(state, y, unit_hyper(), 1000, gen).s for _ in range(3000)])
    assert abs(s.mean() - 1000 / 31) < 3 * s.std(ddof=1) / math.sqrt(s.size)


def test_q_draw_weights_and_blocks():
    y = small_data(12, 2)
    state = DpmmState(np.arange(12) % 4, y)
    gen = np.random.default_rng(5)
    for _ in range(50):
        q = sample_q_given_partition(state, y, unit_hyper(p=2), 200, gen)
        assert isinstance(q, QDraw)
        assert q.weight.sum() == pytest.approx(1.0, abs=1e-12)
        assert q.weight[: q.n_occupied].sum() == pytest.approx(q.gamma, abs=1e-12)
        assert q.n_occupied == 4 and 0 < q.gamma < 1
        assert np.all(q.weight > 0)
        for s in q.sigma:
            np.linalg.cholesky(s)


def test_q_draw_tiny_alpha_keeps_all_mass():
    y = small_data(10)
    q = sample_q_given_partition(DpmmState(np.zeros(10, dtype=int), y), y, unit_hyper(alpha=1e-8), 1000,
                                 np.random.default_rng(6))
    assert q.gamma > 1 - 1e-6
    assert q.weight[q.n_occupied:].sum() < 1e-6


def test_q_draw_single_component_weight():
    y = small_data(10)
    q = sample_q_given_partition(initial_state(y), y, unit_hyper(), 1000, np.random.default_rng(7))
    # Dirichlet with one category: the occupied atom carries exactly gamma
    assert q.weight[0] == q.gamma


def test_q_draw_rejects_bad_S():
    y = small_data(3)
    with pytest.raises(ParameterError):
        sample_q_given_partition(initial_state(y), y, unit_hyper(), 0)


# functionals ------------------------------------------------------------

def test_functionals_single_atom():
    mu = np.array([[1.0, -2.0]])
    sig = np.array([[[2.0, 0.3], [0.3, 0.5]]])
    th = functionals_from_q(QDraw(mu, sig, np.array([1.0]), 1.0, 1, 0))
    np.testing.assert_allclose(th, [1.0, -2.0, 2.0, 0.5], atol=1e-15)


def test_functionals_two_point():
    q = QDraw(np.array([[-1.0], [1.0]]), np.zeros((2, 1, 1)), np.array([0.5, 0.5]), 1.0, 2, 0)
    # zero-variance atoms give m = 0, v = 1
    np.testing.assert_allclose(functionals_from_q(q), [0.0, 1.0], atol=1e-15)


def test_functionals_monte_carlo_three_atoms():
    rng = np.random.default_rng(8)
    mu = np.array([[0.0, 1.0], [2.0, -1.0], [-1.5, 0.5]])
    sig = np.array([[[1.0, 0.2], [0.2, 0.5]], [[0.3, 0.0], [0.0, 2.0]], [[0.7, -0.1], [-0.1, 0.4]]])
    w = np.array([0.5, 0.3, 0.2])
    th = functionals_from_q(QDraw(mu, sig, w, 1.0, 3, 0))
    n = 1_000_000
    comp = rng.choice(3, size=n, p=w)
    L = np.linalg.cholesky(sig)
    y = mu[comp] + np.einsum("nij,nj->ni", L[comp], rng.standard_normal((n, 2)))
    m, v = y.mean(0), y.var(0)
    se_m = np.sqrt(v / n)
    se_v = np.sqrt((((y - m) ** 4).mean(0) - v * v) / n)
    assert np.all(np.abs(th[:2] - m) < 3 * se_m)
    assert np.all(np.abs(th[2:] - v) < 3 * se_v)


def test_functionals_deterministic_and_guard():
    q = QDraw(np.array([[0.0], [1.0]]), np.ones((2, 1, 1)), np.array([0.4, 0.6]), 1.0, 2, 0)
    np.testing.assert_array_equal(functionals_from_q(q), functionals_from_q(q))
    bad = QDraw(np.array([[0.0]]), np.zeros((1, 1, 1)), np.array([1.0]), 1.0, 1, 0)
    with pytest.raises(NumericError):
        functionals_from_q(bad)


# sweeps and chains ------------------------------------------------------

def test_gibbs_sweeps_keep_statistics_consistent():
    y = small_data(15, 2, seed=9)
    state = initial_state(y)
    src = RandomSource(9)
    for i in range(20):
        state = gibbs_sweep(state, y, unit_hyper(p=2), src.child(i))
        state.check(y)
    assert state.counts[: state.K].sum() == 15


def test_msp_sweep_needs_theta():
    y = small_data(3)
    p1 = _p1_normal_ig()
    with pytest.raises(ParameterError):
        msp_sweep(initial_state(y), y, unit_hyper(), p1, p1)


def _p1_normal_ig(mean=0.0, sd=1.0, shape=3.0, scale=2.0):
    return MarginalTargetPrior([
        {"family": "normal", "coords": [0], "params": {"mean": [mean], "sd": [sd]}},
        {"family": "inverse-gamma", "coords": [1], "params": {"shape": [shape], "scale": [scale]}},
    ])


def test_msp_sweep_identity_equals_base_sweep():
    y = small_data(10)
    hyper = unit_hyper()
    p1 = _p1_normal_ig()
    base = run_dpmm_chain(y, "noninformative", ChainConfig(1, burn_in=0, seed=3), hyper=hyper,
                          theta_each_step=True)
    ident = run_dpmm_chain(y, "msp", ChainConfig(1, burn_in=0, seed=3), hyper=hyper, p1=p1, p0=p1,
                           record_decisions=True)
    assert ident.extra["accept_log"].all()
    np.testing.assert_array_equal(base.states[0]["g"], ident.states[0]["g"])
    np.testing.assert_array_equal(base.theta_samples, ident.theta_samples)

    state = initial_state(y)
    state.theta = np.array([0.0, 1.0])
    new, acc = msp_sweep(state, y, hyper, p1, p1, rng=RandomSource(4))
    assert acc == 10
    new.check(y)


def test_msp_sweep_spike_rejects():
    y = small_data(20)
    hyper = unit_hyper()
    p0 = estimate_induced_marginal(prior_theta_sampler(hyper, 20, 1000), 2000, rng=RandomSource(10), log_coords=[1])
    spike = _p1_normal_ig(mean=30.0, sd=1e-3)
    state = initial_state(y)
    state.theta = functionals_from_q(sample_q_given_partition(state, y, hyper, rng=np.random.default_rng(10)))
    src = RandomSource(11)
    acc = 0
    for i in range(100):
        state, a = msp_sweep(state, y, hyper, spike, p0, rng=src.child(i))
        acc += a
    state.check(y)
    assert acc / 2000 < 0.01


def test_msp_flat_likelihood_recovers_p1():
    y = np.array([[-1.0], [0.3], [0.5], [1.2], [2.0]])
    hyper = NiwHyper(NiwParams([0.0], 0.5, [[1.0]], 4.0), 1.0)
    p1 = _p1_normal_ig(mean=0.3, sd=0.5, shape=6.0, scale=4.0)
    out = run_dpmm_chain(y, "msp", ChainConfig(40_000, thin=10, burn_in=0, seed=2), hyper=hyper, p1=p1, flat=True)
    assert np.all(out.ess >= 2000)
    ref = p1.sample(RandomSource(12), 100_000)
    for j in range(2):
        assert stats.ks_2samp(out.theta_samples[:, j], ref[:, j]).statistic <= 0.05


def test_chain_lengths_and_guards():
    y = small_data(8)
    out = run_dpmm_chain(y, "noninformative", ChainConfig(25_000, thin=10, burn_in=0, seed=1), S=100)
    assert out.theta_samples.shape == (2500, 2)
    assert len(out.states) == 2500
    with pytest.raises(ConfigError):
        ChainConfig(100, burn_in=100)
    with pytest.raises(ConfigError):
        run_dpmm_chain(y, "informative", ChainConfig(10))
    with pytest.raises(ConfigError):
        run_dpmm_chain(y, "msp", ChainConfig(10))
    with pytest.raises(ConfigError):
        run_dpmm_chain(y, "bogus", ChainConfig(10))


def test_chain_deterministic():
    y = small_data(10, 2)
    cfg = ChainConfig(300, thin=3, seed=17)
    a = run_dpmm_chain(y, "noninformative", cfg)
    b = run_dpmm_chain(y, "noninformative", cfg)
    assert a.theta_samples.tobytes() == b.theta_samples.tobytes()
    c = run_dpmm_chain(y, "noninformative", ChainConfig(300, thin=3, seed=18))
    assert not np.array_equal(a.theta_samples, c.theta_samples)


def test_single_component_forced_conjugate_moments():
    # alpha = 0 keeps every observation in one component, so the saved atom
    # is an exact draw from the NIW posterior
    y = small_data(12, 2, seed=13)
    hyper = NiwHyper(NiwParams([0.5, -0.5], 1.0, np.array([[1.0, 0.2], [0.2, 2.0]]), 6.0), 0.0)
    out = run_dpmm_chain(y, "informative", ChainConfig(4000, burn_in=0, seed=13), hyper=hyper)
    assert all(r["g"].max() == 0 and r["weight"].size == 1 for r in out.states)
    mu = np.array([r["mu"][0] for r in out.states])
    sig = np.array([r["sigma"][0] for r in out.states]).reshape(-1, 4)
    post = niw_posterior(hyper.niw, 12, y.sum(0), y.T @ y)
    Esig = post.S0 / (post.nu0 - 3)
    n = mu.shape[0]
    assert np.all(np.abs(mu.mean(0) - post.mu0) < 3 * mu.std(0) / math.sqrt(n))
    assert np.all(np.abs(sig.mean(0) - Esig.ravel()) < 3 * sig.std(0) / math.sqrt(n))


# predictive -------------------------------------------------------------

def test_predictive_single_atom_exact():
    rec = {"mu": np.array([[1.0, 2.0]]), "sigma": np.array([[[1.0, 0.3], [0.3, 0.8]]]), "weight": np.array([1.0])}
    grid = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
    ref = np.exp(logpdf_mvn(rec["mu"][0], rec["sigma"][0], grid))
    np.testing.assert_array_equal(posterior_predictive_density([rec], grid), ref)


def test_predictive_empty_grid():
    rec = {"mu": np.zeros((1, 1)), "sigma": np.ones((1, 1, 1)), "weight": np.ones(1)}
    assert posterior_predictive_density([rec], []).size == 0


def test_predictive_symmetric_two_atoms():
    rec = {"mu": np.array([[-1.0, 0.0], [1.0, 0.0]]), "sigma": np.array([np.eye(2), np.eye(2)]),
           "weight": np.array([0.5, 0.5])}
    x = np.linspace(0.1, 3.0, 15)
    left = posterior_predictive_density([rec], np.column_stack([-x, 0.4 * x]))
    right = posterior_predictive_density([rec], np.column_stack([x, 0.4 * x]))
    np.testing.assert_allclose(left, right, rtol=0, atol=1e-10)


def test_predictive_integrates_to_one():
    y = small_data(20, 2, seed=14)
    out = run_dpmm_chain(y, "noninformative", ChainConfig(200, thin=20, seed=14), S=100)
    g1 = np.linspace(-12, 12, 161)
    X, Y = np.meshgrid(g1, g1, indexing="ij")
    dens = posterior_predictive_density(out, np.column_stack([X.ravel(), Y.ravel()]))
    h = g1[1] - g1[0]
    assert dens.sum() * h * h == pytest.approx(1.0, rel=0.02)
    marg = marginal_predictive_density(out, g1, 0)
    assert marg.sum() * h == pytest.approx(1.0, rel=0.02)


def test_predictive_needs_records():
    with pytest.raises(ParameterError):
        posterior_predictive_density([], [[0.0]])


# Yamato approximation ---------------------------------------------------

def test_yamato_formula():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(yamato_mean_prior([0, 0], cov, 0.0)[1], cov)
    np.testing.assert_array_equal(yamato_mean_prior([0, 0], cov, 1.0)[1], cov / 2)
    with pytest.raises(ParameterError):
        yamato_mean_prior([0, 0], [[1, 2], [2, 1]], 1.0)


def test_yamato_stick_breaking_simulation():
    rng = np.random.default_rng(15)
    mu0 = np.array([1.0, -1.0])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    n, trunc = 10_000, 80
    v = rng.beta(1.0, 1.0, size=(n, trunc))
    w = v * np.cumprod(np.column_stack([np.ones(n), 1 - v[:, :-1]]), axis=1)
    w[:, -1] += 1 - w.sum(1)
    atoms = mu0 + rng.standard_normal((n, trunc, 2)) @ np.linalg.cholesky(cov).T
    means = np.einsum("nk,nkj->nj", w, atoms)
    _, target = yamato_mean_prior(mu0, cov, 1.0)
    emp = np.cov(means, rowvar=False)
    scale = np.sqrt(np.outer(np.diag(target), np.diag(target)))
    assert np.all(np.abs(emp - target) <= 0.1 * scale)


# prior construction -----------------------------------------------------

def test_fit_product_target_recovers_inverse_gamma():
    rng = np.random.default_rng(16)
    draws = np.column_stack([rng.normal(2.0, 0.5, 20_000), stats.invgamma(8.0, scale=3.0).rvs(20_000, random_state=rng)])
    p1 = fit_product_target(draws, 1)
    f = p1.factors[1].params
    assert f["shape"][0] == pytest.approx(8.0, rel=0.05)
    assert f["scale"][0] == pytest.approx(3.0, rel=0.05)
    assert p1.factors[0].params["mean"][0] == pytest.approx(2.0, abs=0.02)


def test_priors_from_prior_sample():
    y = small_data(60, 2, seed=17) + [3.0, 70.0]
    pri = priors_from_prior_sample(y[:30], y[30:], n_draws=500, rng=RandomSource(17))
    assert pri["n0"] == 30
    assert pri["informative"].niw.kappa0 == 15
    assert pri["noninformative"].niw.nu0 == 4
    assert np.isfinite(pri["p1"].logpdf(np.array([3.0, 70.0, 1.0, 1.0])))


def test_count_modes():
    x = np.linspace(-5, 5, 401)
    assert count_modes(stats.norm.pdf(x)) == 1
    assert count_modes(0.5 * stats.norm.pdf(x, -2, 0.5) + 0.5 * stats.norm.pdf(x, 2, 0.5)) == 2
    assert count_modes(stats.norm.pdf(x, 6, 1)) == 1
    # a negligible bump is ignored
    assert count_modes(stats.norm.pdf(x) + 1e-6 * stats.norm.pdf(x, 4, 0.05)) == 1


# induced p0 for the noninformative base --------------------------------

@pytest.fixture(scope="module")
def faithful_p0():
    data = load_old_faithful()
    hyper = noninformative_hyperparameters(data)
    sampler = prior_theta_sampler(hyper, data.n)
    est = estimate_induced_marginal(sampler, 10_000, rng=RandomSource(18), log_coords=[2, 3], holdout=2000)
    held = sampler(RandomSource(19), 10_000)
    return est, held


@pytest.mark.slow
def test_skew_t_p0_holdout_log_score_beats_gaussian(faithful_p0):
    est, held = faithful_p0
    x = held.copy()
    x[:, 2:] = np.log(x[:, 2:])
    st_score = np.mean(est.logpdf(held))
    jac = -x[:, 2:].sum(1)
    gauss = stats.multivariate_normal(x.mean(0), np.cov(x, rowvar=False)).logpdf(x) + jac
    assert np.isfinite(est.diagnostics["holdout_mean_log_score"])
    assert st_score > np.mean(gauss)


@pytest.mark.slow
def test_skew_t_p0_median_log_variance(faithful_p0):
    est, held = faithful_p0
    draws = SkewT.from_dict(est.params).sample(np.random.default_rng(20), 100_000)
    for j in (2, 3):
        assert abs(np.median(draws[:, j]) - np.median(np.log(held[:, j]))) < 0.1


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="a single skew-t under-represents the heavy log-variance tails of the "
                                       "induced prior; the 1%/99% quantiles miss by more than 0.1")
def test_skew_t_p0_tail_quantiles_log_variance(faithful_p0):
    est, held = faithful_p0
    draws = SkewT.from_dict(est.params).sample(np.random.default_rng(20), 100_000)
    for j in (2, 3):
        q_fit = np.quantile(draws[:, j], [0.01, 0.5, 0.99])
        q_held = np.quantile(np.log(held[:, j]), [0.01, 0.5, 0.99])
        assert np.all(np.abs(q_fit - q_held) < 0.1)
