"""numba kernels for the normal-inverse-Wishart Dirichlet-process mixture.

Component labels are 0-based and contiguous. Chain state lives in
double-buffered arrays whose leading axis selects the current (``c``) or the
proposal (``1 - c``) copy, so a Metropolis step can be rejected without any
allocation.
"""

import math

import numba
import numpy as np

from ._compiled import log_ratio
from .distributions import _nb_beta, _nb_dirichlet, _nb_niw_draw

_LOGPI = math.log(math.pi)

# kernel status codes
OK, NAN_RATIO, ZERO_CURRENT, BAD_VARIANCE = 0, 1, 2, 3


@numba.njit(cache=True)
def posterior_params(nc, sy, syy, mu0, kappa0, S0, nu0, mun, Sn):
    """Fill (mun, Sn) with the NIW posterior; returns (kappa_n, nu_n)."""
    p = mu0.size
    if nc == 0:
        for i in range(p):
            mun[i] = mu0[i]
            for j in range(p):
                Sn[i, j] = S0[i, j]
        return kappa0, nu0
    kn = kappa0 + nc
    for i in range(p):
        mun[i] = (kappa0 * mu0[i] + sy[i]) / kn
    c = kappa0 * nc / kn
    for i in range(p):
        di = sy[i] / nc - mu0[i]
        for j in range(p):
            dj = sy[j] / nc - mu0[j]
            scatter = syy[i, j] - sy[i] * sy[j] / nc
            Sn[i, j] = S0[i, j] + scatter + c * di * dj
    return kn, nu0 + nc


@numba.njit(cache=True)
def predictive_logpdf(yk, nc, sy, syy, mu0, kappa0, S0, nu0):
    """Student-t posterior predictive log-density of one point."""
    p = mu0.size
    mun = np.empty(p)
    Sn = np.empty((p, p))
    kn, nun = posterior_params(nc, sy, syy, mu0, kappa0, S0, nu0, mun, Sn)
    dof = nun - p + 1.0
    fac = (kn + 1.0) / (kn * dof)
    L = np.linalg.cholesky(Sn * fac)
    # forward solve
    z = np.empty(p)
    maha = 0.0
    logdet = 0.0
    for i in range(p):
        s = yk[i] - mun[i]
        for k in range(i):
            s -= L[i, k] * z[k]
        z[i] = s / L[i, i]
        maha += z[i] * z[i]
        logdet += math.log(L[i, i])
    return (
        math.lgamma(0.5 * (dof + p))
        - math.lgamma(0.5 * dof)
        - 0.5 * p * (math.log(dof) + _LOGPI)
        - logdet
        - 0.5 * (dof + p) * math.log1p(maha / dof)
    )


@numba.njit(cache=True)
def assignment_logweights(k, y, g, counts, sy, syy, K, mu0, kappa0, S0, nu0, alpha, flat, logw):
    """Unnormalized log-probabilities of g_k over labels 0..K (K = new).

    The stats must already exclude observation k. Components left empty get
    weight zero.
    """
    yk = y[k]
    for c in range(K):
        if counts[c] == 0:
            logw[c] = -np.inf
        elif flat:
            logw[c] = math.log(counts[c])
        else:
            logw[c] = math.log(counts[c]) + predictive_logpdf(yk, counts[c], sy[c], syy[c], mu0, kappa0, S0, nu0)
    if alpha <= 0.0:
        logw[K] = -np.inf
    elif flat:
        logw[K] = math.log(alpha)
    else:
        logw[K] = math.log(alpha) + predictive_logpdf(yk, 0, sy[K], syy[K], mu0, kappa0, S0, nu0)


@numba.njit(cache=True)
def _move(y, k, c, sign, counts, sy, syy):
    p = y.shape[1]
    counts[c] += sign
    for i in range(p):
        sy[c, i] += sign * y[k, i]
        for j in range(p):
            syy[c, i, j] += sign * y[k, i] * y[k, j]


@numba.njit(cache=True)
def _clear(c, counts, sy, syy):
    counts[c] = 0
    sy[c, :] = 0.0
    syy[c, :, :] = 0.0


@numba.njit(cache=True)
def gibbs_assign(gen, k, y, g, counts, sy, syy, K, mu0, kappa0, S0, nu0, alpha, flat, logw):
    """Resample g_k from its full conditional in place; returns the new K."""
    old = g[k]
    _move(y, k, old, -1, counts, sy, syy)
    _clear(K, counts, sy, syy)
    assignment_logweights(k, y, g, counts, sy, syy, K, mu0, kappa0, S0, nu0, alpha, flat, logw)
    m = -np.inf
    for c in range(K + 1):
        if logw[c] > m:
            m = logw[c]
    tot = 0.0
    for c in range(K + 1):
        logw[c] = math.exp(logw[c] - m)
        tot += logw[c]
    u = gen.random() * tot
    new = K
    acc = 0.0
    for c in range(K + 1):
        acc += logw[c]
        if u < acc:
            new = c
            break
    while logw[new] == 0.0:  # guard against u landing on the total exactly
        new -= 1
    emptied = counts[old] == 0
    if new == K and emptied:
        new = old
    g[k] = new
    _move(y, k, new, 1, counts, sy, syy)
    if new == K:
        K += 1
    if emptied and new != old:
        last = K - 1
        if last != old:
            for i in range(g.size):
                if g[i] == last:
                    g[i] = old
            counts[old] = counts[last]
            sy[old] = sy[last]
            syy[old] = syy[last]
        _clear(last, counts, sy, syy)
        K -= 1
    return K


@numba.njit(cache=True)
def recompute_stats(y, g, counts, sy, syy):
    counts[:] = 0
    sy[:] = 0.0
    syy[:] = 0.0
    for k in range(g.size):
        _move(y, k, g[k], 1, counts, sy, syy)


@numba.njit(cache=True)
def _shuffle(gen, n):
    perm = np.arange(n)
    gen.shuffle(perm)
    return perm


@numba.njit(cache=True)
def q_draw(gen, n, K, counts, sy, syy, mu0, kappa0, S0, nu0, alpha, S, flat, mu_out, sig_out, w_out):
    """Finite-atom draw of the mixing measure Q given a partition.

    Occupied atoms come from the component posteriors (prior when ``flat``)
    with weights gamma * w_k; a Chinese-restaurant partition of the
    residual draws carries the remaining mass 1 - gamma. Returns
    (n_atoms, s, gamma).
    """
    p = mu0.size
    A = 0
    mun = np.empty(p)
    Sn = np.empty((p, p))
    C0 = np.linalg.cholesky(S0)
    if n > 0:
        gam = _nb_beta(gen, float(n), alpha) if alpha > 0.0 else 1.0
        wk = np.empty(K)
        _nb_dirichlet(gen, counts[:K].astype(np.float64), wk)
        for c in range(K):
            if flat:
                _nb_niw_draw(gen, mu0, kappa0, C0, nu0, mu_out[A], sig_out[A])
            else:
                kn, nun = posterior_params(counts[c], sy[c], syy[c], mu0, kappa0, S0, nu0, mun, Sn)
                _nb_niw_draw(gen, mun, kn, np.linalg.cholesky(Sn), nun, mu_out[A], sig_out[A])
            w_out[A] = gam * wk[c]
            A += 1
        if gam >= 1.0:
            return A, 0, gam
        s = gen.binomial(S, 1.0 - gam)
        m = max(s, 1)
    else:
        gam = 0.0
        s = S
        m = S
    # Chinese restaurant process of length m
    sizes = np.zeros(m, dtype=np.int64)
    T = 0
    for i in range(m):
        u = gen.random() * (alpha + i)
        if u < alpha or T == 0:
            sizes[T] = 1
            T += 1
        else:
            u -= alpha
            t = 0
            acc = sizes[0]
            while u >= acc and t < T - 1:
                t += 1
                acc += sizes[t]
            sizes[t] += 1
    rest = 1.0 - gam
    for t in range(T):
        _nb_niw_draw(gen, mu0, kappa0, C0, nu0, mu_out[A], sig_out[A])
        w_out[A] = rest * sizes[t] / m
        A += 1
    return A, s, gam


@numba.njit(cache=True)
def functionals(mu, sig, w, A, theta):
    """theta = (marginal means, marginal variances); False if a variance <= 0."""
    p = mu.shape[1]
    for j in range(p):
        m = 0.0
        for a in range(A):
            m += w[a] * mu[a, j]
        theta[j] = m
    for j in range(p):
        v = 0.0
        for a in range(A):
            d = mu[a, j] - theta[j]
            v += w[a] * (sig[a, j, j] + d * d)
        theta[p + j] = v
        if not v > 0.0:
            return False
    return True


@numba.njit(cache=True)
def prior_theta_draws(gen, size, n, mu0, kappa0, S0, nu0, alpha, S, out):
    """theta draws under the base prior: CRP partition of n, then a flat Q draw."""
    p = mu0.size
    amax = n + max(S, 1)
    mu = np.empty((amax, p))
    sig = np.empty((amax, p, p))
    w = np.empty(amax)
    counts = np.zeros(n + 1, dtype=np.int64)
    dummy1 = np.zeros((n + 1, p))
    dummy2 = np.zeros((n + 1, p, p))
    svals = np.empty(size, dtype=np.int64)
    for r in range(size):
        counts[:] = 0
        K = 0
        for i in range(n):
            u = gen.random() * (alpha + i)
            if u < alpha or K == 0:
                counts[K] = 1
                K += 1
            else:
                u -= alpha
                t = 0
                acc = counts[0]
                while u >= acc and t < K - 1:
                    t += 1
                    acc += counts[t]
                counts[t] += 1
        A, s, gam = q_draw(gen, n, K, counts, dummy1, dummy2, mu0, kappa0, S0, nu0, alpha, S, True, mu, sig, w)
        svals[r] = s
        if not functionals(mu, sig, w, A, out[r]):
            return svals, False
    return svals, True


@numba.njit(cache=True)
def base_sweeps(gen_g, gen_q, n_sweeps, y, g, counts, sy, syy, K, mu0, kappa0, S0, nu0, alpha, S, flat,
                theta_each, mu_a, sig_a, w_a, theta, natoms):
    """Plain Gibbs sweeps; optionally redraw theta after every assignment."""
    n = y.shape[0]
    logw = np.empty(n + 1)
    for _ in range(n_sweeps):
        perm = _shuffle(gen_g, n)
        for k in perm:
            K = gibbs_assign(gen_g, k, y, g, counts, sy, syy, K, mu0, kappa0, S0, nu0, alpha, flat, logw)
            if theta_each:
                A, s, gam = q_draw(gen_q, n, K, counts, sy, syy, mu0, kappa0, S0, nu0, alpha, S, flat, mu_a, sig_a, w_a)
                natoms[0] = A
                if not functionals(mu_a, sig_a, w_a, A, theta):
                    return K, BAD_VARIANCE
        recompute_stats(y, g[:], counts, sy, syy)
    return K, OK


@numba.njit(cache=True)
def msp_sweeps(gen_g, gen_q, gen_u, n_sweeps, y, G, COUNTS, SY, SYY, KK, c, mu0, kappa0, S0, nu0, alpha, S, flat,
               MU, SIG, W, THETA, NATOMS, a_cur, fam, pa, pb, mode, log_mask, xi, linv, winv, sal, scal, data,
               acc_log, acc_pos):
    """MSP-adjusted sweeps on double-buffered state.

    Each proposal resamples g_k from its base full conditional, draws a fresh
    theta given the proposed partition, and accepts with the p1/p0 ratio.
    Returns (c, a_cur, n_accepted, n_proposed, status).
    """
    n = y.shape[0]
    logw = np.empty(n + 1)
    n_acc = 0
    n_prop = 0
    for _ in range(n_sweeps):
        perm = _shuffle(gen_g, n)
        for k in perm:
            d = 1 - c
            Kc = KK[c]
            G[d, :] = G[c, :]
            COUNTS[d, : Kc + 1] = COUNTS[c, : Kc + 1]
            SY[d, : Kc + 1] = SY[c, : Kc + 1]
            SYY[d, : Kc + 1] = SYY[c, : Kc + 1]
            KK[d] = gibbs_assign(gen_g, k, y, G[d], COUNTS[d], SY[d], SYY[d], Kc, mu0, kappa0, S0, nu0, alpha,
                                 flat, logw)
            A, s, gam = q_draw(gen_q, n, KK[d], COUNTS[d], SY[d], SYY[d], mu0, kappa0, S0, nu0, alpha, S, flat,
                               MU[d], SIG[d], W[d])
            NATOMS[d] = A
            if not functionals(MU[d], SIG[d], W[d], A, THETA[d]):
                return c, a_cur, n_acc, n_prop, BAD_VARIANCE
            a_prop = log_ratio(THETA[d], fam, pa, pb, mode, log_mask, xi, linv, winv, sal, scal, data)
            if a_cur == -np.inf:
                return c, a_cur, n_acc, n_prop, ZERO_CURRENT
            if a_prop == -np.inf:
                log_r = -np.inf
            else:
                log_r = a_prop - a_cur
            if math.isnan(log_r):
                return c, a_cur, n_acc, n_prop, NAN_RATIO
            if log_r >= 0.0:
                ok = True
            elif log_r == -np.inf:
                ok = False
            else:
                ok = math.log(gen_u.random()) < log_r
            n_prop += 1
            if acc_pos[0] < acc_log.size:
                acc_log[acc_pos[0]] = ok
                acc_pos[0] += 1
            if ok:
                n_acc += 1
                c = d
                a_cur = a_prop
        recompute_stats(y, G[c], COUNTS[c], SY[c], SYY[c])
    return c, a_cur, n_acc, n_prop, OK
