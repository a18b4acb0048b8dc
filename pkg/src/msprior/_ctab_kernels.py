"""numba kernels for the log-gamma random walk on Dirichlet cell probabilities.

The chain state is ``logZ`` with ``f = Z / sum(Z)``. Caches: ``Z = exp(logZ)``,
``T = sum(Z)`` and the unnormalized margins ``A[j, l]`` (sum of ``Z`` over the
cells whose variable ``j`` is at level ``l``), stored flat with ``offsets``.
"""

import math

import numba
import numpy as np

OK, OVERFLOW, NAN_RATIO = 0, 1, 2
LOGZ_LIMIT = 700.0
REFRESH_EVERY = 10_000
# refresh when a cached sum falls this far below its running max, since the
# incremental updates carry absolute error on the scale of that max
DRIFT_FACTOR = 1e-3


@numba.njit(cache=True)
def refresh(logZ, Z, A, levels, offsets, T):
    """Recompute all caches from logZ; returns T."""
    C, p = levels.shape
    A[:] = 0.0
    tot = 0.0
    for c in range(C):
        z = math.exp(logZ[c])
        Z[c] = z
        tot += z
        for j in range(p):
            A[offsets[j] + levels[c, j]] += z
    return tot


@numba.njit(cache=True)
def choose_subset(gen, perm, m, swaps):
    """Partial Fisher-Yates: perm[:m] becomes a uniform m-subset.

    Swap targets are stored so :func:`undo_subset` can restore perm.
    """
    C = perm.size
    for i in range(m):
        j = gen.integers(i, C)
        swaps[i] = j
        t = perm[i]
        perm[i] = perm[j]
        perm[j] = t


@numba.njit(cache=True)
def undo_subset(perm, m, swaps):
    for i in range(m - 1, -1, -1):
        j = swaps[i]
        t = perm[i]
        perm[i] = perm[j]
        perm[j] = t


@numba.njit(cache=True)
def _exact_sum(Z, cells, newz, m, levels, j, l):
    """Sum of proposed Z over level l of variable j (all cells when j < 0)."""
    tot = 0.0
    for c in range(Z.size):
        if j < 0 or levels[c, j] == l:
            z = Z[c]
            for i in range(m):
                if cells[i] == c:
                    z = newz[i]
            tot += z
    return tot


@numba.njit(cache=True)
def step(gen, logZ, Z, A, T, counts, alpha, n, levels, offsets, m, sd, use_r1, da, da_tot, jac,
         perm, swaps, cells, newlz, newz, dA, peak):
    """One Metropolis iteration. Returns (accepted, T, status)."""
    p = levels.shape[1]
    choose_subset(gen, perm, m, swaps)
    for i in range(m):
        cells[i] = perm[i]
    undo_subset(perm, m, swaps)
    log_r = 0.0
    dT = 0.0
    for i in range(m):
        c = cells[i]
        eps = sd * gen.standard_normal()
        lz = logZ[c] + eps
        newlz[i] = lz
        newz[i] = math.exp(lz)
        # likelihood, gamma prior and Jacobian on the touched cells
        log_r += (counts[c] + alpha[c] - 1.0 + jac) * eps - (newz[i] - Z[c])
        dT += newz[i] - Z[c]
    Tn = T + dT
    cancel = False
    if Tn < 1e-8 * T:
        cancel = True
        Tn = _exact_sum(Z, cells, newz, m, levels, -1, 0)
    log_r -= n * (math.log(Tn) - math.log(T))
    if use_r1:
        dA[:] = 0.0
        for i in range(m):
            c = cells[i]
            dz = newz[i] - Z[c]
            for j in range(p):
                dA[offsets[j] + levels[c, j]] += dz
        for j in range(p):
            for l in range(offsets[j + 1] - offsets[j]):
                k = offsets[j] + l
                if da[k] != 0.0 and dA[k] != 0.0:
                    an = A[k] + dA[k]
                    if an < 1e-8 * A[k]:
                        # cancellation: sum the level exactly
                        cancel = True
                        an = _exact_sum(Z, cells, newz, m, levels, j, l)
                    log_r += da[k] * (math.log(an) - math.log(A[k]))
        log_r -= da_tot * (math.log(Tn) - math.log(T))
    if math.isnan(log_r):
        return False, T, NAN_RATIO
    if log_r >= 0.0:
        ok = True
    else:
        ok = math.log(gen.random()) < log_r
    if not ok:
        return False, T, OK
    for i in range(m):
        c = cells[i]
        if abs(newlz[i]) > LOGZ_LIMIT:
            return False, T, OVERFLOW
        dz = newz[i] - Z[c]
        logZ[c] = newlz[i]
        Z[c] = newz[i]
        for j in range(p):
            k = offsets[j] + levels[c, j]
            A[k] += dz
            if A[k] > peak[k]:
                peak[k] = A[k]
            elif A[k] < DRIFT_FACTOR * peak[k]:
                cancel = True
    K = A.size
    if Tn > peak[K]:
        peak[K] = Tn
    elif Tn < DRIFT_FACTOR * peak[K]:
        cancel = True
    if cancel:
        Tn = refresh(logZ, Z, A, levels, offsets, Tn)
        peak[:K] = A
        peak[K] = Tn
    return True, Tn, OK


@numba.njit(cache=True)
def advance(gen, n_iter, logZ, Z, A, T, counts, alpha, n, levels, offsets, m, sd, use_r1, da, da_tot, jac,
            since_refresh, dec, dec_pos):
    """Run ``n_iter`` iterations.

    Accept decisions are written to ``dec`` from ``dec_pos`` on when ``dec``
    is non-empty. Returns (n_accepted, T, since_refresh, dec_pos, status).
    """
    C = logZ.size
    perm = np.arange(C)
    swaps = np.empty(m, dtype=np.int64)
    cells = np.empty(m, dtype=np.int64)
    newlz = np.empty(m)
    newz = np.empty(m)
    dA = np.empty(A.size)
    # start every block from exact caches so the drift peaks below are valid
    T = refresh(logZ, Z, A, levels, offsets, T)
    peak = np.empty(A.size + 1)
    peak[:A.size] = A
    peak[A.size] = T
    acc = 0
    for _ in range(n_iter):
        ok, T, status = step(gen, logZ, Z, A, T, counts, alpha, n, levels, offsets, m, sd, use_r1, da, da_tot,
                             jac, perm, swaps, cells, newlz, newz, dA, peak)
        if status != OK:
            return acc, T, since_refresh, dec_pos, status
        if dec.size > 0:
            dec[dec_pos] = ok
            dec_pos += 1
        if ok:
            acc += 1
        since_refresh += 1
        if since_refresh >= REFRESH_EVERY:
            T = refresh(logZ, Z, A, levels, offsets, T)
            peak[:A.size] = A
            peak[A.size] = T
            since_refresh = 0
    return acc, T, since_refresh, dec_pos, OK
