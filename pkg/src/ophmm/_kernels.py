"""Compiled recursions.

Dense kernels act on a generic chain (initial law of S_1, transition matrix,
per-step emission log-likelihoods) and serve single-model inference. The
``smc_*`` kernels act on a batch of particles padded to a common maximum size
and iterate only feasible augmented pairs ``(s, k)``.

Forward quantities are kept normalised at every step, emissions are shifted
by their per-step maximum before exponentiation, and the shifts are returned
as log normalisers.
"""

import numba
import numpy as np
from numba import njit, prange

# OpenMP first: the TBB layer warns loudly when the installed TBB is too old.
# Only the search order changes; an explicit NUMBA_THREADING_LAYER still wins.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_CACHE = True


# ---------------------------------------------------------------- dense chain

@njit(cache=_CACHE)
def dense_forward(p1, Tr, le):
    T, n = le.shape
    alpha = np.zeros((T, n))
    log_c = np.zeros(T)
    prev = np.empty(n)
    for t in range(T):
        m = -np.inf
        for j in range(n):
            if le[t, j] > m:
                m = le[t, j]
        if m == -np.inf:
            log_c[t] = -np.inf
            return alpha, log_c
        tot = 0.0
        for j in range(n):
            if t == 0:
                pr = p1[j]
            else:
                pr = 0.0
                for i in range(n):
                    pr += prev[i] * Tr[i, j]
            v = pr * np.exp(le[t, j] - m)
            alpha[t, j] = v
            tot += v
        if tot <= 0.0:
            log_c[t] = -np.inf
            return alpha, log_c
        for j in range(n):
            alpha[t, j] /= tot
            prev[j] = alpha[t, j]
        log_c[t] = np.log(tot) + m
    return alpha, log_c


@njit(cache=_CACHE)
def dense_backward(Tr, le, log_c):
    """Scaled backward values; ``beta[t] * alpha[t]`` is the smoothing law."""
    T, n = le.shape
    beta = np.ones((T, n))
    w = np.empty(n)
    for t in range(T - 2, -1, -1):
        m = -np.inf
        for j in range(n):
            if le[t + 1, j] > m:
                m = le[t + 1, j]
        scale = np.exp(m - log_c[t + 1])
        for j in range(n):
            w[j] = np.exp(le[t + 1, j] - m) * beta[t + 1, j]
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += Tr[i, j] * w[j]
            beta[t, i] = acc * scale
    return beta


@njit(cache=_CACHE)
def _draw(weights, u):
    tot = 0.0
    for i in range(weights.size):
        tot += weights[i]
    target = u * tot
    acc = 0.0
    last = -1
    for i in range(weights.size):
        if weights[i] > 0.0:
            last = i
            acc += weights[i]
            if acc > target:
                return i
    return last


@njit(cache=_CACHE)
def dense_sample_path(alpha, Tr, u):
    T, n = alpha.shape
    path = np.empty(T, dtype=np.int64)
    w = np.empty(n)
    path[T - 1] = _draw(alpha[T - 1], u[T - 1])
    for t in range(T - 2, -1, -1):
        nxt = path[t + 1]
        for i in range(n):
            w[i] = alpha[t, i] * Tr[i, nxt]
        path[t] = _draw(w, u[t])
    return path


@njit(cache=_CACHE)
def dense_viterbi(logp1, logTr, le, order):
    """Max-product path; ties go to the state listed first in ``order``."""
    T, n = le.shape
    delta = np.empty(n)
    new = np.empty(n)
    back = np.zeros((T, n), dtype=np.int64)
    for j in range(n):
        delta[j] = logp1[j] + le[0, j]
    for t in range(1, T):
        for j in range(n):
            best = -np.inf
            arg = order[0]
            for r in range(n):
                i = order[r]
                v = delta[i] + logTr[i, j]
                if v > best:
                    best = v
                    arg = i
            new[j] = best + le[t, j]
            back[t, j] = arg
        for j in range(n):
            delta[j] = new[j]
    path = np.empty(T, dtype=np.int64)
    best = -np.inf
    arg = order[0]
    for r in range(n):
        i = order[r]
        if delta[i] > best:
            best = delta[i]
            arg = i
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


@njit(cache=_CACHE)
def trajectory_scan(alpha, beta, le, log_c, Tr, state_of, logpos_traj):
    """log p(X_{t..t+a-1} = template | y_{1:T}) for every offset t.

    ``logpos_traj`` is ``(a, n)``: log p(x_u | chain state j) for the template.
    """
    T, n = alpha.shape
    a = logpos_traj.shape[0]
    nt = T - a + 1
    out = np.empty(nt)
    acc = np.empty(n)
    nxt = np.empty(n)
    for t in range(nt):
        log_scale = 0.0
        tot = 0.0
        for j in range(n):
            v = alpha[t, j] * np.exp(logpos_traj[0, j])
            acc[j] = v
            tot += v
        for u in range(1, a):
            if tot <= 0.0:
                break
            for j in range(n):
                acc[j] /= tot
            log_scale += np.log(tot)
            tt = t + u
            m = -np.inf
            for j in range(n):
                if le[tt, j] > m:
                    m = le[tt, j]
            tot = 0.0
            for j in range(n):
                pr = 0.0
                for i in range(n):
                    pr += acc[i] * Tr[i, j]
                v = pr * np.exp(le[tt, j] - m + logpos_traj[u, j])
                nxt[j] = v
                tot += v
            log_scale += m - log_c[tt]
            for j in range(n):
                acc[j] = nxt[j]
        if tot <= 0.0:
            out[t] = -np.inf
            continue
        fin = 0.0
        for j in range(n):
            fin += acc[j] * beta[t + a - 1, j]
        out[t] = log_scale + np.log(fin) if fin > 0.0 else -np.inf
    return out


# ------------------------------------------------------ structured, batched

@njit(cache=_CACHE)
def _emission(y, logfact, x, loglam, musum, logpos, kap, e_out):
    """Fill ``e_out[:kap]`` with emission log-likelihoods; returns their max."""
    C = y.size
    m = -np.inf
    for s in range(kap):
        v = -musum[s] - logfact
        for n in range(C):
            if y[n] > 0:
                v += y[n] * loglam[s, n]
        if x >= 0:
            v += logpos[s, x]
        e_out[s] = v
        if v > m:
            m = v
    return m


@njit(cache=_CACHE)
def _struct_step(prev, P, tail, kap, e, out):
    """One augmented-chain forward step into ``out``; returns the unnormalised total."""
    tot = 0.0
    for k in range(kap):
        base = k * (k + 1) // 2
        for s in range(k + 1):
            acc = 0.0
            for sp in range(k + 1):
                acc += prev[base + sp] * P[sp, s]
            if s == k and k > 0:
                bprev = (k - 1) * k // 2
                for sp in range(k):
                    acc += prev[bprev + sp] * tail[sp, k - 1]
            v = acc * e[s]
            out[base + s] = v
            tot += v
    return tot


@njit(parallel=True, cache=_CACHE)
def smc_weight_step(alpha, P, tail, kappa, loglam, musum, logpos, y, logfact, x):
    """Advance every particle's normalised forward vector by one bin.

    Returns the incremental log-likelihoods; ``-inf`` marks impossible data.
    """
    H = alpha.shape[0]
    K = P.shape[1]
    inc = np.empty(H)
    for h in prange(H):
        kap = kappa[h]
        e = np.empty(K)
        m = _emission(y, logfact, x, loglam[h], musum[h], logpos[h], kap, e)
        if m == -np.inf:
            inc[h] = -np.inf
            continue
        for s in range(kap):
            e[s] = np.exp(e[s] - m)
        out = np.zeros(alpha.shape[1])
        tot = _struct_step(alpha[h], P[h], tail[h], kap, e, out)
        if tot <= 0.0:
            inc[h] = -np.inf
            continue
        n = kap * (kap + 1) // 2
        for j in range(n):
            alpha[h, j] = out[j] / tot
        inc[h] = np.log(tot) + m
    return inc


@njit(cache=_CACHE)
def _pred_weight(alpha_row, P, tail, sp_k, s, k, w):
    """Weights of predecessors of ``(s, k)``; layout: (s', k) then (s', k-1)."""
    base = k * (k + 1) // 2
    for sp in range(k + 1):
        w[sp] = alpha_row[base + sp] * P[sp, s]
    nw = k + 1
    if s == k and k > 0:
        bprev = (k - 1) * k // 2
        for sp in range(k):
            w[nw + sp] = alpha_row[bprev + sp] * tail[sp, k - 1]
        nw += k
    return nw


@njit(parallel=True, cache=_CACHE)
def smc_move_stats(P, tail, kappa, loglam, musum, logpos, Y, logfact, X, U, M):
    """Sample each particle's augmented path given data ``Y[:t]`` and tally statistics.

    Returns transition counts A, first-arrival indicators B, visit counts,
    spike sums, per-state position histograms and the final K_t.
    """
    H, K = kappa.shape[0], P.shape[1]
    t, C = Y.shape
    A = np.zeros((H, K, K))
    B = np.zeros((H, K, K))
    cnt = np.zeros((H, K))
    ssum = np.zeros((H, K, C))
    phist = np.zeros((H, K, M))
    kfin = np.zeros(H, dtype=np.int64)
    for h in prange(H):
        kap = kappa[h]
        n = kap * (kap + 1) // 2
        hist = np.zeros((t, n))
        prev = np.zeros(n)
        prev[0] = 1.0
        e = np.empty(K)
        out = np.zeros(n)
        for u in range(t):
            m = _emission(Y[u], logfact[u], X[u], loglam[h], musum[h], logpos[h], kap, e)
            for s in range(kap):
                e[s] = np.exp(e[s] - m)
            tot = _struct_step(prev, P[h], tail[h], kap, e, out)
            for j in range(n):
                prev[j] = out[j] / tot
                hist[u, j] = prev[j]
        # backward sampling: states s[u], k[u] for bins u = 0..t-1 (time u + 1)
        ss = np.empty(t, dtype=np.int64)
        kk = np.empty(t, dtype=np.int64)
        j = _draw(hist[t - 1], U[h, t - 1])
        # decode flat index
        k = 0
        while (k + 1) * (k + 2) // 2 <= j:
            k += 1
        ss[t - 1] = j - k * (k + 1) // 2
        kk[t - 1] = k
        w = np.empty(2 * K)
        for u in range(t - 2, -1, -1):
            s1, k1 = ss[u + 1], kk[u + 1]
            nw = _pred_weight(hist[u], P[h], tail[h], 0, s1, k1, w)
            r = _draw(w[:nw], U[h, u])
            if r <= k1:
                ss[u] = r
                kk[u] = k1
            else:
                ss[u] = r - (k1 + 1)
                kk[u] = k1 - 1
        sp, kp = 0, 0
        for u in range(t):
            s, k = ss[u], kk[u]
            A[h, sp, s] += 1.0
            if k > kp:
                B[h, sp, s] = 1.0
            cnt[h, s] += 1.0
            for c in range(C):
                ssum[h, s, c] += Y[u, c]
            if X[u] >= 0:
                phist[h, s, X[u]] += 1.0
            sp, kp = s, k
        kfin[h] = kk[t - 1]
    return A, B, cnt, ssum, phist, kfin


@njit(parallel=True, cache=_CACHE)
def smc_refilter(alpha, P, tail, kappa, loglam, musum, logpos, Y, logfact, X):
    """Recompute forward vectors from scratch over ``Y[:t]``; returns total log-likelihoods."""
    H, K = kappa.shape[0], P.shape[1]
    t = Y.shape[0]
    ll = np.zeros(H)
    for h in prange(H):
        kap = kappa[h]
        n = kap * (kap + 1) // 2
        prev = np.zeros(n)
        prev[0] = 1.0
        e = np.empty(K)
        out = np.zeros(n)
        tot_ll = 0.0
        for u in range(t):
            m = _emission(Y[u], logfact[u], X[u], loglam[h], musum[h], logpos[h], kap, e)
            if m == -np.inf:
                tot_ll = -np.inf
                break
            for s in range(kap):
                e[s] = np.exp(e[s] - m)
            tot = _struct_step(prev, P[h], tail[h], kap, e, out)
            if tot <= 0.0:
                tot_ll = -np.inf
                break
            for j in range(n):
                prev[j] = out[j] / tot
            tot_ll += np.log(tot) + m
        for j in range(alpha.shape[1]):
            alpha[h, j] = prev[j] if j < n else 0.0
        ll[h] = tot_ll
    return ll


@njit(cache=_CACHE)
def xi_log_lik(F, hist, prec):
    """For every candidate mode x: sum_u log p(x_u | xi = x, Sigma), normaliser included.

    ``hist`` counts visits of each label; ``prec`` is the 2x2 precision matrix.
    """
    M = F.shape[0]
    out = np.zeros(M)
    q = np.empty(M)
    a, b, d = prec[0, 0], prec[0, 1], prec[1, 1]
    tot = 0.0
    for v in range(M):
        tot += hist[v]
    for x in range(M):
        mx = -np.inf
        for v in range(M):
            f0 = F[x, v, 0]
            f1 = F[x, v, 1]
            q[v] = -0.5 * (a * f0 * f0 + 2.0 * b * f0 * f1 + d * f1 * f1)
            if q[v] > mx:
                mx = q[v]
        z = 0.0
        for v in range(M):
            z += np.exp(q[v] - mx)
        logz = mx + np.log(z)
        acc = 0.0
        for v in range(M):
            if hist[v] > 0:
                acc += hist[v] * q[v]
        out[x] = acc - tot * logz
    return out
