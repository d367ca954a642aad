"""Priors, sufficient statistics and full-conditional samplers.

All samplers take an explicit ``numpy.random.Generator``. The array-level
helpers (``sweep_arrays`` and friends) are shared with the particle fitter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError
from .ingest import SpatialGrid
from .model import Hyperparams, ModelParams

__all__ = [
    "SufficientStats",
    "sample_prior",
    "prior_arrays",
    "update_stats",
    "stats_from_path",
    "sample_lambda",
    "sample_lambdas",
    "mean_minimiser",
    "scatter_matrix",
    "sample_xi",
    "sample_sigma",
    "update_sigmas",
    "sample_invwishart",
    "gd_beta_parameters",
    "sample_transition_row",
    "sample_transition_rows",
    "gibbs_sweep",
    "sweep_arrays",
]


@dataclass
class SufficientStats:
    """Counts accumulated along a hidden path.

    Attributes
    ----------
    A : ndarray
        ``(kappa, kappa)`` transition counts.
    B : ndarray
        ``(kappa, kappa)`` first-arrival indicators: ``B[i, j] = 1`` iff state
        ``j`` first appears immediately after ``i``.
    c : ndarray
        Visits per state (bins 1..t).
    spike_sums : ndarray
        ``(kappa, C)`` spike totals per state.
    pos_hist : ndarray
        ``(kappa, M)`` visits of each label per state. The scatter matrix and
        mean minimiser are derived from it.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    spike_sums: np.ndarray
    pos_hist: np.ndarray

    @classmethod
    def empty(cls, kappa: int, C: int, M: int) -> "SufficientStats":
        return cls(np.zeros((kappa, kappa)), np.zeros((kappa, kappa)), np.zeros(kappa),
                   np.zeros((kappa, C)), np.zeros((kappa, M)))

    @property
    def kappa(self) -> int:
        return int(self.c.size)

    def copy(self) -> "SufficientStats":
        return SufficientStats(self.A.copy(), self.B.copy(), self.c.copy(),
                               self.spike_sums.copy(), self.pos_hist.copy())

    def n_positions(self, i: int) -> float:
        return float(self.pos_hist[i].sum())


def update_stats(stats: SufficientStats, prev, curr, counts, x: Optional[int] = None
                 ) -> SufficientStats:
    """Account for one transition of the augmented chain.

    Parameters
    ----------
    prev, curr : (int, int)
        Augmented states ``(s, k)`` before and after the transition.
    counts : array_like
        Spike counts of the bin entered.
    x : int, optional
        Observed label of that bin.
    """
    (sp, kp), (s, k) = prev, curr
    if not (k == kp and s <= k) and not (k == kp + 1 and s == k):
        raise ValueError(f"infeasible augmented transition {prev} -> {curr}")
    out = stats.copy()
    out.A[sp, s] += 1
    if k > kp:
        out.B[sp, s] = 1
    out.c[s] += 1
    out.spike_sums[s] += np.asarray(counts, dtype=float)
    if x is not None and x >= 0:
        out.pos_hist[s, x] += 1
    return out


def stats_from_path(s: np.ndarray, counts: np.ndarray, positions: Optional[np.ndarray],
                    kappa: int, M: int) -> SufficientStats:
    """Statistics of a base-state path ``s_0..s_T`` (``s_0`` is the fixed start)."""
    s = np.asarray(s, dtype=np.int64)
    counts = np.asarray(counts, dtype=float)
    T = s.size - 1
    st = SufficientStats.empty(kappa, counts.shape[1], M)
    np.add.at(st.A, (s[:-1], s[1:]), 1)
    seen = np.zeros(kappa, dtype=bool)
    seen[s[0]] = True
    for u in range(1, T + 1):
        if not seen[s[u]]:
            seen[s[u]] = True
            st.B[s[u - 1], s[u]] = 1
    st.c[:] = np.bincount(s[1:], minlength=kappa)
    np.add.at(st.spike_sums, s[1:], counts)
    if positions is not None:
        np.add.at(st.pos_hist, (s[1:], np.asarray(positions, dtype=np.int64)), 1)
    return st


# ----------------------------------------------------------------- priors

def _check_beta(hyper: Hyperparams):
    if not hyper.beta > 0:
        raise ConfigError("beta = 0 gives an improper prior that cannot be sampled")


def prior_arrays(hyper: Hyperparams, kappa: int, C: int, M: int, rng: np.random.Generator):
    """Draw (P, lambda, xi, Sigma) for a fixed ``kappa`` from the prior."""
    _check_beta(hyper)
    P = rng.dirichlet(np.full(kappa, hyper.omega), size=kappa)
    lam = rng.gamma(hyper.alpha, 1.0 / hyper.beta, size=(kappa, C))
    xi = rng.integers(0, M, size=kappa)
    sigma = sample_invwishart(hyper.psi, hyper.delta, rng, size=kappa)
    return P, lam, xi, sigma


def sample_prior(hyper: Hyperparams, grid: SpatialGrid, C: int, rng: np.random.Generator,
                 kappa: Optional[int] = None) -> ModelParams:
    """Draw kappa uniformly from ``1..kappa_bar`` (unless given) and theta from the prior."""
    _check_beta(hyper)
    if kappa is None:
        kappa = int(rng.integers(1, hyper.kappa_bar + 1))
    P, lam, xi, sigma = prior_arrays(hyper, kappa, C, grid.M, rng)
    return ModelParams(P, lam, xi, sigma, grid)


# --------------------------------------------------------------- samplers

def sample_lambda(stats: SufficientStats, hyper: Hyperparams, i: int, n: int, dt: float,
                  rng: np.random.Generator) -> float:
    """Gamma(spike_sum + alpha, dt * c_i + beta) draw for one rate."""
    _check_beta(hyper)
    shape = stats.spike_sums[i, n] + hyper.alpha
    rate = dt * stats.c[i] + hyper.beta
    return float(rng.gamma(shape, 1.0 / rate))


def sample_lambdas(spike_sums, c, hyper: Hyperparams, dt: float, rng) -> np.ndarray:
    _check_beta(hyper)
    shape = np.asarray(spike_sums) + hyper.alpha
    rate = dt * np.asarray(c)[:, None] + hyper.beta
    return rng.gamma(shape, 1.0 / rate)


def mean_minimiser(hist: np.ndarray, F: np.ndarray) -> int:
    """Label x minimising the norm of the mean embedded vector ``mean_u f_x(x_u)``."""
    hist = np.asarray(hist, dtype=float)
    tot = hist.sum()
    if tot == 0:
        return 0
    mean = np.einsum("v,xvi->xi", hist, F) / tot
    return int(np.argmin(np.sqrt((mean ** 2).sum(1))))


def scatter_matrix(hist: np.ndarray, xi: int, F: np.ndarray) -> np.ndarray:
    """Outer-product scatter ``sum_u f_xi(x_u) f_xi(x_u)^T``."""
    f = F[xi]
    return np.einsum("v,vi,vj->ij", np.asarray(hist, dtype=float), f, f)


def _categorical(logw: np.ndarray, u: float) -> int:
    w = np.exp(logw - logw.max())
    cdf = np.cumsum(w)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), w.size - 1))


def sample_xi(hist: np.ndarray, sigma: np.ndarray, grid: SpatialGrid, rng,
              method: str = "exact") -> int:
    """Draw a position mode given the visits of one state and its covariance.

    Parameters
    ----------
    hist : ndarray
        Visits of each label while in the state.
    sigma : ndarray
        Current 2x2 covariance of the state.
    method : {"exact", "completed_square"}
        ``"exact"`` enumerates the full conditional over all labels, including
        the per-mode normaliser of the categorical position law.
        ``"completed_square"`` uses the Gaussian approximation centred on the
        mean minimiser with covariance ``sigma / c``.
    """
    hist = np.asarray(hist, dtype=float)
    tot = hist.sum()
    M = grid.M
    u = rng.random()
    if tot == 0:
        return int(min(np.floor(u * M), M - 1))
    F = grid.embedding
    if method == "exact":
        logw = K.xi_log_lik(F, hist, np.linalg.inv(sigma))
    elif method == "completed_square":
        xbar = mean_minimiser(hist, F)
        prec = np.linalg.inv(np.asarray(sigma) / tot)
        f = F[xbar]
        logw = -0.5 * np.einsum("vi,ij,vj->v", f, prec, f)
    else:
        raise ConfigError(f"unknown xi sampler {method!r}")
    return _categorical(logw, u)


def sample_invwishart(psi: np.ndarray, dof, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-Wishart draws of 2x2 matrices via the Bartlett decomposition.

    ``psi`` may be a single 2x2 scale or a stack matching ``size``; ``dof`` a
    scalar or array. Mean is ``psi / (dof - 3)``.
    """
    psi = np.asarray(psi, dtype=float)
    single = size is None and psi.ndim == 2
    n = 1 if size is None else int(size)
    if psi.ndim == 3:
        n = psi.shape[0]
    psi = np.broadcast_to(psi, (n, 2, 2))
    dof = np.broadcast_to(np.asarray(dof, dtype=float), (n,))
    if np.any(dof <= 1):
        raise ConfigError("Inverse-Wishart degrees of freedom must exceed 1")
    V = np.linalg.inv(psi)  # Wishart scale of the precision
    L = np.linalg.cholesky(V)
    a11 = np.sqrt(rng.chisquare(dof))
    a22 = np.sqrt(rng.chisquare(dof - 1.0))
    a21 = rng.standard_normal(n)
    A = np.zeros((n, 2, 2))
    A[:, 0, 0], A[:, 1, 0], A[:, 1, 1] = a11, a21, a22
    LA = L @ A
    W = LA @ np.swapaxes(LA, 1, 2)
    det = W[:, 0, 0] * W[:, 1, 1] - W[:, 0, 1] * W[:, 1, 0]
    S = np.empty_like(W)
    S[:, 0, 0] = W[:, 1, 1] / det
    S[:, 1, 1] = W[:, 0, 0] / det
    S[:, 0, 1] = S[:, 1, 0] = -0.5 * (W[:, 0, 1] + W[:, 1, 0]) / det
    return S[0] if single else S


def sample_sigma(hist: np.ndarray, xi: int, hyper: Hyperparams, grid: SpatialGrid,
                 rng) -> np.ndarray:
    """InverseWishart(psi + scatter, delta + c) draw for one state."""
    hist = np.asarray(hist, dtype=float)
    scale = hyper.psi + scatter_matrix(hist, xi, grid.embedding)
    return sample_invwishart(scale, hyper.delta + hist.sum(), rng)


def _logdet_inv(S: np.ndarray):
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
    inv = np.empty_like(S)
    inv[:, 0, 0] = S[:, 1, 1] / det
    inv[:, 1, 1] = S[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -0.5 * (S[:, 0, 1] + S[:, 1, 0]) / det
    return np.log(det), inv


def _log_normaliser(prec: np.ndarray, f: np.ndarray) -> np.ndarray:
    """log sum_x exp(-0.5 f_x^T prec f_x) per state; ``f`` is ``(kappa, M, 2)``."""
    q = -0.5 * np.einsum("kmi,kij,kmj->km", f, prec, f)
    m = q.max(1)
    return m + np.log(np.exp(q - m[:, None]).sum(1))


def _sigma_log_target(S, scale, delta, n, f):
    """Log full conditional of each covariance under the categorical position law.

    ``scale`` is the prior scale plus the scatter of the visits; the position
    law has no determinant factor, only the grid normaliser per visit.
    """
    logdet, prec = _logdet_inv(S)
    tr = np.einsum("kij,kji->k", scale, prec)
    return -0.5 * (delta + 3.0) * logdet - 0.5 * tr - n * _log_normaliser(prec, f)


def update_sigmas(pos_hist: np.ndarray, xi: np.ndarray, sigma: np.ndarray, hyper: Hyperparams,
                  grid: SpatialGrid, rng, rw_steps: int = 4, step: float = 1.0) -> np.ndarray:
    """Metropolis-Hastings update of all covariances given visits and modes.

    The Inverse-Wishart conditional treats positions as continuous Gaussian
    draws and ignores that the position law is normalised over the grid. On
    grids that truncate the kernel (narrow tracks) that draw is biased towards
    small covariances, so here it serves as an independence proposal and is
    followed by ``rw_steps`` random-walk moves on the log-Cholesky factor, both
    targeting the exact conditional. States without visits get the prior draw.

    Parameters
    ----------
    pos_hist : ndarray
        ``(kappa, M)`` visits of each label per state.
    xi : ndarray
        Current modes.
    sigma : ndarray
        ``(kappa, 2, 2)`` current covariances.
    step : float
        Random-walk scale in units of ``1 / sqrt(visits + delta)``.
    """
    pos_hist = np.asarray(pos_hist, dtype=float)
    kappa = pos_hist.shape[0]
    F = grid.embedding
    f = F[np.asarray(xi, dtype=np.int64)]
    n = pos_hist.sum(1)
    scale = hyper.psi + np.einsum("kv,kvi,kvj->kij", pos_hist, f, f)
    dof = hyper.delta + n
    cur = np.array(sigma, dtype=float).reshape(kappa, 2, 2)
    prop = sample_invwishart(scale, dof, rng, size=kappa)
    # independence step: target / proposal reduces to the grid normaliser term
    ld_c, pc = _logdet_inv(cur)
    ld_p, pp = _logdet_inv(prop)
    log_r = n * ((_log_normaliser(pc, f) - 0.5 * ld_c) - (_log_normaliser(pp, f) - 0.5 * ld_p))
    take = (n == 0) | (np.log(rng.random(kappa)) < log_r)
    cur[take] = prop[take]
    if rw_steps <= 0 or not np.any(n > 0):
        return cur
    lt = _sigma_log_target(cur, scale, hyper.delta, n, f)
    sd = step / np.sqrt(n + hyper.delta)
    for _ in range(rw_steps):
        # Sigma = L L^T with L = [[e^a, 0], [u e^a, e^c]]; symmetric walk in (a, u, c)
        L = np.linalg.cholesky(cur)
        a, c = np.log(L[:, 0, 0]), np.log(L[:, 1, 1])
        u = L[:, 1, 0] / L[:, 0, 0]
        z = rng.standard_normal((3, kappa)) * sd
        a2, u2, c2 = a + z[0], u + z[1], c + z[2]
        L2 = np.zeros_like(L)
        L2[:, 0, 0], L2[:, 1, 0], L2[:, 1, 1] = np.exp(a2), u2 * np.exp(a2), np.exp(c2)
        new = L2 @ np.swapaxes(L2, 1, 2)
        lt2 = _sigma_log_target(new, scale, hyper.delta, n, f)
        log_j = 4 * (a2 - a) + 2 * (c2 - c)
        ok = (n > 0) & (np.log(rng.random(kappa)) < lt2 - lt + log_j)
        cur[ok], lt[ok] = new[ok], lt2[ok]
    return cur


def gd_beta_parameters(A_row, B_row, omega) -> tuple:
    """Beta parameters of the stick-breaking form of a transition-row conditional.

    A first arrival at ``j`` from row ``i`` has probability ``sum_{l >= j} P_il``,
    so the row conditional is a Generalised Dirichlet whose stick ``j`` is
    ``Beta(zeta_j, sum_{l > j} (zeta_l + B_l))`` with ``zeta = A - B + omega``.

    Returns
    -------
    a, b : ndarray
        Length ``kappa - 1`` Beta parameters.
    """
    A_row = np.asarray(A_row, dtype=float)
    B_row = np.asarray(B_row, dtype=float)
    zeta = A_row - B_row + np.asarray(omega, dtype=float)
    g = zeta + B_row
    b = np.cumsum(g[::-1])[::-1][1:]
    a = zeta[:-1]
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("non-positive Beta parameter: inconsistent sufficient statistics")
    return a, b


def _stick_break(v: np.ndarray) -> np.ndarray:
    """Rows of stick fractions ``(..., kappa-1)`` to probability rows ``(..., kappa)``."""
    rem = np.cumprod(1.0 - v, axis=-1)
    head = v * np.concatenate([np.ones(v.shape[:-1] + (1,)), rem[..., :-1]], axis=-1)
    row = np.concatenate([head, rem[..., -1:]], axis=-1)
    return row / row.sum(-1, keepdims=True)


def sample_transition_row(A_row, B_row, omega, rng) -> np.ndarray:
    """One row draw by stick-breaking; sums to one."""
    kappa = np.asarray(A_row).size
    if kappa == 1:
        return np.ones(1)
    a, b = gd_beta_parameters(A_row, B_row, np.broadcast_to(omega, (kappa,)))
    return _stick_break(rng.beta(a, b))


def sample_transition_rows(A, B, omega, rng) -> np.ndarray:
    """All rows of a ``kappa x kappa`` matrix in one vectorised draw."""
    A = np.asarray(A, dtype=float)
    kappa = A.shape[0]
    if kappa == 1:
        return np.ones((1, 1))
    zeta = A - B + omega
    g = zeta + B
    b = np.cumsum(g[:, ::-1], axis=1)[:, ::-1][:, 1:]
    a = zeta[:, :-1]
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("non-positive Beta parameter: inconsistent sufficient statistics")
    return _stick_break(rng.beta(a, b))


def sweep_arrays(A, B, c, spike_sums, pos_hist, xi, sigma, hyper: Hyperparams, dt: float,
                 grid: SpatialGrid, rng, xi_method: str = "exact", sigma_method: str = "mh"):
    """One Gibbs sweep on raw arrays; returns new (P, lambda, xi, Sigma).

    Order: transition rows; per state Sigma given the old mode, then the
    mode given the new Sigma; firing rates. ``sigma_method="gibbs"`` keeps the
    plain Inverse-Wishart draw, ``"mh"`` corrects it, see :func:`update_sigmas`.
    """
    kappa = c.size
    P = sample_transition_rows(A, B, hyper.omega, rng)
    new_xi = np.empty(kappa, dtype=np.int64)
    if sigma_method == "mh":
        new_sigma = update_sigmas(pos_hist, xi, sigma, hyper, grid, rng)
    elif sigma_method == "gibbs":
        npos = pos_hist.sum(1)
        F = grid.embedding
        scale = np.empty((kappa, 2, 2))
        for i in range(kappa):
            scale[i] = hyper.psi + (scatter_matrix(pos_hist[i], xi[i], F) if npos[i] > 0
                                    else 0.0)
        new_sigma = sample_invwishart(scale, hyper.delta + npos, rng, size=kappa)
    else:
        raise ConfigError(f"unknown sigma method {sigma_method!r}")
    for i in range(kappa):
        new_xi[i] = sample_xi(pos_hist[i], new_sigma[i], grid, rng, xi_method)
    lam = sample_lambdas(spike_sums, c, hyper, dt, rng)
    return P, lam, new_xi, new_sigma


def gibbs_sweep(params: ModelParams, stats: SufficientStats, hyper: Hyperparams, dt: float,
                rng, xi_method: str = "exact", sigma_method: str = "mh") -> ModelParams:
    """One sweep over all parameters given the sufficient statistics of a path."""
    P, lam, xi, sigma = sweep_arrays(stats.A, stats.B, stats.c, stats.spike_sums,
                                     stats.pos_hist, params.xi, params.sigma, hyper, dt,
                                     params.grid, rng, xi_method, sigma_method)
    return ModelParams(P, lam, xi, sigma, params.grid, params.dt)
