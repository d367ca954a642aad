"""Sequential Monte Carlo over (theta, kappa) with resample-move and positive discrimination.

Particles are stored as padded arrays (``H x kappa_bar x ...``) so the forward
recursions of all particles run in one compiled call. Every random draw comes
from a generator keyed by ``(seed, t, purpose, slot)``, which makes results
independent of the number of threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln, logsumexp

from . import _kernels as K
from .conjugate import prior_arrays, sweep_arrays
from .errors import ConfigError, DataError, NumericalError
from .hmm import forward, smooth, viterbi
from .ingest import BinnedDataset, SpatialGrid
from .model import Hyperparams, ModelParams, aug_size, position_logprob_table

__all__ = [
    "ParticleSystem",
    "FitResult",
    "effective_sample_size",
    "residual_resample",
    "discriminated_resample",
    "estimate_params",
    "estimate_kappa",
    "select_kappa",
    "fit",
]

log = logging.getLogger(__name__)

_INIT, _RESAMPLE, _MOVE = 0, 1, 2


def _rng(seed: int, t: int, purpose: int, slot: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(t), purpose, int(slot)]))


def effective_sample_size(logw: np.ndarray) -> float:
    """``H / (1 + var(w))`` with weights scaled to mean one and population variance."""
    logw = np.asarray(logw, dtype=float)
    if not np.isfinite(logw).any():
        return 0.0
    w = np.exp(logw - logw.max())
    w = w / w.mean()
    return float(w.size / (1.0 + w.var()))


def residual_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Residual resampling of ``n`` indices; returns sorted indices."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    base = np.floor(n * w).astype(np.int64)
    rest = n - int(base.sum())
    if rest > 0:
        resid = n * w - base
        base += rng.multinomial(rest, resid / resid.sum())
    return np.repeat(np.arange(w.size), base)


def discriminated_resample(weights: np.ndarray, kappa: np.ndarray, floor: int,
                           rng: np.random.Generator):
    """Resample with forced retention of small model-size subpopulations.

    Parameters
    ----------
    weights : ndarray
        Normalised particle weights.
    kappa : ndarray
        Model size of each particle.
    floor : int
        ``H*``: minimum subpopulation size after resampling.

    Returns
    -------
    idx : ndarray
        Selected parent indices.
    new_w : ndarray
        Normalised weights of the new population.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    H = w.size
    values = np.unique(kappa)
    phat = {int(v): float(w[kappa == v].sum()) for v in values}
    disc = [v for v in phat if 0 < phat[v] * H < floor]
    n_disc = {v: int(floor) for v in disc}
    total = sum(n_disc.values())
    if total >= H:
        # too many small subpopulations: share the slots, keeping room for the rest
        scale = (H - 1) / total
        n_disc = {v: max(1, int(np.floor(n * scale))) for v, n in n_disc.items()}
    pool = ~np.isin(kappa, disc)
    R = H - sum(n_disc.values())
    if pool.any() and w[pool].sum() <= 0:
        pool[:] = False
    if not pool.any() and R > 0:
        big = max(disc, key=lambda v: phat[v])
        n_disc[big] += R
        R = 0
    idx_parts, w_parts = [], []
    for v in sorted(n_disc):
        members = np.flatnonzero(kappa == v)
        pm = w[members] / w[members].sum()
        pick = np.sort(members[rng.choice(members.size, size=n_disc[v], p=pm)])
        idx_parts.append(pick)
        w_parts.append(np.full(pick.size, phat[v] * H / n_disc[v]))
    if R > 0:
        members = np.flatnonzero(pool)
        pick = members[residual_resample(w[members], R, rng)]
        idx_parts.append(pick)
        w_parts.append(np.ones(pick.size))
    idx = np.concatenate(idx_parts)
    new_w = np.concatenate(w_parts)
    order = np.argsort(idx, kind="stable")
    idx, new_w = idx[order], new_w[order]
    return idx, new_w / new_w.sum()


@dataclass
class StepRecord:
    t: int
    ess: float
    resampled: bool
    phat: np.ndarray


class ParticleSystem:
    """Weighted particles over (theta, kappa) fed one bin at a time.

    Parameters
    ----------
    hyper : Hyperparams
    grid : SpatialGrid
    C : int
        Number of cells.
    dt : float
        Bin width (s).
    H : int
        Number of particles.
    seed : int
    ess_threshold : float, optional
        Resample when ESS falls below it. Default ``H / 2``.
    floor : int, optional
        Positive-discrimination floor ``H*``. Default ``H / 10``.
    use_positions : bool
        Include the position likelihood when positions are supplied.
    xi_method : str
        Position-mode sampler, see :func:`ophmm.conjugate.sample_xi`.
    """

    def __init__(self, hyper: Hyperparams, grid: SpatialGrid, C: int, dt: float, H: int = 1500,
                 seed: int = 0, ess_threshold: Optional[float] = None,
                 floor: Optional[int] = None, use_positions: bool = True,
                 xi_method: str = "exact"):
        if H < 1:
            raise ConfigError("H must be at least 1")
        if not dt > 0:
            raise ConfigError("dt must be positive")
        self.hyper, self.grid, self.C, self.dt, self.H = hyper, grid, int(C), float(dt), int(H)
        self.seed = int(seed)
        self.ess_threshold = H / 2.0 if ess_threshold is None else float(ess_threshold)
        self.floor = max(1, int(round(H / 10.0))) if floor is None else int(floor)
        self.use_positions = bool(use_positions)
        self.xi_method = xi_method
        Kb = hyper.kappa_bar
        self.Kb = Kb
        M = grid.M
        self.kappa = np.zeros(H, dtype=np.int64)
        self.P = np.zeros((H, Kb, Kb))
        self.lam = np.zeros((H, Kb, C))
        self.xi = np.zeros((H, Kb), dtype=np.int64)
        self.sigma = np.tile(np.eye(2), (H, Kb, 1, 1))
        for h in range(H):
            rng = _rng(self.seed, 0, _INIT, h)
            k = int(rng.integers(1, Kb + 1))
            P, lam, xi, sig = prior_arrays(hyper, k, C, M, rng)
            self.kappa[h] = k
            self.P[h, :k, :k] = P
            self.lam[h, :k] = lam
            self.xi[h, :k] = xi
            self.sigma[h, :k] = sig
        self.logpos = np.zeros((H, Kb, M))
        self._refresh_derived(np.arange(H))
        self.alpha = np.zeros((H, aug_size(Kb)))
        self.alpha[:, 0] = 1.0
        self.logw = np.zeros(H)
        self.loglik = np.zeros(H)
        self.log_evidence = 0.0
        self.t = 0
        self.history: list[StepRecord] = []
        self.n_moves = 0
        self._Y = np.zeros((0, C), dtype=np.int64)
        self._X = np.zeros(0, dtype=np.int64)
        self._lf = np.zeros(0)

    # ------------------------------------------------------------ helpers
    def _refresh_derived(self, idx: np.ndarray):
        F = self.grid.embedding
        mu = self.dt * self.lam[idx]
        with np.errstate(divide="ignore"):
            self_loglam = np.log(mu)
        if not hasattr(self, "loglam"):
            self.loglam = np.zeros_like(self.lam)
            self.musum = np.zeros((self.H, self.Kb))
            self.tail = np.zeros_like(self.P)
        self.loglam[idx] = self_loglam
        self.musum[idx] = mu.sum(-1)
        P = self.P[idx]
        tail = np.cumsum(P[:, :, ::-1], axis=2)[:, :, ::-1]
        self.tail[idx] = np.concatenate([tail[:, :, 1:], np.zeros(P.shape[:2] + (1,))], axis=2)
        for h in idx:
            k = self.kappa[h]
            self.logpos[h, :k] = position_logprob_table(self.xi[h, :k], self.sigma[h, :k], F)
            self.logpos[h, k:] = 0.0

    def _append(self, counts, x):
        t = self.t
        if t >= self._Y.shape[0]:
            n = max(1024, 2 * self._Y.shape[0])
            self._Y = np.concatenate([self._Y, np.zeros((n, self.C), dtype=np.int64)])
            self._X = np.concatenate([self._X, -np.ones(n, dtype=np.int64)])
            self._lf = np.concatenate([self._lf, np.zeros(n)])
        self._Y[t] = counts
        self._X[t] = x
        self._lf[t] = gammaln(np.asarray(counts, dtype=float) + 1.0).sum()

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.logw - self.logw.max())
        return w / w.sum()

    def phat(self) -> np.ndarray:
        """Posterior mass of each model size ``1..kappa_bar``."""
        return np.bincount(self.kappa - 1, weights=self.weights, minlength=self.Kb)

    # --------------------------------------------------------------- steps
    def step(self, counts, x: Optional[int] = None) -> StepRecord:
        """Consume one bin; resample and move when the ESS drops below threshold."""
        counts = np.asarray(counts, dtype=np.int64).ravel()
        if counts.size != self.C:
            raise DataError("wrong number of cells in observation")
        xi = -1 if (x is None or not self.use_positions) else int(x)
        if xi >= self.grid.M:
            raise DataError("position label outside the grid")
        self._append(counts, xi)
        inc = K.smc_weight_step(self.alpha, self.P, self.tail, self.kappa, self.loglam,
                                self.musum, self.logpos, counts.astype(np.float64),
                                self._lf[self.t], xi)
        self.t += 1
        prev = self.logw - logsumexp(self.logw)
        with np.errstate(invalid="ignore"):
            self.logw = self.logw + inc
            self.loglik = self.loglik + inc
        if not np.isfinite(self.logw).any():
            raise NumericalError(f"bin {self.t - 1} has zero likelihood under every particle")
        self.log_evidence += float(logsumexp(prev + inc))
        self.logw = self.logw - self.logw.max()
        ess = effective_sample_size(self.logw)
        resampled = ess < self.ess_threshold
        if resampled:
            self.resample()
            self.move()
        rec = StepRecord(self.t, ess, resampled, self.phat())
        self.history.append(rec)
        return rec

    def resample(self):
        rng = _rng(self.seed, self.t, _RESAMPLE)
        idx, w = discriminated_resample(self.weights, self.kappa, self.floor, rng)
        for name in ("kappa", "P", "lam", "xi", "sigma", "logpos", "loglam", "musum", "tail",
                     "alpha", "loglik"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[idx]))
        with np.errstate(divide="ignore"):  # sizes whose mass underflowed keep weight 0
            self.logw = np.log(w)

    def move(self):
        """Sample a hidden path per particle, then one Gibbs sweep over theta."""
        t = self.t
        Y = self._Y[:t]
        X = self._X[:t]
        lf = self._lf[:t]
        rngs = [_rng(self.seed, t, _MOVE, h) for h in range(self.H)]
        U = np.empty((self.H, t))
        for h, r in enumerate(rngs):
            U[h] = r.random(t)
        A, B, cnt, ssum, phist, _ = K.smc_move_stats(
            self.P, self.tail, self.kappa, self.loglam, self.musum, self.logpos,
            Y.astype(np.float64), lf, X, U, self.grid.M)
        del U
        for h in range(self.H):
            k = self.kappa[h]
            P, lam, xi, sig = sweep_arrays(
                A[h, :k, :k], B[h, :k, :k], cnt[h, :k], ssum[h, :k], phist[h, :k],
                self.xi[h, :k], self.sigma[h, :k], self.hyper, self.dt, self.grid, rngs[h],
                self.xi_method)
            self.P[h, :k, :k] = P
            self.lam[h, :k] = lam
            self.xi[h, :k] = xi
            self.sigma[h, :k] = sig
        self._refresh_derived(np.arange(self.H))
        self.loglik = K.smc_refilter(self.alpha, self.P, self.tail, self.kappa, self.loglam,
                                     self.musum, self.logpos, Y.astype(np.float64), lf, X)
        self.n_moves += 1

    def particle_params(self, h: int) -> ModelParams:
        k = self.kappa[h]
        return ModelParams(self.P[h, :k, :k], self.lam[h, :k], self.xi[h, :k],
                           self.sigma[h, :k], self.grid, self.dt)


def _spd_project(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    vals = np.maximum(vals, 1e-8 * np.trace(S))
    return (vecs * vals) @ vecs.T


def _state_cost(system: ParticleSystem, r: int, h: int, k: int) -> np.ndarray:
    """Dissimilarity of the states of particle ``h`` to those of ``r`` (both of size ``k``)."""
    g = system.grid
    d = g.distance[np.ix_(system.xi[r, :k], system.xi[h, :k])] / g.cell_size
    a = system.lam[r, :k, None, :]
    b = system.lam[h, None, :k, :]
    return d + (np.abs(a - b) / (a + b + 1.0)).sum(-1)


def _aligned(system: ParticleSystem, sel: np.ndarray, k: int) -> np.ndarray:
    """Per-particle permutations matching each state to the heaviest particle's states."""
    idx = np.flatnonzero(sel)
    ref = idx[np.argmax(system.logw[idx])]
    perms = np.empty((idx.size, k), dtype=np.int64)
    for n, h in enumerate(idx):
        _, col = linear_sum_assignment(_state_cost(system, ref, h, k))
        perms[n] = col
    return perms


def estimate_params(system: ParticleSystem, kappa: Optional[int] = None) -> ModelParams:
    """Weighted posterior means of the per-state parameters.

    With ``kappa=None`` every state ``i`` is averaged over the particles that
    contain it; transition rows are zero-padded before averaging and then
    renormalised. With a model size given, only particles of that size are
    used, and their states are first matched to those of the heaviest such
    particle (state labels are not shared between particles). Modes are the
    weighted geodesic Frechet minimisers; covariances are projected to SPD.
    """
    w = system.weights
    alive = w > 0
    D2 = system.grid.distance ** 2
    if kappa is None:
        kmax = int(system.kappa[alive].max())
        P = np.zeros((kmax, kmax))
        lam = np.zeros((kmax, system.C))
        xi = np.zeros(kmax, dtype=np.int64)
        sigma = np.zeros((kmax, 2, 2))
        for i in range(kmax):
            sel = alive & (system.kappa > i)
            wi = w[sel] / w[sel].sum()
            P[i] = wi @ system.P[sel, i, :kmax]
            lam[i] = wi @ system.lam[sel, i]
            sigma[i] = _spd_project(np.einsum("h,hij->ij", wi, system.sigma[sel, i]))
            cost = D2[:, system.xi[sel, i]] @ wi
            xi[i] = int(np.argmin(cost))
        P /= P.sum(1, keepdims=True)
        return ModelParams(P, lam, xi, sigma, system.grid, system.dt)
    k = int(kappa)
    sel = alive & (system.kappa == k)
    if not sel.any():
        raise ConfigError(f"no particle of size {k}")
    idx = np.flatnonzero(sel)
    wi = w[idx] / w[idx].sum()
    perm = _aligned(system, sel, k)
    rows = idx[:, None]
    Ps = system.P[rows[:, :, None], perm[:, :, None], perm[:, None, :]]
    P = np.einsum("h,hij->ij", wi, Ps)
    P /= P.sum(1, keepdims=True)
    lam = np.einsum("h,hij->ij", wi, system.lam[rows, perm])
    sig = np.einsum("h,hkij->kij", wi, system.sigma[rows, perm])
    sigma = np.array([_spd_project(S) for S in sig])
    xs = system.xi[rows, perm]
    xi = np.array([int(np.argmin(D2[:, xs[:, i]] @ wi)) for i in range(k)], dtype=np.int64)
    return ModelParams(P, lam, xi, sigma, system.grid, system.dt)


def estimate_kappa(theta: ModelParams, data: BinnedDataset,
                   use_positions: Optional[bool] = None):
    """Posterior of K_T under a point estimate; returns ``(kappa_hat, distribution)``."""
    sm = smooth(theta, data, mode="augmented", use_positions=use_positions)
    dist = sm.K[-1]
    return int(np.argmax(dist)) + 1, dist


def select_kappa(system: ParticleSystem, data: BinnedDataset,
                 use_positions: Optional[bool] = None):
    """Model size by BIC over the size-specific point estimates.

    For every size still carried by the particles the estimate of
    :func:`estimate_params` is scored by ``-2 log L + N log T`` with
    ``N = kappa (kappa + C + 3)`` free parameters, ``L`` being the
    stationary-chain likelihood of the data.

    Returns
    -------
    kappa_hat : int
    estimates : dict
        Size -> ModelParams.
    rows : list of tuple
        ``(kappa, particle_mass, loglik, n_params, bic)`` per size.
    """
    w = system.weights
    mass = np.bincount(system.kappa - 1, weights=w, minlength=system.Kb)
    rows, est = [], {}
    for k in range(1, system.Kb + 1):
        if not np.any((system.kappa == k) & (w > 0)):
            continue
        theta = estimate_params(system, k)
        ll = forward(theta, data, mode="stationary", use_positions=use_positions).loglik
        n_par = k * (k + data.C + 3)
        rows.append((k, float(mass[k - 1]), float(ll), n_par,
                     float(-2.0 * ll + n_par * np.log(data.T))))
        est[k] = theta
    best = min(rows, key=lambda r: (r[4], r[0]))[0]
    return best, est, rows


@dataclass
class FitResult:
    """Output of :func:`fit`.

    Attributes
    ----------
    params : ModelParams
        Point estimate with ``kappa_hat`` states, numbered in order of first
        appearance along its Viterbi path.
    full : ModelParams
        Point estimate over all states present in the particle population.
    kappa_hat : int
    kappa_posterior : ndarray
        Distribution of K_T under ``full``.
    phat : ndarray
        Particle mass per model size at the end of the run.
    log_evidence : float
    system : ParticleSystem
    kappa_method : str
        ``"bic"`` or ``"kt"``, see :func:`fit`.
    bic_rows : list
        Rows of :func:`select_kappa` (empty for ``"kt"``).
    """

    params: ModelParams
    full: ModelParams
    kappa_hat: int
    kappa_posterior: np.ndarray
    phat: np.ndarray
    log_evidence: float
    system: ParticleSystem = field(repr=False)
    kappa_method: str = "bic"
    bic_rows: list = field(default_factory=list)

    def diagnostics_rows(self):
        for rec in self.system.history:
            yield rec.t, rec.ess, int(rec.resampled), rec.phat


def fit(data: BinnedDataset, grid: SpatialGrid, hyper: Optional[Hyperparams] = None,
        H: int = 1500, seed: int = 0, ess_threshold: Optional[float] = None,
        floor: Optional[int] = None, use_positions: Optional[bool] = None,
        xi_method: str = "exact", threads: Optional[int] = None,
        progress_every: int = 0, kappa_method: str = "bic") -> FitResult:
    """Fit model size and parameters to a binned dataset.

    Parameters
    ----------
    data : BinnedDataset
    grid : SpatialGrid
    hyper : Hyperparams, optional
        Defaults from :meth:`Hyperparams.for_grid`.
    H : int
        Number of particles.
    seed : int
    use_positions : bool, optional
        Defaults to whether the data carry positions.
    threads : int, optional
        Worker threads for the compiled kernels. Results do not depend on it.
    kappa_method : {"bic", "kt"}
        ``"kt"`` takes the mode of K_T under the all-particle estimate and
        truncates that estimate. ``"bic"`` (default) picks the size by
        :func:`select_kappa` and returns that size's own estimate. Averaging
        states across particles of different sizes yields extra states that
        the K_T posterior then counts, so ``"kt"`` tends to overshoot.
    """
    if kappa_method not in ("bic", "kt"):
        raise ConfigError(f"unknown kappa method {kappa_method!r}")
    if threads is not None:
        import numba
        numba.set_num_threads(int(threads))
    hyper = hyper or Hyperparams.for_grid(grid)
    if use_positions is None:
        use_positions = data.position is not None
    if use_positions and data.position is None:
        raise DataError("positions requested but the dataset has none")
    system = ParticleSystem(hyper, grid, data.C, data.dt, H, seed, ess_threshold, floor,
                            use_positions, xi_method)
    pos = data.position if use_positions else None
    for t in range(data.T):
        system.step(data.counts[t], None if pos is None else pos[t])
        if progress_every and (t + 1) % progress_every == 0:
            log.info("t=%d moves=%d phat=%s", t + 1, system.n_moves,
                     np.round(system.phat(), 3).tolist())
    full = estimate_params(system)
    kt_hat, dist = estimate_kappa(full, data, use_positions)
    if kappa_method == "kt":
        return FitResult(full.truncate(kt_hat), full, kt_hat, dist, system.phat(),
                         system.log_evidence, system, kappa_method)
    kappa_hat, est, rows = select_kappa(system, data, use_positions)
    theta = est[kappa_hat]
    path = viterbi(theta, data, mode="stationary", use_positions=use_positions)
    theta = _relabel(theta, path.s)
    return FitResult(theta, full, kappa_hat, dist, system.phat(), system.log_evidence, system,
                     kappa_method, rows)


def _relabel(theta: ModelParams, s: np.ndarray) -> ModelParams:
    """Number states in order of first appearance in ``s``; unvisited ones go last."""
    _, first = np.unique(s, return_index=True)
    seen = np.asarray(s)[np.sort(first)]
    o = np.concatenate([seen, np.setdiff1d(np.arange(theta.kappa), seen)]).astype(np.int64)
    return ModelParams(theta.P[np.ix_(o, o)], theta.lam[o], theta.xi[o], theta.sigma[o],
                       theta.grid, theta.dt)
