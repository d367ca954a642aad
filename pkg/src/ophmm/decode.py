"""Position decoding from spikes and the two baseline decoders.

``OP`` decoders use a fitted :class:`~ophmm.model.ModelParams`. ``BD`` is a
memoryless Bayesian decoder and ``LP`` an HMM whose hidden states are the grid
positions themselves. All labels are 0-based in memory.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import _kernels as K
from .errors import ConfigError, DataError, NumericalError
from .hmm import build_chain, forward, smooth_from_forward
from .ingest import BinnedDataset, SpatialGrid
from .model import ModelParams, emission_loglik, spike_loglik_matrix

__all__ = [
    "DecodedTrajectory",
    "BDParams",
    "LPParams",
    "position_posterior",
    "viterbi_position",
    "map_position",
    "fit_bd",
    "decode_bd",
    "fit_lp",
    "decode_lp",
    "decoding_metrics",
    "trajectory_log_posterior",
]

METHODS = ("OP-Viterbi", "OP-MAP", "BD", "LP")


@dataclass(frozen=True, eq=False)
class DecodedTrajectory:
    """Decoded labels with an optional ``(T, M)`` posterior."""

    estimates: np.ndarray
    posterior: Optional[np.ndarray] = None
    method: str = "OP-Viterbi"

    def __post_init__(self):
        est = np.asarray(self.estimates, dtype=np.int64).ravel()
        object.__setattr__(self, "estimates", est)
        if self.method not in METHODS:
            raise ConfigError(f"unknown decoding method {self.method!r}")
        if self.posterior is not None:
            post = np.asarray(self.posterior, dtype=float)
            if post.shape[0] != est.size:
                raise DataError("posterior length differs from estimates")
            object.__setattr__(self, "posterior", post)

    @property
    def T(self) -> int:
        return int(self.estimates.size)


def _spikes_only(data: BinnedDataset) -> BinnedDataset:
    return data if data.position is None else data.spikes_only()


def position_posterior(params: ModelParams, data: BinnedDataset,
                       mode: str = "stationary") -> np.ndarray:
    """Per-bin marginal posterior over positions given spikes only.

    Returns
    -------
    ndarray
        ``(T, M)`` with rows summing to one.
    """
    fwd = forward(params, _spikes_only(data), mode=mode, use_positions=False)
    S = smooth_from_forward(fwd, params.kappa).S
    post = S @ np.exp(params.log_position_table())
    return post / post.sum(1, keepdims=True)


def map_position(params: ModelParams, data: BinnedDataset,
                 mode: str = "stationary") -> DecodedTrajectory:
    """Per-bin argmax of the position posterior."""
    post = position_posterior(params, data, mode)
    return DecodedTrajectory(np.argmax(post, axis=1), post, "OP-MAP")


def _chain_inputs(params: ModelParams, data: BinnedDataset, mode: str):
    chain = build_chain(params.P, mode)
    le = chain.expand(emission_loglik(params, _spikes_only(data), use_positions=False))
    LQ = params.log_position_table()[chain.state_of]  # (n, M)
    with np.errstate(divide="ignore"):
        logp1 = np.log(chain.p1)
    return chain, logp1, le, LQ


def _rowwise_lse_matmul(logV: np.ndarray, lin: np.ndarray) -> np.ndarray:
    """``log(exp(logV) @ lin)`` with each row of ``logV`` rescaled by its maximum."""
    r = logV.max(axis=1, keepdims=True)
    r = np.where(np.isfinite(r), r, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(logV - r) @ lin) + r


def _viterbi_printed(logp1, Tr, le, LQ) -> np.ndarray:
    T, n = le.shape
    m = np.empty((T, n))
    m[0] = logp1 + le[0]
    for t in range(1, T):
        logV = m[t - 1][None, :] + LQ.T  # (M, n): V_{t-1}(u, i)
        W = _rowwise_lse_matmul(logV, Tr)  # (M, n): log sum_i Tr[i, j] V(u, i)
        m[t] = W.max(axis=0) + le[t]
    Q = np.exp(LQ)
    x = np.empty(T, dtype=np.int64)
    x[T - 1] = int(np.argmax(logsumexp(m[T - 1][None, :] + LQ.T, axis=1)))
    for t in range(T - 2, -1, -1):
        g = Tr @ Q[:, x[t + 1]]  # sum_j Tr[i, j] p(x_{t+1} | j)
        with np.errstate(divide="ignore"):
            score = logsumexp(m[t][None, :] + LQ.T + np.log(g)[None, :], axis=1)
        x[t] = int(np.argmax(score))
    return x


def _viterbi_exact(logp1, Tr, le, LQ, max_nodes: int) -> np.ndarray:
    """Best-first search over position prefixes with an admissible completion bound."""
    T, n = le.shape
    M = LQ.shape[1]
    with np.errstate(divide="ignore"):
        logTr = np.log(Tr)
    # bound[t, i] >= max over x_{t+1:T} of log p(x_{t+1:T}, y_{t+1:T} | state i at t)
    bound = np.zeros((T, n))
    for t in range(T - 2, -1, -1):
        inner = le[t + 1][:, None] + LQ + bound[t + 1][:, None]  # (n_j, M)
        cand = logsumexp(logTr[:, :, None] + inner[None, :, :], axis=1)  # (n_i, M)
        bound[t] = cand.max(axis=1)
    heap = []
    for v in range(M):
        f = logp1 + le[0] + LQ[:, v]
        pr = logsumexp(f + bound[0])
        if np.isfinite(pr):
            heapq.heappush(heap, (-pr, (v,), f))
    popped = 0
    while heap:
        negp, xs, f = heapq.heappop(heap)
        if len(xs) == T:
            return np.asarray(xs, dtype=np.int64)
        popped += 1
        if popped > max_nodes:
            raise NumericalError("exact position search exceeded its node budget; "
                                 "use the recursive method for long inputs")
        t = len(xs)
        pred = logsumexp(f[:, None] + logTr, axis=0) + le[t]
        for v in range(M):
            g = pred + LQ[:, v]
            pr = logsumexp(g + bound[t])
            if np.isfinite(pr):
                heapq.heappush(heap, (-pr, xs + (v,), g))
    raise NumericalError("no position trajectory has positive probability")


def viterbi_position(params: ModelParams, data: BinnedDataset, mode: str = "stationary",
                     method: str = "recursive", posterior: bool = True,
                     max_nodes: int = 1_000_000) -> DecodedTrajectory:
    """Decode a position trajectory from spikes.

    Parameters
    ----------
    method : {"recursive", "exact"}
        ``"recursive"`` runs the forward max-of-sums recursion over
        ``V_t(v, j)`` followed by the backward argmax pass. It is linear in T
        but not guaranteed to return the joint maximiser. ``"exact"`` runs a
        best-first search that is exact and exponential in the worst case.
    posterior : bool
        Attach the per-bin position posterior.
    """
    chain, logp1, le, LQ = _chain_inputs(params, data, mode)
    if method == "recursive":
        x = _viterbi_printed(logp1, chain.Tr, le, LQ)
    elif method == "exact":
        x = _viterbi_exact(logp1, chain.Tr, le, LQ, max_nodes)
    else:
        raise ConfigError(f"unknown method {method!r}")
    post = position_posterior(params, data, mode) if posterior else None
    return DecodedTrajectory(x, post, "OP-Viterbi")


def trajectory_log_posterior(params: ModelParams, data: BinnedDataset, x,
                             mode: str = "stationary") -> float:
    """log p(x_{1:T} | y_{1:T}) for a full-length position trajectory."""
    x = np.asarray(x, dtype=np.int64)
    if x.size != data.T:
        raise DataError("trajectory length must equal T")
    chain, logp1, le, LQ = _chain_inputs(params, data, mode)
    joint = K.dense_forward(chain.p1, chain.Tr, le + LQ[:, x].T)[1].sum()
    marg = K.dense_forward(chain.p1, chain.Tr, le)[1].sum()
    return float(joint - marg)


# ---------------------------------------------------------------- baselines

@dataclass(frozen=True, eq=False)
class BDParams:
    """Per-position Poisson rates (Hz) and occupancy (bins) estimated on RUN."""

    rates: np.ndarray
    occupancy: np.ndarray

    @property
    def M(self) -> int:
        return int(self.rates.shape[0])

    def log_prior(self, prior="occupancy") -> np.ndarray:
        if isinstance(prior, str):
            if prior == "uniform":
                return np.full(self.M, -np.log(self.M))
            if prior == "occupancy":
                w = self.occupancy.astype(float)
                if w.sum() <= 0:
                    raise DataError("empty occupancy")
                with np.errstate(divide="ignore"):
                    return np.log(w / w.sum())
            raise ConfigError(f"unknown prior {prior!r}")
        w = np.asarray(prior, dtype=float)
        if w.shape != (self.M,) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("prior must be a non-negative length-M vector")
        with np.errstate(divide="ignore"):
            return np.log(w / w.sum())


@dataclass(frozen=True, eq=False)
class LPParams:
    """Position-state HMM: Poisson rates, log transition matrix and log initial law."""

    rates: np.ndarray
    logTr: np.ndarray
    log_init: np.ndarray

    @property
    def M(self) -> int:
        return int(self.rates.shape[0])


def fit_bd(data: BinnedDataset, M: int, eps: Optional[float] = None) -> BDParams:
    """Smoothed maximum-likelihood rates ``(spikes + 0.5) / (occupancy * dt + eps)``.

    ``eps`` defaults to half a bin, so unvisited positions get rate ``1 / dt``
    for every cell.
    """
    if data.position is None:
        raise DataError("BD fitting needs observed positions")
    if data.position.max(initial=0) >= M:
        raise DataError("position label outside the grid")
    eps = 0.5 * data.dt if eps is None else float(eps)
    if eps <= 0:
        raise ConfigError("eps must be positive")
    occ = np.bincount(data.position, minlength=M)
    sums = np.zeros((M, data.C))
    np.add.at(sums, data.position, data.counts)
    rates = (sums + 0.5) / (occ[:, None] * data.dt + eps)
    return BDParams(rates, occ)


def decode_bd(bd: BDParams, data: BinnedDataset, prior="occupancy") -> DecodedTrajectory:
    """Memoryless decoding: per-bin posterior ∝ prior(x) p(y_t | x)."""
    if data.C != bd.rates.shape[1]:
        raise DataError("cell count differs from the decoder")
    lp = spike_loglik_matrix(bd.rates, data.counts, data.dt) + bd.log_prior(prior)[None, :]
    post = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return DecodedTrajectory(np.argmax(lp, axis=1), post, "BD")


def lp_transitions(grid: SpatialGrid, bandwidth_cells: float = 2.0) -> np.ndarray:
    """Log transition matrix with rows ∝ exp(-d^2 / 2h^2), ``h`` in grid cells."""
    if bandwidth_cells < 0:
        raise ConfigError("bandwidth must be non-negative")
    M = grid.M
    if bandwidth_cells == 0:
        with np.errstate(divide="ignore"):
            return np.log(np.eye(M))
    if np.isinf(bandwidth_cells):
        return np.full((M, M), -np.log(M))
    h = bandwidth_cells * grid.cell_size
    q = -0.5 * (np.asarray(grid.distance, dtype=float) / h) ** 2
    return q - logsumexp(q, axis=1, keepdims=True)


def fit_lp(data: BinnedDataset, grid: SpatialGrid, bandwidth_cells: float = 2.0,
           eps: Optional[float] = None) -> LPParams:
    bd = fit_bd(data, grid.M, eps)
    return LPParams(bd.rates, lp_transitions(grid, bandwidth_cells),
                    np.full(grid.M, -np.log(grid.M)))


def decode_lp(lp: LPParams, data: BinnedDataset, posterior: bool = True) -> DecodedTrajectory:
    """Viterbi path of the position-state HMM."""
    if data.C != lp.rates.shape[1]:
        raise DataError("cell count differs from the decoder")
    le = spike_loglik_matrix(lp.rates, data.counts, data.dt)
    order = np.arange(lp.M)
    path, best = K.dense_viterbi(lp.log_init, lp.logTr, le, order)
    if not np.isfinite(best):
        raise NumericalError("no position path has positive probability")
    post = None
    if posterior:
        Tr = np.exp(lp.logTr)
        alpha, log_c = K.dense_forward(np.exp(lp.log_init), Tr, le)
        beta = K.dense_backward(Tr, le, log_c)
        post = alpha * beta
        post /= post.sum(1, keepdims=True)
    return DecodedTrajectory(path, post, "LP")


def decoding_metrics(decoded: DecodedTrajectory, observed, grid: SpatialGrid) -> tuple:
    """Median geodesic error and mean posterior probability of the observed positions.

    The second value is NaN when the decoder carries no posterior.
    """
    obs = np.asarray(observed, dtype=np.int64).ravel()
    if obs.size != decoded.T:
        raise DataError("observed and decoded lengths differ")
    err = np.asarray(grid.distance)[obs, decoded.estimates]
    med = float(np.median(err))
    if decoded.posterior is None:
        return med, float("nan")
    return med, float(decoded.posterior[np.arange(obs.size), obs].mean())
