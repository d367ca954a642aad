"""Exact recursions for a fitted model: forward, backward, smoothing, path sampling, Viterbi.

Two chain modes are supported.

``"augmented"``
    The chain over ``(s, k)`` pairs started from ``(0, 0)`` at time 0. This is
    the likelihood used when fitting and the only mode that carries K_t.
``"stationary"``
    The base chain with S_1 drawn from the stationary law. Used for
    spikes-only analyses of data recorded at equilibrium (replay, BIC).

Time index ``t`` in returned arrays runs over bins ``0..T-1`` (bin ``t`` is
observation ``t + 1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError, NumericalError
from .ingest import BinnedDataset
from .model import (ModelParams, aug_states, augment_transitions, emission_loglik,
                    stationary_distribution)

__all__ = [
    "Chain",
    "ForwardFunctions",
    "Smoothed",
    "StatePath",
    "build_chain",
    "forward",
    "backward",
    "smooth",
    "log_likelihood",
    "sample_state_path",
    "viterbi",
]

MODES = ("augmented", "stationary")


@dataclass(frozen=True)
class Chain:
    """A chain in the form the kernels consume.

    Attributes
    ----------
    p1 : ndarray
        Law of the first hidden state.
    Tr : ndarray
        Transition matrix.
    state_of : ndarray
        Base state of each chain state.
    k_of : ndarray
        Distinct-state count minus one (augmented) or zeros (stationary).
    order : ndarray
        Chain states sorted lexicographically by ``(s, k)`` for tie-breaking.
    mode : str
    """

    p1: np.ndarray
    Tr: np.ndarray
    state_of: np.ndarray
    k_of: np.ndarray
    order: np.ndarray
    mode: str

    @property
    def n(self) -> int:
        return int(self.Tr.shape[0])

    def expand(self, le: np.ndarray) -> np.ndarray:
        """Map ``(T, kappa)`` base-state emissions onto chain states."""
        return np.ascontiguousarray(le[:, self.state_of])


def build_chain(P: np.ndarray, mode: str = "augmented") -> Chain:
    P = np.asarray(P, dtype=float)
    kappa = P.shape[0]
    if mode == "augmented":
        Tr = augment_transitions(P)
        sk = aug_states(kappa)
        order = np.lexsort((sk[:, 1], sk[:, 0]))
        return Chain(Tr[0].copy(), Tr, sk[:, 0].copy(), sk[:, 1].copy(), order, mode)
    if mode == "stationary":
        nu = stationary_distribution(P)
        idx = np.arange(kappa)
        return Chain(nu, P.copy(), idx, np.zeros(kappa, dtype=np.int64), idx, mode)
    raise ConfigError(f"unknown chain mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class ForwardFunctions:
    """Normalised forward vectors with log normalisers.

    ``alpha_hat[t]`` is p(state at bin t | obs up to t); ``log_c[t]`` is
    log p(obs t | obs before t). ``log_alpha`` gives the unnormalised log forward values.
    """

    alpha_hat: np.ndarray
    log_c: np.ndarray
    chain: Chain
    le: np.ndarray

    @property
    def log_alpha(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.alpha_hat) + np.cumsum(self.log_c)[:, None]

    @property
    def loglik(self) -> float:
        return float(self.log_c.sum())


@dataclass(frozen=True)
class Smoothed:
    """Per-bin posterior over chain states with base-state and K marginals."""

    prob: np.ndarray
    S: np.ndarray
    K: np.ndarray
    loglik: float


@dataclass(frozen=True)
class StatePath:
    """A hidden path. For the augmented chain ``s[0] = k[0] = 0`` is the fixed start."""

    s: np.ndarray
    k: np.ndarray
    log_prob: Optional[float] = None


def _prepare(params: ModelParams, data: BinnedDataset, mode: str,
             use_positions: Optional[bool], up_to: Optional[int] = None):
    chain = build_chain(params.P, mode)
    le = emission_loglik(params, data, use_positions)
    if up_to is not None:
        if not 0 < up_to <= data.T:
            raise ConfigError("up_to must lie in 1..T")
        le = le[:up_to]
    return chain, chain.expand(le)


def _run_forward(chain: Chain, le_aug: np.ndarray) -> ForwardFunctions:
    alpha, log_c = K.dense_forward(chain.p1, chain.Tr, le_aug)
    if np.isneginf(log_c).any():
        t = int(np.flatnonzero(np.isneginf(log_c))[0])
        raise NumericalError(f"observation at bin {t} is impossible under the model")
    return ForwardFunctions(alpha, log_c, chain, le_aug)


def forward(params: ModelParams, data: BinnedDataset, up_to: Optional[int] = None,
            mode: str = "augmented", use_positions: Optional[bool] = None) -> ForwardFunctions:
    """Forward recursion over bins ``0..up_to-1``."""
    chain, le = _prepare(params, data, mode, use_positions, up_to)
    return _run_forward(chain, le)


def backward(params: ModelParams, data: BinnedDataset, mode: str = "augmented",
             use_positions: Optional[bool] = None, fwd: Optional[ForwardFunctions] = None
             ) -> np.ndarray:
    """Log backward values log p(obs after t | state at t), zero at the last bin."""
    if fwd is None:
        fwd = forward(params, data, mode=mode, use_positions=use_positions)
    beta = K.dense_backward(fwd.chain.Tr, fwd.le, fwd.log_c)
    tail = np.concatenate([np.cumsum(fwd.log_c[::-1])[::-1][1:], [0.0]])
    with np.errstate(divide="ignore"):
        return np.log(beta) + tail[:, None]


def smooth(params: ModelParams, data: BinnedDataset, mode: str = "augmented",
           use_positions: Optional[bool] = None) -> Smoothed:
    """Posterior over chain states at each bin, with S and K marginals."""
    fwd = forward(params, data, mode=mode, use_positions=use_positions)
    return smooth_from_forward(fwd, params.kappa)


def smooth_from_forward(fwd: ForwardFunctions, kappa: int) -> Smoothed:
    beta = K.dense_backward(fwd.chain.Tr, fwd.le, fwd.log_c)
    prob = fwd.alpha_hat * beta
    prob /= prob.sum(1, keepdims=True)
    T = prob.shape[0]
    S = np.zeros((T, kappa))
    Km = np.zeros((T, kappa))
    np.add.at(S.T, fwd.chain.state_of, prob.T)
    np.add.at(Km.T, fwd.chain.k_of, prob.T)
    return Smoothed(prob, S, Km, fwd.loglik)


def log_likelihood(params: ModelParams, data: BinnedDataset, mode: str = "augmented",
                   use_positions: Optional[bool] = None) -> float:
    return forward(params, data, mode=mode, use_positions=use_positions).loglik


def _wrap_path(chain: Chain, path: np.ndarray) -> tuple:
    s = chain.state_of[path]
    k = chain.k_of[path]
    if chain.mode == "augmented":
        s = np.concatenate([[0], s])
        k = np.concatenate([[0], k])
    return s, k


def sample_state_path(params: ModelParams, data: BinnedDataset, rng: np.random.Generator,
                      mode: str = "augmented", use_positions: Optional[bool] = None,
                      fwd: Optional[ForwardFunctions] = None) -> StatePath:
    """Exact draw of the hidden path by stochastic backward recursion."""
    if fwd is None:
        fwd = forward(params, data, mode=mode, use_positions=use_positions)
    u = rng.random(fwd.alpha_hat.shape[0])
    path = K.dense_sample_path(fwd.alpha_hat, fwd.chain.Tr, u)
    s, k = _wrap_path(fwd.chain, path)
    return StatePath(s, k)


def viterbi(params: ModelParams, data: BinnedDataset, mode: str = "augmented",
            use_positions: Optional[bool] = None) -> StatePath:
    """Most probable hidden path; ties go to the lexicographically smallest ``(s, k)``."""
    chain, le = _prepare(params, data, mode, use_positions)
    with np.errstate(divide="ignore"):
        logp1 = np.log(chain.p1)
        logTr = np.log(chain.Tr)
    path, best = K.dense_viterbi(logp1, logTr, le, chain.order)
    if not np.isfinite(best):
        raise NumericalError("no path has positive probability")
    s, k = _wrap_path(chain, path)
    ll = log_likelihood(params, data, mode, use_positions)
    return StatePath(s, k, float(best - ll))
