"""The observed-position HMM: emissions, augmented chain and stationary law.

States are 0-based in memory. An augmented state ``(s, k)`` pairs the current
state ``s`` with ``k + 1`` distinct states seen so far (``0 <= s <= k``) and is
stored at flat index ``k (k + 1) / 2 + s``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError, DataError
from .ingest import BinnedDataset, SpatialGrid

__all__ = [
    "Hyperparams",
    "ModelParams",
    "StationaryFallbackWarning",
    "aug_size",
    "aug_index",
    "aug_states",
    "spike_log_lik",
    "spike_loglik_matrix",
    "position_logprob_table",
    "position_prob",
    "joint_emission_log_lik",
    "emission_loglik",
    "augment_transitions",
    "stationary_distribution",
]


class StationaryFallbackWarning(UserWarning):
    """The chain is reducible or periodic; a Cesaro average was returned."""


def aug_size(kappa: int) -> int:
    return kappa * (kappa + 1) // 2


def aug_index(s: int, k: int) -> int:
    if not 0 <= s <= k:
        raise ValueError("augmented state requires 0 <= s <= k")
    return k * (k + 1) // 2 + s


def aug_states(kappa: int) -> np.ndarray:
    """``(kappa~, 2)`` array of ``(s, k)`` in flat-index order."""
    out = [(s, k) for k in range(kappa) for s in range(k + 1)]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyperparameters.

    Parameters
    ----------
    kappa_bar : int
        Largest model size considered.
    alpha, beta : float
        Gamma shape and rate for the firing rates.
    psi : ndarray
        2x2 SPD Inverse-Wishart scale.
    delta : float
        Inverse-Wishart degrees of freedom.
    omega : float
        Dirichlet weight, replicated over the row length.
    """

    kappa_bar: int = 10
    alpha: float = 0.5
    beta: float = 0.01
    psi: np.ndarray = field(default_factory=lambda: np.eye(2))
    delta: float = 4.0
    omega: float = 1.0

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float).reshape(2, 2)
        object.__setattr__(self, "psi", psi)
        if int(self.kappa_bar) != self.kappa_bar or self.kappa_bar < 1:
            raise ConfigError("kappa_bar must be a positive integer")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not self.beta >= 0:
            raise ConfigError("beta must be non-negative")
        if not np.allclose(psi, psi.T) or np.linalg.eigvalsh(psi).min() <= 0:
            raise ConfigError("psi must be symmetric positive definite")
        if not self.delta > 1:
            raise ConfigError("delta must exceed 1")
        if not self.omega > 0:
            raise ConfigError("omega must be positive")

    @classmethod
    def for_grid(cls, grid: SpatialGrid, **kw) -> "Hyperparams":
        """Defaults with ``psi = (span / 8)^2 I``, span the geodesic diameter."""
        if "psi" not in kw:
            kw["psi"] = np.eye(2) * (grid.span / 8.0) ** 2
        return cls(**kw)

    def to_json(self) -> dict:
        return {
            "kappa_bar": int(self.kappa_bar), "alpha": self.alpha, "beta": self.beta,
            "psi": self.psi.tolist(), "delta": self.delta, "omega": self.omega,
        }


@dataclass(frozen=True, eq=False)
class ModelParams:
    """One parameter set theta = (P, lambda, xi, Sigma).

    Parameters
    ----------
    P : ndarray
        ``(kappa, kappa)`` row-stochastic transition matrix.
    lam : ndarray
        ``(kappa, C)`` firing rates in Hz.
    xi : ndarray
        ``(kappa,)`` position-mode labels (0-based).
    sigma : ndarray
        ``(kappa, 2, 2)`` SPD covariances.
    grid : SpatialGrid
    dt : float, optional
        Bin width used when fitting.
    """

    P: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    sigma: np.ndarray
    grid: SpatialGrid = field(repr=False)
    dt: Optional[float] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        xi = np.asarray(self.xi, dtype=np.int64).ravel()
        sigma = np.asarray(self.sigma, dtype=float).reshape(-1, 2, 2)
        k = P.shape[0]
        if P.shape != (k, k) or lam.ndim != 2 or lam.shape[0] != k or xi.size != k \
                or sigma.shape[0] != k:
            raise DataError("inconsistent parameter shapes")
        if np.any(P < 0) or np.any(np.abs(P.sum(1) - 1) > 1e-9):
            raise DataError("P must be row-stochastic")
        # rows already stochastic to rounding are left alone so JSON round trips are exact
        off = np.abs(P.sum(1) - 1) > 1e-14
        if off.any():
            P = P.copy()
            P[off] /= P[off].sum(1, keepdims=True)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise DataError("firing rates must be finite and non-negative")
        if np.any((xi < 0) | (xi >= self.grid.M)):
            raise DataError("xi labels out of range")
        if not np.allclose(sigma, np.swapaxes(sigma, 1, 2)):
            raise DataError("covariances must be symmetric")
        sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise DataError("covariances must be positive definite")
        for name, val in (("P", P), ("lam", lam), ("xi", xi), ("sigma", sigma)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def kappa(self) -> int:
        return int(self.P.shape[0])

    @property
    def C(self) -> int:
        return int(self.lam.shape[1])

    def log_position_table(self) -> np.ndarray:
        """``(kappa, M)`` table of log p(x | S = i)."""
        cached = self.__dict__.get("_logpos")
        if cached is None:
            cached = position_logprob_table(self.xi, self.sigma, self.grid.embedding)
            cached.setflags(write=False)
            self.__dict__["_logpos"] = cached
        return cached

    def truncate(self, kappa: int) -> "ModelParams":
        """First ``kappa`` states, with transition rows renormalised."""
        if not 1 <= kappa <= self.kappa:
            raise ConfigError("invalid truncation size")
        P = self.P[:kappa, :kappa].copy()
        rs = P.sum(1, keepdims=True)
        bad = rs[:, 0] <= 0
        P[bad] = 1.0 / kappa
        rs[bad] = 1.0
        return ModelParams(P / rs, self.lam[:kappa], self.xi[:kappa], self.sigma[:kappa],
                           self.grid, self.dt)

    def to_json(self) -> dict:
        return {
            "kappa": self.kappa,
            "C": self.C,
            "P": self.P.ravel().tolist(),
            "lambda": self.lam.ravel().tolist(),
            "xi": (self.xi + 1).tolist(),
            "sigma": [[s[0][0], s[0][1], s[1][1]] for s in self.sigma.tolist()],
            "grid_checksum": self.grid.checksum(),
            "dt": self.dt,
        }

    @classmethod
    def from_json(cls, obj: dict, grid: SpatialGrid) -> "ModelParams":
        try:
            k, C = int(obj["kappa"]), int(obj["C"])
            if obj.get("grid_checksum") not in (None, grid.checksum()):
                raise DataError("model was fitted on a different grid (checksum mismatch)")
            P = np.asarray(obj["P"], dtype=float).reshape(k, k)
            lam = np.asarray(obj["lambda"], dtype=float).reshape(k, C)
            xi = np.asarray(obj["xi"], dtype=np.int64) - 1
            sig = np.array([[[a, b], [b, c]] for a, b, c in obj["sigma"]], dtype=float)
            return cls(P, lam, xi, sig, grid, obj.get("dt"))
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed model JSON: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path, grid: SpatialGrid) -> "ModelParams":
        with open(path) as fh:
            return cls.from_json(json.load(fh), grid)


def _poisson_terms(lam_row: np.ndarray, counts: np.ndarray, dt: float) -> float:
    mu = dt * lam_row
    if np.any((mu == 0) & (counts > 0)):
        return -np.inf
    pos = counts > 0
    return float(-mu.sum() + (counts[pos] * np.log(mu[pos])).sum() - gammaln(counts + 1.0).sum())


def spike_log_lik(params: ModelParams, state: int, counts, dt: float) -> float:
    """log p(y | S = state) for independent Poisson counts with means ``dt * lambda``."""
    counts = np.asarray(counts, dtype=float).ravel()
    if np.any(counts < 0) or not dt > 0:
        raise ConfigError("counts must be non-negative and dt positive")
    return _poisson_terms(params.lam[state], counts, dt)


def spike_loglik_matrix(lam: np.ndarray, counts: np.ndarray, dt: float) -> np.ndarray:
    """``(T, kappa)`` Poisson log-likelihoods of every bin under every state."""
    counts = np.asarray(counts, dtype=float)
    mu = dt * np.asarray(lam, dtype=float)
    zero = mu <= 0
    logmu = np.log(np.where(zero, 1.0, mu))
    out = counts @ logmu.T - mu.sum(1)[None, :] - gammaln(counts + 1.0).sum(1)[:, None]
    if zero.any():
        impossible = (counts > 0).astype(float) @ zero.T.astype(float) > 0
        out[impossible] = -np.inf
    return out


def position_logprob_table(xi: np.ndarray, sigma: np.ndarray, F: np.ndarray) -> np.ndarray:
    """log p(x | S = i) for all states and labels.

    ``p(x | i) ∝ exp(-0.5 f_{xi_i}(x)^T Sigma_i^{-1} f_{xi_i}(x))``, normalised over the grid.
    """
    xi = np.asarray(xi, dtype=np.int64)
    prec = np.linalg.inv(np.asarray(sigma, dtype=float).reshape(-1, 2, 2))
    f = F[xi]  # (kappa, M, 2)
    q = -0.5 * np.einsum("kmi,kij,kmj->km", f, prec, f)
    return q - logsumexp(q, axis=1, keepdims=True)


def position_prob(params: ModelParams, state: int, x: int) -> float:
    return float(np.exp(params.log_position_table()[state, x]))


def joint_emission_log_lik(params: ModelParams, state: int, counts, x: Optional[int],
                           dt: float) -> float:
    out = spike_log_lik(params, state, counts, dt)
    if x is not None:
        out += float(params.log_position_table()[state, x])
    return out


def emission_loglik(params: ModelParams, data: BinnedDataset,
                    use_positions: Optional[bool] = None) -> np.ndarray:
    """``(T, kappa)`` joint emission log-likelihoods of a dataset.

    Positions are used when present unless ``use_positions`` is False.
    """
    if data.C != params.C:
        raise DataError(f"data has {data.C} cells, model has {params.C}")
    le = spike_loglik_matrix(params.lam, data.counts, data.dt)
    if use_positions is None:
        use_positions = data.position is not None
    if use_positions:
        if data.position is None:
            raise DataError("positions requested but absent")
        if data.position.max(initial=0) >= params.grid.M:
            raise DataError("position label outside the grid")
        le = le + params.log_position_table()[:, data.position].T
    return le


def augment_transitions(P: np.ndarray) -> np.ndarray:
    """Dense transition matrix of the augmented chain.

    From ``(s', k)``: to ``(s'', k)`` with probability ``P[s', s'']`` for
    ``s'' <= k``; to ``(k+1, k+1)`` with ``sum_{s > k} P[s', s]``; zero otherwise.
    """
    P = np.asarray(P, dtype=float)
    kappa = P.shape[0]
    n = aug_size(kappa)
    out = np.zeros((n, n))
    tail = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]  # tail[:, j] = sum_{l >= j}
    for k in range(kappa):
        for sp in range(k + 1):
            row = aug_index(sp, k)
            for s in range(k + 1):
                out[row, aug_index(s, k)] = P[sp, s]
            if k + 1 < kappa:
                out[row, aug_index(k + 1, k + 1)] = tail[sp, k + 1]
    return out


def stationary_distribution(P: np.ndarray, return_flag: bool = False):
    """Stationary law of the base chain.

    Solves ``(P^T - I) nu = 0`` with ``sum(nu) = 1``. When the solution is not
    unique (reducible chain) or the chain is periodic, returns the Cesaro
    average of ``u P^n`` over ``n < 10^4`` from uniform ``u`` and warns.
    """
    P = np.asarray(P, dtype=float)
    k = P.shape[0]
    if k == 1:
        nu = np.ones(1)
        return (nu, False) if return_flag else nu
    eig = np.linalg.eigvals(P)
    unit = np.abs(np.abs(eig) - 1.0) < 1e-10
    fallback = unit.sum() > 1
    if not fallback:
        A = np.vstack([P.T - np.eye(k), np.ones((1, k))])
        b = np.zeros(k + 1)
        b[-1] = 1.0
        nu, *_ = np.linalg.lstsq(A, b, rcond=None)
        # round-off mass on transient states would otherwise be amplified by
        # the emissions of paths starting there
        nu[nu < 64 * np.finfo(float).eps] = 0.0
        nu /= nu.sum()
    else:
        warnings.warn("reducible or periodic chain; returning Cesaro average",
                      StationaryFallbackWarning, stacklevel=2)
        v = np.full(k, 1.0 / k)
        acc = np.zeros(k)
        for _ in range(10_000):
            acc += v
            v = v @ P
        nu = acc / acc.sum()
    return (nu, bool(fallback)) if return_flag else nu
