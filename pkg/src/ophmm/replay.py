"""Template replay scores, event detection and model-fit comparison by BIC.

The replay score of a template ``x_{1:a}`` at offset ``t`` is

    Omega = p(X_t..X_{t+a-1} = x_{1:a} | y_{1:T}) / p(X_t..X_{t+a-1} = x_{1:a})

with both terms computed under the stationary chain, so that spikes carrying
no information give ``Omega = 1``. Scores are handled as natural logs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _kernels as K
from .decode import BDParams
from .errors import ConfigError, DataError, NumericalError
from .hmm import forward
from .ingest import BinnedDataset, rebin
from .model import ModelParams, spike_loglik_matrix, stationary_distribution

__all__ = [
    "Template",
    "ReplayEvent",
    "ScoreScan",
    "BicRow",
    "BicReport",
    "trajectory_log_posterior",
    "trajectory_posterior",
    "trajectory_log_marginal",
    "trajectory_marginal",
    "log_replay_score",
    "replay_score",
    "local_maxima",
    "dedupe",
    "detect",
    "detect_all",
    "bic",
    "op_free_parameters",
    "stationary_loglik",
    "assess_fit",
    "extract_templates",
]

log = logging.getLogger(__name__)

OMEGA_STRONG = 20.0
OMEGA_VERY_STRONG = 150.0
DEFAULT_COMPRESSIONS = tuple(range(1, 21))


@dataclass(frozen=True, eq=False)
class Template:
    """A position trajectory used as a replay query (labels 0-based)."""

    id: int
    labels: np.ndarray
    source_epoch: str = "RUN"
    direction: str = ""

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64).ravel()
        if lab.size < 2:
            raise ConfigError("a template needs at least two positions")
        if lab.min() < 0:
            raise ConfigError("template labels must be non-negative")
        object.__setattr__(self, "labels", lab)

    @property
    def a(self) -> int:
        return int(self.labels.size)

    def nominal_duration(self, dt: float) -> float:
        return self.a * dt

    def reversed(self, new_id: Optional[int] = None) -> "Template":
        flip = {"inbound": "outbound", "outbound": "inbound"}.get(self.direction, self.direction)
        return Template(self.id if new_id is None else new_id, self.labels[::-1].copy(),
                        self.source_epoch, flip)

    def to_json(self) -> dict:
        return {"id": int(self.id), "labels": (self.labels + 1).tolist(),
                "source_epoch": self.source_epoch, "direction": self.direction}

    @classmethod
    def from_json(cls, obj: dict) -> "Template":
        try:
            return cls(int(obj["id"]), np.asarray(obj["labels"], dtype=np.int64) - 1,
                       obj.get("source_epoch", "RUN"), obj.get("direction", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed template: {exc}") from exc


@dataclass(frozen=True)
class ReplayEvent:
    """A detected replay.

    ``t_rep`` is the 0-based start bin on the compressed timescale (bin width
    ``base_dt / c``); the event covers bins ``t_rep .. t_rep + a - 1``.
    """

    template_id: int
    t_rep: int
    c: int
    log_omega: float
    a: int
    base_dt: float

    @property
    def start_s(self) -> float:
        return self.t_rep * self.base_dt / self.c

    @property
    def end_s(self) -> float:
        return (self.t_rep + self.a) * self.base_dt / self.c

    @property
    def omega_log10(self) -> float:
        return self.log_omega / math.log(10.0)

    @property
    def omega(self) -> float:
        return math.exp(self.log_omega) if self.log_omega < 700 else math.inf


# ------------------------------------------------------- trajectory terms

def _check_template(params: ModelParams, labels) -> np.ndarray:
    lab = np.asarray(getattr(labels, "labels", labels), dtype=np.int64).ravel()
    if lab.size < 1:
        raise ConfigError("empty trajectory")
    if lab.min() < 0 or lab.max() >= params.grid.M:
        raise DataError("template label outside the grid")
    return lab


class ScoreScan:
    """Forward and backward passes of one dataset, shared by all template scans."""

    def __init__(self, params: ModelParams, data: BinnedDataset, mode: str = "stationary"):
        if data.position is not None:
            data = data.spikes_only()
        self.params = params
        self.data = data
        fwd = forward(params, data, mode=mode, use_positions=False)
        self.chain = fwd.chain
        self.alpha = fwd.alpha_hat
        self.log_c = fwd.log_c
        self.le = fwd.le
        self.beta = K.dense_backward(fwd.chain.Tr, fwd.le, fwd.log_c)
        self._LQ = params.log_position_table()[fwd.chain.state_of]  # (n, M)

    @property
    def T(self) -> int:
        return int(self.alpha.shape[0])

    def log_posterior(self, labels) -> np.ndarray:
        """log p(template at offset t | y_{1:T}) for ``t = 0..T-a``."""
        lab = _check_template(self.params, labels)
        if lab.size > self.T:
            return np.zeros(0)
        lp = np.ascontiguousarray(self._LQ[:, lab].T)
        return K.trajectory_scan(self.alpha, self.beta, self.le, self.log_c, self.chain.Tr,
                                 self.chain.state_of, lp)

    def log_omega(self, labels) -> np.ndarray:
        return self.log_posterior(labels) - trajectory_log_marginal(self.params, labels)


def trajectory_log_posterior(params: ModelParams, data: BinnedDataset, labels, t: int,
                             mode: str = "stationary") -> float:
    """log p(X_t = x_1, ..., X_{t+a-1} = x_a | y_{1:T}) for 0-based offset ``t``."""
    lab = _check_template(params, labels)
    if not 0 <= t <= data.T - lab.size:
        raise ConfigError("template does not fit at this offset")
    scan = ScoreScan(params, data, mode)
    lp = np.ascontiguousarray(scan._LQ[:, lab].T)
    sl = slice(t, t + lab.size)
    return float(K.trajectory_scan(scan.alpha[sl], scan.beta[sl], scan.le[sl], scan.log_c[sl],
                                   scan.chain.Tr, scan.chain.state_of, lp)[0])


def trajectory_posterior(params: ModelParams, data: BinnedDataset, labels, t: int,
                         mode: str = "stationary") -> float:
    return math.exp(trajectory_log_posterior(params, data, labels, t, mode))


def trajectory_log_marginal(params: ModelParams, labels) -> float:
    """log p(X_t = x_1, ..., X_{t+a-1} = x_a) with the chain at equilibrium."""
    lab = _check_template(params, labels)
    LQ = params.log_position_table()
    nu = stationary_distribution(params.P)
    with np.errstate(divide="ignore"):
        acc = np.log(nu) + LQ[:, lab[0]]
    for u in range(1, lab.size):
        m = acc.max()
        with np.errstate(divide="ignore"):
            acc = np.log(np.exp(acc - m) @ params.P) + m + LQ[:, lab[u]]
    out = float(logsumexp(acc))
    if not np.isfinite(out):
        raise NumericalError("template has zero marginal probability")
    return out


def trajectory_marginal(params: ModelParams, labels) -> float:
    return math.exp(trajectory_log_marginal(params, labels))


def log_replay_score(params: ModelParams, data: BinnedDataset, labels, t: int) -> float:
    """Natural log of Omega at 0-based offset ``t``."""
    return (trajectory_log_posterior(params, data, labels, t)
            - trajectory_log_marginal(params, labels))


def replay_score(params: ModelParams, data: BinnedDataset, labels, t: int) -> float:
    """Omega on the linear scale (``inf`` beyond floating range)."""
    v = log_replay_score(params, data, labels, t)
    return math.exp(v) if v < 700 else math.inf


# ------------------------------------------------------------- detection

def local_maxima(log_omega: np.ndarray, log_threshold: float) -> np.ndarray:
    """Offsets above threshold that strictly exceed both neighbours.

    A missing neighbour at either end of the scan does not block a maximum.
    """
    s = np.asarray(log_omega, dtype=float)
    if s.size == 0:
        return np.zeros(0, dtype=np.int64)
    left = np.concatenate([[-np.inf], s[:-1]])
    right = np.concatenate([s[1:], [-np.inf]])
    return np.flatnonzero((s > log_threshold) & (s > left) & (s > right))


def _overlap(e1: ReplayEvent, e2: ReplayEvent) -> bool:
    inter = min(e1.end_s, e2.end_s) - max(e1.start_s, e2.start_s)
    shorter = min(e1.end_s - e1.start_s, e2.end_s - e2.start_s)
    return inter >= 0.5 * shorter - 1e-12


def dedupe(events: Iterable[ReplayEvent]) -> list:
    """Greedy overlap suppression keeping the greatest score.

    Events are visited by decreasing score, then earlier start, then lower
    template id, then lower compression; an event is dropped if its span
    overlaps a kept event by at least half of the shorter span.
    """
    ranked = sorted(events, key=lambda e: (-e.log_omega, e.start_s, e.template_id, e.c))
    kept: list = []
    for ev in ranked:
        if not any(_overlap(ev, k) for k in kept):
            kept.append(ev)
    return sorted(kept, key=lambda e: (e.start_s, e.template_id, e.c))


def _compressed(data, c: int, base_dt: Optional[float]) -> BinnedDataset:
    if c == 1 and isinstance(data, BinnedDataset) and (base_dt is None or
                                                       abs(base_dt - data.dt) < 1e-12):
        return data if data.position is None else data.spikes_only()
    return rebin(data, c, base_dt)


def detect_all(params: ModelParams, data, templates: Sequence[Template],
               compressions: Sequence[int] = DEFAULT_COMPRESSIONS,
               omega_star: float = OMEGA_STRONG, base_dt: Optional[float] = None) -> list:
    """Local-maximum detections for every template and compression, before dedupe."""
    if not templates:
        raise ConfigError("no templates given")
    if omega_star <= 0:
        raise ConfigError("omega_star must be positive")
    for c in compressions:
        if isinstance(c, (bool, np.bool_)) or int(c) != c or c < 1:
            raise ConfigError(f"compression rate must be a positive integer, got {c!r}")
    if base_dt is None:
        base_dt = getattr(data, "dt", None)
        if base_dt is None:
            raise ConfigError("base_dt is required for raw recordings")
    thr = math.log(omega_star)
    out = []
    for c in sorted({int(c) for c in compressions}):
        d = _compressed(data, c, base_dt)
        scan = ScoreScan(params, d)
        for tpl in sorted(templates, key=lambda z: z.id):
            lo = scan.log_omega(tpl.labels)
            for t in local_maxima(lo, thr):
                out.append(ReplayEvent(int(tpl.id), int(t), c, float(lo[t]), tpl.a,
                                       float(base_dt)))
    return out


def detect(params: ModelParams, data, templates: Sequence[Template],
           compressions: Sequence[int] = DEFAULT_COMPRESSIONS,
           omega_star: float = OMEGA_STRONG, base_dt: Optional[float] = None) -> list:
    """Replay events above ``omega_star`` after cross-template, cross-compression dedupe.

    Parameters
    ----------
    data : BinnedDataset or RawRecording
        Spikes. Compressions other than 1 require raw spike times.
    base_dt : float, optional
        Behavioural bin width; defaults to ``data.dt``.
    """
    return dedupe(detect_all(params, data, templates, compressions, omega_star, base_dt))


# -------------------------------------------------------------------- BIC

@dataclass(frozen=True)
class BicRow:
    label: str
    loglik: float
    n_params: int
    T: int

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.n_params, self.T)


@dataclass
class BicReport:
    rows: list = field(default_factory=list)

    def get(self, label: str) -> BicRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def gate_passes(self) -> bool:
        """OP-RUN beats OP-stationary and sits nearer OP-REST than the prior mean."""
        run = self.get("OP-RUN").bic
        stat = self.get("OP-stationary").bic
        rest = self.get("OP-REST").bic
        prior = self.get("OP-prior-mean").bic
        return run < stat and abs(run - rest) < abs(run - prior)

    def to_rows(self) -> list:
        return [(r.label, r.loglik, r.n_params, r.bic) for r in self.rows]


def bic(loglik: float, n_params: int, T: int) -> float:
    return -2.0 * float(loglik) + n_params * math.log(T)


def op_free_parameters(kappa: int, C: int) -> int:
    return kappa * (kappa + C + 3)


def stationary_loglik(params: ModelParams, data: BinnedDataset) -> float:
    """Spikes-only log-likelihood with states drawn independently from the stationary law."""
    nu = stationary_distribution(params.P)
    le = spike_loglik_matrix(params.lam, data.counts, data.dt)
    with np.errstate(divide="ignore"):
        return float(logsumexp(le + np.log(nu)[None, :], axis=1).sum())


def _spikes_loglik(params: ModelParams, data: BinnedDataset) -> float:
    return forward(params, data.spikes_only() if data.position is not None else data,
                   mode="stationary", use_positions=False).loglik


def assess_fit(data: BinnedDataset, run: ModelParams, rest: ModelParams,
               prior_samples: Sequence[ModelParams] = (), bd: Optional[BDParams] = None,
               bd_prior="occupancy") -> BicReport:
    """BIC of the candidate explanations of spikes-only analysis data.

    ``prior_samples`` give one row each and their mean BIC forms the
    ``OP-prior-mean`` row. The BD row uses ``M * C`` free parameters.
    """
    T = data.T
    rows = [BicRow("OP-RUN", _spikes_loglik(run, data), op_free_parameters(run.kappa, run.C), T),
            BicRow("OP-REST", _spikes_loglik(rest, data),
                   op_free_parameters(rest.kappa, rest.C), T)]
    prior_bics = []
    for p in prior_samples:
        try:
            ll = _spikes_loglik(p, data)
        except NumericalError:
            ll = -math.inf
        row = BicRow("OP-prior-sample", ll, op_free_parameters(p.kappa, p.C), T)
        rows.append(row)
        prior_bics.append((row.bic, row.n_params))
    if prior_bics:
        mb = float(np.mean([b for b, _ in prior_bics]))
        npar = int(round(np.mean([n for _, n in prior_bics])))
        rows.append(BicRow("OP-prior-mean", (mb - npar * math.log(T)) / -2.0, npar, T))
    rows.append(BicRow("OP-stationary", stationary_loglik(run, data),
                       run.kappa * (1 + run.C + 3), T))
    if bd is not None:
        with np.errstate(divide="ignore"):
            lp = spike_loglik_matrix(bd.rates, data.counts, data.dt) + bd.log_prior(bd_prior)
        rows.append(BicRow("BD-RUN", float(logsumexp(lp, axis=1).sum()), bd.M * data.C, T))
    return BicReport(rows)


# -------------------------------------------------------------- templates

def _collapse(labels: np.ndarray) -> np.ndarray:
    keep = np.concatenate([[True], labels[1:] != labels[:-1]])
    return labels[keep]


def extract_templates(positions, regions: Sequence[tuple], collapse: bool = False,
                      both_directions: bool = False, select: str = "first",
                      min_length: int = 2) -> list:
    """Cut traversals between pairs of label sets out of an observed trajectory.

    Parameters
    ----------
    positions : array_like
        Observed labels (0-based).
    regions : sequence of (from_set, to_set)
        A traversal starts at the last bin in ``from_set`` before ``to_set``
        is reached and ends at the first bin in ``to_set``.
    collapse : bool
        Merge runs of identical consecutive labels.
    both_directions : bool
        Also return each template reversed.
    select : {"first", "median", "all"}
        Keep the first traversal, the traversal of median length (earliest
        among ties) or every traversal.
    min_length : int
        Traversals shorter than this are ignored.

    Returns
    -------
    list of Template
        Ids follow the order of ``regions``; reversed copies follow their originals.
    """
    if select not in ("first", "median", "all"):
        raise ConfigError(f"unknown template selection {select!r}")
    x = np.asarray(positions, dtype=np.int64).ravel()
    out: list = []
    for src, dst in regions:
        src_m = np.isin(x, list(src))
        dst_m = np.isin(x, list(dst))
        segs = []
        last_src = -1
        for t in range(x.size):
            if src_m[t]:
                last_src = t
            elif dst_m[t] and last_src >= 0:
                seg = x[last_src:t + 1]
                last_src = -1
                if collapse:
                    seg = _collapse(seg)
                if seg.size >= min_length:
                    segs.append(seg)
                    if select == "first":
                        break
        if not segs:
            log.warning("region pair never traversed; no template produced")
            continue
        if select == "median":
            lens = np.array([sg.size for sg in segs])
            med = np.sort(lens)[(lens.size - 1) // 2]
            segs = [segs[int(np.flatnonzero(lens == med)[0])]]
        for seg in segs:
            tpl = Template(len(out), seg.copy(), "RUN", "outbound")
            out.append(tpl)
            if both_directions:
                out.append(tpl.reversed(len(out)))
    return out
