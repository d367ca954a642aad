"""Ground-truth simulation, shipped protocols and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DataError
from .ingest import BinnedDataset, SpatialGrid, grid_from_cells
from .model import ModelParams

__all__ = [
    "Protocol",
    "PlantedLedger",
    "linear_track_protocol",
    "tmaze_protocol",
    "simulate",
    "simulate_replay",
    "position_smoothing",
    "relabel_by_appearance",
    "kl_divergence",
    "BinaryCounts",
    "classify_bins",
    "classify_replay",
    "detected_planted",
]


@dataclass(frozen=True)
class Protocol:
    """A synthetic environment with a hand-built ground-truth model.

    Attributes
    ----------
    name : str
    theta : ModelParams
        Ground truth, states labelled in expected order of appearance.
    dt : float
    T : int
        Bins per simulated session.
    template_regions : list of (list, list)
        Pairs of label sets: a template runs from leaving the first set to
        reaching the second.
    n_events : int
        Planted replays per template.
    template_select : str
        Which traversal of each region pair becomes the template, see
        :func:`ophmm.replay.extract_templates`.
    """

    name: str
    theta: ModelParams
    dt: float
    T: int
    template_regions: list
    n_events: int = 20
    template_select: str = "median"

    @property
    def grid(self) -> SpatialGrid:
        return self.theta.grid

    def templates(self, positions) -> list:
        """Templates cut from an observed RUN trajectory."""
        from .replay import extract_templates
        return extract_templates(positions, self.template_regions, select=self.template_select)


def _region(grid: SpatialGrid, rows, cols) -> list:
    r0, r1 = rows
    c0, c1 = cols
    sel = ((grid.cells[:, 0] >= r0) & (grid.cells[:, 0] <= r1)
           & (grid.cells[:, 1] >= c0) & (grid.cells[:, 1] <= c1))
    return np.flatnonzero(sel).tolist()


def _label(grid: SpatialGrid, row: int, col: int) -> int:
    hit = np.flatnonzero((grid.cells[:, 0] == row) & (grid.cells[:, 1] == col))
    if hit.size != 1:
        raise ConfigError(f"square ({row}, {col}) is not accessible")
    return int(hit[0])


def _banded_transitions(adjacent: dict, stay: float, floor: float) -> np.ndarray:
    """Sticky chain moving only between adjacent states, with a small floor elsewhere."""
    k = len(adjacent)
    P = np.full((k, k), floor)
    for i, nb in adjacent.items():
        P[i, i] = stay
        P[i, nb] = (1.0 - stay - floor * (k - 1 - len(nb))) / len(nb)
    return P


def linear_track_protocol(dt: float = 0.1, T: int = 10_000) -> Protocol:
    """Linear track, 3 x 30 squares of 10 px, four states and four cells.

    States tile the track end to end and last 1 s on average; each cell fires
    mainly in one state. Templates are median-length end-to-end traversals in
    both directions.
    """
    cell = 10.0
    grid = grid_from_cells([(r, c) for r in range(3) for c in range(30)], cell, (0.0, 0.0),
                           (3, 30))
    xi = [_label(grid, 1, c) for c in (3, 11, 18, 26)]
    sig = np.array([[(1.5 * cell) ** 2, 0.0], [0.0, cell ** 2]])
    P = _banded_transitions({0: [1], 1: [0, 2], 2: [1, 3], 3: [2]}, 0.9, 0.005)
    lam = np.full((4, 4), 0.2)
    lam[np.arange(4), np.arange(4)] = (27.0, 22.5, 30.0, 24.0)
    theta = ModelParams(P, lam, xi, np.stack([sig] * 4), grid, dt)
    west = _region(grid, (0, 2), (0, 4))
    east = _region(grid, (0, 2), (25, 29))
    return Protocol("linear-track", theta, dt, T, [(west, east), (east, west)])


def tmaze_protocol(dt: float = 0.1, T: int = 10_000) -> Protocol:
    """T-maze: a 3 x 25 cross-bar over a 15 x 3 stem, five states and ten cells.

    States: stem foot, stem middle, junction, left arm, right arm. Each state
    has two place cells. Templates are median-length runs from the stem foot
    to either arm end.
    """
    cell = 10.0
    cells = [(r, c) for r in range(3) for c in range(25)]
    cells += [(r, c) for r in range(3, 18) for c in range(11, 14)]
    grid = grid_from_cells(cells, cell, (0.0, 0.0), (18, 25))
    xi = [_label(grid, r, c) for r, c in ((15, 12), (8, 12), (1, 12), (1, 3), (1, 21))]
    iso = np.eye(2) * (1.5 * cell) ** 2
    P = _banded_transitions({0: [1], 1: [0, 2], 2: [1, 3, 4], 3: [2], 4: [2]}, 0.9, 0.005)
    lam = np.full((5, 10), 0.2)
    for i, (a, b) in enumerate(((0, 5), (1, 6), (2, 7), (3, 8), (4, 9))):
        lam[i, a] = 1.5 * (16.0 + 2 * i)
        lam[i, b] = 1.5 * (10.0 + i)
    theta = ModelParams(P, lam, xi, np.stack([iso] * 5), grid, dt)
    foot = _region(grid, (15, 17), (11, 13))
    left = _region(grid, (0, 2), (0, 3))
    right = _region(grid, (0, 2), (21, 24))
    return Protocol("t-maze", theta, dt, T, [(foot, left), (foot, right)])


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum((u[:, None] > cdf).sum(1), cdf.shape[1] - 1)


def simulate(theta: ModelParams, T: int, rng: np.random.Generator, dt: Optional[float] = None,
             epoch: str = "SIM"):
    """Sample a chain path, positions and spike counts.

    Returns
    -------
    data : BinnedDataset
        Counts and positions.
    s : ndarray
        Base-state path ``s_0..s_T`` with ``s_0 = 0``.
    """
    dt = theta.dt if dt is None else dt
    if dt is None or not dt > 0:
        raise ConfigError("a positive dt is required")
    kappa = theta.kappa
    cdfP = np.cumsum(theta.P, axis=1)
    s = np.zeros(T + 1, dtype=np.int64)
    u = rng.random(T)
    for t in range(1, T + 1):
        row = cdfP[s[t - 1]]
        s[t] = min(int(np.searchsorted(row, u[t - 1] * row[-1], side="right")), kappa - 1)
    pos_cdf = np.cumsum(np.exp(theta.log_position_table()), axis=1)
    x = np.empty(T, dtype=np.int64)
    ux = rng.random(T)
    for i in range(kappa):
        sel = np.flatnonzero(s[1:] == i)
        if sel.size:
            x[sel] = _sample_rows(pos_cdf[i][None, :], ux[sel])
    counts = rng.poisson(dt * theta.lam[s[1:]])
    return BinnedDataset(dt, counts, x, epoch), s


def position_smoothing(theta: ModelParams, x: np.ndarray) -> np.ndarray:
    """p(S_t = i | x_{1:T}) under the position-only model started from state 0."""
    le = np.ascontiguousarray(theta.log_position_table()[:, x].T)
    p1 = theta.P[0].copy()
    alpha, log_c = K.dense_forward(p1, theta.P, le)
    beta = K.dense_backward(theta.P, le, log_c)
    g = alpha * beta
    return g / g.sum(1, keepdims=True)


@dataclass
class PlantedLedger:
    """Ground truth of a replay simulation.

    Attributes
    ----------
    events : list of (template_id, start_bin, length)
    s : ndarray
        Chain path ``s_0..s_T`` of the background trajectory.
    x : ndarray
        Trajectory after the templates were written in.
    """

    events: list
    s: np.ndarray
    x: np.ndarray

    def to_json(self) -> dict:
        return {
            "events": [{"template_id": int(i), "start_bin": int(b), "length": int(n)}
                       for i, b, n in self.events],
            "T": int(self.x.size),
        }

    def positive_bins(self, T: int) -> np.ndarray:
        lab = np.zeros(T, dtype=bool)
        for _, b, n in self.events:
            lab[b:b + n] = True
        return lab


def simulate_replay(theta: ModelParams, T: int, templates: Sequence, n_per_template: int,
                    rng: np.random.Generator, dt: Optional[float] = None,
                    max_retries: int = 10_000):
    """Spikes-only data with planted template replays.

    A background trajectory is simulated, templates are written in at random
    non-overlapping starts (a colliding start is redrawn), and counts are
    drawn with mean ``dt * sum_i lambda_i p(S_t = i | x_{1:T})``.

    Parameters
    ----------
    templates : sequence
        Objects with ``labels`` and ``id`` attributes, or plain label arrays.

    Returns
    -------
    data : BinnedDataset
        Spikes only, epoch ``"REST"``.
    ledger : PlantedLedger
    """
    dt = theta.dt if dt is None else dt
    bg, s = simulate(theta, T, rng, dt)
    x = bg.position.copy()
    events = []
    occupied = np.zeros(T, dtype=bool)
    for ti, tpl in enumerate(templates):
        labels = np.asarray(getattr(tpl, "labels", tpl), dtype=np.int64)
        tid = getattr(tpl, "id", ti)
        a = labels.size
        if a > T:
            raise DataError("template longer than the session")
        for _ in range(n_per_template):
            for _try in range(max_retries):
                start = int(rng.integers(0, T - a + 1))
                if not occupied[start:start + a].any():
                    break
            else:
                raise DataError("could not place planted events without overlap")
            occupied[start:start + a] = True
            x[start:start + a] = labels
            events.append((tid, start, a))
    events.sort(key=lambda e: e[1])
    gamma = position_smoothing(theta, x)
    rate = gamma @ theta.lam
    counts = rng.poisson(dt * rate)
    return BinnedDataset(dt, counts, None, "REST"), PlantedLedger(events, s, x)


def relabel_by_appearance(theta: ModelParams, s: np.ndarray) -> ModelParams:
    """Permute states so they are numbered in order of first appearance in ``s``.

    States that never appear keep their relative order after the visited ones.
    """
    first = []
    for v in np.asarray(s):
        if v not in first:
            first.append(int(v))
    order = first + [i for i in range(theta.kappa) if i not in first]
    o = np.asarray(order)
    return ModelParams(theta.P[np.ix_(o, o)], theta.lam[o], theta.xi[o], theta.sigma[o],
                       theta.grid, theta.dt)


def kl_divergence(p, q) -> float:
    """K-L divergence in bits; ``+inf`` where ``p > 0`` and ``q = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ConfigError("distributions must share their support")
    m = p > 0
    if np.any(q[m] <= 0):
        return float("inf")
    return float(np.sum(p[m] * np.log2(p[m] / q[m])))


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def jaccard(self) -> float:
        d = self.tp + self.fp + self.fn
        return float("nan") if d == 0 else self.tp / d

    @property
    def tpr(self) -> float:
        d = self.tp + self.fn
        return float("nan") if d == 0 else self.tp / d

    @property
    def fpr(self) -> float:
        d = self.fp + self.tn
        return float("nan") if d == 0 else self.fp / d


def classify_bins(truth: np.ndarray, predicted: np.ndarray) -> BinaryCounts:
    truth = np.asarray(truth, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    return BinaryCounts(int(np.sum(truth & predicted)), int(np.sum(~truth & predicted)),
                        int(np.sum(truth & ~predicted)), int(np.sum(~truth & ~predicted)))


def classify_replay(events, ledger: PlantedLedger, n_bins: int, bin_dt: float,
                    omega_grid: Sequence[float], base_dt: float) -> list:
    """Bin-level ROC and Jaccard over a sweep of thresholds.

    Parameters
    ----------
    events : sequence of ReplayEvent
        Detections (any threshold at or below the smallest in ``omega_grid``).
    ledger : PlantedLedger
        Planted events in bins of width ``base_dt``.
    n_bins : int
        Bins of width ``bin_dt`` covering the session.
    omega_grid : sequence of float
        Thresholds on Omega (linear scale).

    Returns
    -------
    list of (omega_star, BinaryCounts)
    """
    ratio = base_dt / bin_dt
    truth = np.zeros(n_bins, dtype=bool)
    for _, b, n in ledger.events:
        lo, hi = int(round(b * ratio)), int(round((b + n) * ratio))
        truth[lo:hi] = True
    out = []
    for om in omega_grid:
        pred = np.zeros(n_bins, dtype=bool)
        thr = np.log(om)
        for ev in events:
            if ev.log_omega > thr:
                lo = int(round(ev.start_s / bin_dt))
                hi = int(round(ev.end_s / bin_dt))
                pred[lo:hi] = True
        out.append((float(om), classify_bins(truth, pred)))
    return out


def detected_planted(events, ledger: PlantedLedger, base_dt: float,
                     min_overlap: float = 0.5) -> np.ndarray:
    """Flags of planted events overlapped by some detection.

    A planted event counts as found when a detection's span covers at least
    ``min_overlap`` of the shorter of the two spans (seconds).
    """
    found = np.zeros(len(ledger.events), dtype=bool)
    for j, (_, b, n) in enumerate(ledger.events):
        s0, s1 = b * base_dt, (b + n) * base_dt
        for ev in events:
            inter = min(s1, ev.end_s) - max(s0, ev.start_s)
            if inter > 0 and inter >= min_overlap * min(s1 - s0, ev.end_s - ev.start_s) - 1e-12:
                found[j] = True
                break
    return found
