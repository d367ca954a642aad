"""Discretisation of raw recordings: spatial grid, geodesic metric and time bins.

Labels are 0-based in memory (``0..M-1``) and 1-based in persisted files.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .errors import DataError, ConfigError

__all__ = [
    "RawRecording",
    "SpatialGrid",
    "BinnedDataset",
    "SnapWarning",
    "build_grid",
    "grid_from_cells",
    "embed",
    "bin_spikes",
    "rebin",
]


class SnapWarning(UserWarning):
    """A position sample fell outside the accessible region and was snapped."""


@dataclass(frozen=True, eq=False)
class RawRecording:
    """Raw spike times, tracked positions and an optional LFP trace.

    Parameters
    ----------
    spikes : sequence of ndarray
        One sorted array of spike times (s) per cell.
    duration : float
        Recording length in seconds. All event times lie in ``[0, duration]``.
    pos_times : ndarray, optional
        Position sample times (s), strictly increasing.
    pos_xy : ndarray, optional
        ``(N, 2)`` pixel coordinates matching ``pos_times``.
    lfp : ndarray, optional
        Uniformly sampled voltage trace in microvolts.
    lfp_rate : float, optional
        LFP sample rate in Hz.
    """

    spikes: tuple
    duration: float
    pos_times: Optional[np.ndarray] = None
    pos_xy: Optional[np.ndarray] = None
    lfp: Optional[np.ndarray] = None
    lfp_rate: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.duration) or self.duration <= 0:
            raise DataError(f"duration must be positive, got {self.duration}")
        cells = []
        for n, st in enumerate(self.spikes):
            st = np.asarray(st, dtype=float).ravel()
            if st.size and np.any(np.diff(st) < 0):
                raise DataError(f"spike times of cell {n} are not sorted")
            if st.size and (st[0] < 0 or st[-1] > self.duration):
                raise DataError(f"spike times of cell {n} fall outside [0, duration]")
            cells.append(st)
        object.__setattr__(self, "spikes", tuple(cells))
        if (self.pos_times is None) != (self.pos_xy is None):
            raise DataError("pos_times and pos_xy must be given together")
        if self.pos_times is not None:
            pt = np.asarray(self.pos_times, dtype=float).ravel()
            xy = np.asarray(self.pos_xy, dtype=float).reshape(-1, 2)
            if pt.size != xy.shape[0]:
                raise DataError("pos_times and pos_xy lengths differ")
            if pt.size > 1 and np.any(np.diff(pt) <= 0):
                raise DataError("position sample times must be strictly increasing")
            if pt.size and (pt[0] < 0 or pt[-1] > self.duration):
                raise DataError("position sample times fall outside [0, duration]")
            object.__setattr__(self, "pos_times", pt)
            object.__setattr__(self, "pos_xy", xy)
        if self.lfp is not None:
            if self.lfp_rate is None or self.lfp_rate <= 0:
                raise DataError("lfp_rate must be positive when an LFP trace is given")
            object.__setattr__(self, "lfp", np.asarray(self.lfp, dtype=float).ravel())

    @property
    def n_cells(self) -> int:
        return len(self.spikes)


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Accessible grid squares with their geodesic metric.

    Parameters
    ----------
    cell_size : float
        Side of a square in pixels.
    origin : (float, float)
        Pixel coordinates of the top-left corner of square ``(0, 0)``.
    shape : (int, int)
        Number of rows and columns of the bounding grid.
    cells : ndarray
        ``(M, 2)`` integer ``(row, col)`` of each accessible square, in label order.
    distance : ndarray
        ``(M, M)`` geodesic distances in pixels.
    mask : ndarray, optional
        Accessibility override used at construction, kept for persistence.
    """

    cell_size: float
    origin: tuple
    shape: tuple
    cells: np.ndarray
    distance: np.ndarray
    mask: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return int(self.cells.shape[0])

    @cached_property
    def centroids(self) -> np.ndarray:
        """``(M, 2)`` centroid pixel coordinates ``(x, y)``."""
        x = self.origin[0] + (self.cells[:, 1] + 0.5) * self.cell_size
        y = self.origin[1] + (self.cells[:, 0] + 0.5) * self.cell_size
        return np.column_stack([x, y])

    @cached_property
    def embedding(self) -> np.ndarray:
        """``(M, M, 2)`` array ``F[x, x']`` = f_x(x'), geodesic length along the centroid bearing."""
        diff = self.centroids[None, :, :] - self.centroids[:, None, :]
        norm = np.sqrt((diff ** 2).sum(-1))
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(norm[..., None] > 0, diff / norm[..., None], 0.0)
        return unit * self.distance[..., None]

    @cached_property
    def span(self) -> float:
        """Geodesic diameter of the accessible region."""
        return float(self.distance.max()) if self.M > 1 else float(self.cell_size)

    @cached_property
    def _lookup(self) -> np.ndarray:
        table = np.full(self.shape, -1, dtype=np.int64)
        table[self.cells[:, 0], self.cells[:, 1]] = np.arange(self.M)
        return table

    def locate(self, xy) -> np.ndarray:
        """Labels of pixel coordinates, with -1 for points off the accessible region."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        col = np.floor((xy[:, 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        row = np.floor((xy[:, 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (row >= 0) & (row < self.shape[0]) & (col >= 0) & (col < self.shape[1])
        out = np.full(xy.shape[0], -1, dtype=np.int64)
        out[inside] = self._lookup[row[inside], col[inside]]
        return out

    def nearest(self, xy) -> np.ndarray:
        """Label of the nearest accessible centroid (ties to the lowest label)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        d2 = ((xy[:, None, :] - self.centroids[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray([self.cell_size, *self.origin], dtype=np.float64).tobytes())
        h.update(np.asarray(self.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.cells, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        out = {
            "cell_size": float(self.cell_size),
            "origin": [float(v) for v in self.origin],
            "shape": [int(v) for v in self.shape],
            "labels": [
                {"label": i + 1, "row": int(r), "col": int(c)}
                for i, (r, c) in enumerate(self.cells)
            ],
            "checksum": self.checksum(),
        }
        if self.mask is not None:
            out["mask"] = self.mask.astype(int).tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SpatialGrid":
        try:
            labels = sorted(obj["labels"], key=lambda e: e["label"])
            cells = np.array([[e["row"], e["col"]] for e in labels], dtype=np.int64)
            mask = np.asarray(obj["mask"], dtype=bool) if obj.get("mask") is not None else None
            return grid_from_cells(
                cells, obj["cell_size"], tuple(obj["origin"]), tuple(obj["shape"]), mask=mask
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed grid JSON: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "SpatialGrid":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True, eq=False)
class BinnedDataset:
    """Spike counts per time bin plus optional discrete positions.

    Attributes
    ----------
    dt : float
        Bin width in seconds.
    counts : ndarray
        ``(T, C)`` non-negative integer counts.
    position : ndarray or None
        Length-``T`` labels (0-based) or ``None`` for spikes-only data.
    epoch : str
        ``"RUN"``, ``"REST"`` or ``"SIM"``.
    raw : RawRecording or None
        Source recording, needed for rebinning.
    """

    dt: float
    counts: np.ndarray
    position: Optional[np.ndarray] = None
    epoch: str = "RUN"
    raw: Optional[RawRecording] = field(default=None, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DataError("counts must be a T x C table")
        if counts.size and (counts.min() < 0 or not np.all(counts == np.round(counts))):
            raise DataError("counts must be non-negative integers")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        if self.position is not None:
            pos = np.asarray(self.position, dtype=np.int64).ravel()
            if pos.size != counts.shape[0]:
                raise DataError("position length differs from number of bins")
            if pos.size and pos.min() < 0:
                raise DataError("position labels must be non-negative")
            object.__setattr__(self, "position", pos)
        if self.epoch not in ("RUN", "REST", "SIM"):
            raise ConfigError(f"unknown epoch label {self.epoch!r}")
        if self.raw is not None and counts.shape[0] * self.dt > self.raw.duration * (1 + 1e-9):
            raise DataError("T*dt exceeds the recording duration")

    @property
    def T(self) -> int:
        return int(self.counts.shape[0])

    @property
    def C(self) -> int:
        return int(self.counts.shape[1])

    def spikes_only(self, epoch: Optional[str] = None) -> "BinnedDataset":
        return BinnedDataset(self.dt, self.counts, None, epoch or self.epoch, self.raw)

    def slice(self, start: int, stop: int) -> "BinnedDataset":
        pos = None if self.position is None else self.position[start:stop]
        return BinnedDataset(self.dt, self.counts[start:stop], pos, self.epoch, None)


def grid_from_cells(cells, cell_size, origin, shape, mask=None) -> SpatialGrid:
    """Build a grid from an explicit list of accessible ``(row, col)`` squares.

    Squares are relabelled in row-major order. Raises :class:`DataError` if the
    region is empty or not 8-connected.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if cells.shape[0] == 0:
        raise DataError("no accessible squares")
    if cell_size <= 0:
        raise ConfigError("cell_size must be positive")
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    cells = cells[order]
    if np.any(np.all(np.diff(cells, axis=0) == 0, axis=1)):
        raise DataError("duplicate grid squares")
    M = cells.shape[0]
    lookup = {(int(r), int(c)): i for i, (r, c) in enumerate(cells)}
    rows, cols, w = [], [], []
    for i, (r, c) in enumerate(cells):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                j = lookup.get((int(r + dr), int(c + dc)))
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    w.append(cell_size * np.hypot(dr, dc))
    graph = coo_matrix((w, (rows, cols)), shape=(M, M)).tocsr()
    n_comp, comp = connected_components(graph, directed=False)
    if n_comp > 1:
        sizes = np.bincount(comp)
        raise DataError(
            f"accessible region is disconnected: {n_comp} components of sizes {sizes.tolist()}"
        )
    dist = shortest_path(graph, method="D", directed=False) if M > 1 else np.zeros((1, 1))
    dist = 0.5 * (dist + dist.T)
    return SpatialGrid(float(cell_size), tuple(float(v) for v in origin),
                       tuple(int(v) for v in shape), cells, dist, mask)


def build_grid(positions, cell_size: float, mask: Optional[np.ndarray] = None) -> SpatialGrid:
    """Partition the bounding box of position samples into squares.

    Parameters
    ----------
    positions : array_like
        ``(N, 2)`` pixel coordinates.
    cell_size : float
        Square side in pixels.
    mask : ndarray of bool, optional
        ``(rows, cols)`` array; ``True`` forces a square accessible.

    Returns
    -------
    SpatialGrid
    """
    xy = np.asarray(positions, dtype=float).reshape(-1, 2)
    if xy.shape[0] == 0:
        raise DataError("at least one position sample is required")
    if not cell_size > 0:
        raise ConfigError("cell_size must be positive")
    xy = xy[np.all(np.isfinite(xy), axis=1)]
    if xy.shape[0] == 0:
        raise DataError("no finite position samples")
    origin = xy.min(axis=0)
    col = np.floor((xy[:, 0] - origin[0]) / cell_size).astype(np.int64)
    row = np.floor((xy[:, 1] - origin[1]) / cell_size).astype(np.int64)
    shape = (int(row.max()) + 1, int(col.max()) + 1)
    visited = np.zeros(shape, dtype=bool)
    visited[row, col] = True
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            raise ConfigError(f"mask shape {mask.shape} does not match grid shape {shape}")
        visited |= mask
    cells = np.argwhere(visited)
    return grid_from_cells(cells, cell_size, tuple(origin), shape, mask)


def embed(grid: SpatialGrid, origin: int, target: int) -> np.ndarray:
    """Plane embedding f_origin(target): geodesic length along the centroid bearing."""
    M = grid.M
    if not (0 <= origin < M and 0 <= target < M):
        raise ConfigError("labels out of range")
    return grid.embedding[origin, target].copy()


def _bin_index(times: np.ndarray, dt: float) -> np.ndarray:
    # rounding guards against 0.3/0.1 = 2.9999999999999996
    return np.floor(np.round(times / dt, 9)).astype(np.int64)


def bin_spikes(rec: RawRecording, dt: float, grid: Optional[SpatialGrid] = None,
               epoch: str = "RUN") -> BinnedDataset:
    """Count spikes in half-open bins ``[t*dt, (t+1)*dt)``.

    ``T = floor(duration / dt)``; spikes at or beyond ``T*dt`` are dropped. If
    ``grid`` is given and the recording has positions, each bin takes the label
    of its first position sample; bins without a sample carry the previous
    bin's label forward. Samples off the accessible region snap to the nearest
    accessible centroid with a :class:`SnapWarning`.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    T = int(np.floor(np.round(rec.duration / dt, 9)))
    if T < 1:
        raise ConfigError("dt exceeds the recording duration")
    counts = np.zeros((T, rec.n_cells), dtype=np.int64)
    for n, st in enumerate(rec.spikes):
        idx = _bin_index(st, dt)
        idx = idx[(idx >= 0) & (idx < T)]
        counts[:, n] = np.bincount(idx, minlength=T)
    position = None
    if grid is not None and rec.pos_times is not None and rec.pos_times.size:
        labels = grid.locate(rec.pos_xy)
        off = labels < 0
        if off.any():
            warnings.warn(
                f"{int(off.sum())} position samples off the accessible region snapped "
                "to the nearest accessible square", SnapWarning, stacklevel=2)
            labels[off] = grid.nearest(rec.pos_xy[off])
        pidx = _bin_index(rec.pos_times, dt)
        keep = (pidx >= 0) & (pidx < T)
        pidx, labels = pidx[keep], labels[keep]
        first = np.full(T, -1, dtype=np.int64)
        # reversed assignment leaves the earliest sample of each bin in place
        first[pidx[::-1]] = labels[::-1]
        if first[0] < 0:
            valid = np.flatnonzero(first >= 0)
            if valid.size == 0:
                raise DataError("no position samples inside the binned range")
            first[: valid[0]] = first[valid[0]]
        # forward fill of empty bins
        idx = np.where(first >= 0, np.arange(T), 0)
        np.maximum.accumulate(idx, out=idx)
        position = first[idx]
    return BinnedDataset(dt, counts, position, epoch, rec)


def rebin(data, c: int, base_dt: Optional[float] = None,
          grid: Optional[SpatialGrid] = None) -> BinnedDataset:
    """Re-read raw spike times at bin width ``base_dt / c``.

    Parameters
    ----------
    data : BinnedDataset or RawRecording
        Must carry raw spike times; rebinning from counts is refused.
    c : int
        Compression rate, a positive integer.
    base_dt : float, optional
        Behavioural bin width; defaults to ``data.dt`` for a dataset.
    """
    if isinstance(c, (bool, np.bool_)) or int(c) != c or c < 1:
        raise ConfigError(f"compression rate must be a positive integer, got {c!r}")
    if isinstance(data, BinnedDataset):
        if data.raw is None:
            raise DataError("rebinning needs raw spike times; counts-only data cannot be split")
        raw = data.raw
        base_dt = data.dt if base_dt is None else base_dt
        epoch = data.epoch
    elif isinstance(data, RawRecording):
        raw = data
        epoch = "REST"
        if base_dt is None:
            raise ConfigError("base_dt is required for a raw recording")
    else:
        raise DataError("rebin expects a BinnedDataset or RawRecording")
    return bin_spikes(raw, base_dt / int(c), grid, epoch)


def spikes_to_recording(counts: np.ndarray, dt: float, rng: np.random.Generator,
                        pos_labels: Optional[np.ndarray] = None,
                        grid: Optional[SpatialGrid] = None,
                        samples_per_bin: int = 1) -> RawRecording:
    """Spread binned counts uniformly inside their bins to obtain spike times.

    Positions, if given, become samples at bin starts placed on the square
    centroid, so that re-binning at ``dt`` recovers the same labels.
    """
    counts = np.asarray(counts, dtype=np.int64)
    T, C = counts.shape
    spikes = []
    for n in range(C):
        reps = np.repeat(np.arange(T), counts[:, n])
        t = (reps + rng.random(reps.size)) * dt
        spikes.append(np.sort(t))
    pos_t = pos_xy = None
    if pos_labels is not None:
        if grid is None:
            raise ConfigError("a grid is required to place position samples")
        k = int(samples_per_bin)
        pos_t = (np.repeat(np.arange(T), k) + np.tile(np.arange(k) / k, T)) * dt
        pos_xy = grid.centroids[np.repeat(np.asarray(pos_labels), k)]
    return RawRecording(tuple(spikes), T * dt, pos_t, pos_xy)
