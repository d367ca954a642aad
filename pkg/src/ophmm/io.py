"""File formats: spike/position/LFP/event CSVs, binary matrices, JSON and manifests.

Floats are written with ``repr`` so that parse then emit reproduces a file
exactly; spike times use six decimals.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "read_spikes_csv",
    "write_spikes_csv",
    "read_positions_csv",
    "write_positions_csv",
    "read_lfp",
    "write_lfp_binary",
    "write_matrix_binary",
    "read_matrix_binary",
    "read_csv_rows",
    "write_csv",
    "write_json",
    "read_json",
    "sha256",
    "write_manifest",
]

MATRIX_MAGIC = b"OPHMMMAT"
LFP_MAGIC = b"OPHMMLFP"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv_rows(path, header: Sequence[str]) -> list:
    """Rows of a CSV whose first line must equal ``header``."""
    try:
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            got = next(rd, None)
            if got is None or [h.strip() for h in got] != list(header):
                raise DataError(f"{path}: expected header {','.join(header)}, got {got}")
            return [r for r in rd if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_spikes_csv(path, n_cells: Optional[int] = None) -> tuple:
    """Spike times per cell from ``cell_id,time_s`` (0-based ids).

    Returns
    -------
    tuple of ndarray
        Sorted spike times for cells ``0..n_cells-1``.
    """
    rows = read_csv_rows(path, ["cell_id", "time_s"])
    try:
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        ts = np.array([float(r[1]) for r in rows], dtype=float)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed spike row: {exc}") from exc
    if ids.size and ids.min() < 0:
        raise DataError(f"{path}: negative cell id")
    if not np.all(np.isfinite(ts)):
        raise DataError(f"{path}: non-finite spike time")
    C = int(ids.max()) + 1 if ids.size else 0
    if n_cells is not None:
        if C > n_cells:
            raise DataError(f"{path}: cell id {C - 1} exceeds the declared {n_cells} cells")
        C = n_cells
    return tuple(np.sort(ts[ids == n]) for n in range(C))


def write_spikes_csv(path, spikes: Sequence[np.ndarray]) -> None:
    rows = sorted(((float(t), n) for n, st in enumerate(spikes) for t in st))
    with open(path, "w", newline="") as fh:
        fh.write("cell_id,time_s\n")
        for t, n in rows:
            fh.write(f"{n},{t:.6f}\n")


def read_positions_csv(path) -> tuple:
    """``(times, xy)`` from ``time_s,x_px,y_px``."""
    rows = read_csv_rows(path, ["time_s", "x_px", "y_px"])
    try:
        arr = np.array([[float(v) for v in r[:3]] for r in rows], dtype=float).reshape(-1, 3)
    except ValueError as exc:
        raise DataError(f"{path}: malformed position row: {exc}") from exc
    return arr[:, 0].copy(), arr[:, 1:].copy()


def write_positions_csv(path, times, xy) -> None:
    write_csv(path, ["time_s", "x_px", "y_px"],
              ((float(t), float(p[0]), float(p[1])) for t, p in zip(times, xy)))


def read_lfp(path, rate: Optional[float] = None) -> tuple:
    """``(trace, rate, t0)`` from ``time_s,value_uV`` CSV or the binary container.

    The binary layout is an 8-byte magic, little-endian float64 rate, float64
    start time, then float64 samples.
    """
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == LFP_MAGIC:
        raw = open(path, "rb").read()
        if len(raw) < 24 or (len(raw) - 24) % 8:
            raise DataError(f"{path}: truncated LFP container")
        r, t0 = struct.unpack("<dd", raw[8:24])
        return np.frombuffer(raw[24:], dtype="<f8").astype(float), float(r), float(t0)
    rows = read_csv_rows(path, ["time_s", "value_uV"])
    try:
        arr = np.array([[float(a), float(b)] for a, b in rows], dtype=float).reshape(-1, 2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed LFP row: {exc}") from exc
    if arr.shape[0] < 2:
        raise DataError(f"{path}: LFP needs at least two samples")
    if rate is None:
        steps = np.diff(arr[:, 0])
        if np.any(steps <= 0) or np.ptp(steps) > 1e-6 * steps.mean():
            raise DataError(f"{path}: LFP samples are not uniformly spaced")
        rate = 1.0 / steps.mean()
    return arr[:, 1].copy(), float(rate), float(arr[0, 0])


def write_lfp_binary(path, trace, rate: float, t0: float = 0.0) -> None:
    with open(path, "wb") as fh:
        fh.write(LFP_MAGIC + struct.pack("<dd", float(rate), float(t0)))
        fh.write(np.asarray(trace, dtype="<f8").tobytes())


def write_matrix_binary(path, mat: np.ndarray) -> None:
    """Row-major float64 matrix after an 8-byte magic and two little-endian uint64 (rows, cols)."""
    mat = np.ascontiguousarray(mat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + struct.pack("<QQ", *mat.shape))
        fh.write(mat.tobytes())


def read_matrix_binary(path) -> np.ndarray:
    raw = open(path, "rb").read()
    if raw[:8] != MATRIX_MAGIC or len(raw) < 24:
        raise DataError(f"{path}: not a matrix container")
    r, c = struct.unpack("<QQ", raw[8:24])
    if len(raw) != 24 + 8 * r * c:
        raise DataError(f"{path}: matrix container size mismatch")
    return np.frombuffer(raw[24:], dtype="<f8").reshape(r, c).astype(float)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, subcommand: str, version: str, config: dict, inputs: Sequence[str],
                   outputs: Sequence[str]) -> None:
    """Inputs and outputs with content hashes, plus the effective configuration."""
    def entry(p):
        return {"path": os.path.basename(p) if p in outputs else str(p), "sha256": sha256(p)}
    write_json(path, {
        "subcommand": subcommand,
        "version": version,
        "seed": config.get("seed"),
        "config": config,
        "inputs": [entry(p) for p in inputs],
        "outputs": [entry(p) for p in outputs],
    })
