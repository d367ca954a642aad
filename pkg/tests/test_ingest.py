import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import floyd_warshall
from ophmm.errors import ConfigError, DataError
from ophmm.ingest import (BinnedDataset, RawRecording, SnapWarning, SpatialGrid, bin_spikes,
                          build_grid, embed, grid_from_cells, rebin, spikes_to_recording)


def ring3():
    return grid_from_cells([(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)],
                           1.0, (0.0, 0.0), (3, 3))


# ----------------------------------------------------------------- geometry

def test_strip_end_to_end_distance(strip3):
    assert strip3.distance[0, 2] == pytest.approx(2.0, abs=1e-12)


def test_diagonal_neighbours():
    g = grid_from_cells([(0, 0), (1, 1)], 1.0, (0.0, 0.0), (2, 2))
    assert g.distance[0, 1] == pytest.approx(math.sqrt(2), abs=1e-12)


def test_ring_corner_to_corner_matches_path_enumeration():
    g = ring3()
    a = int(np.flatnonzero((g.cells == (0, 0)).all(1))[0])
    b = int(np.flatnonzero((g.cells == (2, 2)).all(1))[0])
    oracle = floyd_warshall(g.cells, 1.0)
    assert g.distance[a, b] == pytest.approx(oracle[a, b], abs=1e-12)
    # two unit steps along an edge plus one diagonal past the hole
    assert g.distance[a, b] == pytest.approx(2 + math.sqrt(2), abs=1e-12)


def test_labels_are_row_major():
    g = grid_from_cells([(1, 0), (0, 1), (0, 0)], 1.0, (0.0, 0.0), (2, 2))
    assert g.cells.tolist() == [[0, 0], [0, 1], [1, 0]]


def test_disconnected_region_rejected():
    with pytest.raises(DataError, match="disconnected"):
        grid_from_cells([(0, 0), (0, 2)], 1.0, (0.0, 0.0), (1, 3))


def test_build_grid_from_samples_and_mask():
    xy = np.array([[0.5, 0.5], [2.5, 0.5]])
    with pytest.raises(DataError):
        build_grid(xy, 1.0)
    mask = np.array([[False, True, False]])
    g = build_grid(xy, 1.0, mask=mask)
    assert g.M == 3
    with pytest.raises(ConfigError):
        build_grid(xy, 0.0)
    with pytest.raises(DataError):
        build_grid(np.zeros((0, 2)), 1.0)


def test_embedding_examples(strip3):
    assert np.allclose(embed(strip3, 1, 1), 0.0)
    assert np.allclose(embed(strip3, 0, 1), [1.0, 0.0])
    g = ring3()
    a = int(np.flatnonzero((g.cells == (0, 0)).all(1))[0])
    b = int(np.flatnonzero((g.cells == (2, 2)).all(1))[0])
    v = embed(g, a, b)
    L = 2 + math.sqrt(2)
    assert np.allclose(v, [L / math.sqrt(2), L / math.sqrt(2)], atol=1e-12)
    with pytest.raises(ConfigError):
        embed(g, 0, g.M)


@st.composite
def connected_cells(draw, max_side=20):
    rows = draw(st.integers(1, max_side))
    cols = draw(st.integers(1, max_side))
    n = draw(st.integers(1, min(rows * cols, 60)))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    cur = (int(rng.integers(rows)), int(rng.integers(cols)))
    cells = {cur}
    while len(cells) < n:
        dr, dc = rng.integers(-1, 2, size=2)
        nxt = (min(max(cur[0] + int(dr), 0), rows - 1), min(max(cur[1] + int(dc), 0), cols - 1))
        cells.add(nxt)
        cur = nxt
    return sorted(cells), (rows, cols)


@given(connected_cells(), st.sampled_from([1.0, 2.5, 10.0]))
def test_distance_matches_floyd_warshall(spec, size):
    cells, shape = spec
    g = grid_from_cells(cells, size, (0.0, 0.0), shape)
    assert np.allclose(g.distance, floyd_warshall(g.cells, size), rtol=0, atol=1e-9)


@given(connected_cells(max_side=8))
def test_metric_properties(spec):
    cells, shape = spec
    g = grid_from_cells(cells, 1.0, (0.0, 0.0), shape)
    D = g.distance
    assert np.allclose(np.diag(D), 0.0)
    assert np.allclose(D, D.T)
    assert np.all(D[:, :, None] <= D[:, None, :] + D.T[None, :, :] + 1e-9)
    euclid = np.sqrt(((g.centroids[:, None] - g.centroids[None]) ** 2).sum(-1))
    assert np.all(D >= euclid - 1e-9)
    F = g.embedding
    assert np.allclose(np.sqrt((F ** 2).sum(-1)), D, atol=1e-9)
    assert np.allclose(F, -np.swapaxes(F, 0, 1), atol=1e-9)


def test_embedding_additive_along_a_straight_shortest_path():
    g = grid_from_cells([(r, c) for r in range(4) for c in range(6)], 1.0, (0.0, 0.0), (4, 6))
    F = g.embedding
    lab = {tuple(c): i for i, c in enumerate(g.cells.tolist())}
    for line in ([(1, c) for c in range(6)], [(r, r) for r in range(4)]):
        ids = [lab[p] for p in line]
        for a in ids:
            for b in ids:
                for m in ids:
                    ia, ib, im = ids.index(a), ids.index(b), ids.index(m)
                    if min(ia, ib) <= im <= max(ia, ib):
                        assert np.allclose(F[a, b], F[a, m] + F[m, b], atol=1e-9)


def test_grid_json_round_trip(tmp_path):
    g = ring3()
    p = tmp_path / "g.json"
    g.save(p)
    h = SpatialGrid.load(p)
    assert h.checksum() == g.checksum()
    assert np.array_equal(h.distance, g.distance)


# ------------------------------------------------------------------ binning

def spikes_rec(duration=0.4):
    return RawRecording((np.array([0.05, 0.12, 0.31]),), duration)


def test_bin_spikes_examples():
    assert bin_spikes(spikes_rec(), 0.1).counts[:, 0].tolist() == [1, 1, 0, 1]
    assert bin_spikes(RawRecording(((),), 0.4), 0.1).counts.sum() == 0
    # 0.05 s lands exactly on the start of bin 1 at this width
    assert bin_spikes(spikes_rec(), 0.05).counts[:, 0].tolist() == [0, 1, 1, 0, 0, 0, 1, 0]


def test_spike_at_duration_is_dropped():
    rec = RawRecording((np.array([0.1, 0.4]),), 0.4)
    assert bin_spikes(rec, 0.1).counts[:, 0].tolist() == [0, 1, 0, 0]


def test_rebin_examples():
    d = bin_spikes(spikes_rec(), 0.1)
    assert np.array_equal(rebin(d, 1).counts, d.counts)
    assert np.array_equal(rebin(d, 2).counts, bin_spikes(spikes_rec(), 0.05).counts)
    with pytest.raises(DataError):
        rebin(BinnedDataset(0.1, d.counts), 2)
    for bad in (0, 1.5, True):
        with pytest.raises(ConfigError):
            rebin(d, bad)


@given(st.lists(st.floats(0, 9.999, allow_nan=False), max_size=60),
       st.integers(1, 20))
def test_rebin_preserves_totals(times, c):
    rec = RawRecording((np.sort(np.array(times)),), 10.0)
    assert rebin(rec, c, base_dt=0.5).counts.sum() == len(times)


def test_first_position_sample_per_bin_and_carry_forward(strip3):
    rec = RawRecording(((),), 0.4, np.array([0.0, 0.05, 0.21]),
                       np.array([[0.5, 0.5], [2.5, 0.5], [1.5, 0.5]]))
    d = bin_spikes(rec, 0.1, strip3)
    assert d.position.tolist() == [0, 0, 1, 1]


def test_snap_to_nearest_accessible():
    g = ring3()
    rec = RawRecording(((),), 0.1, np.array([0.0]), np.array([[1.5, 1.5]]))
    with pytest.warns(SnapWarning):
        d = bin_spikes(rec, 0.1, g)
    # all four edge midpoints tie; the lowest label wins
    assert d.position.tolist() == [1]


def test_recording_validation():
    with pytest.raises(DataError):
        RawRecording((np.array([0.2, 0.1]),), 1.0)
    with pytest.raises(DataError):
        RawRecording((np.array([2.0]),), 1.0)
    with pytest.raises(DataError):
        RawRecording(((),), 0.0)
    with pytest.raises(DataError):
        RawRecording(((),), 1.0, np.array([0.2, 0.1]), np.zeros((2, 2)))


def test_dataset_validation():
    with pytest.raises(DataError):
        BinnedDataset(0.1, np.array([[-1]]))
    with pytest.raises(DataError):
        BinnedDataset(0.1, np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ConfigError):
        BinnedDataset(0.1, np.zeros((3, 1)), epoch="SLEEP")


def test_spikes_to_recording_round_trip(strip3):
    rng = np.random.default_rng(0)
    counts = rng.poisson(2.0, size=(50, 3))
    pos = rng.integers(0, 3, size=50)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rec = spikes_to_recording(counts, 0.1, rng, pos, strip3)
        d = bin_spikes(rec, 0.1, strip3)
    assert np.array_equal(d.counts, counts)
    assert np.array_equal(d.position, pos)
