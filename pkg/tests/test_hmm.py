import collections

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import random_data, random_params
from oracles import enumerate_hmm, poisson_loglik, position_table
from ophmm.errors import NumericalError
from ophmm.hmm import (_prepare, _run_forward, backward, forward, log_likelihood,
                       sample_state_path, smooth, smooth_from_forward, viterbi)
from ophmm.ingest import BinnedDataset, grid_from_cells
from ophmm.model import ModelParams

MODES = ("augmented", "stationary")


def oracle_le(p, d, use_positions=True):
    le = poisson_loglik(p.lam, d.counts, d.dt)
    if use_positions and d.position is not None:
        le = le + position_table(p.xi, p.sigma, p.grid.embedding)[:, d.position].T
    return le


def case(seed, kappa, T, strip3, positions=True, zero_frac=0.0):
    rng = np.random.default_rng(seed)
    p = random_params(rng, strip3, kappa, 2, zero_frac=zero_frac)
    return p, random_data(rng, p, T, positions)


def test_single_bin_single_state(strip3):
    p, d = case(0, 1, 1, strip3)
    f = forward(p, d)
    assert f.loglik == pytest.approx(oracle_le(p, d)[0, 0], rel=1e-12)
    assert np.allclose(backward(p, d), 0.0)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed,kappa,T", [(1, 2, 5), (2, 3, 6), (3, 4, 5), (4, 2, 8)])
def test_forward_smoothing_viterbi_match_enumeration(strip3, mode, seed, kappa, T):
    p, d = case(seed, kappa, T, strip3, zero_frac=0.3 if seed % 2 else 0.0)
    ref = enumerate_hmm(p.P, oracle_le(p, d), mode)
    ll = log_likelihood(p, d, mode)
    assert abs(ll - ref["loglik"]) <= 1e-10 * abs(ref["loglik"])
    sm = smooth(p, d, mode)
    assert np.allclose(sm.S, ref["S"], rtol=1e-10, atol=1e-12)
    if mode == "augmented":
        assert np.allclose(sm.K, ref["K"], rtol=1e-10, atol=1e-12)
    path = viterbi(p, d, mode)
    s = tuple(path.s[1:]) if mode == "augmented" else tuple(path.s)
    assert s == ref["best"]
    assert path.log_prob == pytest.approx(ref["best_lp"], rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("mode", MODES)
def test_forward_backward_identity(strip3, mode):
    p, d = case(7, 3, 12, strip3)
    f = forward(p, d, mode=mode)
    b = backward(p, d, mode=mode, fwd=f)
    tot = np.array([np.logaddexp.reduce(f.log_alpha[t] + b[t]) for t in range(d.T)])
    assert np.allclose(tot, f.loglik, rtol=1e-10)
    assert np.allclose(b[-1], 0.0)


def test_partial_forward_and_appended_silent_bin(strip3):
    p, d = case(8, 3, 6, strip3)
    ref = enumerate_hmm(p.P, oracle_le(p, d)[:4], "augmented")
    assert forward(p, d, up_to=4).loglik == pytest.approx(ref["loglik"], rel=1e-10)
    longer = BinnedDataset(d.dt, np.vstack([d.counts, np.zeros((1, d.C), dtype=int)]),
                           np.concatenate([d.position, [1]]))
    ref = enumerate_hmm(p.P, oracle_le(p, longer), "augmented")
    assert log_likelihood(p, longer) == pytest.approx(ref["loglik"], rel=1e-10)


def test_spikes_only_ignores_positions(strip3):
    p, d = case(9, 3, 6, strip3)
    ref = enumerate_hmm(p.P, oracle_le(p, d, use_positions=False), "augmented")
    assert log_likelihood(p, d, use_positions=False) == pytest.approx(ref["loglik"], rel=1e-10)
    assert log_likelihood(p, d.spikes_only()) == pytest.approx(ref["loglik"], rel=1e-10)


@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.integers(1, 30))
def test_smoothing_rows_and_shift_invariance(seed, kappa, T):
    g = grid_from_cells([(0, 0), (0, 1), (0, 2)], 1.0, (0, 0), (1, 3))
    rng = np.random.default_rng(seed)
    p = random_params(rng, g, kappa, 2)
    d = random_data(rng, p, T)
    chain, le = _prepare(p, d, "augmented", None)
    a = smooth_from_forward(_run_forward(chain, le), kappa)
    shift = rng.normal(scale=50.0, size=(T, 1))
    b = smooth_from_forward(_run_forward(chain, le + shift), kappa)
    assert np.allclose(a.prob.sum(1), 1.0, atol=1e-12)
    assert np.allclose(a.prob, b.prob, atol=1e-10)
    # at most one new state per bin
    k_seen = np.arange(T) + 1
    for t in range(T):
        assert a.K[t, k_seen[t] + 1:].sum() == 0.0


def test_single_state_paths(strip3):
    p, d = case(10, 1, 5, strip3)
    path = sample_state_path(p, d, np.random.default_rng(0))
    assert path.s.tolist() == [0] * 6 and path.k.tolist() == [0] * 6
    assert viterbi(p, d).s.tolist() == [0] * 6


def test_path_sampler_matches_enumeration(strip3):
    p, d = case(11, 2, 3, strip3)
    ref = enumerate_hmm(p.P, oracle_le(p, d), "augmented")
    probs = {r[0]: np.exp(r[2] - ref["loglik"]) for r in ref["paths"]}
    rng = np.random.default_rng(12)
    f = forward(p, d)
    n = 100_000
    got = collections.Counter()
    for _ in range(n):
        path = sample_state_path(p, d, rng, fwd=f)
        assert path.s[0] == 0 and path.k[0] == 0
        assert np.all(np.diff(path.k) >= 0) and np.all(np.diff(path.k) <= 1)
        assert np.all(path.s <= path.k)
        got[tuple(path.s[1:])] += 1
    keys = sorted(probs)
    assert set(got) <= set(keys)
    obs = np.array([got[k] for k in keys])
    exp = np.array([probs[k] for k in keys]) * n
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_viterbi_beats_per_step_map_sequence(strip3):
    for seed in range(20):
        p, d = case(100 + seed, 3, 7, strip3)
        ref = enumerate_hmm(p.P, oracle_le(p, d), "augmented")
        joint = {r[0]: r[2] for r in ref["paths"]}
        v = tuple(viterbi(p, d).s[1:])
        mp = tuple(np.argmax(smooth(p, d).S, axis=1))
        assert joint[v] >= joint.get(mp, -np.inf) - 1e-12


def test_impossible_data_aborts(strip3):
    p = ModelParams([[1.0]], [[0.0]], [0], [np.eye(2)], strip3, 0.1)
    d = BinnedDataset(0.1, np.array([[0], [2]]))
    with pytest.raises(NumericalError, match="bin 1"):
        forward(p, d)
    with pytest.raises(NumericalError):
        viterbi(p, d)
