import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import random_params
from ophmm.errors import ConfigError, DataError
from ophmm.hmm import log_likelihood
from ophmm.model import Hyperparams, ModelParams
from ophmm.sim import simulate
from ophmm.smc import (ParticleSystem, discriminated_resample, effective_sample_size,
                       estimate_kappa, estimate_params, fit, residual_resample,
                       select_kappa)


def small_data(strip3, seed=0, kappa=2, T=60):
    rng = np.random.default_rng(seed)
    theta = random_params(rng, strip3, kappa, 3)
    data, _ = simulate(theta, T, rng)
    return theta, data


# -------------------------------------------------------------------- ESS

def test_ess_examples():
    assert effective_sample_size(np.zeros(7)) == pytest.approx(7.0)
    with np.errstate(divide="ignore"):
        logw = np.log([2.0, 0.0, 2.0, 0.0])
    assert effective_sample_size(logw) == pytest.approx(2.0)
    assert effective_sample_size(np.full(3, -np.inf)) == 0.0


@given(st.lists(st.floats(-30, 0), min_size=1, max_size=50))
def test_ess_bounds_and_scale_invariance(logw):
    logw = np.array(logw)
    e = effective_sample_size(logw)
    assert 1.0 - 1e-9 <= e <= logw.size + 1e-9
    assert effective_sample_size(logw + 12.5) == pytest.approx(e, rel=1e-12)


# ------------------------------------------------------------- resampling

def test_residual_resampling_is_unbiased():
    w = np.array([0.05, 0.3, 0.15, 0.125, 0.375])
    H, reps = 8, 20_000
    rng = np.random.default_rng(0)
    counts = np.array([np.bincount(residual_resample(w, H, rng), minlength=5)
                       for _ in range(reps)])
    mean = counts.mean(0)
    se = counts.std(0) / np.sqrt(reps)
    assert np.all(np.abs(mean - H * w) <= 3 * se + 1e-12)
    assert np.all(counts.sum(1) == H)
    # the deterministic part is always kept
    assert np.all(counts >= np.floor(H * w))


def test_single_size_population_uses_plain_resampling():
    rng = np.random.default_rng(1)
    w = rng.dirichlet(np.ones(20))
    idx, nw = discriminated_resample(w, np.full(20, 3), 2, rng)
    assert idx.size == 20 and np.allclose(nw, 1 / 20)


def test_discrimination_keeps_floor_with_scaled_weights():
    H, floor = 100, 10
    kappa = np.repeat([1, 2], 50)
    w = np.concatenate([np.full(50, 0.95 / 50), np.full(50, 0.05 / 50)])
    idx, nw = discriminated_resample(w, kappa, floor, np.random.default_rng(2))
    k_new = kappa[idx]
    assert idx.size == H
    assert np.sum(k_new == 2) == floor
    # p2 * H / H* = 0.5 relative to the unit weight of the rest
    ratio = nw[k_new == 2] / nw[k_new == 1][0]
    assert np.allclose(ratio, 0.5)
    # the rest keep unit weight, so the forced size ends with 5 / 95 of the mass
    assert nw[k_new == 2].sum() == pytest.approx(5 / 95, rel=1e-12)


def test_discrimination_unbiased_for_the_rest():
    H, floor = 40, 4
    kappa = np.array([1] * 30 + [2] * 10)
    rng = np.random.default_rng(3)
    w = np.concatenate([rng.dirichlet(np.ones(30)) * 0.97, np.full(10, 0.003)])
    reps = 20_000
    counts = np.zeros((reps, 40))
    for r in range(reps):
        idx, _ = discriminated_resample(w, kappa, floor, rng)
        counts[r] = np.bincount(idx, minlength=40)
    rest = H - floor
    expect = rest * w[:30] / w[:30].sum()
    se = counts[:, :30].std(0) / np.sqrt(reps)
    # Bonferroni over the 30 particles at a family-wise 1%
    z = stats.norm.isf(0.005 / 30)
    assert np.all(np.abs(counts[:, :30].mean(0) - expect) <= z * se + 1e-9)
    assert np.all(counts[:, 30:].sum(1) == floor)


@given(st.integers(0, 2 ** 31), st.integers(2, 60), st.integers(1, 10))
def test_resample_bookkeeping(seed, H, floor):
    rng = np.random.default_rng(seed)
    kappa = rng.integers(1, 5, size=H)
    w = rng.dirichlet(np.full(H, 0.3))
    idx, nw = discriminated_resample(w, kappa, floor, rng)
    assert idx.size == H and np.all(np.diff(idx) >= 0)
    assert np.all(nw > 0) and nw.sum() == pytest.approx(1.0, abs=1e-12)
    old_phat = np.bincount(kappa, weights=w, minlength=5)
    forced = (old_phat > 0) & (old_phat * H < floor)
    rest = ~forced[kappa[idx]]
    if rest.any() and forced.sum() * floor < H:
        unit = nw[rest][0]
        assert np.allclose(nw[rest], unit)
        for v in np.flatnonzero(forced):
            sel = kappa[idx] == v
            assert sel.sum() == floor
            assert np.allclose(nw[sel] / unit, old_phat[v] * H / floor, rtol=1e-9)


# --------------------------------------------------------- particle system

def test_single_particle(strip3):
    ps = ParticleSystem(Hyperparams(kappa_bar=3), strip3, 2, 0.1, H=1, seed=4)
    assert ps.weights.tolist() == [1.0]
    ps.step([1, 0], 0)
    assert ps.weights.tolist() == [1.0] and ps.n_moves == 0
    est = estimate_params(ps)
    p = ps.particle_params(0)
    assert np.allclose(est.P, p.P) and np.allclose(est.lam, p.lam)
    assert np.array_equal(est.xi, p.xi) and np.allclose(est.sigma, p.sigma)


def test_initial_size_distribution(strip3):
    ps = ParticleSystem(Hyperparams(kappa_bar=5), strip3, 1, 0.1, H=3000, seed=5)
    assert stats.chisquare(np.bincount(ps.kappa, minlength=6)[1:]).pvalue > 0.01
    assert np.allclose(ps.phat().sum(), 1.0)


def test_configuration_errors(strip3):
    with pytest.raises(ConfigError):
        ParticleSystem(Hyperparams(), strip3, 1, 0.1, H=0)
    ps = ParticleSystem(Hyperparams(kappa_bar=2), strip3, 2, 0.1, H=4)
    with pytest.raises(DataError):
        ps.step([1, 2, 3])
    with pytest.raises(DataError):
        ps.step([1, 2], 3)


def test_weight_increments_telescope_to_the_likelihood(strip3):
    theta, data = small_data(strip3, seed=6, T=40)
    ps = ParticleSystem(Hyperparams(kappa_bar=4), strip3, data.C, data.dt, H=30, seed=7,
                        ess_threshold=0.0)
    for t in range(data.T):
        ps.step(data.counts[t], data.position[t])
    assert ps.n_moves == 0
    for h in range(ps.H):
        ref = log_likelihood(ps.particle_params(h), data)
        assert ps.loglik[h] == pytest.approx(ref, rel=1e-8)


def test_refiltered_likelihood_after_moves(strip3):
    theta, data = small_data(strip3, seed=8, T=80)
    ps = ParticleSystem(Hyperparams(kappa_bar=3), strip3, data.C, data.dt, H=40, seed=9)
    for t in range(data.T):
        ps.step(data.counts[t], data.position[t])
    assert ps.n_moves > 0
    for h in range(0, ps.H, 7):
        ref = log_likelihood(ps.particle_params(h), data)
        assert ps.loglik[h] == pytest.approx(ref, rel=1e-8)
    for rec in ps.history:
        assert rec.phat.sum() == pytest.approx(1.0)


def test_fit_is_deterministic(strip3):
    _, data = small_data(strip3, seed=10, T=80)
    hyper = Hyperparams(kappa_bar=3)
    a = fit(data, strip3, hyper, H=40, seed=11, threads=1)
    b = fit(data, strip3, hyper, H=40, seed=11)
    assert np.isfinite(a.log_evidence) and a.log_evidence == b.log_evidence
    assert a.kappa_hat == b.kappa_hat
    for x, y in ((a.full.P, b.full.P), (a.full.lam, b.full.lam), (a.full.sigma, b.full.sigma)):
        assert np.array_equal(x, y)
    assert np.array_equal(a.kappa_posterior, b.kappa_posterior)
    rows_a = [(t, e, r, tuple(p)) for t, e, r, p in a.diagnostics_rows()]
    rows_b = [(t, e, r, tuple(p)) for t, e, r, p in b.diagnostics_rows()]
    assert rows_a == rows_b
    c = fit(data, strip3, hyper, H=40, seed=12)
    assert c.log_evidence != a.log_evidence


def test_positions_requested_without_positions(strip3):
    _, data = small_data(strip3, seed=13, T=10)
    with pytest.raises(DataError):
        fit(data.spikes_only(), strip3, Hyperparams(kappa_bar=2), H=4, use_positions=True)


# -------------------------------------------------------------- estimates

def test_estimate_is_weighted_mean(strip3):
    ps = ParticleSystem(Hyperparams(kappa_bar=2), strip3, 1, 0.1, H=2, seed=14)
    ps.kappa[:] = 1
    ps.lam[:, 0, 0] = [10.0, 20.0]
    ps.P[:, 0, 0] = 1.0
    ps.xi[:, 0] = [0, 2]
    ps.logw[:] = 0.0
    est = estimate_params(ps)
    assert est.kappa == 1 and est.lam[0, 0] == pytest.approx(15.0)
    # both end cells are equally far from the middle one
    assert est.xi[0] == 1


def test_estimated_rows_sum_to_one(strip3):
    _, data = small_data(strip3, seed=15, T=60)
    res = fit(data, strip3, Hyperparams(kappa_bar=4), H=60, seed=16)
    assert np.allclose(res.full.P.sum(1), 1.0, atol=1e-12)
    assert np.allclose(res.params.P.sum(1), 1.0, atol=1e-12)
    assert res.params.kappa == res.kappa_hat
    assert res.kappa_posterior.sum() == pytest.approx(1.0)
    for S in res.full.sigma:
        assert np.all(np.linalg.eigvalsh(S) > 0)


def test_single_size_model_estimate(strip3):
    theta, data = small_data(strip3, seed=17, kappa=1, T=30)
    res = fit(data, strip3, Hyperparams(kappa_bar=1), H=20, seed=18)
    assert res.kappa_hat == 1 and res.phat == pytest.approx([1.0], abs=1e-12)
    k, dist = estimate_kappa(theta, data)
    assert k == 1 and dist.tolist() == [1.0]


def load_particle(ps, h, theta, order):
    k = theta.kappa
    o = np.asarray(order)
    ps.kappa[h] = k
    ps.P[h] = 0.0
    ps.P[h, :k, :k] = theta.P[np.ix_(o, o)]
    ps.lam[h] = 0.0
    ps.lam[h, :k] = theta.lam[o]
    ps.xi[h, :k] = theta.xi[o]
    ps.sigma[h, :k] = theta.sigma[o]


def test_size_specific_estimate_undoes_label_permutations(strip3):
    rng = np.random.default_rng(20)
    base = random_params(rng, strip3, 3, 3)
    theta = ModelParams(base.P, [[30.0, 1.0, 1.0], [1.0, 30.0, 1.0], [1.0, 1.0, 30.0]],
                        [0, 1, 2], base.sigma, strip3, 0.1)
    ps = ParticleSystem(Hyperparams(kappa_bar=4), strip3, 3, 0.1, H=4, seed=21)
    for h, order in enumerate([(0, 1, 2), (2, 0, 1), (1, 2, 0)]):
        load_particle(ps, h, theta, order)
    ps.kappa[3] = 4
    ps.logw[:] = [0.0, -0.5, -1.0, -0.2]
    est = estimate_params(ps, 3)
    assert est.kappa == 3
    assert np.allclose(est.P, theta.P) and np.allclose(est.lam, theta.lam)
    assert est.xi.tolist() == theta.xi.tolist() and np.allclose(est.sigma, theta.sigma)
    with pytest.raises(ConfigError):
        estimate_params(ps, 2)


def test_select_kappa_scores_each_present_size(strip3):
    theta, data = small_data(strip3, seed=22, kappa=2, T=200)
    ps = ParticleSystem(Hyperparams(kappa_bar=3), strip3, 3, 0.1, H=3, seed=23)
    load_particle(ps, 0, theta, (0, 1))
    load_particle(ps, 1, theta, (1, 0))
    ps.kappa[2] = 3
    ps.logw[:] = 0.0
    k, est, rows = select_kappa(ps, data)
    assert [r[0] for r in rows] == sorted(set(ps.kappa.tolist()))
    for kk, mass, ll, n_par, bic in rows:
        assert n_par == kk * (kk + 3 + 3)
        assert bic == pytest.approx(-2 * ll + n_par * np.log(200))
        assert ll == pytest.approx(log_likelihood(est[kk], data, mode="stationary"))
    assert rows[0][1] == pytest.approx(2 / 3)
    assert k == min(rows, key=lambda r: r[4])[0]


def test_fit_kappa_methods(strip3):
    _, data = small_data(strip3, seed=24, T=80)
    hyper = Hyperparams(kappa_bar=3)
    bic = fit(data, strip3, hyper, H=24, seed=25)
    kt = fit(data, strip3, hyper, H=24, seed=25, kappa_method="kt")
    assert bic.kappa_method == "bic" and bic.bic_rows and not kt.bic_rows
    assert bic.params.kappa == bic.kappa_hat and kt.params.kappa == kt.kappa_hat
    assert np.array_equal(bic.kappa_posterior, kt.kappa_posterior)
    with pytest.raises(ConfigError):
        fit(data, strip3, hyper, H=4, kappa_method="mode")
