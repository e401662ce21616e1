import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn, random_instance
from gfra.basis import Basis
from gfra.detector import (CapWarning, DetectionDiagnostics, GammaState, NumericalError, coordinate_update,
                           cost_derivative, cost_increment, effective_pilots, line_search,
                           model_covariance, nll_cost, run_detection, sample_covariance,
                           stationary_points, stationary_polynomial, threshold_activities,
                           write_gamma_csv)


def explicit_cost(gamma, sigma_hat, eff, noise_var):
    Sigma = model_covariance(gamma, eff, noise_var)
    sign, logdet = np.linalg.slogdet(Sigma)
    assert sign.real > 0
    return logdet + np.trace(np.linalg.inv(Sigma) @ sigma_hat).real


def grid_minimum(lam, xi, lo, hi, step=1e-4):
    hi = min(hi, 1e3)
    best = np.inf
    for start in np.arange(lo, hi, 2e5 * step):
        d = np.arange(start, min(start + 2e5 * step, hi), step)
        best = min(best, cost_increment(d, lam, xi).min())
    return min(best, float(cost_increment(hi, lam, xi)))


# effective pilots

def test_effective_pilots_block_fading_reduces_to_pilots(rng):
    phi = crandn(rng, 6, 4)
    eff = effective_pilots(phi, np.ones((6, 1)))
    for k in range(4):
        assert np.array_equal(eff.S(k)[:, 0], phi[:, k])


def test_effective_pilots_all_ones_pilot_gives_basis(rng):
    G = crandn(rng, 6, 3)
    eff = effective_pilots(np.ones((6, 2)), Basis(G, "pca"))
    assert np.array_equal(eff.S(1), G)


def test_effective_pilots_entrywise(rng):
    phi, G = crandn(rng, 6, 3), crandn(rng, 6, 2)
    eff = effective_pilots(phi, G)
    stacked = eff.stacked()
    for k in range(3):
        for n in range(2):
            for l in range(6):
                ref = phi[l, k] * G[l, n]
                assert abs(eff.S(k)[l, n] - ref) <= 1e-15 * abs(ref)
                assert abs(stacked[l, k, n] - ref) <= 1e-15 * abs(ref)


def test_effective_pilots_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        effective_pilots(crandn(rng, 5, 3), crandn(rng, 6, 2))


# cost

def test_cost_noise_only_closed_form(rng):
    eff, sigma_hat, _ = random_instance(rng, L=8)
    s2 = 0.7
    expected = 8 * np.log(s2) + np.trace(sigma_hat).real / s2
    assert nll_cost(np.zeros(eff.K), sigma_hat, eff, s2) == pytest.approx(expected, rel=1e-12)


def test_cost_at_matched_covariance(rng):
    eff, _, state = random_instance(rng, L=8)
    Sigma = model_covariance(state.gamma, eff, 1.0)
    logdet = np.linalg.slogdet(Sigma)[1]
    assert nll_cost(state.gamma, Sigma, eff, 1.0) == pytest.approx(logdet + 8, rel=1e-12)


def test_cost_matches_explicit_inverse(rng):
    for _ in range(5):
        eff, sigma_hat, state = random_instance(rng, L=8, N=2)
        ref = explicit_cost(state.gamma, sigma_hat, eff, 1.0)
        assert nll_cost(state.gamma, sigma_hat, eff, 1.0) == pytest.approx(ref, rel=1e-9)
        assert state.cost == pytest.approx(ref, rel=1e-9)


def test_cost_rejects_non_pd(rng):
    eff, sigma_hat, _ = random_instance(rng, L=6)
    gamma = np.full(eff.K, -5.0)
    with pytest.raises(NumericalError):
        nll_cost(gamma, sigma_hat, eff, 1.0)


# 1-D search pieces

def test_sylvester_and_woodbury_identities(rng):
    for _ in range(10):
        eff, sigma_hat, state = random_instance(rng, L=10, N=4)
        k, d = int(rng.integers(eff.K)), float(rng.uniform(0, 2))
        S = eff.S(k)
        Sigma = model_covariance(state.gamma, eff, 1.0)
        Psi = S.conj().T @ state.sigma_inv @ S
        lhs = np.linalg.slogdet(Sigma + d * S @ S.conj().T)[1] - np.linalg.slogdet(Sigma)[1]
        assert lhs == pytest.approx(np.linalg.slogdet(np.eye(4) + d * Psi)[1], abs=1e-8)
        direct = np.linalg.inv(Sigma + d * S @ S.conj().T)
        wood = state.sigma_inv - d * state.sigma_inv @ S @ np.linalg.inv(np.eye(4) + d * Psi) @ S.conj().T @ state.sigma_inv
        assert np.linalg.norm(wood - direct) < 1e-8 * np.linalg.norm(direct)


def test_increment_matches_cost_difference(rng):
    for _ in range(10):
        eff, sigma_hat, state = random_instance(rng, L=10, N=3)
        k = int(rng.integers(eff.K))
        work, _ = line_search(state, sigma_hat, eff, k)
        d = float(rng.uniform(-state.gamma[k], 3))
        g2 = state.gamma.copy()
        g2[k] += d
        diff = nll_cost(g2, sigma_hat, eff, 1.0) - nll_cost(state.gamma, sigma_hat, eff, 1.0)
        assert float(cost_increment(d, work.lam, work.xi)) == pytest.approx(diff, abs=1e-8)


def test_derivative_matches_finite_differences(rng):
    for _ in range(20):
        lam = rng.uniform(0.1, 5, 4)
        xi = rng.uniform(0, 8, 4)
        d = float(rng.uniform(-0.05, 3))
        h = 1e-6
        fd = (cost_increment(d + h, lam, xi) - cost_increment(d - h, lam, xi)) / (2 * h)
        an = float(cost_derivative(d, lam, xi))
        assert an == pytest.approx(float(fd), rel=1e-5, abs=1e-8)


def test_stationary_polynomial_shares_sign_and_roots():
    rng = np.random.default_rng(5)
    for _ in range(20):
        N = int(rng.integers(1, 6))
        lam, xi = rng.uniform(0.1, 4, N), rng.uniform(0, 10, N)
        coef = stationary_polynomial(lam, xi)
        assert coef.size == 2 * N
        ds = rng.uniform(0, 5, 10)
        poly = np.polynomial.polynomial.polyval(ds, coef)
        deriv = cost_derivative(ds, lam, xi)
        denom = np.prod((1 + ds[:, None] * lam) ** 2, axis=1)
        assert np.allclose(poly, deriv * denom, rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10**6))
def test_bracket_and_companion_agree(N, seed):
    rng = np.random.default_rng(seed)
    lam, xi = rng.uniform(0.05, 4, N), rng.uniform(0, 12, N)
    lo, hi = -0.9 / lam.max(), 50.0
    a = stationary_points(lam, xi, lo, hi, "bracket")
    b = stationary_points(lam, xi, lo, hi, "companion")
    # companion may also report tangential double roots; every bracketed root must appear there
    for r in a:
        assert min(abs(r - x) for x in b) < 1e-6 * (1 + abs(r))
    for r in a:
        assert abs(float(cost_derivative(r, lam, xi))) < 1e-6 * (1 + np.sum(lam) + np.sum(xi))


def test_unknown_root_method():
    with pytest.raises(ValueError):
        stationary_points(np.ones(1), np.ones(1), 0.0, 1.0, "newton")


# coordinate update

def test_no_move_when_derivative_at_zero_nonnegative(rng):
    eff, sigma_hat, state = random_instance(rng, L=10, N=2)
    k = 0
    state.gamma[k] = 0.0
    state.refresh(sigma_hat, eff)
    work, _ = line_search(state, sigma_hat, eff, k)
    # make Xi's diagonal dominated by lambda by scaling the sample covariance down
    scale = 0.5 * np.min(work.lam / np.maximum(work.xi, 1e-300))
    small = sigma_hat * min(scale, 1.0)
    state.refresh(small, eff)
    work, _ = line_search(state, small, eff, k)
    assert np.all(work.xi <= work.lam + 1e-12)
    before = (state.gamma.copy(), state.sigma_inv.copy(), state.cost)
    d, state = coordinate_update(state, small, eff, k)
    assert d == 0.0
    assert np.array_equal(state.gamma, before[0]) and state.cost == before[2]
    assert np.array_equal(state.sigma_inv, before[1])


def test_rank_one_matches_analytic_minimizer(rng):
    for _ in range(20):
        eff, sigma_hat, state = random_instance(rng, L=10, N=1)
        k = int(rng.integers(eff.K))
        work, _ = line_search(state, sigma_hat, eff, k)
        lam, xi = work.lam[0], work.xi[0]
        lo, hi = work.interval
        expected = min(max((xi - lam) / lam**2, lo), hi)
        assert work.d_star == pytest.approx(expected, abs=1e-8)


def test_order_four_beats_grid_search(rng):
    for _ in range(5):
        eff, sigma_hat, state = random_instance(rng, L=12, N=4)
        k = int(rng.integers(eff.K))
        work, _ = line_search(state, sigma_hat, eff, k)
        best = float(cost_increment(work.d_star, work.lam, work.xi))
        assert best <= grid_minimum(work.lam, work.xi, *work.interval) + 1e-6


def test_update_keeps_state_consistent(rng):
    eff, sigma_hat, state = random_instance(rng, L=12, N=3)
    for k in rng.permutation(eff.K):
        before = state.cost
        d, state = coordinate_update(state, sigma_hat, eff, int(k))
        assert state.cost <= before + 1e-9 * abs(before)
        assert state.gamma[k] >= 0
        state.check(sigma_hat, eff, rtol=1e-7)


def test_box_constraint_is_respected(rng):
    eff, sigma_hat, _ = random_instance(rng, L=12, N=2, active_frac=1.0)
    upper = np.full(eff.K, 0.3)
    gamma, diag = run_detection(sigma_hat, eff, 1.0, epochs=4, upper=upper, seed=3)
    assert np.all(gamma >= 0) and np.all(gamma <= 0.3)
    assert np.any(gamma == 0.3)


def test_cap_warning_when_step_hits_cap(rng):
    eff, sigma_hat, _ = random_instance(rng, L=10, N=2, active_frac=1.0)
    state = GammaState.initial(sigma_hat, eff, 1.0, d_max=1e-3)
    with pytest.warns(CapWarning):
        for k in range(eff.K):
            coordinate_update(state, sigma_hat, eff, k)


def test_state_check_detects_drift(rng):
    eff, sigma_hat, state = random_instance(rng, L=8, N=2)
    state.sigma_inv = state.sigma_inv * 1.01
    with pytest.raises(NumericalError):
        state.check(sigma_hat, eff)


# full runs

def test_pure_noise_stays_at_zero(rng):
    eff, _, _ = random_instance(rng, L=12, K=10, N=3)
    gamma, diag = run_detection(np.eye(12, dtype=complex) * 1.3, eff, 1.3, epochs=3, seed=0)
    assert gamma.max() < 1e-3


def test_cost_trace_non_increasing(rng):
    for seed in range(3):
        eff, sigma_hat, _ = random_instance(np.random.default_rng(seed), L=12, K=20, N=3)
        _, diag = run_detection(sigma_hat, eff, 1.0, epochs=5, seed=seed)
        trace = np.concatenate([[GammaState.initial(sigma_hat, eff, 1.0).cost], diag.cost_trace])
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))
        assert len(diag.epoch_costs) == 5 and diag.refactorizations >= 5


def test_single_active_user_is_recovered():
    rng = np.random.default_rng(7)
    L, K, N, beta = 20, 10, 2, 1.7
    eff = effective_pilots(crandn(rng, L, K) * np.sqrt(2), crandn(rng, L, N))
    truth = np.zeros(K)
    truth[0] = beta
    sigma_hat = model_covariance(truth, eff, 1.0)
    gamma, _ = run_detection(sigma_hat, eff, 1.0, epochs=50, seed=1)
    assert gamma[0] == pytest.approx(beta, rel=0.05)
    assert np.all(gamma[1:] < 0.05 * beta)


def test_detection_is_deterministic(rng):
    eff, sigma_hat, _ = random_instance(rng, L=12, K=15, N=3)
    a, da = run_detection(sigma_hat, eff, 1.0, epochs=3, seed=9)
    b, db = run_detection(sigma_hat, eff, 1.0, epochs=3, seed=9)
    assert a.tobytes() == b.tobytes()
    assert da.updates == db.updates
    c, _ = run_detection(sigma_hat, eff, 1.0, epochs=3, seed=10)
    assert [u[2] for u in da.updates] != [u[2] for u in run_detection(sigma_hat, eff, 1.0, 3, seed=10)[1].updates]


def test_companion_method_runs_equivalently(rng):
    eff, sigma_hat, _ = random_instance(rng, L=12, K=15, N=3)
    a, da = run_detection(sigma_hat, eff, 1.0, epochs=3, seed=2)
    b, db = run_detection(sigma_hat, eff, 1.0, epochs=3, seed=2, method="companion")
    assert np.allclose(a, b, atol=1e-6)
    assert db.epoch_costs[-1] == pytest.approx(da.epoch_costs[-1], rel=1e-9)


def test_diagnostics_output(tmp_path, rng):
    eff, sigma_hat, _ = random_instance(rng, L=8, K=5, N=2)
    gamma, diag = run_detection(sigma_hat, eff, 1.0, epochs=2, seed=0)
    diag.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,update_idx,user,d_star,cost"
    assert len(lines) == 1 + 10
    write_gamma_csv(tmp_path / "gamma.csv", gamma)
    rows = (tmp_path / "gamma.csv").read_text().splitlines()
    assert rows[0] == "user,gamma_hat" and len(rows) == 6
    stats = diag.d_star_stats()
    assert stats["count"] == 10
    assert DetectionDiagnostics().d_star_stats() == {"count": 0}


def test_sample_covariance_hermitian(rng):
    Y = crandn(rng, 6, 30)
    S = sample_covariance(Y)
    assert np.allclose(S, Y @ Y.conj().T / 30)
    assert np.array_equal(S, S.conj().T)
    assert np.linalg.eigvalsh(S).min() > -1e-12


# thresholding

def test_threshold_activities():
    g = np.array([0.1, 0.5, 0.2])
    assert threshold_activities(g, 0.0).tolist() == [1, 1, 1]
    assert threshold_activities(g, g.max()).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        threshold_activities(g, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=30), st.integers(0, 2**31))
def test_threshold_sweep_is_monotone(values, seed):
    g = np.array(values)
    a = np.random.default_rng(seed).integers(0, 2, g.size)
    misses, fas = [], []
    for th in np.sort(g):
        dec = threshold_activities(g, th)
        misses.append(int(np.sum((a == 1) & (dec == 0))))
        fas.append(int(np.sum((a == 0) & (dec == 1))))
    assert all(y >= x for x, y in zip(misses, misses[1:]))
    assert all(y <= x for x, y in zip(fas, fas[1:]))
