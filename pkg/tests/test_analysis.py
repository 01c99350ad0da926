import dataclasses
import json
import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gamma as gamma_fn

from remaging.analysis import (CSV_COLUMNS, AgingConfig, constant_K, deep_visit_counter,
                               empirical_laplace, estimate_RN, hitting_exponentiality,
                               increments_check, local_time_functional, quasi_annealed_laplace,
                               shallow_contribution, simulate_stable_subordinator, theta_function,
                               y_law_invariance)
from remaging.chain import simulate_clocks
from remaging.environment import (RemParams, check_separation, sample_environment,
                                  sample_two_step, validate_params)
from remaging.exceptions import ConvergenceError, SeparationError
from remaging.potential import laplacian

from conftest import planted


# ---------------------------------------------------------------------------
# K and theta

@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("beta", [0.8, 1.0, 1.4, 2.0])
def test_constant_K_gamma(alpha, beta):
    k = constant_K(alpha, beta)
    assert abs(k.value - gamma_fn(1 - alpha)) < 1e-8
    assert k.reference == gamma_fn(1 - alpha)


def test_constant_K_values():
    assert constant_K(0.5, 1.4).value == pytest.approx(math.sqrt(math.pi), abs=1e-8)
    assert constant_K(0.7, 0.8).value == pytest.approx(2.991569, abs=1e-6)
    assert abs(constant_K(0.6, 1.0).value - constant_K(0.6, 2.0).value) < 1e-8


def test_constant_K_errors():
    with pytest.raises(ValueError):
        constant_K(1.0, 1.0)
    with pytest.raises(ValueError):
        constant_K(0.5, 0.0)


def test_theta_zero_and_monotone():
    sc = validate_params(RemParams(N=16))
    assert theta_function(0.0, 1.0, sc) == (0.0, 0.0)
    us = [0.1, 0.5, 1.0, 5.0, 20.0]
    vals = [theta_function(u, 1.0, sc)[0] for u in us]
    assert all(0 <= v <= 1 for v in vals) and np.all(np.diff(vals) > 0)
    lams = [0.25, 0.5, 1.0, 2.0]
    vals = [theta_function(1.0, lam, sc)[0] for lam in lams]
    assert np.all(np.diff(vals) > 0)
    with pytest.raises(ValueError):
        theta_function(-1.0, 1.0, sc)


def test_theta_direct_matches_plain_quadrature():
    sc = validate_params(RemParams(N=12))
    from scipy import integrate

    c = sc.beta * math.sqrt(sc.N)
    thr = sc.deep_threshold
    p = stats.norm.sf(thr)
    f = lambda e: -math.expm1(-math.exp(math.log(3.0) - sc.log_g + c * e)) * stats.norm.pdf(e) / p  # noqa: E731
    ref = integrate.quad(f, thr, thr + 15, epsabs=0, epsrel=1e-12, limit=500)[0]
    assert theta_function(3.0, 1.0, sc)[0] == pytest.approx(ref, rel=1e-8)


@pytest.mark.parametrize("u", [1.0, 10.0])
def test_theta_asymptotic_trend(u):
    ratios = []
    for N in (16, 20, 24):
        d, a = theta_function(u, 1.0, validate_params(RemParams(N=N)))
        ratios.append(d / a)
    gaps = np.abs(1 - np.array(ratios))
    assert np.all(np.diff(gaps) < 0)


# ---------------------------------------------------------------------------
# R_N

def _single_trap_env():
    sc = validate_params(RemParams(N=4))
    lt = np.full(16, -0.3)
    lt[5] = sc.log_g_prime + 1.0
    return planted(lt)


def test_RN_single_trap_formula():
    env = _single_trap_env()
    assert list(env.deep) == [5]
    est = estimate_RN(env, n_samples=400, seed=1)
    # hand solve of E_nu[H_x]
    L = laplacian(env).toarray()
    keep = np.arange(16) != 5
    h = np.zeros(16)
    h[keep] = np.linalg.solve(L[keep][:, keep], env.nu[keep])
    assert est.e_nu[0] == pytest.approx(env.nu @ h, rel=1e-10)
    s = env.scales
    hand = 2 ** ((s.gamma - s.gamma_prime) * 4) * (env.nu @ h) / est.ell_alpha[0]
    assert est.R_N == pytest.approx(hand, rel=1e-12)
    assert est.method == "strong-stationary-time" and not est.surrogate


def test_RN_deterministic_and_summary(env8):
    a = estimate_RN(env8, n_samples=50, seed=3)
    b = estimate_RN(env8, n_samples=50, seed=3)
    assert a.R_N == b.R_N
    d = a.summary()
    assert d["n_deep"] == len(env8.deep) and d["n_exact_solves"] == len(env8.deep)
    json.dumps(d)


def test_RN_surrogate_path(env8):
    est = estimate_RN(env8, n_samples=50, seed=0, sst_max_n=6)
    assert est.surrogate and est.method == "geometric-horizon"
    assert est.R_N_doubled is not None and est.R_N_doubled < est.R_N
    sst = estimate_RN(env8, n_samples=200, seed=0)
    # the two horizons agree to within a factor of two at small N
    assert 0.5 < est.R_N / sst.R_N < 2


def test_RN_partial_exact(env10):
    full = estimate_RN(env10, n_samples=20, seed=0)
    part = estimate_RN(env10, n_samples=20, seed=0, n_exact=5)
    assert part.e_nu_exact.sum() == 5
    np.testing.assert_allclose(part.e_nu[part.e_nu_exact], full.e_nu[part.e_nu_exact], rtol=1e-10)
    assert 0.5 < part.R_N / full.R_N < 2


def test_RN_empty_deep():
    env = planted(np.full(16, -0.1))
    with pytest.raises(ValueError):
        estimate_RN(env)


# ---------------------------------------------------------------------------
# L_N, deep visits, Laplace transforms

@pytest.fixture(scope="module")
def batch10(env10):
    R = 50.0
    return R, simulate_clocks(env10, [0.5 * R, R], 400, 7)


def test_aging_config():
    AgingConfig([1.0], [0.0, 1.0])
    for bad in (dict(t_grid=[], lambda_grid=[1.0]), dict(t_grid=[0.0], lambda_grid=[1.0]),
                dict(t_grid=[1.0], lambda_grid=[-1.0]), dict(t_grid=[1.0], lambda_grid=[1.0], n_traj=0)):
        with pytest.raises(ValueError):
            AgingConfig(**bad)


def test_local_time_functional(env10, batch10):
    R, b = batch10
    rep = local_time_functional(env10, R, [0.5, 1.0], b)
    assert np.all(rep.samples >= 0) and rep.samples.shape == (400, 2)
    assert np.all(rep.samples[:, 1] >= rep.samples[:, 0])
    zero = dataclasses.replace(b, ell=np.zeros_like(b.ell))
    assert np.all(local_time_functional(env10, R, [0.5, 1.0], zero).samples == 0)
    with pytest.raises(ValueError):
        local_time_functional(env10, 2 * R, [0.5, 1.0], b)


def test_deep_visit_counter(env10):
    x = int(env10.deep[0])
    W = deep_visit_counter(env10, x, 20.0, 50, 1)
    assert np.all(W >= 0) and np.all(W <= len(env10.deep) - 1)
    with pytest.raises(ValueError):
        deep_visit_counter(env10, int(np.flatnonzero(~env10.deep_mask)[0]), 1.0, 1, 0)
    one = _single_trap_env()
    assert np.all(deep_visit_counter(one, 5, 50.0, 20, 0) == 0)


def test_empirical_laplace(env10, batch10):
    R, b = batch10
    lam = [0.0, 0.5, 1.0, 2.0]
    rep = empirical_laplace(env10, R, b, [0.5, 1.0], lam)
    assert np.all(rep.empirical[:, 0] == 1.0)
    assert np.all(rep.empirical > 0) and np.all(rep.empirical <= 1)
    assert np.all(np.diff(rep.empirical, axis=1) <= 0)
    assert np.all(np.diff(rep.empirical, axis=0) <= 0)
    assert np.all(np.isfinite(rep.se))
    rows = list(rep.rows())
    assert len(rows) == 8 and tuple(rows[0]) == CSV_COLUMNS
    assert json.loads(rep.to_json())["schema"] == 1
    with pytest.raises(ConvergenceError):
        empirical_laplace(env10, R, b, [0.5, 1.0], lam, max_se=1e-9)


def test_shallow_contribution(env10, batch10):
    R, b = batch10
    rep = shallow_contribution(env10, R, b, t=1.0, k=1)
    assert rep.nonnegative and np.all(rep.remainder >= 0)
    assert rep.very_shallow_ok


# ---------------------------------------------------------------------------
# quasi-annealed factorization and Y-law invariance

@pytest.fixture(scope="module")
def separated12():
    ts = sample_two_step(RemParams(N=12, env_seed=1))
    assert check_separation(ts.env).separated
    return ts


def test_quasi_annealed_identity(separated12):
    rep = quasi_annealed_laplace(separated12, 60.0, 1.0, 1.0, 40, 200, seed=2)
    assert np.mean(np.abs(rep.z_scores) <= 3) >= 0.9
    assert np.all(rep.product_theta > 0) and np.all(rep.product_theta <= 1)


def test_quasi_annealed_zero_local_time(separated12):
    env = separated12.env
    b = simulate_clocks(env, [60.0], 5, 0)
    b = dataclasses.replace(b, ell=np.zeros_like(b.ell))
    rep = quasi_annealed_laplace(separated12, 60.0, 1.0, 1.0, 5, 20, seed=0, batch=b)
    assert np.all(rep.conditional_mean == 1.0) and np.all(rep.product_theta == 1.0)


def test_quasi_annealed_refuses_unseparated():
    ts = sample_two_step(RemParams(N=10, env_seed=2))
    assert not check_separation(ts.env).separated
    with pytest.raises(SeparationError):
        quasi_annealed_laplace(ts, 10.0, 1.0, 1.0, 2, 2, seed=0)


def test_y_law_invariance(separated12):
    assert y_law_invariance(separated12, range(10))
    # negative control: adjacent deep traps couple the fast rates to the tail energies
    assert not y_law_invariance(sample_two_step(RemParams(N=10, env_seed=2)), range(3))


def test_quasi_annealed_deterministic(separated12):
    a = quasi_annealed_laplace(separated12, 30.0, 1.0, 1.0, 5, 10, seed=4)
    b = quasi_annealed_laplace(separated12, 30.0, 1.0, 1.0, 5, 10, seed=4)
    assert np.array_equal(a.conditional_mean, b.conditional_mean)


# ---------------------------------------------------------------------------
# stable reference and increments

def test_stable_laplace():
    alpha, K = 0.7, float(gamma_fn(0.3))
    V = simulate_stable_subordinator(alpha, K, [1.0], 0, 100_000)[:, 0]
    for lam in (0.5, 1.0, 2.0):
        e = np.exp(-lam * V)
        assert abs(e.mean() - math.exp(-K * lam**alpha)) < 3 * e.std() / math.sqrt(len(e))


def test_stable_paths():
    S = simulate_stable_subordinator(0.6, 1.0, [0.5, 1.0, 1.0, 2.0], 1, 1000)
    assert np.all(np.diff(S, axis=1) >= 0) and np.all(S[:, 1] == S[:, 2])
    with pytest.raises(ValueError):
        simulate_stable_subordinator(1.2, 1.0, [1.0], 0, 1)
    with pytest.raises(ValueError):
        simulate_stable_subordinator(0.5, 1.0, [2.0, 1.0], 0, 1)


def test_stable_self_similarity():
    alpha = 0.7
    S = simulate_stable_subordinator(alpha, 1.0, [1.0, 2.0], 3, 20_000)
    V1 = simulate_stable_subordinator(alpha, 1.0, [1.0], 4, 20_000)[:, 0]
    assert stats.ks_2samp(S[:, 1], 2 ** (1 / alpha) * V1).pvalue > 0.01


def test_increments_factorize():
    S = simulate_stable_subordinator(0.7, 1.0, [1.0, 2.0], 5, 50_000)
    rep = increments_check(S, [1.0, 1.0])
    assert rep.gap_in_se < 3 and rep.ks_pvalue > 0.01
    with pytest.raises(ValueError):
        increments_check(S, [1.0])


def test_single_increment_is_laplace(env10, batch10):
    R, b = batch10
    S = b.SD[:, :1] / env10.scales.g_N
    rep = increments_check(S, [1.0])
    lap = empirical_laplace(env10, R, dataclasses.replace(b, checkpoints=b.checkpoints[:1],
                                                          SD=b.SD[:, :1]), [0.5], [1.0])
    assert rep.increment_laplace[0] == pytest.approx(lap.empirical[0, 0], rel=1e-14)
    assert rep.ks_pvalue is None


# ---------------------------------------------------------------------------
# exponential approximation

def test_aldous_brown(env10):
    from remaging.spectral import build_generator, exact_gap

    lam = exact_gap(build_generator(env10), env10.nu)
    for x in env10.deep:
        rep = hitting_exponentiality(env10, int(x), gap=lam)
        assert rep.holds
        assert rep.survival[0] == pytest.approx(1 - env10.nu[x], abs=1e-12)


def test_aldous_brown_trend(env10):
    reps = [hitting_exponentiality(env10, int(x)) for x in env10.deep]
    score = np.array([env10.nu[r.x] * r.e_nu * r.gap for r in reps])
    dev = np.array([r.deviation for r in reps])
    assert stats.spearmanr(score, dev).statistic < 0
