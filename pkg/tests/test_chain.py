import math

import numpy as np
import pytest
from scipy import stats

import remaging.chain as chain
from remaging.chain import (RateModel, Trajectory, clock, clock_on_grid, detailed_balance_check,
                            exit_rates, hit, local_time_vector, local_times, rate, simulate,
                            simulate_clocks, time_change_reconstruct, watched_local_time)
from remaging.potential import mean_hitting_exact

from conftest import planted

Y, X = RateModel.FAST_Y, RateModel.METROPOLIS_X


def test_rate_examples():
    env = planted([math.log(2.0), math.log(0.5)])
    assert rate(X, 0, 1, env) == pytest.approx(0.25, rel=1e-15)
    assert rate(Y, 1, 0, env) == pytest.approx(1.0, rel=1e-15)
    assert rate("y", 0, 1, env) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(ValueError):
        rate(Y, 0, 0, env)


def test_rate_identity_many_edges(env10):
    qy, rx = exit_rates(env10, Y), exit_rates(env10, X)
    one_v_tau = np.exp(np.maximum(env10.log_tau, 0.0))[:, None]
    rel = np.abs(rx - qy / one_v_tau) / rx
    assert rel.size >= 10**4 and rel.max() < 1e-12


def test_rates_overflow_free():
    env = planted([700.0, -700.0, 650.0, 0.0])
    assert np.all(np.isfinite(exit_rates(env, Y))) and np.all(np.isfinite(exit_rates(env, X)))


@pytest.mark.parametrize("model", [Y, X])
def test_detailed_balance(env10, model):
    assert detailed_balance_check(env10, model) < 1e-12


def test_detailed_balance_negative_control(env8, monkeypatch):
    orig = chain.exit_rates

    def broken(env, model):
        R = orig(env, model).copy()
        R[3, 2] *= 1.01
        return R

    monkeypatch.setattr(chain, "exit_rates", broken)
    assert detailed_balance_check(env8, Y) > 1e3 * 1e-12


def test_zero_horizon():
    env = planted(np.zeros(8))
    tr = simulate(env, Y, 3, 0.0, 1)
    assert tr.n_jumps == 0 and tr.states.tolist() == [3]
    assert local_times(tr) == {3: 0.0}


def test_holding_and_successor_laws(env8):
    x = int(np.argmin(np.abs(env8.log_tau)))
    q = exit_rates(env8, Y)[x]
    n = 10_000
    holds, succ = np.empty(n), np.empty(n, dtype=int)
    for i in range(n):
        tr = simulate(env8, Y, x, 1e9, 11, traj_id=i, max_jumps=1)
        holds[i] = tr.jump_times[0]
        succ[i] = tr.states[1]
    m = 1 / q.sum()
    assert abs(holds.mean() - m) < 3 * m / math.sqrt(n)
    p = q / q.sum()
    counts = np.array([(succ == (x ^ (1 << i))).sum() for i in range(env8.N)])
    z = (counts - n * p) / np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(z[p > 0.01]) < 4)


def test_local_times_partition_and_ergodic():
    from remaging.environment import RemParams, sample_environment

    env = sample_environment(RemParams(N=6, env_seed=1))
    T = 2e4
    tr = simulate(env, Y, "stationary", T, 3)
    ell = local_time_vector(tr, env.size)
    assert ell.sum() == pytest.approx(T, rel=1e-9)
    # batch-means standard error for the occupation fraction of the heaviest state
    x = int(np.argmax(env.nu))
    edges = np.linspace(0, T, 21)
    frac = []
    for a, b in zip(edges[:-1], edges[1:]):
        k = (tr.states == x)
        starts = np.concatenate(([0.0], tr.jump_times))
        ends = np.concatenate((tr.jump_times, [T]))
        ov = np.clip(np.minimum(ends, b) - np.maximum(starts, a), 0, None)
        frac.append((ov * k).sum() / (b - a))
    frac = np.array(frac)
    se = frac.std(ddof=1) / math.sqrt(len(frac))
    assert abs(ell[x] / T - env.nu[x]) < 3 * se + 1e-12


def test_single_state_trajectory():
    tr = Trajectory(5, np.array([]), np.array([5]), 2.0)
    assert local_times(tr) == {5: 2.0}


def test_clock_slope():
    env = planted(np.full(4, math.log(4.0)))
    tr = Trajectory(0, np.array([]), np.array([0]), 2.0)
    assert clock(tr, env) == pytest.approx(8.0, rel=1e-15)


def test_clock_identities(env10):
    tr = simulate(env10, Y, "stationary", 50.0, 2)
    ell = local_time_vector(tr, env10.size)
    S = clock(tr, env10)
    assert S == pytest.approx(float(np.sum(ell * np.exp(np.maximum(env10.log_tau, 0)))), rel=1e-9)
    SD = clock(tr, env10, deep_only=True)
    assert S >= SD
    grid = np.linspace(0, 50, 101)
    vals = clock_on_grid(tr, env10, grid)
    assert np.all(np.diff(vals) >= np.diff(grid) * (1 - 1e-12))
    with pytest.raises(ValueError):
        clock(tr, env10, t=60.0)


def test_deep_clock_zero_without_deep():
    env = planted(np.zeros(16))
    tr = simulate(env, Y, 0, 10.0, 1)
    assert len(env.deep) == 0 and clock(tr, env, deep_only=True) == 0.0


def test_time_change_shallow_is_identity():
    env = planted(np.full(16, -0.5))
    tr = simulate(env, Y, 0, 5.0, 4)
    xt = time_change_reconstruct(tr, env)
    np.testing.assert_array_equal(xt.jump_times, tr.jump_times)
    np.testing.assert_array_equal(xt.states, tr.states)


def test_time_change_holding_law(env8):
    tr = simulate(env8, Y, "stationary", 3000.0, 9)
    xt = time_change_reconstruct(tr, env8)
    np.testing.assert_array_equal(xt.states, tr.states)
    h = xt.complete_holding_times()
    s = tr.states[: len(h)]
    x = np.bincount(s).argmax()
    sample = h[s == x]
    rx = exit_rates(env8, X)[x].sum()
    assert len(sample) > 1000
    assert stats.kstest(sample, "expon", args=(0, 1 / rx)).pvalue > 0.01


def test_hit_conventions(two_state):
    r = hit(two_state, Y, 0, [0], 1)
    assert r.time == 0.0 and r.vertex == 0
    r = hit(two_state, Y, 0, [0], 1, return_time=True)
    assert r.time > 0 and r.n_jumps == 2


def test_two_state_hitting_mean(two_state):
    n = 20_000
    h = np.array([hit(two_state, Y, "stationary", [0], 3, traj_id=i).time for i in range(n)])
    # E_nu[H_0] = nu_1 / q_10 = 1/3
    assert abs(h.mean() - 1 / 3) < 3 * h.std() / math.sqrt(n)
    assert mean_hitting_exact(two_state, 0).e_nu == pytest.approx(1 / 3, rel=1e-12)


def test_hitting_mean_vs_linear_solve(env8):
    x = int(env8.deep[0])
    exact = mean_hitting_exact(env8, x).e_nu
    n = 10_000
    h = np.array([hit(env8, Y, "stationary", [x], 5, traj_id=i).time for i in range(n)])
    assert abs(h.mean() - exact) < 3 * h.std() / math.sqrt(n)


def test_determinism(env8):
    a = simulate(env8, Y, "stationary", 20.0, 7, traj_id=3)
    b = simulate(env8, Y, "stationary", 20.0, 7, traj_id=3)
    c = simulate(env8, Y, "stationary", 20.0, 7, traj_id=4)
    assert np.array_equal(a.jump_times, b.jump_times) and np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states[:50], c.states[:50]) or a.n_jumps != c.n_jumps


def test_batch_clocks_match_single_runs(env8):
    ck = np.array([5.0, 10.0])
    batch = simulate_clocks(env8, ck, 5, 21)
    for i in range(5):
        tr = simulate(env8, Y, "stationary", 10.0, 21, traj_id=i)
        np.testing.assert_allclose(batch.S[i], clock_on_grid(tr, env8, ck), rtol=1e-12)
        np.testing.assert_allclose(batch.SD[i], clock_on_grid(tr, env8, ck, deep_only=True), rtol=1e-12)
        ell = local_time_vector(Trajectory(tr.start, tr.jump_times, tr.states, 10.0), env8.size)
        np.testing.assert_allclose(batch.ell[i, 1], ell[env8.deep], rtol=1e-12, atol=1e-14)


def test_watched_local_time_matches_simulation(env8):
    x = int(env8.deep[0])
    ell, end = watched_local_time(env8, x, [3.0, 3.0], x, 2)
    for i in range(2):
        tr = simulate(env8, Y, x, 3.0, 2, traj_id=i)
        assert ell[i] == pytest.approx(local_times(tr).get(x, 0.0), rel=1e-12)
        assert end[i] == tr.states[-1]


def test_truncation_flag(env8):
    tr = simulate(env8, Y, 0, 1e9, 1, max_jumps=10)
    assert tr.truncated and tr.n_jumps == 10
