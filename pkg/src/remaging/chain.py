"""Rates, exact continuous-time simulation, local times and clock processes.

Two chains live on the same landscape: the Metropolis chain ``X`` with rates
``1 ^ tau_y / tau_x`` and the fast chain ``Y`` with rates
``(tau_x ^ tau_y) / (1 ^ tau_x)``.  ``X`` is ``Y`` run through the inverse
of the clock ``S(t) = int_0^t (1 v tau_{Y_s}) ds``.

Simulation is event driven: a holding time ``Exp(q_x)`` followed by a
successor drawn proportionally to the rates.  The compiled kernels seed
numba's generator per trajectory from a numpy ``SeedSequence``, so a
trajectory depends only on ``(seed, trajectory index)``.
"""

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numba import njit

from .exceptions import BudgetExceeded

__all__ = [
    "RateModel",
    "Trajectory",
    "HitResult",
    "ClockBatch",
    "rate",
    "exit_rates",
    "rate_table",
    "detailed_balance_check",
    "simulate",
    "local_times",
    "local_time_vector",
    "clock",
    "clock_on_grid",
    "time_change_reconstruct",
    "hit",
    "trajectory_seeds",
    "sample_stationary",
    "simulate_clocks",
    "write_trajectory_csv",
    "expected_jumps",
    "check_jump_budget",
    "watched_local_time",
    "sst_local_time",
]

# rate tables larger than this fall back to per-visit evaluation
TABLE_BYTES = 1 << 30
DEFAULT_MAX_JUMPS = 10**8


class RateModel(IntEnum):
    METROPOLIS_X = 0
    FAST_Y = 1


def _model(model):
    if isinstance(model, str):
        key = model.strip().upper()
        aliases = {"X": "METROPOLIS_X", "METROPOLIS": "METROPOLIS_X", "Y": "FAST_Y", "FAST": "FAST_Y"}
        return RateModel[aliases.get(key, key)]
    return RateModel(model)


def rate(model, x, y, env):
    """Jump rate from ``x`` to neighbour ``y``."""
    x, y = int(x), int(y)
    if (x ^ y).bit_count() != 1:
        raise ValueError(f"{x} and {y} are not neighbours")
    lx, ly = float(env.log_tau[x]), float(env.log_tau[y])
    if _model(model) is RateModel.FAST_Y:
        return math.exp(min(lx, ly) - min(lx, 0.0))
    return math.exp(min(0.0, ly - lx))


def exit_rates(env, model):
    """Matrix ``R[x, i]`` of rates from ``x`` to ``x ^ 2**i``."""
    lt = env.log_tau
    nb = np.arange(env.size)[:, None] ^ (1 << np.arange(env.N))[None, :]
    lx, ly = lt[:, None], lt[nb]
    if _model(model) is RateModel.FAST_Y:
        return np.exp(np.minimum(lx, ly) - np.minimum(lx, 0.0))
    return np.exp(np.minimum(0.0, ly - lx))


def detailed_balance_check(env, model=RateModel.FAST_Y):
    """Largest violation of detailed balance over all edges.

    For ``Y`` the weights are ``nu`` and the residual is absolute.  For ``X``
    the weights are Gibbs weights ``tau / max(tau)``, evaluated in the log
    domain, and the residual is relative to the edge flux.
    """
    R = exit_rates(env, model)
    nb = np.arange(env.size)[:, None] ^ (1 << np.arange(env.N))[None, :]
    bits = np.arange(env.N)[None, :]
    if _model(model) is RateModel.FAST_Y:
        flux = env.nu[:, None] * R
        return float(np.max(np.abs(flux - flux[nb, bits])))
    w = np.exp(env.log_tau - env.log_tau.max())
    flux = w[:, None] * R
    back = flux[nb, bits]
    scale = np.maximum(np.maximum(flux, back), np.finfo(float).tiny)
    return float(np.max(np.abs(flux - back) / scale))


# ---------------------------------------------------------------------------
# compiled kernels

@njit(cache=True)
def _fill_rates(lt, N, model, x, buf):
    lx = lt[x]
    base = min(lx, 0.0)
    acc = 0.0
    for i in range(N):
        ly = lt[x ^ (1 << i)]
        if model == 1:
            r = math.exp(min(lx, ly) - base)
        else:
            r = math.exp(min(0.0, ly - lx))
        acc += r
        buf[i] = acc
    return acc


@njit(cache=True)
def _build_table(lt, N, model):
    n = lt.shape[0]
    cum = np.empty((n, N))
    for x in range(n):
        _fill_rates(lt, N, model, x, cum[x])
    return cum


@njit(cache=True)
def _step(lt, N, model, cum, use_table, x, buf):
    """Return (holding time, successor) from state x."""
    if use_table:
        row = cum[x]
    else:
        _fill_rates(lt, N, model, x, buf)
        row = buf
    tot = row[N - 1]
    h = -math.log(1.0 - np.random.random()) / tot
    u = np.random.random() * tot
    k = 0
    while k < N - 1 and row[k] <= u:
        k += 1
    return h, x ^ (1 << k)


@njit(cache=True)
def _draw_start(nu_cum):
    u = np.random.random() * nu_cum[-1]
    k = np.searchsorted(nu_cum, u, side="right")
    if k >= nu_cum.shape[0]:
        k = nu_cum.shape[0] - 1
    return k


@njit(cache=True)
def _seed(s):
    np.random.seed(s)


@njit(cache=True)
def _simulate(lt, N, model, cum, use_table, start, nu_cum, horizon, seed, max_jumps):
    np.random.seed(seed)
    buf = np.empty(N)
    x = start if start >= 0 else _draw_start(nu_cum)
    cap = 1024
    times = np.empty(cap)
    states = np.empty(cap + 1, dtype=np.int64)
    states[0] = x
    n = 0
    t = 0.0
    truncated = False
    while True:
        h, y = _step(lt, N, model, cum, use_table, x, buf)
        if t + h >= horizon:
            break
        if n >= max_jumps:
            truncated = True
            break
        t += h
        if n >= cap:
            cap *= 2
            nt = np.empty(cap)
            nt[:n] = times[:n]
            times = nt
            ns = np.empty(cap + 1, dtype=np.int64)
            ns[: n + 1] = states[: n + 1]
            states = ns
        times[n] = t
        n += 1
        states[n] = y
        x = y
    return times[:n].copy(), states[: n + 1].copy(), truncated, t


@njit(cache=True)
def _hit(lt, N, model, cum, use_table, start, nu_cum, target, seed, cap, after_first, watch):
    np.random.seed(seed)
    buf = np.empty(N)
    x = start if start >= 0 else _draw_start(nu_cum)
    x0 = x
    t = 0.0
    watched = 0.0
    n = 0
    if target[x] and not after_first:
        return 0.0, x, False, 0, watched, x0
    while n < cap:
        h, y = _step(lt, N, model, cum, use_table, x, buf)
        if x == watch:
            watched += h
        t += h
        n += 1
        x = y
        if target[x]:
            return t, x, False, n, watched, x0
    return t, x, True, n, watched, x0


@njit(cache=True)
def _advance(lt, N, model, cum, use_table, x, duration, watch):
    """Run from x for ``duration``; return end state, local time at watch, jumps."""
    buf = np.empty(N)
    t = 0.0
    watched = 0.0
    n = 0
    while True:
        h, y = _step(lt, N, model, cum, use_table, x, buf)
        if t + h >= duration:
            if x == watch:
                watched += duration - t
            return x, watched, n
        if x == watch:
            watched += h
        t += h
        x = y
        n += 1


@njit(cache=True)
def _watch_batch(lt, N, model, cum, use_table, starts, durations, watch, seeds, ell_out, end_out):
    for r in range(seeds.shape[0]):
        np.random.seed(seeds[r])
        end, w, n = _advance(lt, N, model, cum, use_table, starts[r], durations[r], watch)
        ell_out[r] = w
        end_out[r] = end


@njit(cache=True)
def _sst_batch(lt, N, cum, use_table, accept, start, block, watch, seeds, max_blocks,
               ell_out, blocks_out, end_out):
    for r in range(seeds.shape[0]):
        np.random.seed(seeds[r])
        x = start
        ell = 0.0
        k = 0
        while k < max_blocks:
            k += 1
            y, w, n = _advance(lt, N, 1, cum, use_table, x, block, watch)
            ell += w
            z = x
            x = y
            if np.random.random() < accept[z, y]:
                break
        ell_out[r] = ell
        blocks_out[r] = k
        end_out[r] = x


@njit(cache=True)
def _clock_batch(lt, N, cum, use_table, nu_cum, slope, deep_idx, slice_idx, n_slices,
                 checkpoints, seeds, S_out, SD_out, ell_out, slice_out, jumps_out, start):
    n_deep = ell_out.shape[2]
    n_ck = checkpoints.shape[0]
    buf = np.empty(N)
    ell = np.empty(n_deep)
    sl = np.empty(n_slices + 1)
    for r in range(seeds.shape[0]):
        np.random.seed(seeds[r])
        x = start if start >= 0 else _draw_start(nu_cum)
        t = 0.0
        S = 0.0
        SD = 0.0
        ell[:] = 0.0
        sl[:] = 0.0
        k = 0
        n = 0
        while k < n_ck:
            h, y = _step(lt, N, 1, cum, use_table, x, buf)
            w = slope[x]
            d = deep_idx[x]
            s = slice_idx[x]
            while k < n_ck and t + h >= checkpoints[k]:
                dt = checkpoints[k] - t
                S_out[r, k] = S + w * dt
                if d >= 0:
                    SD_out[r, k] = SD + w * dt
                    ell[d] += dt
                    ell_out[r, k, :] = ell
                    ell[d] -= dt
                else:
                    SD_out[r, k] = SD
                    ell_out[r, k, :] = ell
                for q in range(n_slices + 1):
                    slice_out[r, k, q] = sl[q]
                if s >= 0:
                    slice_out[r, k, s] += w * dt
                k += 1
            if k >= n_ck:
                break
            S += w * h
            if d >= 0:
                SD += w * h
                ell[d] += h
            if s >= 0:
                sl[s] += w * h
            t += h
            x = y
            n += 1
        jumps_out[r] = n


# ---------------------------------------------------------------------------
# Python interface

class _Engine:
    """Compiled-kernel inputs for one (environment, model) pair."""

    def __init__(self, env, model, table_bytes=TABLE_BYTES):
        self.env = env
        self.model = _model(model)
        self.lt = np.ascontiguousarray(env.log_tau)
        self.N = env.N
        self.use_table = env.size * env.N * 8 <= table_bytes
        if self.use_table:
            self.cum = _build_table(self.lt, self.N, int(self.model))
        else:
            self.cum = np.empty((1, self.N))
        self.nu_cum = np.cumsum(env.nu)

    def start(self, start):
        if isinstance(start, str):
            if start != "stationary":
                raise ValueError(f"unknown start {start!r}")
            return -1
        s = int(start)
        if not 0 <= s < self.env.size:
            raise ValueError(f"start {s} outside the hypercube")
        return s


_ENGINES = {}


def _engine(env, model):
    key = (id(env), int(_model(model)))
    eng = _ENGINES.get(key)
    if eng is None or eng.env is not env:
        if len(_ENGINES) >= 4:
            _ENGINES.clear()
        eng = _ENGINES[key] = _Engine(env, model)
    return eng


def rate_table(env, model):
    """Cumulative rate table ``cum[x, i] = sum_{j <= i} rate(x, x ^ 2**j)``."""
    return _engine(env, model).cum


def trajectory_seeds(seed, n, offset=0):
    """Per-trajectory 32-bit seeds derived from ``(seed, index)``."""
    return np.array(
        [np.random.SeedSequence([int(seed), offset + i]).generate_state(1)[0] for i in range(n)],
        dtype=np.uint32,
    )


def sample_stationary(env, rng, size=None):
    """Inverse-CDF draw from nu."""
    u = rng.random(size) * 1.0
    cum = np.cumsum(env.nu)
    return np.minimum(np.searchsorted(cum, u * cum[-1], side="right"), env.size - 1)


@dataclass
class Trajectory:
    """Piecewise-constant path: ``states[i]`` holds on ``[jump_times[i-1], jump_times[i])``."""

    start: int
    jump_times: np.ndarray
    states: np.ndarray
    horizon: float
    truncated: bool = False
    model: RateModel = RateModel.FAST_Y

    @property
    def n_jumps(self):
        return len(self.jump_times)

    def holding_times(self):
        """Durations of each visit; the last one is cut at the horizon."""
        edges = np.concatenate(([0.0], self.jump_times, [self.horizon]))
        return np.diff(edges)

    def complete_holding_times(self):
        return np.diff(np.concatenate(([0.0], self.jump_times)))


def simulate(env, model, start, horizon, traj_seed, traj_id=0, max_jumps=DEFAULT_MAX_JUMPS):
    """Exact simulation on ``[0, horizon]``.

    If the jump budget runs out first the trajectory stops at its last jump
    time and is flagged ``truncated``.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    eng = _engine(env, model)
    seed = trajectory_seeds(traj_seed, 1, traj_id)[0]
    times, states, trunc, t_last = _simulate(
        eng.lt, eng.N, int(eng.model), eng.cum, eng.use_table, eng.start(start),
        eng.nu_cum, float(horizon), seed, int(max_jumps))
    hz = t_last if trunc else float(horizon)
    return Trajectory(int(states[0]), times, states, hz, bool(trunc), eng.model)


def local_time_vector(traj, size):
    return np.bincount(traj.states, weights=traj.holding_times(), minlength=size)


def local_times(traj):
    """Occupation time of every visited vertex up to the horizon."""
    d = {}
    for v, h in zip(traj.states.tolist(), traj.holding_times().tolist()):
        d[v] = d.get(v, 0.0) + h
    return d


def clock(traj, env, deep_only=False, t=None):
    """S(t), or S_D(t) with ``deep_only``, as an exact integral."""
    t = traj.horizon if t is None else float(t)
    if t > traj.horizon * (1 + 1e-12) + 1e-300:
        raise ValueError(f"t={t} beyond the trajectory horizon {traj.horizon}")
    return float(clock_on_grid(traj, env, [t], deep_only)[0])


def clock_on_grid(traj, env, t_grid, deep_only=False):
    """Vectorised clock evaluation at sorted times ``t_grid``."""
    t_grid = np.asarray(t_grid, dtype=float)
    slope = np.exp(np.maximum(env.log_tau[traj.states], 0.0))
    if deep_only:
        slope = slope * env.deep_mask[traj.states]
    starts = np.concatenate(([0.0], traj.jump_times))
    cum = np.concatenate(([0.0], np.cumsum(slope[:-1] * np.diff(starts))))
    k = np.searchsorted(starts, t_grid, side="right") - 1
    k = np.clip(k, 0, len(starts) - 1)
    return cum[k] + slope[k] * (t_grid - starts[k])


def time_change_reconstruct(traj, env):
    """Metropolis trajectory ``X(t) = Y(S^{-1}(t))`` built from a ``Y`` path."""
    slope = np.exp(np.maximum(env.log_tau[traj.states], 0.0))
    hold = traj.holding_times() * slope
    edges = np.cumsum(hold)
    return Trajectory(traj.start, edges[:-1].copy(), traj.states.copy(), float(edges[-1]),
                      traj.truncated, RateModel.METROPOLIS_X)


@dataclass(frozen=True)
class HitResult:
    time: float
    vertex: int
    censored: bool
    n_jumps: int
    start: int
    watch_local_time: float = 0.0


def hit(env, model, start, targets, traj_seed, traj_id=0, cap=DEFAULT_MAX_JUMPS,
        return_time=False, watch=-1):
    """First entrance time into ``targets``.

    ``H = 0`` when the start is a target, unless ``return_time`` is set, in
    which case the search begins after the first jump.  ``watch`` names a
    vertex whose local time before the hit is also returned.
    """
    eng = _engine(env, model)
    mask = np.zeros(env.size, dtype=bool)
    if np.ndim(targets) == 1 and len(targets) == env.size and np.asarray(targets).dtype == bool:
        mask[:] = targets
    else:
        mask[np.atleast_1d(np.asarray(targets, dtype=np.int64))] = True
    if not mask.any():
        raise ValueError("targets must be nonempty")
    seed = trajectory_seeds(traj_seed, 1, traj_id)[0]
    t, v, cens, n, w, x0 = _hit(eng.lt, eng.N, int(eng.model), eng.cum, eng.use_table,
                                eng.start(start), eng.nu_cum, mask, seed, int(cap),
                                bool(return_time), int(watch))
    return HitResult(float(t), int(v), bool(cens), int(n), int(x0), float(w))


@dataclass
class ClockBatch:
    """Clock values of many nu-started ``Y`` runs at fixed chain times.

    ``ell[r, k, j]`` is the local time at ``deep[j]`` by ``checkpoints[k]``;
    ``slices[r, k, i]`` is the clock mass collected on shallow slice ``i``
    (slice 0 is the very shallow set).
    """

    checkpoints: np.ndarray
    S: np.ndarray
    SD: np.ndarray
    ell: np.ndarray
    slices: np.ndarray
    n_jumps: np.ndarray
    deep: np.ndarray


def simulate_clocks(env, checkpoints, n_traj, seed, slices=None, offset=0, start="stationary"):
    """Run ``n_traj`` fast-chain trajectories and record clocks at ``checkpoints``."""
    from .environment import shallow_slices

    eng = _engine(env, RateModel.FAST_Y)
    ck = np.sort(np.asarray(checkpoints, dtype=float))
    sl = shallow_slices(env) if slices is None else slices
    deep_idx = -np.ones(env.size, dtype=np.int64)
    deep_idx[env.deep] = np.arange(len(env.deep))
    slope = np.exp(np.maximum(env.log_tau, 0.0))
    seeds = trajectory_seeds(seed, n_traj, offset)
    n_ck, n_deep = len(ck), len(env.deep)
    S = np.zeros((n_traj, n_ck))
    SD = np.zeros((n_traj, n_ck))
    ell = np.zeros((n_traj, n_ck, n_deep))
    sls = np.zeros((n_traj, n_ck, sl.n_slices + 1))
    jumps = np.zeros(n_traj, dtype=np.int64)
    _clock_batch(eng.lt, eng.N, eng.cum, eng.use_table, eng.nu_cum, slope, deep_idx,
                 np.ascontiguousarray(sl.index), sl.n_slices, ck, seeds, S, SD, ell, sls, jumps,
                 eng.start(start))
    return ClockBatch(ck, S, SD, ell, sls, jumps, env.deep.copy())


def expected_jumps(env, horizon, model=RateModel.FAST_Y):
    """Mean number of jumps of a stationary run on ``[0, horizon]``."""
    R = exit_rates(env, model)
    if _model(model) is RateModel.FAST_Y:
        return float(horizon * np.sum(env.nu * R.sum(axis=1)))
    w = np.exp(env.log_tau - env.log_tau.max())
    return float(horizon * np.sum(w * R.sum(axis=1)) / w.sum())


def check_jump_budget(env, horizon, n_traj, budget):
    need = expected_jumps(env, horizon) * n_traj
    if need > budget:
        raise BudgetExceeded(f"projected {need:.3g} jumps exceed the budget {budget:.3g}")
    return need


def write_trajectory_csv(traj, path):
    with open(path, "w") as fh:
        fh.write("time,vertex_hex\n")
        fh.write(f"0.0,{traj.states[0]:x}\n")
        for t, v in zip(traj.jump_times.tolist(), traj.states[1:].tolist()):
            fh.write(f"{t!r},{v:x}\n")


def watched_local_time(env, start, durations, watch, seed, model=RateModel.FAST_Y, offset=0):
    """Local time at ``watch`` over ``[0, durations[r]]`` for runs started at ``start``.

    Returns ``(ell, end_states)``.
    """
    eng = _engine(env, model)
    durations = np.ascontiguousarray(durations, dtype=float)
    n = len(durations)
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64), (n,)).copy()
    seeds = trajectory_seeds(seed, n, offset)
    ell = np.empty(n)
    end = np.empty(n, dtype=np.int64)
    _watch_batch(eng.lt, eng.N, int(eng.model), eng.cum, eng.use_table, starts, durations,
                 int(watch), seeds, ell, end)
    return ell, end


def sst_local_time(env, kernel, m_star, start, n, seed, watch=None, max_blocks=500, offset=0):
    """Local time at ``watch`` (default ``start``) up to a strong stationary time.

    The fast chain is simulated exactly in blocks of length ``m_star``; a
    block from ``z`` ending at ``y`` stops with probability
    ``(1 - e^{-1}) nu_y / kernel[z, y]``, so the stopping block index is
    geometric and the stopped state is nu-distributed.  Returns
    ``(ell, blocks, end_states)``; ``blocks == max_blocks`` marks truncation.
    """
    nu = env.nu
    A = (1.0 - math.exp(-1.0)) * nu[None, :] / kernel
    if np.any(A > 1 + 1e-12) or not np.all(np.isfinite(A)):
        raise ValueError("kernel violates the minorization P >= (1 - e^-1) nu; increase m_star")
    A = np.ascontiguousarray(np.minimum(A, 1.0))
    eng = _engine(env, RateModel.FAST_Y)
    seeds = trajectory_seeds(seed, n, offset)
    ell = np.empty(n)
    blocks = np.empty(n, dtype=np.int64)
    end = np.empty(n, dtype=np.int64)
    w = int(start) if watch is None else int(watch)
    _sst_batch(eng.lt, eng.N, eng.cum, eng.use_table, A, int(start), float(m_star), w, seeds,
               int(max_blocks), ell, blocks, end)
    return ell, blocks, end
