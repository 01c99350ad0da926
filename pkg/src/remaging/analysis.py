"""Aging pipeline: the scale R_N, local-time functionals, Laplace transforms.

The clock process restricted to deep traps is ``S_D(t) = sum_x ell_t(x) tau_x``
for deep ``x``.  Its rescaled Laplace transform is compared with the
alpha-stable value ``exp(-K lambda^alpha t)`` where ``K = Gamma(1 - alpha)``.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.special import gamma as gamma_fn
from scipy.special import log_ndtr

from .chain import simulate, sst_local_time, simulate_clocks, watched_local_time, RateModel
from .environment import check_separation, resample_deep_energies
from .exceptions import ConvergenceError, SeparationError
from .potential import local_capacity, mean_hitting_times
from .spectral import (build_generator, gap_estimate, kernel_spectral, mixing_scale,
                       DENSE_MAX_N)

__all__ = [
    "KConstant",
    "constant_K",
    "theta_function",
    "RNEstimate",
    "estimate_RN",
    "AgingConfig",
    "LNReport",
    "local_time_functional",
    "deep_visit_counter",
    "LaplaceReport",
    "empirical_laplace",
    "QuasiAnnealedReport",
    "quasi_annealed_laplace",
    "y_law_invariance",
    "ShallowReport",
    "shallow_contribution",
    "simulate_stable_subordinator",
    "IncrementsReport",
    "increments_check",
    "ExponentialityReport",
    "hitting_exponentiality",
]

SCHEMA_VERSION = 1
SST_MAX_N = 12
# m* lambda_Y measured between 1.6 and 3.1 for N = 6..10; used above SST_MAX_N
MIX_TIMES_GAP = 4.0


# ---------------------------------------------------------------------------
# the constant K and the function theta

@dataclass(frozen=True)
class KConstant:
    value: float
    C: float
    reference: float
    abs_error: float
    quad_error: float


def constant_K(alpha, beta, tail=1e-16):
    """``K = alpha beta int e^{-alpha beta z} (1 - exp(-e^{beta z})) dz``.

    The integral is taken over ``[-L_lo, L_hi]`` by adaptive quadrature; the
    two tails use their leading expansions ``e^{-alpha beta L}/(alpha beta)``
    and ``e^{-(1-alpha) beta L}/((1-alpha) beta)`` (minus the next term), with
    ``L`` chosen so the neglected remainders are below ``tail``.  The
    substitution ``w = e^{beta z}`` gives ``K = Gamma(1 - alpha)``, returned
    as ``reference``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if beta <= 0:
        raise ValueError("beta must be positive")
    a, b = alpha * beta, (1 - alpha) * beta
    # upper tail remainder after the leading term is O(exp(-e^{beta L}))
    L_hi = max(math.log(40.0) / beta, 1.0 / beta)
    # lower tail: next neglected term ~ e^{-(3 - alpha) beta L} / (6 (3 - alpha) beta)
    L_lo = -math.log(tail * 6 * (3 - alpha) * beta) / ((3 - alpha) * beta)

    def f(z):
        return math.exp(-a * z) * -math.expm1(-math.exp(beta * z))

    pts = [0.0]
    body, err = integrate.quad(f, -L_lo, L_hi, points=pts, epsabs=0.0, epsrel=1e-13, limit=500)
    # int_{L_hi}^inf e^{-a z} (1 - exp(-e^{beta z})) dz, the subtracted part is < e^{-40}
    upper = math.exp(-a * L_hi) / a
    # int_{-inf}^{-L_lo}: 1 - e^{-w} = w - w^2/2 + ..., w = e^{beta z}
    lower = math.exp(-b * L_lo) / b - math.exp(-(2 - alpha) * beta * L_lo) / (2 * (2 - alpha) * beta)
    C = body + upper + lower
    K = a * C
    ref = float(gamma_fn(1 - alpha))
    return KConstant(K, C, ref, abs(K - ref), a * err)


def _conditioned_mean(fun, thr, log_p):
    """``E[fun(E) | E >= thr]`` for a standard Gaussian ``E`` by quadrature."""
    c0 = -0.5 * math.log(2 * math.pi) - log_p

    def dens(e):
        return math.exp(c0 - 0.5 * e * e)

    hi = thr + 12.0 + 40.0 / max(thr, 1.0)
    return integrate.quad(lambda e: fun(e) * dens(e), thr, hi, epsabs=0.0, epsrel=1e-11, limit=400)


def theta_function(u, lam, scales, alpha=None, beta=None):
    """``theta(u) = 1 - E[exp(-(lam / g_N) u e^{beta sqrt(N) E})]`` over the tail law.

    ``E`` is Gaussian conditioned on ``E >= thr`` (the deep threshold).
    Returns ``(direct, asymptotic)``; the second is
    ``K eps_N lam^alpha u^alpha`` with ``eps_N = 2^{(gamma' - gamma) N}``.
    """
    alpha = scales.alpha if alpha is None else alpha
    beta = scales.beta if beta is None else beta
    u = float(u)
    if u < 0 or lam < 0:
        raise ValueError("u and lambda must be nonnegative")
    K = float(gamma_fn(1 - alpha))
    asym = K * scales.eps_N * lam**alpha * u**alpha
    if u == 0 or lam == 0:
        return 0.0, asym
    c = beta * math.sqrt(scales.N)
    log_a = math.log(lam * u) - scales.log_g
    thr = scales.deep_threshold
    log_p = float(log_ndtr(-thr))

    def one_minus(e):
        return -math.expm1(-math.exp(min(log_a + c * e, 700.0)))

    e_star = -log_a / c
    val, _ = _conditioned_mean(one_minus, thr, log_p)
    if thr < e_star < thr + 12:
        # split at the transition of the integrand for accuracy
        c0 = -0.5 * math.log(2 * math.pi) - log_p
        d = lambda e: one_minus(e) * math.exp(c0 - 0.5 * e * e)  # noqa: E731
        hi = thr + 12.0 + 40.0 / max(thr, 1.0)
        v1, _ = integrate.quad(d, thr, e_star, epsabs=0.0, epsrel=1e-11, limit=400)
        v2, _ = integrate.quad(d, e_star, hi, epsabs=0.0, epsrel=1e-11, limit=400)
        val = v1 + v2
    return float(min(max(val, 0.0), 1.0)), float(asym)


# ---------------------------------------------------------------------------
# the scale R_N

@dataclass
class RNEstimate:
    R_N: float
    log_R_over_N: float
    method: str
    surrogate: bool
    deep: np.ndarray
    e_nu: np.ndarray
    e_nu_exact: np.ndarray
    ell_alpha: np.ndarray
    ell_alpha_se: np.ndarray
    m_star: float
    R_N_doubled: float | None = None
    ratio_se: float | None = None

    def summary(self):
        return {"R_N": self.R_N, "log_R_over_N": self.log_R_over_N, "method": self.method,
                "surrogate": self.surrogate, "m_star": self.m_star, "n_deep": int(len(self.deep)),
                "n_exact_solves": int(np.sum(self.e_nu_exact)), "R_N_doubled": self.R_N_doubled}


def _geometric_blocks(rng, n):
    """Block counts with ``P[k] = (1 - p)^{k-1} p``, ``p = 1 - e^{-1}``."""
    return rng.geometric(1.0 - math.exp(-1.0), n)


def _hitting_means(env, n_exact, seed):
    """Exact ``E_nu[H_x]`` on all deep traps, or on a random subset with a ratio fill-in.

    The fill-in scales the local-capacity proxy ``1 / C(x -> B(x, 2)^c)`` by
    the mean ratio measured on the exact subset.
    """
    deep = env.deep
    exact = np.ones(len(deep), dtype=bool)
    if n_exact is None or n_exact >= len(deep):
        return mean_hitting_times(env, deep), exact, None
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    pick = np.sort(rng.choice(len(deep), size=n_exact, replace=False))
    from .hypercube import enumerate_ball

    proxy = np.array([1.0 / local_capacity(env, int(x), enumerate_ball(int(x), 2, env.N))
                      for x in deep])
    e = proxy.copy()
    e[pick] = mean_hitting_times(env, deep[pick])
    r = e[pick] / proxy[pick]
    exact[:] = False
    exact[pick] = True
    e[~exact] = proxy[~exact] * r.mean()
    return e, exact, float(r.std(ddof=1) / math.sqrt(len(r))) if len(r) > 1 else None


def estimate_RN(env, n_samples=200, seed=0, n_exact=None, sst_max_n=SST_MAX_N):
    """``R_N = 2^{(gamma - gamma') N} (sum_x E_x[ell_{T_mix}(x)^alpha] / E_nu[H_x])^{-1}``.

    ``E_nu[H_x]`` comes from exact linear solves.  For ``N <= sst_max_n``
    the local time is sampled up to a genuine strong stationary time (block
    simulation with the exact kernel).  Beyond that ``T_mix`` is replaced
    by ``m* G`` with ``G`` geometric and independent of the path and
    ``m* = MIX_TIMES_GAP / lambda``, ``lambda`` the estimated gap; the
    result is flagged ``surrogate`` and the same draws with doubled horizon
    give ``R_N_doubled``.
    """
    deep = env.deep
    if len(deep) == 0:
        raise ValueError("the deep set is empty")
    alpha = env.params.alpha
    e_nu, exact, ratio_se = _hitting_means(env, n_exact, seed)
    ell_a = np.empty(len(deep))
    ell_se = np.empty(len(deep))
    doubled = None
    if env.N <= sst_max_n:
        gen = build_generator(env)
        m_star, eig = mixing_scale(env, gen)
        P = kernel_spectral(gen, env.nu, m_star, eig)
        for k, x in enumerate(deep):
            ell, _, _ = sst_local_time(env, P, m_star, int(x), n_samples, seed, offset=k * n_samples)
            v = ell**alpha
            ell_a[k], ell_se[k] = v.mean(), v.std(ddof=1) / math.sqrt(n_samples)
        method, surrogate = "strong-stationary-time", False
    else:
        lam = gap_estimate(env)
        m_star = MIX_TIMES_GAP / lam
        ell_d = np.empty(len(deep))
        for k, x in enumerate(deep):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13, k]))
            T = m_star * _geometric_blocks(rng, n_samples)
            ell, _ = watched_local_time(env, int(x), T, int(x), seed, offset=k * n_samples)
            ell2, _ = watched_local_time(env, int(x), 2 * T, int(x), seed, offset=k * n_samples)
            v = ell**alpha
            ell_a[k], ell_se[k] = v.mean(), v.std(ddof=1) / math.sqrt(n_samples)
            ell_d[k] = np.mean(ell2**alpha)
        doubled = _assemble_RN(env, ell_d, e_nu)
        method, surrogate = "geometric-horizon", True
    R = _assemble_RN(env, ell_a, e_nu)
    return RNEstimate(R, math.log(R) / env.N, method, surrogate, deep.copy(), e_nu, exact, ell_a,
                      ell_se, float(m_star), doubled, ratio_se)


def _assemble_RN(env, ell_alpha, e_nu):
    s = env.scales
    return float(2.0 ** ((s.gamma - s.gamma_prime) * env.N) / math.fsum(ell_alpha / e_nu))


# ---------------------------------------------------------------------------
# local-time functional and deep visits

@dataclass
class AgingConfig:
    t_grid: list
    lambda_grid: list
    n_traj: int = 1000
    n_env: int = 1
    n_resample: int = 200
    horizon: float = 1.0

    def __post_init__(self):
        if not self.t_grid or not self.lambda_grid:
            raise ValueError("grids must be nonempty")
        if min(self.t_grid) <= 0 or min(self.lambda_grid) < 0:
            raise ValueError("grids must be positive")
        if self.n_traj < 1:
            raise ValueError("n_traj must be positive")


@dataclass
class LNReport:
    t: np.ndarray
    samples: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    R_N: float


def local_time_functional(env, R_N, t, batch):
    """``L_N(t) = eps_N sum_{x deep} ell_{t R_N}(x)^alpha`` per trajectory.

    ``batch`` is a ``ClockBatch`` whose checkpoints are ``t R_N``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ck = batch.checkpoints
    if not np.allclose(ck, t * R_N, rtol=1e-12):
        raise ValueError("batch checkpoints must equal t * R_N")
    L = env.scales.eps_N * np.sum(batch.ell**env.params.alpha, axis=2)
    return LNReport(t, L, L.mean(axis=0), L.var(axis=0, ddof=1) if len(L) > 1 else np.zeros(len(t)),
                    float(R_N))


def deep_visit_counter(env, x, horizon, n, seed, max_jumps=10**8):
    """Number of distinct other deep traps visited by ``horizon``, from ``x``."""
    deep_m = env.deep_mask
    if not deep_m[x]:
        raise ValueError("x must be a deep trap")
    W = np.empty(n, dtype=np.int64)
    for i in range(n):
        tr = simulate(env, RateModel.FAST_Y, int(x), horizon, seed, traj_id=i, max_jumps=max_jumps)
        s = np.unique(tr.states[deep_m[tr.states]])
        W[i] = int(np.sum(s != x))
    return W


# ---------------------------------------------------------------------------
# Laplace transforms

@dataclass
class LaplaceReport:
    t: np.ndarray
    lam: np.ndarray
    empirical: np.ndarray
    se: np.ndarray
    theory: np.ndarray
    K: float
    R_N: float
    g_N: float
    n: int
    env_seed: int = 0

    def rows(self):
        for i, t in enumerate(self.t):
            for j, lam in enumerate(self.lam):
                yield {"n": self.n, "env_seed": self.env_seed, "t": float(t), "lambda": float(lam),
                       "empirical": float(self.empirical[i, j]), "se": float(self.se[i, j]),
                       "theory": float(self.theory[i, j]), "K": self.K, "R_N": self.R_N,
                       "g_N": self.g_N}

    def to_json(self):
        return json.dumps({"schema": SCHEMA_VERSION, "rows": list(self.rows())}, indent=2)


CSV_COLUMNS = ("n", "env_seed", "t", "lambda", "empirical", "se", "theory", "K", "R_N", "g_N")


def _laplace_table(values, lam_grid):
    """Mean and standard error of ``exp(-lam v)`` over rows of ``values``."""
    n = values.shape[0]
    out = np.exp(-values[:, :, None] * np.asarray(lam_grid)[None, None, :])
    se = out.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(out.shape[1:], np.inf)
    return out.mean(axis=0), se


def empirical_laplace(env, R_N, batch, t_grid, lambda_grid, deep_only=True, max_se=None):
    """``E[exp(-lam S_D(t R_N) / g_N)]`` against ``exp(-K lam^alpha t)``.

    Trajectories are independent, so the standard error is the sample
    standard deviation over ``sqrt(n)``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    lam = np.asarray(lambda_grid, dtype=float)
    if not np.allclose(batch.checkpoints, t_grid * R_N, rtol=1e-12):
        raise ValueError("batch checkpoints must equal t * R_N")
    g = env.scales.g_N
    S = (batch.SD if deep_only else batch.S) / g
    emp, se = _laplace_table(S, lam)
    K = float(gamma_fn(1 - env.params.alpha))
    theory = np.exp(-K * lam[None, :] ** env.params.alpha * t_grid[:, None])
    if max_se is not None and np.max(se) > max_se:
        raise ConvergenceError(f"standard error {np.max(se):.3g} above the requested {max_se}")
    return LaplaceReport(t_grid, lam, emp, se, theory, K, float(R_N), float(g), env.N,
                         int(env.params.env_seed))


@dataclass
class QuasiAnnealedReport:
    lam: float
    t: float
    conditional_mean: np.ndarray
    conditional_se: np.ndarray
    product_theta: np.ndarray
    z_scores: np.ndarray
    quasi_annealed: float
    quasi_annealed_se: float
    stable_prediction: float
    mean_L: float
    n_resample: int


def quasi_annealed_laplace(ts, R_N, t, lam, n_traj, n_resample, seed, batch=None):
    """Average ``exp(-lam S_D(t R_N) / g_N)`` over fresh deep energies.

    On the separation event the fast chain's law does not depend on the
    deep energies, so one batch of trajectories serves every redraw.  For
    each trajectory the redraw average is compared with
    ``prod_x (1 - theta(ell_x))``.
    """
    env = ts.env
    sep = check_separation(env)
    if not sep.separated:
        raise SeparationError(f"deep traps at distance {sep.min_distance}; separation required")
    s = env.scales
    if batch is None:
        batch = simulate_clocks(env, [t * R_N], n_traj, seed)
    ell = batch.ell[:, 0, :]
    c = s.energy_scale
    vals = np.empty((ell.shape[0], n_resample))
    log_g = s.log_g
    for r in range(n_resample):
        Eb = resample_deep_energies(ts, r).E_bar
        # sum_x ell_x tau_x / g_N, evaluated in log space for safety
        w = np.exp(c * Eb - log_g)
        vals[:, r] = np.exp(-lam * (ell @ w))
    m = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / math.sqrt(n_resample)
    prod = np.ones(ell.shape[0])
    cache = {}
    for i in range(ell.shape[0]):
        for u in ell[i][ell[i] > 0]:
            key = float(u)
            if key not in cache:
                cache[key] = theta_function(key, lam, s)[0]
            prod[i] *= 1.0 - cache[key]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (m - prod) / se, np.where(np.abs(m - prod) < 1e-15, 0.0, np.inf))
    K = float(gamma_fn(1 - env.params.alpha))
    L = s.eps_N * np.sum(ell**env.params.alpha, axis=1)
    qa = float(m.mean())
    qa_se = float(m.std(ddof=1) / math.sqrt(len(m))) if len(m) > 1 else math.inf
    pred = float(math.exp(-K * lam**env.params.alpha * L.mean()))
    return QuasiAnnealedReport(lam, t, m, se, prod, z, qa, qa_se, pred, float(L.mean()), n_resample)


def y_law_invariance(ts, seeds):
    """Whether every fast-chain rate is bitwise unchanged under deep redraws."""
    from .chain import exit_rates

    base = exit_rates(ts.env, RateModel.FAST_Y)
    for sd in seeds:
        if not np.array_equal(base, exit_rates(resample_deep_energies(ts, sd).env, RateModel.FAST_Y)):
            return False
    return True


# ---------------------------------------------------------------------------
# shallow traps

@dataclass
class ShallowReport:
    remainder: np.ndarray
    median: float
    mean: float
    slice_means: np.ndarray
    very_shallow_bound: float
    very_shallow_ok: bool
    nonnegative: bool


def shallow_contribution(env, R_N, batch, t=1.0, k=0):
    """``(S(t R_N) - S_D(t R_N)) / g_N`` and its split over shallow slices.

    ``slice_means[0]`` is the very shallow set; its mean is compared with
    ``(t R_N / g_N) h_N 2^N / Z_N``.
    """
    g = env.scales.g_N
    rem = (batch.S[:, k] - batch.SD[:, k]) / g
    sl = batch.slices[:, k, :] / g
    bound = t * R_N / g * env.scales.h_N * env.size / env.Z
    return ShallowReport(rem, float(np.median(rem)), float(rem.mean()), sl.mean(axis=0), float(bound),
                         bool(sl[:, 0].mean() <= bound), bool(np.all(rem >= -1e-12 * np.abs(batch.S[:, k] / g))))


# ---------------------------------------------------------------------------
# stable reference process and increments

def _positive_stable(alpha, rng, n):
    """Kanter's representation: Laplace transform ``exp(-lam^alpha)``."""
    U = rng.uniform(0.0, math.pi, n)
    W = rng.exponential(1.0, n)
    return np.sin(alpha * U) / np.sin(U) ** (1 / alpha) * (
        np.sin((1 - alpha) * U) / W) ** ((1 - alpha) / alpha)


def simulate_stable_subordinator(alpha, K, t_grid, seed, n):
    """Paths of ``V`` with ``E exp(-lam V(t)) = exp(-K lam^alpha t)`` on ``t_grid``.

    Returns an ``(n, len(t_grid))`` array.
    """
    if not 0 < alpha < 1 or K <= 0:
        raise ValueError("need alpha in (0, 1) and K > 0")
    t = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t) < 0) or t[0] < 0:
        raise ValueError("t_grid must be nonnegative and sorted")
    dt = np.diff(np.concatenate(([0.0], t)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    inc = np.empty((n, len(t)))
    for j, d in enumerate(dt):
        inc[:, j] = (K * d) ** (1 / alpha) * _positive_stable(alpha, rng, n) if d > 0 else 0.0
    return np.cumsum(inc, axis=1)


@dataclass
class IncrementsReport:
    lam: np.ndarray
    increment_laplace: np.ndarray
    increment_se: np.ndarray
    joint: float
    joint_se: float
    product: float
    product_se: float
    gap_in_se: float
    ks_pvalue: float | None


def increments_check(S, lam):
    """Joint-versus-product Laplace transforms of increments of ``S`` (rows are samples).

    ``S[:, j]`` is the rescaled clock at the j-th grid time; increments are
    taken against 0 for the first column.  ``lam`` holds one weight per
    increment.  The KS p-value compares the first two increments.
    """
    S = np.asarray(S, dtype=float)
    inc = np.diff(np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1), axis=1)
    lam = np.asarray(lam, dtype=float)
    if inc.shape[1] != len(lam):
        raise ValueError("one lambda per increment")
    n = inc.shape[0]
    e = np.exp(-inc * lam[None, :])
    m = e.mean(axis=0)
    se = e.std(axis=0, ddof=1) / math.sqrt(n)
    jv = np.exp(-(inc * lam[None, :]).sum(axis=1))
    joint, joint_se = float(jv.mean()), float(jv.std(ddof=1) / math.sqrt(n))
    prod = float(np.prod(m))
    prod_se = float(prod * math.sqrt(np.sum((se / m) ** 2)))
    gap = abs(joint - prod) / math.hypot(joint_se, prod_se) if joint_se + prod_se > 0 else 0.0
    ks = float(stats.ks_2samp(inc[:, 0], inc[:, 1]).pvalue) if inc.shape[1] >= 2 else None
    return IncrementsReport(lam, m, se, joint, joint_se, prod, prod_se, float(gap), ks)


# ---------------------------------------------------------------------------
# exponential approximation of hitting times

@dataclass
class ExponentialityReport:
    x: int
    e_nu: float
    gap: float
    t_grid: np.ndarray
    survival: np.ndarray
    deviation: float
    bound: float
    holds: bool


def hitting_exponentiality(env, x, n_grid=50, gap=None):
    """``sup_t |P_nu[H_x > t] - exp(-t / E_nu[H_x])|`` against ``1 / (lambda_Y E_nu[H_x])``.

    The survival function comes from the spectral decomposition of the
    generator killed at ``x``:
    ``P_nu[H_x > t] = sum_k <sqrt(nu), v_k>^2 exp(-mu_k t)``.  The grid
    starts at 0, where the deviation equals ``nu_x``.
    """
    from .spectral import exact_gap, symmetrized
    import scipy.linalg as sla

    if env.N > DENSE_MAX_N:
        raise ValueError("exact survival needs a dense eigensolve")
    S = symmetrized(env, killed=x)
    mu, V = sla.eigh(S)
    keep = np.ones(env.size, dtype=bool)
    keep[x] = False
    w = (np.sqrt(env.nu[keep]) @ V) ** 2
    E = float(math.fsum(w / mu))
    lam = exact_gap(build_generator(env), env.nu) if gap is None else gap
    t = np.linspace(0.0, 5.0 * E, n_grid)
    surv = np.exp(-np.outer(t, mu)) @ w
    dev = float(np.max(np.abs(surv - np.exp(-t / E))))
    bound = 1.0 / (lam * E)
    return ExponentialityReport(int(x), E, float(lam), t, surv, dev, bound, dev <= bound)
