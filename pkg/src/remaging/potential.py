"""Electrical-network quantities of the fast chain.

The chain is reversible with conductances ``c_xy = (tau_x ^ tau_y) / Z_N``,
so hitting problems reduce to symmetric positive-definite systems in the
graph Laplacian ``L`` (``L_xx = c_x``, ``L_xy = -c_xy``):

* equilibrium potential: ``L g = 0`` off ``{x} ∪ B``, ``g = 1`` at x, 0 on B;
* mean hitting times: ``(L h)(y) = nu_y`` for ``y != x`` and ``h(x) = 0``,
  which is the generator equation ``Q h = -1`` multiplied by ``nu``.

Small systems are solved densely after a symmetric diagonal rescaling;
larger ones by conjugate gradients with an algebraic multigrid
preconditioner.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import ConvergenceError
from .hypercube import enumerate_ball, enumerate_sphere

__all__ = [
    "laplacian",
    "dirichlet_form",
    "PotentialField",
    "equilibrium_potential",
    "effective_conductance",
    "HittingSolution",
    "mean_hitting_exact",
    "mean_hitting_times",
    "ExtremalReport",
    "extremal_check",
    "AppendixBoundReport",
    "bound_check_appendix",
    "good_sphere_radius",
    "DeepTrapReport",
    "deep_trap_conductance_bound",
    "local_capacity",
    "trap_ball",
    "exit_local_times",
    "sphere_radius_probability",
    "PotentialReport",
]

DENSE_MAX = 1 << 10
SOLVE_RTOL = 1e-12


def _cond(env, cond):
    return env.conductances() if cond is None else np.asarray(cond, dtype=float)


def laplacian(env, cond=None):
    """Sparse weighted Laplacian of the conductance network."""
    c = _cond(env, cond)
    n, N = c.shape
    x = np.arange(n)
    nb = x[:, None] ^ (1 << np.arange(N))[None, :]
    return sp.csr_matrix(
        (np.concatenate([c.sum(axis=1), -c.ravel()]),
         (np.concatenate([x, np.repeat(x, N)]), np.concatenate([x, nb.ravel()]))),
        shape=(n, n))


def dirichlet_form(g, env, cond=None):
    """``sum over edges c_zy (g(z) - g(y))^2``."""
    c = _cond(env, cond)
    g = np.asarray(g, dtype=float)
    n, N = c.shape
    x = np.arange(n)
    nb = x[:, None] ^ (1 << np.arange(N))[None, :]
    lower = (x[:, None] & (1 << np.arange(N))[None, :]) == 0
    diff = g[:, None] - g[nb]
    return float(math.fsum((c * diff * diff)[lower]))


DIRECT_MAX = 1 << 16


def _amg(A, smooth="jacobi", B=None):
    import pyamg

    return pyamg.smoothed_aggregation_solver(
        A, symmetry="symmetric", strength=("symmetric", {"theta": 0.25}), smooth=smooth, B=B)


def _amg_solve(ml, b, rtol, maxiter):
    res = []
    u = ml.solve(b, tol=rtol, accel="cg", maxiter=maxiter, residuals=res)
    return u, (res[-1] / max(res[0], 1e-300) if res else 0.0)


def _spd_solve(A, b, rtol=SOLVE_RTOL, maxiter=2000, ml=None):
    """Solve the SPD system ``A u = b``; returns ``u``.

    Dense Cholesky up to ``DENSE_MAX`` unknowns.  Above that, smoothed
    aggregation CG; grounded Laplacians with very uneven conductances can
    defeat a given hierarchy, so an unsmoothed hierarchy and then a sparse
    direct solve (up to ``DIRECT_MAX`` unknowns) are tried before giving up.
    """
    n = A.shape[0]
    if n <= DENSE_MAX:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
        s = 1.0 / np.sqrt(np.diag(Ad))
        As = Ad * s[:, None] * s[None, :]
        u = sla.solve(As, b * s, assume_a="pos") * s
        # one step of iterative refinement
        r = b - Ad @ u
        u += sla.solve(As, r * s, assume_a="pos") * s
        return u
    A = sp.csr_matrix(A)
    tol_ok = 1e3 * rtol
    hierarchies = [ml] if ml is not None else [_amg(A), _amg(A, smooth=None)]
    rel = math.inf
    for h in hierarchies:
        u, rel = _amg_solve(h, b, rtol, maxiter)
        if rel <= tol_ok:
            return u
    if n <= DIRECT_MAX:
        from scipy.sparse.linalg import spsolve

        return spsolve(A.tocsc(), b)
    raise ConvergenceError(f"linear solve stalled at relative residual {rel:.2e}")


@dataclass
class PotentialField:
    values: np.ndarray
    x: int
    B: np.ndarray
    residual: float


def _as_set(B, n):
    m = np.zeros(n, dtype=bool)
    B = np.asarray(B)
    if B.dtype == bool:
        m[:] = B
    else:
        m[B.astype(np.int64)] = True
    return m


def equilibrium_potential(env, x, B, cond=None):
    """Harmonic function equal to 1 at ``x`` and 0 on ``B``.

    ``residual`` is the largest harmonicity defect ``|(L g)(y)| / c_y`` off
    ``{x} ∪ B``.
    """
    L = laplacian(env, cond)
    n = L.shape[0]
    Bm = _as_set(B, n)
    if Bm[x]:
        raise ValueError("x must not belong to B")
    if not Bm.any():
        raise ValueError("B must be nonempty")
    free = ~Bm
    free[x] = False
    g = np.zeros(n)
    g[x] = 1.0
    idx = np.flatnonzero(free)
    if idx.size:
        A = L[idx][:, idx]
        rhs = -np.asarray(L[idx][:, [x]].todense()).ravel()
        g[idx] = _spd_solve(A, rhs)
    Lg = L @ g
    d = L.diagonal()
    res = float(np.max(np.abs(Lg[idx]) / d[idx])) if idx.size else 0.0
    return PotentialField(g, int(x), np.flatnonzero(Bm), res)


def effective_conductance(env, x, B, cond=None, field=None):
    """Effective conductance from ``x`` to ``B`` by two routes.

    Returns ``(energy, flux, relative_gap)``: the Dirichlet energy of the
    equilibrium potential and ``sum_{y ~ x} c_xy (1 - g(y))``.
    """
    c = _cond(env, cond)
    f = equilibrium_potential(env, x, B, c) if field is None else field
    g = f.values
    e1 = dirichlet_form(g, env, c)
    nb = x ^ (1 << np.arange(c.shape[1]))
    e2 = float(math.fsum(c[x] * (1.0 - g[nb])))
    return e1, e2, abs(e1 - e2) / max(abs(e1), abs(e2), 1e-300)


@dataclass
class HittingSolution:
    """``h[y] = E_y[H_x]`` and ``e_nu = E_nu[H_x]``."""

    h: np.ndarray
    x: int
    e_nu: float
    dirichlet: float
    residual: float


def _singular_hierarchy(L):
    # plain aggregation: at N = 20 prolongation smoothing costs 100x in setup
    # and 3x per solve for fewer than half the iterations
    return _amg(L, smooth=None, B=np.ones((L.shape[0], 1)))


def _fundamental_column(ml, nu, x, rtol):
    """``w`` with ``L w = e_x - nu``; fixed up to an additive constant."""
    rhs = -nu.copy()
    rhs[x] += 1.0
    w, rel = _amg_solve(ml, rhs, rtol, 2000)
    if rel > 1e3 * rtol:
        raise ConvergenceError(f"hitting-time solve stalled at {rel:.2e}")
    return w


def mean_hitting_exact(env, x, cond=None, nu=None):
    """Solve ``(-Q h)(y) = 1`` for ``y != x`` with ``h(x) = 0``.

    Above ``DENSE_MAX`` states the grounded system is avoided: with
    ``L w = e_x - nu`` on the full (singular) Laplacian, ``h = w_x - w``.
    """
    L = laplacian(env, cond)
    nu = env.nu if nu is None else np.asarray(nu)
    n = L.shape[0]
    keep = np.ones(n, dtype=bool)
    keep[x] = False
    if n <= DENSE_MAX:
        h = np.zeros(n)
        h[keep] = _spd_solve(L[keep][:, keep], nu[keep])
    else:
        w = _fundamental_column(_singular_hierarchy(L), nu, x, SOLVE_RTOL)
        h = w[x] - w
        h[x] = 0.0
    e_nu = float(math.fsum(nu * h))
    r = (L @ h)[keep] - nu[keep]
    res = float(np.max(np.abs(r) / nu[keep]))
    return HittingSolution(h, int(x), e_nu, dirichlet_form(h, env, cond), res)


def mean_hitting_times(env, xs, rtol=1e-10):
    """``E_nu[H_x]`` for several targets from one multigrid hierarchy.

    Uses the fundamental-matrix identity: if ``L w = e_x - nu`` then
    ``E_nu[H_x] = w_x - nu . w``.  For small N the grounded solve is used.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.int64))
    if env.size <= DENSE_MAX:
        return np.array([mean_hitting_exact(env, int(x)).e_nu for x in xs])
    ml = _singular_hierarchy(laplacian(env))
    out = np.empty(len(xs))
    for k, x in enumerate(xs):
        w = _fundamental_column(ml, env.nu, int(x), rtol)
        out[k] = w[x] - float(env.nu @ w)
    return out


# ---------------------------------------------------------------------------
# extremal characterisation and the appendix bound

@dataclass
class ExtremalReport:
    x: int
    e_nu: float
    minimizer_energy: float
    extremal_residual: float
    n_random: int
    n_violations: int
    min_random_ratio: float
    second_order_ok: bool


def _project_admissible(g, x, nu):
    """Affine projection onto ``{g(x) = 1, sum nu g = 0}``."""
    # g + a e_x + b nu
    A = np.array([[1.0, nu[x]], [nu[x], float(nu @ nu)]])
    rhs = np.array([1.0 - g[x], -float(nu @ g)])
    a, b = np.linalg.solve(A, rhs)
    out = g + b * nu
    out[x] += a
    return out


def extremal_check(env, x, random_g_count=100, seed=0, sol=None, eps=1e-3):
    """Check ``1 / E_nu[H_x] = inf {D(g): g(x) = 1, nu(g) = 0}``.

    The minimiser is ``g = 1 - h / E_nu[H_x]``, i.e. ``Z_yx / Z_xx`` with
    ``Z_xx = nu_x E_nu[H_x]`` and ``Z_xx - Z_yx = nu_x E_y[H_x]``.
    """
    sol = mean_hitting_exact(env, x) if sol is None else sol
    nu = env.nu
    Zxx = nu[x] * sol.e_nu
    Zyx = Zxx - nu[x] * sol.h
    g = Zyx / Zxx
    D = dirichlet_form(g, env)
    resid = abs(D * sol.e_nu - 1.0)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(x)]))
    inf = 1.0 / sol.e_nu
    viol = 0
    ratio = np.inf
    for _ in range(random_g_count):
        gt = _project_admissible(rng.standard_normal(env.size), x, nu)
        Dt = dirichlet_form(gt, env)
        ratio = min(ratio, Dt / inf)
        if Dt < inf * (1 - 1e-12):
            viol += 1
    # second-order: perturb along a tangent direction
    v = _project_admissible(rng.standard_normal(env.size), x, nu) - _project_admissible(
        np.zeros(env.size), x, nu)
    v *= eps / max(np.max(np.abs(v)), 1e-300)
    second = all(dirichlet_form(g + s * v, env) >= D for s in (1.0, -1.0))
    return ExtremalReport(int(x), sol.e_nu, D, resid, random_g_count, viol, float(ratio), second)


@dataclass
class AppendixBoundReport:
    x: int
    B_size: int
    inverse_mean_hitting: float
    conductance_bound: float
    slack: float
    relative_slack: float
    route_gap: float
    gap_bound_holds: bool | None = None
    gap_bound: float | None = None


def bound_check_appendix(env, x, B, sol=None, lambda_Y=None):
    """Evaluate ``1 / E_nu[H_x] <= C(x -> B) nu(B)^{-2}`` exactly.

    With ``lambda_Y`` also checks ``E_nu[H_x] <= (1 - nu_x) / (lambda_Y nu_x)``.
    """
    sol = mean_hitting_exact(env, x) if sol is None else sol
    Bm = _as_set(B, env.size)
    e1, e2, gap = effective_conductance(env, x, Bm)
    nuB = float(math.fsum(env.nu[Bm]))
    lhs = 1.0 / sol.e_nu
    rhs = e1 / nuB**2
    rep = AppendixBoundReport(int(x), int(Bm.sum()), lhs, rhs, rhs - lhs, (rhs - lhs) / rhs, gap)
    if lambda_Y is not None:
        ub = (1 - env.nu[x]) / (lambda_Y * env.nu[x])
        rep.gap_bound = float(ub)
        rep.gap_bound_holds = bool(sol.e_nu <= ub * (1 + 1e-10))
    return rep


# ---------------------------------------------------------------------------
# sphere radii around deep traps

def good_sphere_radius(env, x, delta=None):
    """Smallest ``r <= ceil(N^{3 delta})`` whose sphere has ``tau <= 2^{N^{1-delta}/2}``."""
    N = env.N
    delta = env.params.delta if delta is None else delta
    cap = 0.5 * math.log(2.0) * N ** (1 - delta)
    r_max = min(N, math.ceil(N ** (3 * delta)))
    for r in range(1, r_max + 1):
        if np.all(env.log_tau[enumerate_sphere(x, r, N)] <= cap):
            return r
    return None


def sphere_radius_probability(N, beta, delta):
    """Chance that a fixed vertex has a good sphere, for i.i.d. Gaussian energies."""
    from scipy.special import log_ndtr

    cap = 0.5 * math.log(2.0) * N ** (1 - delta) / (beta * math.sqrt(N))
    lp = float(log_ndtr(cap))
    r_max = min(N, math.ceil(N ** (3 * delta)))
    miss = 1.0
    for r in range(1, r_max + 1):
        miss *= 1.0 - math.exp(math.comb(N, r) * lp)
    return 1.0 - miss


def local_capacity(env, x, ball):
    """Exact ``C(x -> A^c)`` for a vertex set ``A`` (``ball``) containing ``x``.

    Only the subgraph on ``A`` is assembled, so this stays cheap when ``A``
    is a small ball in a large hypercube.
    """
    N = env.N
    ball = np.unique(np.asarray(ball, dtype=np.int64))
    if x not in ball:
        raise ValueError("the set must contain x")
    lt = env.log_tau
    bits = 1 << np.arange(N)
    cx = np.exp(np.minimum(lt[x], lt[x ^ bits])) / env.Z
    free = ball[ball != x]
    if free.size == 0:
        return float(math.fsum(cx))
    pos = {int(v): i for i, v in enumerate(free)}
    nbf = free[:, None] ^ bits[None, :]
    cf = np.exp(np.minimum(lt[free][:, None], lt[nbf])) / env.Z
    j = np.array([[pos.get(int(v), -1) for v in row] for row in nbf], dtype=np.int64)
    m = j >= 0
    n = free.size
    rows = np.concatenate([np.arange(n), np.repeat(np.arange(n), N)[m.ravel()]])
    cols = np.concatenate([np.arange(n), j[m]])
    vals = np.concatenate([cf.sum(axis=1), -cf[m]])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    rhs = np.where(nbf == x, cf, 0.0).sum(axis=1)
    g = _spd_solve(A, rhs)
    gx = np.zeros(N)
    for i, v in enumerate((x ^ bits).tolist()):
        k = pos.get(v)
        if k is not None:
            gx[i] = g[k]
    return float(math.fsum(cx * (1.0 - gx)))


@dataclass
class DeepTrapReport:
    x: int
    radius: int | None
    ball_size: int
    conductance: float
    parallel_bound: float
    bound_holds: bool
    mean_exit_local_time: float


def trap_ball(env, x, delta=None):
    """``(rho_x, A_x)``: the good radius and its closed ball, or ``(None, {x})``."""
    r = good_sphere_radius(env, x, delta)
    if r is None:
        return None, np.array([x], dtype=np.int64)
    return r, enumerate_ball(x, r, env.N)


def deep_trap_conductance_bound(env, x, delta=None):
    """Exact ``C(x -> A^c)`` for the ball ``A`` of radius ``rho_x``, and its shorting bound.

    Without a good radius ``A = {x}``.  The expected local time at ``x``
    before leaving ``A`` is ``nu_x / C(x -> A^c)``, which is
    ``(Z_N C)^{-1}`` when ``tau_x >= 1``.
    """
    r, ball = trap_ball(env, x, delta)
    inside = np.zeros(env.size, dtype=bool)
    inside[ball] = True
    bits = 1 << np.arange(env.N)
    nb = ball[:, None] ^ bits[None, :]
    lt = env.log_tau
    cb = np.exp(np.minimum(lt[ball][:, None], lt[nb])) / env.Z
    bound = float(math.fsum(cb[~inside[nb]]))
    cond = local_capacity(env, x, ball)
    return DeepTrapReport(int(x), r, int(ball.size), cond, bound, bool(cond <= bound * (1 + 1e-12)),
                          float(env.nu[x] / cond))


def exit_local_times(env, x, n, seed, delta=None):
    """Monte Carlo local time at ``x`` before the fast chain leaves ``A_x``."""
    from .chain import RateModel, hit

    _, ball = trap_ball(env, x, delta)
    outside = np.ones(env.size, dtype=bool)
    outside[ball] = False
    out = np.empty(n)
    for i in range(n):
        res = hit(env, RateModel.FAST_Y, int(x), outside, seed, traj_id=i, watch=int(x))
        if res.censored:
            raise ConvergenceError("exit simulation hit its jump cap")
        out[i] = res.watch_local_time
    return out


@dataclass
class PotentialReport:
    x: int
    B_size: int
    conductance: float
    conductance_bound_routes: float
    e_nu_hx: float
    extremal_residual: float
    prop_a1_slack: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)
