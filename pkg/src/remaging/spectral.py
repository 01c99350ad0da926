"""Generator, spectral gap, canonical-path bound and strong stationary times.

All eigen-solves act on the symmetrised generator
``S = D^{1/2} (-Q) D^{-1/2}`` with ``D = diag(nu)``, whose off-diagonal
entries are ``-c_xy / sqrt(nu_x nu_y)``.  Transition kernels come from
uniformisation: ``e^{sQ} = sum_j Poisson(lam s; j) K^j`` with
``K = I + Q / lam`` on a short step ``s``, followed by repeated squaring.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import lobpcg

from .exceptions import BudgetExceeded, ConvergenceError
from .hypercube import edge_congestion

__all__ = [
    "build_generator",
    "symmetrized",
    "exact_gap",
    "spectrum",
    "gap_estimate",
    "poincare_bound",
    "transition_kernel",
    "kernel_spectral",
    "minorization_ratio",
    "mixing_scale",
    "MixSample",
    "sample_strong_stationary_time",
    "mix_defect",
    "SpectralReport",
    "spectral_report",
]

SPARSE_MAX_N = 20
DENSE_MAX_N = 12
MINORIZATION = 1.0 - math.exp(-1.0)


def build_generator(env, max_n=SPARSE_MAX_N):
    """Sparse generator of the fast chain, rows summing to zero."""
    if env.N > max_n:
        raise BudgetExceeded(f"N={env.N} exceeds the sparse budget N <= {max_n}")
    n, N = env.size, env.N
    lt = env.log_tau
    x = np.arange(n)
    nb = x[:, None] ^ (1 << np.arange(N))[None, :]
    q = np.exp(np.minimum(lt[:, None], lt[nb]) - np.minimum(lt, 0.0)[:, None])
    diag = -q.sum(axis=1)
    rows = np.concatenate([x, np.repeat(x, N)])
    cols = np.concatenate([x, nb.ravel()])
    vals = np.concatenate([diag, q.ravel()])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def symmetrized(env, killed=None, dense=True):
    """``D^{1/2}(-Q)D^{-1/2}``, optionally with row and column ``killed`` removed.

    Built from the conductances so the off-diagonal part is exactly symmetric.
    """
    n, N = env.size, env.N
    lt = env.log_tau
    x = np.arange(n)
    nb = x[:, None] ^ (1 << np.arange(N))[None, :]
    c = np.exp(np.minimum(lt[:, None], lt[nb])) / env.Z
    q_tot = c.sum(axis=1) / env.nu
    rs = np.sqrt(env.nu)
    off = -c / (rs[:, None] * rs[nb])
    if dense:
        S = np.zeros((n, n))
        S[np.repeat(x, N), nb.ravel()] = off.ravel()
        S[x, x] = q_tot
        S = 0.5 * (S + S.T)
    else:
        S = sp.csr_matrix(
            (np.concatenate([q_tot, off.ravel()]),
             (np.concatenate([x, np.repeat(x, N)]), np.concatenate([x, nb.ravel()]))),
            shape=(n, n))
    if killed is not None:
        keep = np.ones(n, dtype=bool)
        keep[np.atleast_1d(killed)] = False
        S = S[keep][:, keep]
    return S


def _dense_symmetric_from_gen(gen, nu):
    Q = gen.toarray() if sp.issparse(gen) else np.asarray(gen, dtype=float)
    rs = np.sqrt(np.asarray(nu))
    S = -(rs[:, None] * Q) / rs[None, :]
    return 0.5 * (S + S.T)


def spectrum(gen, nu, max_n=DENSE_MAX_N):
    """Ascending eigenvalues and orthonormal eigenvectors of the symmetrised -Q."""
    n = gen.shape[0]
    if n > (1 << max_n):
        raise BudgetExceeded(f"dense eigensolve limited to N <= {max_n}")
    S = _dense_symmetric_from_gen(gen, nu)
    try:
        w, V = sla.eigh(S)
    except sla.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ConvergenceError(str(exc)) from exc
    return w, V


def exact_gap(gen, nu, max_n=DENSE_MAX_N, return_zero=False):
    """Smallest nonzero eigenvalue of -Q by a dense symmetric eigensolve.

    The bottom eigenvector is known to be ``sqrt(nu)``; it is deflated away
    so the returned gap does not inherit the round-off of the zero mode.
    With ``return_zero`` the undeflated bottom eigenvalue is returned too.
    """
    n = gen.shape[0]
    if n == 1:
        raise ValueError("a single state has no gap")
    if n > (1 << max_n):
        raise BudgetExceeded(f"dense eigensolve limited to N <= {max_n}")
    S = _dense_symmetric_from_gen(gen, nu)
    w0 = sla.eigh(S, eigvals_only=True, subset_by_index=[0, 1])
    u = np.sqrt(np.asarray(nu))
    # rank-one shift of the zero mode above the spectrum
    shift = np.abs(S).sum(axis=1).max() + 1.0
    gap = sla.eigh(S + shift * np.outer(u, u), eigvals_only=True, subset_by_index=[0, 0])[0]
    gap = min(gap, w0[1]) if w0[1] > 0 else gap
    if return_zero:
        return float(gap), float(w0[0])
    return float(gap)


def gap_estimate(env, tol=1e-8, maxiter=2000, seed=0):
    """Iterative estimate of the gap for larger N (flagged as an estimate).

    LOBPCG on the sparse symmetrised generator, constrained orthogonal to
    ``sqrt(nu)`` and preconditioned by its diagonal.
    """
    S = symmetrized(env, dense=False)
    u = np.sqrt(env.nu)[:, None]
    d = S.diagonal()
    M = sp.diags(1.0 / d)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((env.size, 1))
    X -= u @ (u.T @ X)
    w, _ = lobpcg(S, X, M=M, Y=u, tol=tol, maxiter=maxiter, largest=False)
    return float(w[0])


def poincare_bound(env, congestion=None, pair_budget=2**28):
    """Canonical-path lower bound ``1 / max_e (1/c_e) sum_{gamma ∋ e} |gamma| nu_x nu_y``."""
    if congestion is None:
        congestion = edge_congestion(env.nu, env.good_mask(), env.N, pair_budget)
    c = env.conductances()
    x = np.arange(env.size)[:, None]
    lower = (x & (1 << np.arange(env.N))[None, :]) == 0
    ratio = np.where(lower, congestion / c, 0.0)
    return float(1.0 / ratio.max())


# ---------------------------------------------------------------------------
# kernels

def _poisson_weights(a, tol):
    """Poisson(a) weights truncated once the remaining mass is below ``tol``."""
    w = [math.exp(-a)]
    acc = w[0]
    j = 0
    while True:
        j += 1
        w.append(w[-1] * a / j)
        acc += w[-1]
        # geometric bound on the remaining tail for j + 1 > a
        nxt = w[-1] * a / (j + 1)
        if j + 1 > 2 * a and nxt / (1 - a / (j + 2)) < tol:
            break
        if j > 10_000:  # pragma: no cover
            raise ConvergenceError("Poisson series did not converge")
    return np.array(w)


def transition_kernel(gen, t, tol=1e-14, max_n=DENSE_MAX_N, step=1.0):
    """Dense ``e^{tQ}`` by uniformisation on a step ``s`` with ``lam s <= step``, then squaring.

    The Poisson series is cut once its remaining mass is below ``tol``.
    """
    n = gen.shape[0]
    if n > (1 << max_n):
        raise BudgetExceeded(f"kernel limited to N <= {max_n}")
    if t < 0:
        raise ValueError("t must be >= 0")
    Q = gen.toarray() if sp.issparse(gen) else np.array(gen, dtype=float)
    if t == 0:
        return np.eye(n)
    lam = float(np.max(-np.diag(Q)))
    k = max(0, math.ceil(math.log2(lam * t / step))) if lam * t > step else 0
    s = t / 2.0**k
    K = np.eye(n) + Q / lam
    w = _poisson_weights(lam * s, tol)
    P = w[0] * np.eye(n)
    term = np.eye(n)
    for wj in w[1:]:
        term = term @ K
        P += wj * term
    for _ in range(k):
        P = P @ P
        # the exact kernel is stochastic; removing row-sum drift keeps the
        # round-off of repeated squaring from compounding
        P /= P.sum(axis=1, keepdims=True)
    return P


def kernel_spectral(gen, nu, t, eig=None):
    """``e^{tQ}`` from the eigendecomposition of the symmetrised generator (cross-check)."""
    w, V = spectrum(gen, nu) if eig is None else eig
    rs = np.sqrt(np.asarray(nu))
    A = V * np.exp(-np.maximum(w, 0.0) * t)[None, :]
    return (A @ V.T) * (rs[None, :] / rs[:, None])


def minorization_ratio(P, nu):
    """``min_{x,y} P[x, y] / nu_y``."""
    return float(np.min(P / np.asarray(nu)[None, :]))


def mix_defect(kernel, nu):
    """``max_{x,y} |P[x, y] - nu_y|``."""
    return float(np.max(np.abs(kernel - np.asarray(nu)[None, :])))


def mixing_scale(env, gen=None, rel_tol=1e-3, eig=None):
    """Smallest block length ``m*`` with ``P_{m*}(x, y) >= (1 - e^{-1}) nu_y`` for all x, y.

    The search runs on the spectral representation (doubling, then
    bisection to relative precision ``rel_tol``).  Returns ``(m_star, eig)``.
    """
    gen = build_generator(env) if gen is None else gen
    eig = spectrum(gen, env.nu) if eig is None else eig

    def ok(t):
        return minorization_ratio(kernel_spectral(gen, env.nu, t, eig), env.nu) >= MINORIZATION

    gap = eig[0][1]
    hi = 1.0 / gap
    while not ok(hi):
        hi *= 2
    lo = hi / 2
    while lo > 1e-12 and ok(lo):
        hi, lo = lo, lo / 2
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi, eig


def spectral_mixing_scale(gap, nu_min):
    """Block length implied by a gap: ``4 (1 + log(1/nu_min)/2) / gap``."""
    return 4.0 * (1.0 + 0.5 * math.log(1.0 / nu_min)) / gap


@dataclass
class MixSample:
    T_mix: np.ndarray
    end_state: np.ndarray
    blocks: np.ndarray
    m_star: float


def sample_strong_stationary_time(nu, kernel, m_star, start, seed, n=1, max_blocks=500, chunk=4096):
    """Draw ``n`` strong stationary times on the ``m_star`` grid.

    Each block moves by ``kernel`` from ``z`` to ``y`` and stops with
    probability ``(1 - e^{-1}) nu_y / kernel[z, y]``.
    """
    nu = np.asarray(nu)
    with np.errstate(divide="ignore"):
        A = MINORIZATION * nu[None, :] / kernel
    if np.any(A > 1 + 1e-12) or np.any(~np.isfinite(A)):
        raise ValueError("kernel violates the minorization P >= (1 - e^-1) nu; increase m_star")
    A = np.minimum(A, 1.0)
    cum = np.cumsum(kernel, axis=1)
    cum /= cum[:, -1:]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    if isinstance(start, str):
        state = np.searchsorted(np.cumsum(nu), rng.random(n) * nu.sum(), side="right")
        state = np.minimum(state, len(nu) - 1)
    else:
        state = np.full(n, int(start), dtype=np.int64)
    blocks = np.zeros(n, dtype=np.int64)
    end = np.full(n, -1, dtype=np.int64)
    active = np.arange(n)
    for k in range(1, max_blocks + 1):
        if active.size == 0:
            break
        u = rng.random(active.size)
        y = np.empty(active.size, dtype=np.int64)
        for a in range(0, active.size, chunk):
            rows = cum[state[active[a:a + chunk]]]
            y[a:a + chunk] = np.minimum((rows <= u[a:a + chunk, None]).sum(axis=1), len(nu) - 1)
        acc = rng.random(active.size) <= A[state[active], y]
        done = active[acc]
        blocks[done] = k
        end[done] = y[acc]
        state[active] = y
        active = active[~acc]
    if active.size:
        raise BudgetExceeded(f"{active.size} samples exceeded {max_blocks} blocks")
    return MixSample(blocks * m_star, end, blocks, float(m_star))


@dataclass
class SpectralReport:
    n: int
    beta: float
    alpha: float
    env_seed: int
    poincare_lower: float | None
    m_N: float
    m_star: float | None
    lambda_exact: float | None = None
    lambda_power_estimate: float | None = None
    bound_le_gap: bool | None = None
    mix_defect: float | None = None

    def to_json(self):
        d = {k: v for k, v in asdict(self).items() if v is not None or k in ("poincare_lower",)}
        return json.dumps(d, indent=2, sort_keys=True)


def spectral_report(env, pair_budget=2**28, estimate=True):
    """Gap (exact when affordable), canonical-path bound, block length and its mix defect."""
    p = env.params
    gen = build_generator(env)
    lam = est = m_star = defect = None
    if env.N <= DENSE_MAX_N:
        m_star, eig = mixing_scale(env, gen)
        lam = float(eig[0][1])
        defect = mix_defect(kernel_spectral(gen, env.nu, m_star, eig), env.nu)
    elif estimate:
        est = gap_estimate(env)
        m_star = spectral_mixing_scale(est, float(env.nu.min()))
    try:
        bound = poincare_bound(env, pair_budget=pair_budget)
    except BudgetExceeded:
        bound = None
    ok = None if (bound is None or lam is None) else bool(bound <= lam * (1 + 1e-10))
    return SpectralReport(env.N, p.beta, p.alpha, int(p.env_seed), bound, env.scales.m_N,
                          m_star, lam, est, ok, defect)
