"""Random Energy Model landscapes and their deterministic scales.

Energies ``E_x`` are i.i.d. standard Gaussians indexed by hypercube codes and
``tau_x = exp(beta sqrt(N) E_x)`` is kept in the log domain.  All Gaussian
draws go through the inverse normal CDF (``scipy.special.ndtri``) so that a
conditioned draw is the exact restriction of the unconditioned transform.
"""

import csv
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .exceptions import BudgetExceeded, ParameterError

__all__ = [
    "BETA_C",
    "RemParams",
    "Scales",
    "Environment",
    "TwoStepEnvironment",
    "SeparationReport",
    "ShallowSlices",
    "validate_params",
    "sample_environment",
    "sample_two_step",
    "resample_deep_energies",
    "check_separation",
    "shallow_slices",
    "save_environment",
    "load_environment",
    "write_summary_csv",
]

BETA_C = math.sqrt(2.0 * math.log(2.0))
LN2 = math.log(2.0)
_MAGIC = b"REMENV1"
_HEADER = struct.Struct("<IdddQdddId")


@dataclass(frozen=True)
class RemParams:
    """Model parameters.

    ``gamma_prime`` defaults to ``gamma - epsilon0``.  The constants
    ``kappa``, ``C0``, ``delta`` and ``K_ball`` only enter bound checks;
    ``delta_shallow`` sets the very-shallow scale ``h_N``.
    """

    N: int
    beta: float = 1.4
    alpha: float = 0.7
    gamma_prime: float | None = None
    env_seed: int = 0
    kappa: float = 0.25
    C0: float = 6.56
    delta: float = 0.1
    K_ball: int = 9
    delta_shallow: float = 0.05
    max_N: int = 26


@dataclass(frozen=True)
class Scales:
    """Derived scales; the large ones are stored as natural logarithms."""

    N: int
    beta: float
    alpha: float
    beta_c: float
    gamma: float
    gamma_prime: float
    epsilon0: float
    alpha_prime: float
    log_g: float
    log_g_prime: float
    log_h: float
    log_m: float
    deep_threshold: float
    log_p_deep: float
    log_good: float

    @property
    def g_N(self):
        return math.exp(self.log_g)

    @property
    def g_prime_N(self):
        return math.exp(self.log_g_prime)

    @property
    def h_N(self):
        return math.exp(self.log_h)

    @property
    def m_N(self):
        return math.exp(self.log_m)

    @property
    def p_deep(self):
        return math.exp(self.log_p_deep)

    @property
    def energy_scale(self):
        """beta sqrt(N): log tau = energy_scale * E."""
        return self.beta * math.sqrt(self.N)

    @property
    def eps_N(self):
        """Prefactor 2^{(gamma' - gamma) N} of the local-time functional."""
        return 2.0 ** ((self.gamma_prime - self.gamma) * self.N)


def _log_g(alpha, beta, N):
    return alpha * beta**2 * N - math.log(alpha * beta * math.sqrt(2 * math.pi * N)) / alpha


def validate_params(p):
    """Check parameter constraints and return the derived :class:`Scales`."""
    if not isinstance(p.N, (int, np.integer)) or p.N < 1:
        raise ParameterError("N_positive", f"N must be a positive integer, got {p.N!r}")
    if p.N > p.max_N:
        raise BudgetExceeded(f"N={p.N} exceeds the memory cap max_N={p.max_N}")
    if not p.beta > 0:
        raise ParameterError("beta_positive", f"beta must be > 0, got {p.beta}")
    if not 0 < p.alpha < 1:
        raise ParameterError("alpha_range", f"alpha must lie in (0, 1), got {p.alpha}")
    gamma = p.alpha**2 * p.beta**2 / BETA_C**2
    if not 0.5 < gamma < 1:
        raise ParameterError(
            "gamma_range",
            f"gamma = alpha^2 beta^2 / beta_c^2 = {gamma:.6g} must lie in (1/2, 1)",
        )
    eps0 = min(1 - gamma, gamma - 0.5) / 2
    gp = gamma - eps0 if p.gamma_prime is None else float(p.gamma_prime)
    if not 0.5 < gp < gamma:
        raise ParameterError(
            "gamma_prime_range", f"gamma' = {gp:.6g} must lie in (1/2, gamma={gamma:.6g})"
        )
    if not 0 < p.kappa < 0.5:
        raise ParameterError("kappa_range", f"kappa must lie in (0, 1/2), got {p.kappa}")
    if not p.C0 > 0:
        raise ParameterError("C0_positive", f"C0 must be > 0, got {p.C0}")
    if not 0 < p.delta < 1 / 6:
        raise ParameterError("delta_range", f"delta must lie in (0, 1/6), got {p.delta}")
    if int(p.K_ball) != p.K_ball or p.K_ball < 1:
        raise ParameterError("K_ball_positive", f"K_ball must be a positive integer, got {p.K_ball}")
    ab2 = p.alpha * p.beta**2
    if not (0 < p.delta_shallow < 1 and (p.delta_shallow - 1) * ab2 + p.alpha**2 * p.beta**2 / 2 < 0):
        raise ParameterError(
            "delta_shallow_range",
            f"delta_shallow={p.delta_shallow} violates (d - 1) alpha beta^2 + alpha^2 beta^2 / 2 < 0",
        )
    N = int(p.N)
    alpha_p = (BETA_C / p.beta) * math.sqrt(gp)
    log_gp = _log_g(alpha_p, p.beta, N)
    c = p.beta * math.sqrt(N)
    thr = log_gp / c
    return Scales(
        N=N,
        beta=float(p.beta),
        alpha=float(p.alpha),
        beta_c=BETA_C,
        gamma=gamma,
        gamma_prime=gp,
        epsilon0=eps0,
        alpha_prime=alpha_p,
        log_g=_log_g(p.alpha, p.beta, N),
        log_g_prime=log_gp,
        log_h=p.delta_shallow * ab2 * N,
        log_m=math.log(8 / p.kappa) + (p.K_ball + 3 + p.beta * p.C0) * math.log(N),
        deep_threshold=thr,
        log_p_deep=float(log_ndtr(-thr)),
        log_good=-p.beta * p.C0 * math.log(N) if N > 1 else 0.0,
    )


def _uniforms(rng, n):
    # strictly inside (0, 1): rng.random() is a multiple of 2**-53 in [0, 1)
    return rng.random(n) + 2.0**-54


@dataclass(eq=False)
class Environment:
    """One realisation of the landscape; treat as immutable."""

    params: RemParams
    scales: Scales
    E: np.ndarray
    log_tau: np.ndarray
    Z: float
    nu: np.ndarray
    deep: np.ndarray

    @classmethod
    def from_energies(cls, E, params, scales=None):
        scales = validate_params(params) if scales is None else scales
        E = np.array(E, dtype=np.float64)
        if E.shape != (1 << scales.N,):
            raise ValueError("energy vector must have length 2**N")
        return cls._build(params, scales, E, scales.energy_scale * E)

    @classmethod
    def from_log_tau(cls, log_tau, params):
        """Planted landscape given directly by log tau."""
        scales = validate_params(params)
        log_tau = np.array(log_tau, dtype=np.float64)
        if log_tau.shape != (1 << scales.N,):
            raise ValueError("log_tau must have length 2**N")
        return cls._build(params, scales, log_tau / scales.energy_scale, log_tau)

    @classmethod
    def _build(cls, params, scales, E, log_tau):
        w = np.exp(np.minimum(log_tau, 0.0))
        Z = float(math.fsum(w))
        nu = w / Z
        deep = np.flatnonzero(log_tau >= scales.log_g_prime).astype(np.int64)
        for a in (E, log_tau, nu, deep):
            a.flags.writeable = False
        return cls(params, scales, E, log_tau, Z, nu, deep)

    @property
    def N(self):
        return self.scales.N

    @property
    def size(self):
        return 1 << self.scales.N

    @property
    def tau(self):
        return np.exp(self.log_tau)

    @property
    def deep_mask(self):
        m = np.zeros(self.size, dtype=bool)
        m[self.deep] = True
        return m

    @property
    def log_clock_rate(self):
        """log(1 v tau_x): slope of the clock process."""
        return np.maximum(self.log_tau, 0.0)

    def good_mask(self):
        """Vertices with tau_x >= N^{-beta C0}."""
        return self.log_tau >= self.scales.log_good

    def conductances(self):
        """Array ``c[x, i] = (tau_x ^ tau_{x^i}) / Z`` over all directed edges."""
        lt = self.log_tau
        x = np.arange(self.size)
        nb = x[:, None] ^ (1 << np.arange(self.N))[None, :]
        return np.exp(np.minimum(lt[:, None], lt[nb])) / self.Z

    def deep_size_ratio(self):
        """|D_N| 2^{(gamma' - 1) N}."""
        return len(self.deep) * 2.0 ** ((self.scales.gamma_prime - 1) * self.N)

    def z_ratio(self):
        """Z_N / 2^N, expected to be bounded away from 0."""
        return self.Z / self.size


def _rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


def sample_environment(params):
    """Draw i.i.d. standard Gaussian energies from ``params.env_seed``."""
    scales = validate_params(params)
    rng = _rng(params.env_seed, 0)
    E = ndtri(_uniforms(rng, 1 << scales.N))
    return Environment._build(params, scales, E, scales.energy_scale * E)


# ---------------------------------------------------------------------------
# two-step sampling

@dataclass(eq=False)
class TwoStepEnvironment:
    """Deep positions ``xi``, tail energies ``E_bar`` and body energies ``E_under``.

    ``E_bar`` is indexed like ``deep`` (the positions where ``xi`` holds);
    ``E_under`` is a full-length vector whose deep entries are unused (NaN).
    """

    params: RemParams
    scales: Scales
    xi: np.ndarray
    deep: np.ndarray
    E_bar: np.ndarray
    E_under: np.ndarray
    env: Environment = field(repr=False)


def _threshold_bounds(scales):
    """Smallest energy that is deep and largest energy that is not."""
    c, lg = scales.energy_scale, scales.log_g_prime
    lo = scales.deep_threshold
    while c * lo < lg:
        lo = np.nextafter(lo, np.inf)
    while c * np.nextafter(lo, -np.inf) >= lg:
        lo = np.nextafter(lo, -np.inf)
    return lo, np.nextafter(lo, -np.inf)


def _draw_tail(scales, rng, n):
    lo, _ = _threshold_bounds(scales)
    # upper tail: P[E > e] = U p, computed without cancellation
    e = -ndtri(_uniforms(rng, n) * scales.p_deep)
    return np.maximum(e, lo)


def _assemble(params, scales, xi, deep, E_bar, E_under):
    E = E_under.copy()
    E[deep] = E_bar
    env = Environment._build(params, scales, E, scales.energy_scale * E)
    return TwoStepEnvironment(params, scales, xi, deep, E_bar, E_under, env)


def sample_two_step(params):
    """Sample the landscape as (deep indicator, tail energies, body energies)."""
    scales = validate_params(params)
    n = 1 << scales.N
    p = scales.p_deep
    xi = _uniforms(_rng(params.env_seed, 1, 0), n) < p
    deep = np.flatnonzero(xi).astype(np.int64)
    E_bar = _draw_tail(scales, _rng(params.env_seed, 1, 1), len(deep))
    _, hi = _threshold_bounds(scales)
    E_under = np.minimum(ndtri(_uniforms(_rng(params.env_seed, 1, 2), n) * ndtr(scales.deep_threshold)), hi)
    E_under[deep] = np.nan
    for a in (xi, deep, E_bar, E_under):
        a.flags.writeable = False
    return _assemble(params, scales, xi, deep, E_bar, E_under)


def resample_deep_energies(ts, seed):
    """Fresh tail energies on the same deep positions; everything else kept."""
    E_bar = _draw_tail(ts.scales, _rng(ts.params.env_seed, 2, int(seed)), len(ts.deep))
    E_bar.flags.writeable = False
    return _assemble(ts.params, ts.scales, ts.xi, ts.deep, E_bar, ts.E_under)


# ---------------------------------------------------------------------------
# deep-set geometry and shallow slices

@dataclass(frozen=True)
class SeparationReport:
    n_deep: int
    size_ratio: float
    min_distance: float
    separated: bool


def check_separation(env):
    """Minimum Hamming distance between deep traps (inf if fewer than two)."""
    d = env.deep
    if len(d) <= 1:
        md = math.inf
    else:
        x = np.bitwise_xor(d[:, None], d[None, :])
        dist = np.bitwise_count(x)
        dist[np.diag_indices(len(d))] = 255
        md = float(dist.min())
    return SeparationReport(len(d), env.deep_size_ratio(), md, md >= 2)


@dataclass(frozen=True)
class ShallowSlices:
    """``index[x]`` is -1 on deep traps, 0 on the very shallow set, i >= 1 on slice i."""

    index: np.ndarray
    n_slices: int
    log_lower: np.ndarray

    def members(self, i):
        return np.flatnonzero(self.index == i)

    def sizes(self):
        return np.bincount(self.index[self.index >= 0], minlength=self.n_slices + 1)


def shallow_slices(env, scales=None):
    """Partition the non-deep vertices into dyadic slices below g'_N."""
    s = env.scales if scales is None else scales
    n_sl = max(0, math.ceil((s.log_g_prime - s.log_h) / LN2))
    lt = env.log_tau
    idx = np.zeros(env.size, dtype=np.int64)
    mid = (lt > s.log_h) & (lt < s.log_g_prime)
    idx[mid] = np.ceil((s.log_g_prime - lt[mid]) / LN2).astype(np.int64)
    idx[mid] = np.clip(idx[mid], 1, max(n_sl, 1))
    idx[lt >= s.log_g_prime] = -1
    lower = s.log_g_prime - LN2 * np.arange(1, n_sl + 1)
    return ShallowSlices(idx, n_sl, lower)


# ---------------------------------------------------------------------------
# file formats

def save_environment(env, path):
    """Binary dump: magic, header, then 2^N little-endian float64 energies."""
    p, s = env.params, env.scales
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(s.N, p.beta, p.alpha, s.gamma_prime, int(p.env_seed) % 2**64,
                              p.kappa, p.C0, p.delta, int(p.K_ball), p.delta_shallow))
        fh.write(np.asarray(env.E, dtype="<f8").tobytes())


def load_environment(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an environment file")
        N, beta, alpha, gp, seed, kappa, C0, delta, K, ds = _HEADER.unpack(fh.read(_HEADER.size))
        E = np.frombuffer(fh.read(8 << N), dtype="<f8").astype(np.float64)
    if E.shape != (1 << N,):
        raise ValueError(f"{path}: truncated energy block")
    params = RemParams(N=N, beta=beta, alpha=alpha, gamma_prime=gp, env_seed=seed,
                       kappa=kappa, C0=C0, delta=delta, K_ball=K, delta_shallow=ds)
    return Environment.from_energies(E, params)


def write_summary_csv(env, path):
    deep = env.deep_mask
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "E_x", "log_tau", "is_deep"])
        for x in range(env.size):
            w.writerow([f"{x:x}", repr(float(env.E[x])), repr(float(env.log_tau[x])), int(deep[x])])


def with_seed(params, seed):
    return replace(params, env_seed=int(seed))
