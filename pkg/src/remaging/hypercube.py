"""Bit-coded hypercube geometry and the canonical path system.

A vertex of {-1, 1}^N is stored as an integer code in [0, 2**N).  Bit ``i``
of the code holds spin coordinate ``i + 1``; a set bit means spin +1.

Paths are lists of vertex codes.  The path system routes every pair of
vertices through "good" vertices where possible, following the embedding
of the hypercube into its good subgraph: bad vertices are pushed to their
first good neighbour, edges between pushed images are replaced by short
bridges, and the concatenation is loop-erased.
"""

from itertools import combinations

import numpy as np
from numba import njit

from .exceptions import BudgetExceeded

__all__ = [
    "hamming_distance",
    "neighbors",
    "enumerate_sphere",
    "enumerate_ball",
    "flip_path",
    "embed_phi",
    "bridge_path",
    "map_edge",
    "loop_erase",
    "build_path",
    "edge_index",
    "PathSet",
    "edge_congestion",
    "BudgetExceeded",
]


def _check_vertex(x, N):
    if not 0 <= int(x) < (1 << N):
        raise ValueError(f"vertex code {x} outside [0, 2**{N})")


def hamming_distance(x, y, N=None):
    """Number of coordinates in which ``x`` and ``y`` differ."""
    if N is not None:
        _check_vertex(x, N)
        _check_vertex(y, N)
    return int(int(x) ^ int(y)).bit_count()


def neighbors(x, N):
    """The N neighbours of ``x``, ordered by flipped coordinate."""
    _check_vertex(x, N)
    return np.int64(x) ^ (np.int64(1) << np.arange(N, dtype=np.int64))


def enumerate_sphere(x, r, N):
    """Vertices at distance exactly ``r`` from ``x``."""
    _check_vertex(x, N)
    if not 0 <= r <= N:
        raise ValueError(f"invalid radius {r} for N={N}")
    masks = [sum(1 << i for i in c) for c in combinations(range(N), r)]
    return np.asarray(masks, dtype=np.int64) ^ np.int64(x)


def enumerate_ball(x, r, N):
    """Vertices at distance at most ``r`` from ``x``, sorted by distance."""
    if not 0 <= r <= N:
        raise ValueError(f"invalid radius {r} for N={N}")
    return np.concatenate([enumerate_sphere(x, k, N) for k in range(r + 1)])


def flip_path(x, y, N=None):
    """Path from ``x`` to ``y`` flipping disagreeing coordinates in order."""
    x, y = int(x), int(y)
    if x == y:
        raise ValueError("degenerate pair: x == y")
    diff = x ^ y
    path = [x]
    i = 0
    while diff >> i:
        if (diff >> i) & 1:
            path.append(path[-1] ^ (1 << i))
        i += 1
    return path


# ---------------------------------------------------------------------------
# compiled kernels; the public wrappers below convert to Python lists

@njit(cache=True)
def _popcount(v):
    c = 0
    while v:
        v &= v - 1
        c += 1
    return c


@njit(cache=True)
def _phi(x, good, N):
    if good[x]:
        return x, True
    for i in range(N):
        y = x ^ (1 << i)
        if good[y]:
            return y, True
    return x, False


@njit(cache=True)
def _bridge(u, v, good, N, out, start):
    """Write the minimal good bridge from u to v at out[start:]; return count."""
    diff = u ^ v
    for i in range(N):
        if (diff >> i) & 1:
            continue
        for j in range(i + 1, N):
            if (diff >> j) & 1:
                continue
            n = start
            w = u
            out[n] = w
            n += 1
            w ^= 1 << i
            out[n] = w
            n += 1
            w ^= 1 << j
            out[n] = w
            n += 1
            for k in range(N):
                if (diff >> k) & 1:
                    w ^= 1 << k
                    out[n] = w
                    n += 1
            w ^= 1 << i
            out[n] = w
            n += 1
            w ^= 1 << j
            out[n] = w
            n += 1
            ok = True
            for m in range(start + 1, n - 1):
                if not good[out[m]]:
                    ok = False
                    break
            if ok:
                return n - start
    return 0


@njit(cache=True)
def _map_edge(x, y, good, N, out, start):
    px, _ = _phi(x, good, N)
    py, _ = _phi(y, good, N)
    if good[px] and px == py:
        out[start] = px
        return 1
    if good[px] and good[py]:
        d = _popcount(px ^ py)
        if d == 1:
            out[start] = px
            out[start + 1] = py
            return 2
        if d == 2 or d == 3:
            n = _bridge(px, py, good, N, out, start)
            if n > 0:
                return n
    out[start] = x
    out[start + 1] = y
    return 2


@njit(cache=True)
def _loop_erase(buf, n, pos):
    """Forward loop erasure of buf[:n] in place; pos is a scratch map (-1)."""
    m = 0
    for k in range(n):
        v = buf[k]
        p = pos[v]
        if p >= 0:
            for q in range(p + 1, m):
                pos[buf[q]] = -1
            m = p + 1
        else:
            buf[m] = v
            pos[v] = m
            m += 1
    for q in range(m):
        pos[buf[q]] = -1
    return m


@njit(cache=True)
def _build_path(x, y, good, N, buf, tmp, pos):
    n = 0
    if not good[x]:
        buf[0] = x
        n = 1
    a = x
    diff = x ^ y
    for i in range(N):
        if not (diff >> i) & 1:
            continue
        b = a ^ (1 << i)
        k = _map_edge(a, b, good, N, tmp, 0)
        s = 0
        if n > 0 and buf[n - 1] == tmp[0]:
            s = 1
        for q in range(s, k):
            buf[n] = tmp[q]
            n += 1
        a = b
    if buf[n - 1] != y:
        buf[n] = y
        n += 1
    return _loop_erase(buf, n, pos)


@njit(cache=True)
def _congestion(nu, good, N, cong):
    n_v = 1 << N
    buf = np.empty(8 * N + 4, dtype=np.int64)
    tmp = np.empty(8, dtype=np.int64)
    pos = -np.ones(n_v, dtype=np.int64)
    for x in range(n_v):
        for y in range(x + 1, n_v):
            m = _build_path(x, y, good, N, buf, tmp, pos)
            w = (m - 1) * nu[x] * nu[y]
            for k in range(m - 1):
                a = buf[k]
                b = buf[k + 1]
                e = a ^ b
                bit = 0
                while e > 1:
                    e >>= 1
                    bit += 1
                lo = a if a < b else b
                cong[lo, bit] += w


def _good_mask(good, N):
    if callable(good):
        codes = np.arange(1 << N, dtype=np.int64)
        try:
            mask = np.asarray(good(codes), dtype=bool)
        except Exception:
            mask = None
        if mask is None or mask.shape != codes.shape:
            mask = np.fromiter((bool(good(int(c))) for c in codes), bool, len(codes))
        return mask
    mask = np.asarray(good, dtype=bool)
    if mask.shape != (1 << N,):
        raise ValueError("good mask must have length 2**N")
    return mask


def embed_phi(x, good, N):
    """Push ``x`` to a good vertex.

    Returns ``(image, ok)``: ``x`` itself if good, otherwise its neighbour
    across the smallest coordinate that is good.  ``ok`` is False when
    ``x`` is bad and has no good neighbour, in which case ``x`` is returned.
    """
    _check_vertex(x, N)
    mask = _good_mask(good, N)
    v, ok = _phi(np.int64(x), mask, N)
    return int(v), bool(ok)


def bridge_path(u, v, good, N):
    """Length-6 or length-7 detour between good vertices at distance 2 or 3.

    Scans pairs ``i < j`` of agreeing coordinates in lexicographic order and
    returns the first detour whose interior vertices are all good, or None.
    """
    d = hamming_distance(u, v, N)
    if d not in (2, 3):
        raise ValueError(f"bridge requires distance 2 or 3, got {d}")
    mask = _good_mask(good, N)
    out = np.empty(8, dtype=np.int64)
    n = _bridge(np.int64(u), np.int64(v), mask, N, out, 0)
    return [int(c) for c in out[:n]] if n else None


def map_edge(x, y, good, N):
    """Image of the edge {x, y} in the good subgraph, as a vertex list."""
    if hamming_distance(x, y, N) != 1:
        raise ValueError("map_edge requires neighbouring vertices")
    mask = _good_mask(good, N)
    out = np.empty(8, dtype=np.int64)
    n = _map_edge(np.int64(x), np.int64(y), mask, N, out, 0)
    return [int(c) for c in out[:n]]


def loop_erase(path):
    """Chronological loop erasure: a revisit truncates back to the first visit."""
    out = []
    seen = {}
    for v in path:
        v = int(v)
        if v in seen:
            p = seen[v]
            for w in out[p + 1:]:
                del seen[w]
            del out[p + 1:]
        else:
            seen[v] = len(out)
            out.append(v)
    return out


def build_path(x, y, good, N):
    """Canonical self-avoiding path from ``x`` to ``y`` of length <= 7 d + 2."""
    _check_vertex(x, N)
    _check_vertex(y, N)
    if x == y:
        raise ValueError("degenerate pair: x == y")
    mask = _good_mask(good, N)
    buf = np.empty(8 * N + 4, dtype=np.int64)
    tmp = np.empty(8, dtype=np.int64)
    pos = -np.ones(1 << N, dtype=np.int64)
    n = _build_path(np.int64(x), np.int64(y), mask, N, buf, tmp, pos)
    return [int(c) for c in buf[:n]]


def edge_index(x, y):
    """Canonical (lower endpoint, bit) key of the edge {x, y}."""
    e = int(x) ^ int(y)
    if e.bit_count() != 1:
        raise ValueError("not an edge")
    return min(int(x), int(y)), e.bit_length() - 1


def edge_congestion(nu, good, N, pair_budget=2**28):
    """Congestion sum_{gamma containing e} |gamma| nu_x nu_y for every edge.

    One path per unordered pair {x, y}, routed from the smaller code to the
    larger.  Returns an array ``cong[lo, i]`` for the edge {lo, lo ^ 2**i}
    with bit ``i`` clear in ``lo``; the other half of the array is zero.
    """
    n_pairs = (1 << (N - 1)) * ((1 << N) - 1)
    if n_pairs > pair_budget:
        raise BudgetExceeded(f"{n_pairs} pairs exceed budget {pair_budget}; reduce N")
    nu = np.ascontiguousarray(nu, dtype=np.float64)
    mask = _good_mask(good, N)
    cong = np.zeros((1 << N, N))
    _congestion(nu, mask, N, cong)
    return cong


class PathSet:
    """The canonical path system for a fixed good-vertex mask.

    Parameters
    ----------
    good : array of bool or callable
        Goodness of each vertex code.
    N : int
        Dimension.
    """

    def __init__(self, good, N):
        self.N = int(N)
        self.good = _good_mask(good, self.N)
        self.edge_congestion_ = None

    def path(self, x, y):
        lo, hi = (x, y) if x < y else (y, x)
        p = build_path(lo, hi, self.good, self.N)
        return p if x < y else p[::-1]

    def accumulate(self, nu, pair_budget=2**28):
        self.edge_congestion_ = edge_congestion(nu, self.good, self.N, pair_budget)
        return self.edge_congestion_

    def dump(self, pairs, fh):
        """Write one path per line as hex codes (debugging aid)."""
        for x, y in pairs:
            fh.write(" ".join(f"{v:x}" for v in self.path(x, y)) + "\n")
