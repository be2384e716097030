"""Variance-optimal placement of quantization levels on [0, 1].

Rounding a point x at random to the endpoints of an interval [a, b] (mean
preserved) has variance (b - x)(x - a).  Given data and an interval budget
k, the solvers below choose interval boundaries minimizing the total
variance: an exact dynamic program, a discretized DP over a candidate
grid, a near-linear greedy merge, and the greedy+DP combination.  A
brute-force oracle is included for small instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .quantize import QuantScheme, column_scales

# Above this many candidate boundaries the DP builds cost columns on the
# fly instead of materializing the full pairwise cost matrix.
_DENSE_DP_LIMIT = 2000


@dataclass(frozen=True, eq=False)
class PointSet:
    """Sorted sample of values in [0, 1]; duplicates kept (they weight the cost)."""

    xs: np.ndarray

    def __post_init__(self):
        xs = np.sort(np.asarray(self.xs, dtype=np.float64).ravel())
        if xs.size == 0:
            raise ValueError("point set is empty")
        if xs[0] < 0.0 or xs[-1] > 1.0:
            raise ValueError("points must lie in [0, 1]")
        xs.setflags(write=False)
        object.__setattr__(self, "xs", xs)

    @property
    def n(self) -> int:
        return int(self.xs.size)


def _aspoints(omega) -> np.ndarray:
    if isinstance(omega, PointSet):
        return omega.xs
    return PointSet(np.asarray(omega)).xs


@dataclass(frozen=True, eq=False)
class Partition:
    """Interval boundaries over [0, 1] plus the total variance they induce."""

    boundaries: np.ndarray
    total_err: float
    n_points: int

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must increase strictly from 0 to 1")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @property
    def k(self) -> int:
        return int(self.boundaries.size - 1)

    @property
    def mv(self) -> float:
        """Mean variance per point."""
        return self.total_err / self.n_points


def interval_err(points, a: float, b: float) -> float:
    """Total variance of quantizing ``points`` to the endpoints of [a, b]."""
    x = np.asarray(points, dtype=np.float64)
    if x.size and (x.min() < a or x.max() > b):
        raise ValueError("point outside the interval")
    return float(((b - x) * (x - a)).sum())


def partition_err(points, boundaries) -> float:
    """Total variance of a full partition; points on boundaries cost zero."""
    x = np.asarray(points, dtype=np.float64)
    b = np.asarray(boundaries, dtype=np.float64)
    i = np.clip(np.searchsorted(b, x, side="right") - 1, 0, b.size - 2)
    return float(((b[i + 1] - x) * (x - b[i])).sum())


def make_partition(omega, boundaries) -> Partition:
    xs = _aspoints(omega)
    return Partition(np.asarray(boundaries, dtype=np.float64), partition_err(xs, boundaries), xs.size)


def _prefix_sums(xs):
    s1 = np.concatenate([[0.0], np.cumsum(xs)])
    s2 = np.concatenate([[0.0], np.cumsum(xs * xs)])
    return s1, s2


def _segment_err(xs, s1, s2, a, b):
    """Variance of points strictly inside (a, b) against endpoints {a, b}.

    Vectorized over ``a``/``b``; boundary points contribute zero and are
    excluded to keep the prefix-sum algebra exact.
    """
    lo = np.searchsorted(xs, a, side="right")
    hi = np.searchsorted(xs, b, side="left")
    cnt = hi - lo
    return -(s2[hi] - s2[lo]) + (np.asarray(a) + b) * (s1[hi] - s1[lo]) - np.asarray(a) * b * cnt


def _dp(xs, cands, k):
    """DP over boundary positions [0, cands..., 1] for exactly ``k`` intervals.

    Returns (boundaries, cost_table, arg_table).  cost_table[j][m] is the
    best total variance covering [0, p_m] with j intervals whose rightmost
    boundary is p_m; ties take the leftmost predecessor.
    """
    p = np.concatenate([[0.0], cands, [1.0]])
    P = p.size
    s1, s2 = _prefix_sums(xs)
    T = np.full((k + 1, P), np.inf)
    arg = np.full((k + 1, P), -1, dtype=np.int64)
    T[1, 1:] = _segment_err(xs, s1, s2, 0.0, p[1:])

    # "leftmost on ties" must survive float noise: costs that are equal in
    # exact arithmetic can differ by an ulp here, so ties use a tiny band.
    def _tie_tol(best):
        return 1e-12 * (1.0 + np.abs(best))

    if P <= _DENSE_DP_LIMIT:
        lo = np.searchsorted(xs, p, side="right")
        hi = np.searchsorted(xs, p, side="left")
        cnt = hi[None, :] - lo[:, None]
        seg1 = s1[hi][None, :] - s1[lo][:, None]
        seg2 = s2[hi][None, :] - s2[lo][:, None]
        V = -seg2 + (p[:, None] + p[None, :]) * seg1 - (p[:, None] * p[None, :]) * cnt
        jm_invalid = np.tril(np.ones((P, P), dtype=bool))  # requires j < m
        for kk in range(2, k + 1):
            M = T[kk - 1][:, None] + V
            M[jm_invalid] = np.inf
            M[: kk - 1, :] = np.inf
            T[kk] = M.min(axis=0)
            with np.errstate(invalid="ignore"):
                arg[kk] = (M <= T[kk] + _tie_tol(T[kk])).argmax(axis=0)
    else:
        for kk in range(2, k + 1):
            for m in range(kk, P):
                j0 = kk - 1
                cost = T[kk - 1, j0:m] + _segment_err(xs, s1, s2, p[j0:m], p[m])
                cmin = cost.min()
                T[kk, m] = cmin
                arg[kk, m] = j0 + int(np.argmax(cost <= cmin + _tie_tol(cmin)))

    out = [1.0]
    m = P - 1
    for kk in range(k, 1, -1):
        m = int(arg[kk, m])
        out.append(p[m])
    out.append(0.0)
    return np.asarray(out[::-1]), T, arg


def _interior_candidates(xs):
    c = np.unique(xs)
    return c[(c > 0.0) & (c < 1.0)]


def optimal_partition_dp(omega, k: int) -> Partition:
    """Exact minimum-variance partition into ``k`` intervals.

    Interior boundaries are always chosen among the data values (an
    optimal solution of that form always exists).  If ``k`` exceeds what
    the data can use, the zero-error partition through every distinct
    value is returned instead.
    """
    if k <= 0:
        raise ValueError("k must be >= 1")
    xs = _aspoints(omega)
    cands = _interior_candidates(xs)
    if k - 1 > cands.size:
        return make_partition(xs, np.concatenate([[0.0], cands, [1.0]]))
    boundaries, _, _ = _dp(xs, cands, k)
    return make_partition(xs, boundaries)


def brute_force_partition(omega, k: int) -> Partition:
    """Exhaustive-search oracle; only viable for small point sets."""
    if k <= 0:
        raise ValueError("k must be >= 1")
    xs = _aspoints(omega)
    cands = _interior_candidates(xs)
    take = min(k - 1, cands.size)
    best, best_err = None, np.inf
    for combo in itertools.combinations(range(cands.size), take):
        b = np.concatenate([[0.0], cands[list(combo)], [1.0]])
        err = partition_err(xs, b)
        if err < best_err:
            best, best_err = b, err
    return Partition(best, best_err, xs.size)


def candidate_grid(omega, M: int, kind: str = "quantile") -> np.ndarray:
    """Interior candidate boundaries from an ``M``-bucket discretization."""
    xs = _aspoints(omega)
    if kind == "quantile":
        q = np.quantile(xs, np.arange(1, M) / M)
    elif kind == "width":
        q = np.linspace(0.0, 1.0, M + 1)[1:-1]
    else:
        raise ValueError(f"unknown grid kind: {kind!r}")
    q = np.unique(q)
    return q[(q > 0.0) & (q < 1.0)]


def optimal_partition_discretized(
    omega, k: int, M: int, kind: str = "quantile", candidates=None
) -> Partition:
    """DP restricted to ``M``-bucket grid points instead of all data values.

    Costs one pass over the data to bucket it plus a DP on the (much
    smaller) candidate set; the variance gap to the exact DP shrinks as
    ``M`` grows.
    """
    if k <= 0:
        raise ValueError("k must be >= 1")
    if M < k:
        raise ValueError("M must be >= k")
    xs = _aspoints(omega)
    if candidates is None:
        cands = candidate_grid(xs, M, kind)
    else:
        cands = np.unique(np.asarray(candidates, dtype=np.float64))
        cands = cands[(cands > 0.0) & (cands < 1.0)]
    if k - 1 > cands.size:
        return make_partition(xs, np.concatenate([[0.0], cands, [1.0]]))
    boundaries, _, _ = _dp(xs, cands, k)
    return make_partition(xs, boundaries)


def adaquant_greedy(omega, k: int, gamma: float = 1.0, delta: float = 2.0) -> Partition:
    """Near-linear greedy merge down to at most 2(1+gamma)k + delta intervals.

    Start with a boundary at every distinct value, then repeatedly merge
    consecutive interval pairs, keeping the ceil((1+gamma)k) costliest
    merges split.  The result's variance is within (1 + 1/gamma) of the
    best ``k``-interval partition while using a few times more intervals.
    """
    if k <= 0:
        raise ValueError("k must be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    xs = _aspoints(omega)
    s1, s2 = _prefix_sums(xs)
    b = np.concatenate([[0.0], _interior_candidates(xs), [1.0]])
    threshold = 2.0 * (1.0 + gamma) * k + delta
    n_protect = math.ceil((1.0 + gamma) * k)
    while b.size - 1 > threshold:
        n_pairs = (b.size - 1) // 2
        left = b[0 : 2 * n_pairs : 2]
        right = b[2 : 2 * n_pairs + 2 : 2]
        errs = _segment_err(xs, s1, s2, left, right)
        # keep at least one merge per round so the loop always terminates
        keep = min(n_protect, n_pairs - 1)
        protected = np.argsort(-errs, kind="stable")[:keep]
        drop = np.ones(n_pairs, dtype=bool)
        drop[protected] = False
        b = np.delete(b, 1 + 2 * np.flatnonzero(drop))
    return make_partition(xs, b)


def approx_optimal_partition(omega, k: int, gamma: float = 1.0, delta: float = 2.0) -> Partition:
    """Greedy merge for candidates, then exact DP over them: k intervals,
    variance within (1 + 1/gamma) of optimal, near-linear total time."""
    xs = _aspoints(omega)
    coarse = adaquant_greedy(xs, k, gamma, delta)
    cands = coarse.boundaries[1:-1]
    if k - 1 > cands.size:
        return make_partition(xs, np.concatenate([[0.0], cands, [1.0]]))
    boundaries, _, _ = _dp(xs, cands, k)
    return make_partition(xs, boundaries)


def partition_to_scheme(p, signed: bool = False, scaling: str = "column") -> QuantScheme:
    """Turn partition boundaries into quantizer levels.

    ``signed=True`` mirrors the grid about zero for data whose normalized
    magnitudes (not raw values) were partitioned.
    """
    b = p.boundaries if isinstance(p, Partition) else np.asarray(p, dtype=np.float64)
    if signed:
        levels = np.concatenate([-b[::-1], b[1:]]) + 0.0  # normalizes -0.0
    else:
        levels = b
    return QuantScheme(levels, scaling)


def solve_partition(omega, k: int, algo: str = "combined", M: int = 256,
                    gamma: float = 1.0, delta: float = 2.0) -> Partition:
    """Dispatch to one of the solvers by name."""
    if algo == "exact":
        return optimal_partition_dp(omega, k)
    if algo == "discretized":
        return optimal_partition_discretized(omega, k, max(M, k))
    if algo == "greedy":
        return adaquant_greedy(omega, k, gamma, delta)
    if algo == "combined":
        return approx_optimal_partition(omega, k, gamma, delta)
    raise ValueError(f"unknown algorithm: {algo!r}")


def optimal_schemes_for_columns(X, bits: int, algo: str = "combined", M: int = 256):
    """Per-feature optimal level grids fitting a ``bits`` index budget.

    Each column is normalized by its scale; signed columns are solved on
    magnitudes and mirrored, so the interval budget halves.  Returns
    (schemes, scales) ready for the sample quantizer.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    scales = column_scales(X)
    schemes = []
    for f in range(X.shape[1]):
        col = X[:, f] / scales[f]
        signed = bool(col.min() < 0)
        vals = np.abs(col) if signed else col
        k = (2**bits - 1) // 2 if signed else 2**bits - 1
        if k < 1:
            raise ValueError("signed columns need at least 2 bits")
        part = solve_partition(vals, k, algo=algo, M=M)
        schemes.append(partition_to_scheme(part, signed=signed))
    return schemes, scales


def save_partition(p, path) -> None:
    b = p.boundaries if isinstance(p, Partition) else np.asarray(p, dtype=np.float64)
    with open(path, "w") as fh:
        for v in b:
            fh.write(f"{float(v)!r}\n")


def load_boundaries(path) -> np.ndarray:
    with open(path) as fh:
        vals = [float(line) for line in fh if line.strip()]
    return np.asarray(vals, dtype=np.float64)
