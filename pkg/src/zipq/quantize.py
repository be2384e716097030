"""Stochastic quantization of vectors and matrices onto level grids.

A value is first normalized by a positive scale factor, then rounded at
random to one of the two grid levels bracketing it, with probabilities
chosen so the rounding is exact in expectation.  ``encode_copies`` stores
several independent roundings of the same data compactly: one base level
index plus a small per-value count of how many copies chose the lower
endpoint.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .packing import pack_fields

#: Normalized values may overshoot the grid by this much before it is
#: treated as a scaling bug rather than float noise.
CLAMP_TOL = 1e-12


class ScaleError(ValueError):
    """A value lies outside the range covered by its scale factors."""


class StreamReuseError(RuntimeError):
    """Quantizations that must be independent came from the same draw."""


_id_lock = threading.Lock()
_next_draw_id = 1


def _take_draw_ids(n: int) -> int:
    """Reserve ``n`` consecutive draw ids; returns the first."""
    global _next_draw_id
    with _id_lock:
        start = _next_draw_id
        _next_draw_id += n
    return start


@dataclass(frozen=True, eq=False)
class QuantScheme:
    """A strictly increasing level grid on the normalized domain.

    ``levels`` spans [-1, 1] for signed data or [0, 1] for non-negative
    data.  ``scaling`` records the normalization convention the grid is
    meant for: per-feature maxima ("column") or per-vector norm ("row").
    """

    levels: np.ndarray
    scaling: str = "column"

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        if levels.ndim != 1 or levels.size < 2:
            raise ValueError("need at least two levels")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        if levels[0] not in (-1.0, 0.0) or levels[-1] != 1.0:
            raise ValueError("levels must span [-1, 1] or [0, 1]")
        if self.scaling not in ("row", "column"):
            raise ValueError(f"unknown scaling mode: {self.scaling!r}")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def n_levels(self) -> int:
        return int(self.levels.size)

    @property
    def bits(self) -> int:
        """Bits needed to store one level index."""
        return max(1, math.ceil(math.log2(self.n_levels)))

    @property
    def signed(self) -> bool:
        return bool(self.levels[0] < 0)

    @property
    def s(self) -> int:
        """Interval count of the grid, per unit of the normalized domain."""
        if self.signed:
            return (self.n_levels - 1) // 2
        return self.n_levels - 1

    @property
    def max_gap(self) -> float:
        return float(np.diff(self.levels).max())

    def bracket(self, x):
        """Lower level index and up-probability for each normalized value.

        ``x`` must already lie inside the grid's span.
        """
        lo = np.searchsorted(self.levels, x, side="right") - 1
        lo = np.clip(lo, 0, self.n_levels - 2)
        width = self.levels[lo + 1] - self.levels[lo]
        p = (x - self.levels[lo]) / width
        return lo.astype(np.int64), p


def uniform_scheme(s: int, signed: bool = True, scaling: str = "column") -> QuantScheme:
    """Evenly spaced grid with ``s`` intervals per unit of the domain."""
    if s < 1:
        raise ValueError("s must be >= 1")
    if signed:
        levels = np.arange(-s, s + 1, dtype=np.float64) / s
    else:
        levels = np.arange(s + 1, dtype=np.float64) / s
    levels[0] = -1.0 if signed else 0.0
    levels[-1] = 1.0
    return QuantScheme(levels, scaling)


def scheme_for_bits(bits: int, signed: bool = True, scaling: str = "column") -> QuantScheme:
    """Densest uniform grid whose level indices fit in ``bits`` bits."""
    if not 1 <= bits <= 16:
        raise ValueError("bits must be in [1, 16]")
    if signed:
        s = (2**bits - 1) // 2
        if s < 1:
            raise ValueError("signed grids need at least 2 bits")
    else:
        s = 2**bits - 1
    return uniform_scheme(s, signed=signed, scaling=scaling)


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    """Level indices for one quantization draw, plus what they mean.

    ``idx`` may be any shape (a matrix draw quantizes each entry
    independently).  ``draw_id`` identifies the underlying random draw so
    estimators can reject accidental reuse where independence is required.
    """

    scheme: QuantScheme
    scale: np.ndarray | float
    idx: np.ndarray
    draw_id: int

    def dequantize(self) -> np.ndarray:
        return np.asarray(self.scale) * self.scheme.levels[self.idx]

    @property
    def shape(self):
        return self.idx.shape

    def resolution(self) -> np.ndarray:
        """Per-coordinate worst-case rounding error bound, scale * max gap."""
        return np.broadcast_to(np.asarray(self.scale) * self.scheme.max_gap, self.idx.shape)


def _normalize(v, scheme: QuantScheme, scale):
    v = np.asarray(v, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise ScaleError("scale factors must be positive and finite")
    x = v / scale
    lo, hi = scheme.levels[0], scheme.levels[-1]
    if x.size:
        worst = max(float(np.max(x - hi, initial=0.0)), float(np.max(lo - x, initial=0.0)))
        if worst > CLAMP_TOL:
            raise ScaleError(
                f"normalized value escapes [{lo}, {hi}] by {worst:.3e}; "
                "scale does not cover the data"
            )
    return np.clip(x, lo, hi)


def quantize_stochastic(v, scheme: QuantScheme, scale, rng) -> QuantizedVector:
    """Randomly round ``v / scale`` onto the grid, exactly in expectation.

    Each coordinate moves to one of its two bracketing levels; the upper
    one is chosen with probability proportional to the position inside the
    gap, so ``E[dequantize()] == v``.  Coordinates are independent.
    """
    x = _normalize(v, scheme, scale)
    lo, p = scheme.bracket(x)
    idx = lo + (rng.random(x.shape) < p)
    return QuantizedVector(scheme, scale, idx.astype(np.uint16), _take_draw_ids(1))


def dequantize_draws(v, scheme: QuantScheme, scale, rng, size: int) -> np.ndarray:
    """``size`` independent quantization draws of ``v``, already dequantized.

    Returns an array of shape ``(size,) + v.shape``; handy for Monte-Carlo
    estimates of quantizer moments without a Python-level loop.
    """
    x = _normalize(v, scheme, scale)
    lo, p = scheme.bracket(x)
    idx = lo + (rng.random((size,) + x.shape) < p)
    return np.asarray(scale) * scheme.levels[idx]


def variance_bound_uniform(v, s: int) -> float:
    """Worst-case total quantization variance of a uniform ``s``-interval grid.

    Serves as a ceiling oracle for the measured error of unit-scale
    uniform quantization: min(n/s^2, sqrt(n)/s) * ||v||^2.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    return min(n / s**2, math.sqrt(n) / s) * float(v @ v)


def column_scales(X) -> np.ndarray:
    """Per-feature scale factors: the largest magnitude seen in each column.

    Identically-zero columns get scale 1.0 so normalization stays defined
    (they quantize to exact zero regardless).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m = np.maximum(np.abs(X.min(axis=0)), np.abs(X.max(axis=0)))
    m[m == 0] = 1.0
    return m


def row_scale(v) -> float:
    """Scale factor for a single vector: its Euclidean norm (1.0 if zero)."""
    n = float(np.linalg.norm(v))
    return n if n > 0 else 1.0


def row_scales(A) -> np.ndarray:
    """Per-row norms of a matrix, shaped (rows, 1), zeros mapped to 1.0."""
    n = np.linalg.norm(A, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return n


@dataclass(frozen=True, eq=False)
class PackedCopies:
    """Several exchangeable quantization draws of the same data.

    For each value we store the lowest level index any copy chose plus a
    count of how many copies sit at that base level.  The count is stored
    modulo ``n_copies`` (0 means "all copies"), so it costs exactly
    log2(n_copies) bits per value on top of the base index.
    """

    scheme: QuantScheme
    scale: np.ndarray | float
    n_copies: int
    base: np.ndarray
    base_count: np.ndarray  # copies at base level, mod n_copies
    draw_id_base: int

    @property
    def selector_bits(self) -> int:
        return self.n_copies.bit_length() - 1

    def decode(self, copy_index: int) -> QuantizedVector:
        """Recover copy ``copy_index``; copies at the base level come first."""
        if not 0 <= copy_index < self.n_copies:
            raise IndexError(
                f"copy_index {copy_index} out of range for {self.n_copies} copies"
            )
        at_base = np.where(self.base_count == 0, self.n_copies, self.base_count)
        idx = self.base + (copy_index >= at_base)
        return QuantizedVector(
            self.scheme, self.scale, idx.astype(np.uint16), self.draw_id_base + copy_index
        )

    def pack(self) -> bytes:
        """Base indices then selector counts, one contiguous bit stream."""
        return pack_fields(
            [(self.base, self.scheme.bits), (self.base_count, self.selector_bits)]
        )


def encode_copies(v, scheme: QuantScheme, scale, n_copies: int, rng) -> PackedCopies:
    """Draw ``n_copies`` independent quantizations of ``v`` and store them packed."""
    if n_copies < 1 or n_copies & (n_copies - 1):
        raise ValueError("n_copies must be a power of two >= 1")
    x = _normalize(v, scheme, scale)
    lo, p = scheme.bracket(x)
    upper = rng.binomial(n_copies, p)
    at_lower = n_copies - upper
    base = np.where(at_lower > 0, lo, lo + 1)
    at_base = np.where(at_lower > 0, at_lower, n_copies)
    return PackedCopies(
        scheme,
        scale,
        n_copies,
        base.astype(np.uint16),
        (at_base % n_copies).astype(np.uint16),
        _take_draw_ids(n_copies),
    )
