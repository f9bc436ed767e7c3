"""E2M1 element grid and generalized E8Mk block-scale codec.

Conventions, fixed once here and relied on everywhere else:

- Element grid: magnitudes {0, 0.5, 1, 1.5, 2, 3, 4, 6} with a sign bit.
  ``q_max = 6`` is the largest magnitude, ``q_min = 0.5`` the smallest
  nonzero one.
- Rounding to the grid is nearest-value; ties between two grid neighbours
  resolve to the even magnitude *index* (midpoints 0.25, 0.75, 1.25, 1.75,
  2.5, 3.5, 5 go to indices 0, 2, 2, 4, 4, 6, 6). The grid is non-uniform,
  so tie-to-even on values would be ill-defined; index parity is not.
- Magnitudes above q_max saturate to q_max. Ceiling scales make overflow
  impossible in the plain quantizer, but prescaled intermediates may hit it.
- Block scale: ``2^exponent * (1 + mantissa_code / 2^M)`` with M mantissa
  bits, 0 <= M <= 8. M = 0 is the plain power-of-two scale. Encoding uses
  ceiling semantics: the smallest representable value >= the ideal scale,
  so ``|x/s| <= q_max`` holds at every M.
- The exponent is an unbounded Python int. Range clamping belongs to a
  hardware backend, not to this emulation.

All kernels are exact in float64: the grid values and every representable
scale are dyadic rationals, and frexp/ldexp manipulate exponents without
rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GRID_MAGNITUDES",
    "GRID_MIDPOINTS",
    "Q_MAX",
    "Q_MIN",
    "ElementGrid",
    "E2M1",
    "GridCode",
    "ScaleCode",
    "nearest_grid_code",
    "decode_grid",
    "encode_scale_ceiling",
    "grid_round_array",
    "grid_index_array",
    "ceil_scale_array",
]

# --- element grid constants -------------------------------------------------

GRID_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
GRID_MIDPOINTS = np.array([0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0])
Q_MAX = 6.0
Q_MIN = 0.5

# Tie resolution per midpoint, frozen: indices 0, 2, 2, 4, 4, 6, 6.
_TIE_BUMP_ODD = 1


@dataclass(frozen=True)
class ElementGrid:
    """The element value set. Only the default E2M1 grid ships, but the
    invariants are enforced so a different grid cannot sneak in silently."""

    values: tuple[float, ...] = tuple(GRID_MAGNITUDES.tolist())
    q_max: float = Q_MAX
    q_min: float = Q_MIN

    def __post_init__(self) -> None:
        vals = self.values
        if len(vals) < 2 or vals[0] != 0.0:
            raise ValueError("grid must start at 0")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("grid magnitudes must be strictly increasing")
        if vals[-1] != self.q_max:
            raise ValueError("q_max must equal the largest magnitude")
        if vals[1] != self.q_min:
            raise ValueError("q_min must equal the smallest nonzero magnitude")


E2M1 = ElementGrid()


@dataclass(frozen=True)
class GridCode:
    """Signed element code: sign in {-1, 0, +1} and magnitude index."""

    sign: int
    index: int

    def __post_init__(self) -> None:
        if self.sign not in (-1, 0, 1):
            raise ValueError("sign must be -1, 0, or +1")
        if not 0 <= self.index < len(GRID_MAGNITUDES):
            raise ValueError("magnitude index out of range")
        if self.index == 0 and self.sign != 0:
            raise ValueError("zero magnitude carries sign 0")
        if self.index != 0 and self.sign == 0:
            raise ValueError("nonzero magnitude needs a sign")


@dataclass(frozen=True)
class ScaleCode:
    """Block scale 2^exponent * (1 + mantissa_code / 2^mantissa_bits)."""

    exponent: int
    mantissa_code: int = 0
    mantissa_bits: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.mantissa_bits <= 8:
            raise ValueError("mantissa_bits must be in [0, 8]")
        if not 0 <= self.mantissa_code < (1 << self.mantissa_bits):
            raise ValueError("mantissa_code out of range for mantissa_bits")

    def decode(self) -> float:
        return math.ldexp(1.0 + self.mantissa_code / (1 << self.mantissa_bits),
                          self.exponent)


# --- vector kernels ----------------------------------------------------------


def grid_index_array(mag: np.ndarray) -> np.ndarray:
    """Magnitude -> grid index, vectorized. Saturates above q_max.

    searchsorted against the midpoints lands exact midpoints on the lower
    neighbour; the bump then moves odd-index ties up, giving the frozen
    tie table."""
    mag = np.asarray(mag, dtype=np.float64)
    idx = np.searchsorted(GRID_MIDPOINTS, mag, side="left")
    safe = np.minimum(idx, len(GRID_MIDPOINTS) - 1)
    tie = (idx < len(GRID_MAGNITUDES) - 1) & (GRID_MIDPOINTS[safe] == mag) & (idx % 2 == 1)
    return idx + tie * _TIE_BUMP_ODD


def grid_round_array(u: np.ndarray) -> np.ndarray:
    """Round scaled values to the signed grid, vectorized."""
    u = np.asarray(u, dtype=np.float64)
    mags = GRID_MAGNITUDES[grid_index_array(np.abs(u))]
    return np.copysign(mags, u)


def ceil_scale_array(s_star: np.ndarray, mantissa_bits: int
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smallest representable E8Mk scale >= s_star, elementwise.

    Returns (decoded, exponent, mantissa_code). Entries with s_star <= 0
    are passed through as decoded 1.0 with code (0, 0); callers mask them.

    Exact by construction: with s* = f * 2^p (frexp, f in [0.5, 1)) write
    s* = 2^(p-1) * t, t = 2f in [1, 2). The mantissa step is 2^-M, so
    k = ceil((t - 1) * 2^M) is the ceiling code; k = 2^M carries into the
    next exponent. (t - 1) is exact in binary64, and the k comparison
    against (t - 1) * 2^M involves only scaled dyadics, so no double
    rounding can understate the ceiling.
    """
    if not 0 <= mantissa_bits <= 8:
        raise ValueError("mantissa_bits must be in [0, 8]")
    s_star = np.asarray(s_star, dtype=np.float64)
    levels = 1 << mantissa_bits

    f, p = np.frexp(s_star)
    ok = s_star > 0
    f = np.where(ok, f, 0.5)
    p = np.where(ok, p, 1)

    t = 2.0 * f                      # exact: doubling a binary64
    e = p - 1
    k = np.ceil((t - 1.0) * levels).astype(np.int64)
    carry = k == levels
    e = np.where(carry, e + 1, e)
    k = np.where(carry, 0, k)

    decoded = np.ldexp(1.0 + k / levels, e)
    decoded = np.where(ok, decoded, 1.0)
    e = np.where(ok, e, 0)
    k = np.where(ok, k, 0)
    return decoded, e, k


# --- scalar operations -------------------------------------------------------


def nearest_grid_code(u: float) -> GridCode:
    """Nearest signed grid code for one value. |u| > q_max saturates."""
    u = float(u)
    if not math.isfinite(u):
        raise ValueError("non-finite input")
    idx = int(grid_index_array(np.array([abs(u)]))[0])
    if idx == 0:
        return GridCode(0, 0)
    return GridCode(1 if u > 0 else -1, idx)


def decode_grid(code: GridCode) -> float:
    """Exact grid value for a signed code."""
    return float(code.sign) * float(GRID_MAGNITUDES[code.index])


def encode_scale_ceiling(s_star: float, mantissa_bits: int) -> ScaleCode:
    """Smallest representable E8Mk scale >= s_star, as a code."""
    s_star = float(s_star)
    if not math.isfinite(s_star) or s_star <= 0:
        raise ValueError("scale must be positive and finite")
    _, e, k = ceil_scale_array(np.array([s_star]), mantissa_bits)
    return ScaleCode(int(e[0]), int(k[0]), mantissa_bits)
