"""Block quantizer: Q (coded scale), Q* (ideal scale), deadzone, QDQ.

Blocks run along the innermost axis; the last block of a row may be short
and behaves exactly like a full block of its own length. All arithmetic is
float64; narrower inputs are widened on entry.

All-zero blocks have no codable scale. They quantize to exact zeros under
a sentinel unit scale, and every error component on them is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import (
    E2M1,
    ElementGrid,
    GRID_MAGNITUDES,
    Q_MAX,
    Q_MIN,
    ScaleCode,
    ceil_scale_array,
    grid_index_array,
)

__all__ = [
    "BlockQuantConfig",
    "BlockQuant",
    "QuantizedTensor",
    "BlockView",
    "block_view",
    "ideal_scale",
    "quantize_block",
    "quantize_block_ideal",
    "deadzone_mask",
    "quantize_tensor",
    "qdq_tensor",
]


@dataclass(frozen=True)
class BlockQuantConfig:
    """Quantizer settings shared by every call."""

    block_size: int = 32
    scale_mantissa_bits: int = 0
    grid: ElementGrid = E2M1

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if not 0 <= self.scale_mantissa_bits <= 8:
            raise ValueError("scale_mantissa_bits must be in [0, 8]")


@dataclass(frozen=True)
class BlockQuant:
    """One quantized block. ``scale`` is None for the ideal-scale quantizer,
    whose scale is the uncoded real s_star; ``scale_value`` is always the
    factor used for dequantization."""

    element_codes: np.ndarray          # int8, sign * magnitude index
    scale: ScaleCode | None
    scale_value: float
    s_star: float
    m_b: float

    def dequantize(self) -> np.ndarray:
        idx = np.abs(self.element_codes).astype(np.int64)
        return self.scale_value * np.copysign(
            GRID_MAGNITUDES[idx], self.element_codes.astype(np.float64))


@dataclass
class QuantizedTensor:
    """Packed per-block codes and scales for a whole tensor."""

    shape: tuple[int, ...]
    config: BlockQuantConfig
    element_codes: np.ndarray          # int8, (n_blocks, B), padded with 0
    scale_exponents: np.ndarray        # int64, (n_blocks,)
    scale_mantissas: np.ndarray        # int64, (n_blocks,)
    s_star: np.ndarray                 # float64, (n_blocks,)
    m_b: np.ndarray                    # float64, (n_blocks,)
    mbs_mantissas: np.ndarray | None = None   # int64, (n_macros,), optional

    @property
    def n_blocks(self) -> int:
        return self.element_codes.shape[0]

    def block(self, i: int) -> BlockQuant:
        code = ScaleCode(int(self.scale_exponents[i]), int(self.scale_mantissas[i]),
                         self.config.scale_mantissa_bits)
        length = _row_block_length(self.shape, self.config.block_size, i)
        return BlockQuant(self.element_codes[i, :length], code, code.decode(),
                          float(self.s_star[i]), float(self.m_b[i]))

    def dequantize(self) -> np.ndarray:
        scale = np.ldexp(1.0 + self.scale_mantissas /
                         (1 << self.config.scale_mantissa_bits),
                         self.scale_exponents)
        idx = np.abs(self.element_codes).astype(np.int64)
        vals = scale[:, None] * np.copysign(
            GRID_MAGNITUDES[idx], self.element_codes.astype(np.float64))
        return _unblock(vals, self.shape, self.config.block_size)


# --- block layout ------------------------------------------------------------


def _blocks_per_row(n: int, B: int) -> int:
    return (n + B - 1) // B


def _row_block_length(shape: tuple[int, ...], B: int, i: int) -> int:
    n = shape[-1] if shape else 1
    per_row = _blocks_per_row(n, B)
    tail = n - (per_row - 1) * B
    return tail if (i % per_row) == per_row - 1 else B


def _unblock(blocks: np.ndarray, shape: tuple[int, ...], B: int) -> np.ndarray:
    n = shape[-1] if shape else 1
    per_row = _blocks_per_row(n, B)
    rows = blocks.reshape(-1, per_row * B)[:, :n]
    return rows.reshape(shape)


@dataclass
class BlockView:
    """Padded (n_blocks, B) working view of a tensor plus everything the
    decomposition needs. Padding is zeros and is sliced away by restore()."""

    shape: tuple[int, ...]
    block_size: int
    blocks: np.ndarray                 # float64, (n_blocks, B)
    valid: np.ndarray                  # bool, (n_blocks, B)
    m_b: np.ndarray                    # (n_blocks,)
    s_star: np.ndarray                 # (n_blocks,), 0 on all-zero blocks
    nonzero: np.ndarray                # bool, (n_blocks,)

    def restore(self, blocked: np.ndarray) -> np.ndarray:
        return _unblock(blocked, self.shape, self.block_size)


def block_view(x: np.ndarray, config: BlockQuantConfig) -> BlockView:
    """Split along the innermost axis, zero-padding short tail blocks."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    B = config.block_size
    shape = x.shape
    n = shape[-1] if shape else 1
    per_row = _blocks_per_row(n, B)
    pad = per_row * B - n

    rows = x.reshape(-1, n)
    if pad:
        rows = np.pad(rows, ((0, 0), (0, pad)))
    blocks = rows.reshape(-1, B)

    valid = np.ones_like(blocks, dtype=bool)
    if pad:
        valid = valid.reshape(-1, per_row * B)
        valid[:, n:] = False
        valid = valid.reshape(-1, B)

    m_b = np.abs(blocks).max(axis=1)
    s_star = m_b / Q_MAX
    return BlockView(shape, B, blocks, valid, m_b, s_star, m_b > 0)


# --- core kernels (array in, array out) --------------------------------------


def _scaled_round(blocks: np.ndarray, scale: np.ndarray, nonzero: np.ndarray
                  ) -> np.ndarray:
    """scale * grid_round(blocks / scale); all-zero blocks stay zero."""
    safe = np.where(nonzero, scale, 1.0)[:, None]
    u = blocks / safe
    idx = grid_index_array(np.abs(u))
    vals = np.copysign(GRID_MAGNITUDES[idx], u) * safe
    return np.where(nonzero[:, None], vals, 0.0)


def qdq_views(view: BlockView, config: BlockQuantConfig
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(qdq, qstar, dead, s_decoded) on the blocked view.

    dead is the ideal-scale deadzone |x| < m_b/24, strict, False on
    all-zero blocks. qstar uses s_star; qdq uses the ceiling-coded scale.
    """
    s_dec, _, _ = ceil_scale_array(view.s_star, config.scale_mantissa_bits)
    qdq = _scaled_round(view.blocks, s_dec, view.nonzero)
    qstar = _scaled_round(view.blocks, view.s_star, view.nonzero)
    thr = (view.m_b / 24.0)[:, None]
    dead = (np.abs(view.blocks) < thr) & view.nonzero[:, None]
    return qdq, qstar, dead, s_dec


# --- public operations -------------------------------------------------------


def ideal_scale(block: np.ndarray) -> float:
    """max|x| / q_max; 0 for an all-zero block."""
    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise ValueError("empty block")
    if not np.isfinite(block).all():
        raise ValueError("non-finite input")
    return float(np.abs(block).max() / Q_MAX)


def quantize_block(block: np.ndarray, config: BlockQuantConfig) -> BlockQuant:
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 1 or not 1 <= block.size <= config.block_size:
        raise ValueError("block must be 1-D with 1..block_size elements")
    s_star = ideal_scale(block)
    m_b = s_star * Q_MAX
    if s_star == 0.0:
        code = ScaleCode(0, 0, config.scale_mantissa_bits)
        return BlockQuant(np.zeros(block.size, dtype=np.int8), code,
                          code.decode(), 0.0, 0.0)
    _, e, k = ceil_scale_array(np.array([s_star]), config.scale_mantissa_bits)
    code = ScaleCode(int(e[0]), int(k[0]), config.scale_mantissa_bits)
    s = code.decode()
    u = block / s
    idx = grid_index_array(np.abs(u))
    codes = (np.sign(u) * idx).astype(np.int8)
    return BlockQuant(codes, code, s, s_star, m_b)


def quantize_block_ideal(block: np.ndarray, config: BlockQuantConfig) -> BlockQuant:
    """Q*: same rounding, scale = s_star exactly (left uncoded)."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 1 or not 1 <= block.size <= config.block_size:
        raise ValueError("block must be 1-D with 1..block_size elements")
    s_star = ideal_scale(block)
    if s_star == 0.0:
        return BlockQuant(np.zeros(block.size, dtype=np.int8), None, 1.0, 0.0, 0.0)
    u = block / s_star
    idx = grid_index_array(np.abs(u))
    codes = (np.sign(u) * idx).astype(np.int8)
    return BlockQuant(codes, None, s_star, s_star, s_star * Q_MAX)


def deadzone_mask(block: np.ndarray) -> np.ndarray:
    """|x_i| < m_b / 24, strict; all False when the block is all zero."""
    block = np.asarray(block, dtype=np.float64)
    if not np.isfinite(block).all():
        raise ValueError("non-finite input")
    m_b = np.abs(block).max()
    if m_b == 0.0:
        return np.zeros(block.shape, dtype=bool)
    return np.abs(block) < m_b / 24.0


def quantize_tensor(x: np.ndarray, config: BlockQuantConfig) -> QuantizedTensor:
    view = block_view(x, config)
    s_dec, e, k = ceil_scale_array(view.s_star, config.scale_mantissa_bits)
    safe = np.where(view.nonzero, s_dec, 1.0)[:, None]
    u = view.blocks / safe
    idx = grid_index_array(np.abs(u))
    codes = (np.sign(u) * idx).astype(np.int8)
    codes[~view.nonzero, :] = 0
    codes[~view.valid] = 0
    return QuantizedTensor(view.shape, config, codes, e, k, view.s_star, view.m_b)


def qdq_tensor(x: np.ndarray, config: BlockQuantConfig) -> np.ndarray:
    """Quantize-dequantize emulation; deterministic and idempotent."""
    view = block_view(x, config)
    qdq, _, _, _ = qdq_views(view, config)
    return view.restore(qdq)
