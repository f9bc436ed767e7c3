"""Quantization corrections: macro-block scaling, outlier fallback, and the
adaptive noise schedule.

Macro-block scaling (MBS) stores one extra 8-bit mantissa per macro block
(default 128 elements, four sub-blocks) and applies it as
prescale -> quantize -> postscale:

    x_hat = Q((1 + m) x) / (1 + m),   m = k / 256

Two selection modes for k:

- "exhaustive": argmin over all 256 codes of the macro reconstruction MSE,
  ties to the smallest k. Minimizes total error; does not specifically
  drive the scale ratio to 1.
- "closed_form": k = floor((2^delta_M - 1) * 256) from the macro max.
  Floor, not nearest: rounding up would push the prescaled macro max past
  the next power of two and double the ceiling scale. This mode pins the
  macro-max block's scale ratio to within one mantissa step of 1.

Outlier fallback (OF) runs the quantizer twice and blends the residual
pass: x_hat = Q(x) + alpha * Q(x - Q(x)). Deadzone values killed by pass 1
are usually representable in pass 2's finer scale.

AQN adds seeded Gaussian weight noise at sigma * multiplier * rms(tensor),
decaying sigma exponentially over stages.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .quantize import BlockQuantConfig, block_view, qdq_views

__all__ = [
    "MbsConfig",
    "OfConfig",
    "AqnSchedule",
    "OfResult",
    "mbs_select_mantissa",
    "mbs_qdq",
    "of_qdq",
    "dz_recovery_rate",
    "aqn_schedule",
    "aqn_apply",
]

MBS_LEVELS = 256
_MBS_MODES = ("exhaustive", "closed_form")


@dataclass(frozen=True)
class MbsConfig:
    macro_block_size: int = 128
    mantissa_levels: int = MBS_LEVELS

    def __post_init__(self) -> None:
        if self.macro_block_size < 1:
            raise ValueError("macro_block_size must be >= 1")
        if self.mantissa_levels != MBS_LEVELS:
            raise ValueError("mantissa_levels is fixed at 256 (one byte)")

    def validate_against(self, quant: BlockQuantConfig) -> None:
        if self.macro_block_size % quant.block_size:
            raise ValueError("macro_block_size must be a multiple of block_size")


@dataclass(frozen=True)
class OfConfig:
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass(frozen=True)
class AqnSchedule:
    """Exponential decay sigma_start -> sigma_end over num_stages stages."""

    sigma_start: float = 0.01
    sigma_end: float = 0.001
    num_stages: int = 10
    multipliers: dict[str, float] = field(
        default_factory=lambda: {"post_attention_layernorm": 1.414})

    def __post_init__(self) -> None:
        if not (self.sigma_start >= self.sigma_end > 0):
            raise ValueError("need sigma_start >= sigma_end > 0")
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")

    def stage_sigmas(self) -> np.ndarray:
        return aqn_schedule(self.sigma_start, self.sigma_end, self.num_stages)

    def multiplier_for(self, name: str) -> float:
        for pattern, mult in self.multipliers.items():
            if pattern in name:
                return mult
        return 1.0


# --- macro-block scaling -------------------------------------------------------


def _macro_view(x: np.ndarray, macro: int) -> tuple[np.ndarray, np.ndarray, tuple]:
    """(macros, valid, shape): innermost-axis macro blocks, zero padded."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    shape = x.shape
    n = shape[-1] if shape else 1
    per_row = (n + macro - 1) // macro
    pad = per_row * macro - n
    rows = x.reshape(-1, n)
    if pad:
        rows = np.pad(rows, ((0, 0), (0, pad)))
    macros = rows.reshape(-1, macro)
    valid = np.ones_like(macros, dtype=bool)
    if pad:
        valid = valid.reshape(-1, per_row * macro)
        valid[:, n:] = False
        valid = valid.reshape(-1, macro)
    return macros, valid, shape


def _unmacro(macros: np.ndarray, shape: tuple, macro: int) -> np.ndarray:
    n = shape[-1] if shape else 1
    per_row = (n + macro - 1) // macro
    return macros.reshape(-1, per_row * macro)[:, :n].reshape(shape)


def _qdq_blocked(flat: np.ndarray, quant: BlockQuantConfig) -> np.ndarray:
    """QDQ rows whose length is already a multiple of block_size."""
    b = quant.block_size
    blocks = flat.reshape(-1, b)
    m_b = np.abs(blocks).max(axis=1)
    view_like = _FastView(blocks, m_b)
    qdq, _, _, _ = qdq_views(view_like, quant)
    return qdq.reshape(flat.shape)


class _FastView:
    """Minimal stand-in for BlockView when padding is already handled."""

    __slots__ = ("blocks", "m_b", "s_star", "nonzero", "valid")

    def __init__(self, blocks: np.ndarray, m_b: np.ndarray) -> None:
        self.blocks = blocks
        self.m_b = m_b
        self.s_star = m_b / 6.0
        self.nonzero = m_b > 0
        self.valid = np.ones_like(blocks, dtype=bool)


def _closed_form_codes(macros: np.ndarray) -> np.ndarray:
    """k = floor((2^delta_M - 1) * 256) per macro, 0 for all-zero macros."""
    m_m = np.abs(macros).max(axis=1)
    f, _ = np.frexp(m_m / 6.0)
    gamma = np.where(f == 0.5, 1.0, 1.0 / np.where(f > 0, f, 1.0))
    k = np.floor((gamma - 1.0) * MBS_LEVELS).astype(np.int64)
    k = np.clip(k, 0, MBS_LEVELS - 1)
    return np.where(m_m > 0, k, 0)


def _exhaustive_codes(macros: np.ndarray, quant: BlockQuantConfig,
                      chunk_elems: int = 8_000_000) -> np.ndarray:
    """argmin_k of per-macro reconstruction MSE over all 256 prescales.

    Vectorized over (chunk, 256, macro); argmin returns the first minimum,
    which is the smallest k."""
    n_macros, macro = macros.shape
    pres = 1.0 + np.arange(MBS_LEVELS) / MBS_LEVELS
    codes = np.empty(n_macros, dtype=np.int64)
    step = max(1, chunk_elems // (MBS_LEVELS * macro))
    for lo in range(0, n_macros, step):
        seg = macros[lo:lo + step]                       # (c, macro)
        scaled = seg[:, None, :] * pres[None, :, None]   # (c, 256, macro)
        flat = scaled.reshape(-1, macro)
        y = _qdq_blocked(flat, quant).reshape(scaled.shape) / pres[None, :, None]
        err = ((y - seg[:, None, :]) ** 2).sum(axis=2)
        codes[lo:lo + step] = err.argmin(axis=1)
    return codes


def mbs_select_mantissa(macro_block: np.ndarray, mbs: MbsConfig,
                        quant: BlockQuantConfig, mode: str = "exhaustive") -> int:
    """Mantissa code for one macro block."""
    if mode not in _MBS_MODES:
        raise ValueError(f"unknown MBS mode: {mode}")
    macro_block = np.asarray(macro_block, dtype=np.float64)
    if macro_block.ndim != 1 or not 1 <= macro_block.size <= mbs.macro_block_size:
        raise ValueError("macro block must be 1-D with 1..macro_block_size elements")
    if not np.isfinite(macro_block).all():
        raise ValueError("non-finite input")
    mbs.validate_against(quant)
    if not macro_block.any():
        return 0
    padded = macro_block
    b = quant.block_size
    if padded.size % b:
        padded = np.pad(padded, (0, b - padded.size % b))
    if mode == "closed_form":
        return int(_closed_form_codes(padded[None, :])[0])
    return int(_exhaustive_codes(padded[None, :], quant)[0])


def mbs_qdq(x: np.ndarray, mbs: MbsConfig, quant: BlockQuantConfig,
            mode: str = "exhaustive") -> tuple[np.ndarray, np.ndarray]:
    """MBS-corrected QDQ. Returns (x_hat, mantissa_codes); code count is
    ceil(n / macro) per innermost row."""
    if mode not in _MBS_MODES:
        raise ValueError(f"unknown MBS mode: {mode}")
    mbs.validate_against(quant)
    macros, valid, shape = _macro_view(x, mbs.macro_block_size)
    if mode == "closed_form":
        codes = _closed_form_codes(macros)
    else:
        codes = _exhaustive_codes(macros, quant)
    pres = (1.0 + codes / MBS_LEVELS)[:, None]
    y = _qdq_blocked(macros * pres, quant) / pres
    y[~valid] = 0.0
    return _unmacro(y, shape, mbs.macro_block_size), codes


# --- outlier fallback ----------------------------------------------------------


@dataclass
class OfResult:
    x_hat: np.ndarray
    pass1: np.ndarray
    pass2: np.ndarray
    alpha: float


def of_qdq(x: np.ndarray, of: OfConfig, quant: BlockQuantConfig,
           with_mbs: bool = False, mbs: MbsConfig | None = None,
           mbs_mode: str = "exhaustive") -> OfResult:
    """Two-pass residual QDQ; the same quantizer runs on both passes."""
    x = np.asarray(x, dtype=np.float64)

    def q(t: np.ndarray) -> np.ndarray:
        if with_mbs:
            return mbs_qdq(t, mbs or MbsConfig(), quant, mbs_mode)[0]
        view = block_view(t, quant)
        qdq, _, _, _ = qdq_views(view, quant)
        return view.restore(qdq)

    pass1 = q(x)
    pass2 = q(x - pass1)
    return OfResult(pass1 + of.alpha * pass2, pass1, pass2, of.alpha)


def dz_recovery_rate(x: np.ndarray, of_result: OfResult,
                     quant: BlockQuantConfig) -> dict[str, float]:
    """Deadzone occupancy before and after OF, both as fractions of all
    elements: before counts ideal-deadzone entries, after counts those of
    them whose reconstruction is still exactly zero."""
    view = block_view(x, quant)
    _, _, dead, _ = qdq_views(view, quant)
    dead_flat = view.restore(dead.astype(np.float64)) > 0.5
    recon = np.asarray(of_result.x_hat, dtype=np.float64)
    n = dead_flat.size
    before = float(dead_flat.sum()) / n
    after = float((dead_flat & (recon == 0.0)).sum()) / n
    return {"dz_rate_before": before, "dz_rate_after": after}


# --- adaptive quantization noise -------------------------------------------------


def aqn_schedule(sigma_start: float, sigma_end: float, num_stages: int) -> np.ndarray:
    """Stage magnitudes sigma_start * (sigma_end/sigma_start)^(k/(K-1))."""
    if not (sigma_start >= sigma_end > 0):
        raise ValueError("need sigma_start >= sigma_end > 0")
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    if num_stages == 1:
        return np.array([float(sigma_start)])
    k = np.arange(num_stages)
    return sigma_start * (sigma_end / sigma_start) ** (k / (num_stages - 1))


def _noise_rng(seed: int, name: str) -> np.random.Generator:
    # keyed counter-based stream: independent of call order and worker split
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def aqn_apply(x: np.ndarray, sigma: float, seed: int,
              multiplier: float = 1.0, name: str = "") -> np.ndarray:
    """x + N(0, (sigma * multiplier * rms(x))^2), elementwise, reproducible
    per (seed, name)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0.0:
        return x.copy()
    rms = float(np.sqrt(np.mean(x * x)))
    noise = _noise_rng(seed, name).standard_normal(x.shape)
    return x + (sigma * multiplier * rms) * noise
