"""Quantization primitives shared by QAT and integer-only inference.

Every rounding step in the package goes through :func:`round_half_away` so the
fake-quant path and the integer path agree bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

# below this width the observed range is treated as a constant tensor
DEGENERATE_RANGE = 1e-12


def round_half_away(x):
    """Round to nearest integer, ties away from zero (works on scalars and arrays)."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    whole = np.floor(mag)
    rounded = whole + (mag - whole >= 0.5)
    return np.copysign(rounded, x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8

    def __post_init__(self):
        if not 2 <= self.bits <= 32:
            raise ValueError(f"bit width {self.bits} outside [2, 32]")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not self.q_min <= self.zero_point <= self.q_max:
            raise ValueError(
                f"zero point {self.zero_point} outside [{self.q_min}, {self.q_max}]"
            )
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def q_min(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def q_max(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def real_min(self) -> float:
        return self.scale * (self.q_min - self.zero_point)

    @property
    def real_max(self) -> float:
        return self.scale * (self.q_max - self.zero_point)


@dataclass(frozen=True)
class FixedPointFormat:
    """(a, b) format: ``frac_bits`` fractional bits out of ``total_bits``."""

    frac_bits: int = 6
    total_bits: int = 8

    def __post_init__(self):
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(
                f"need 0 <= frac_bits < total_bits, got ({self.frac_bits}, {self.total_bits})"
            )


@dataclass(frozen=True)
class ObserverState:
    alpha: float = 0.0
    beta: float = 0.0
    momentum: float = 0.99
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")


@dataclass(frozen=True)
class RequantMultiplier:
    """Real multiplier M approximated as ``m0 * 2**-shift``."""

    multiplier: float
    m0: int
    shift: int

    @property
    def approx(self) -> float:
        return math.ldexp(self.m0, -self.shift)


def _maybe_scalar(arr: np.ndarray, like):
    if np.ndim(like) == 0:
        return arr.item()
    return arr


def affine_params_from_range(lo: float, hi: float, bits: int = 8) -> QuantParams:
    """Asymmetric params covering ``[lo, hi]`` widened to include zero."""
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    if hi - lo < DEGENERATE_RANGE:
        return QuantParams(1.0, 0, bits)
    q_min = -(1 << (bits - 1))
    q_max = (1 << (bits - 1)) - 1
    scale = (hi - lo) / ((1 << bits) - 1)
    zero_point = int(round_half_away(q_min - lo / scale))
    zero_point = min(max(zero_point, q_min), q_max)
    return QuantParams(scale, zero_point, bits)


def compute_affine_params(obs: ObserverState, bits: int = 8) -> QuantParams:
    if not obs.initialized:
        raise ValueError("observer has not seen any data")
    if not 2 <= bits <= 16:
        raise ValueError(f"bit width {bits} outside [2, 16]")
    return affine_params_from_range(obs.alpha, obs.beta, bits)


def symmetric_params(max_abs: float, bits: int = 8) -> QuantParams:
    """Zero-point-free params with ``max_abs`` mapped to ``q_max``."""
    max_abs = float(max_abs)
    if max_abs < DEGENERATE_RANGE:
        return QuantParams(1.0, 0, bits)
    return QuantParams(max_abs / ((1 << (bits - 1)) - 1), 0, bits)


def fixed_point_params(fmt: FixedPointFormat) -> QuantParams:
    return QuantParams(math.ldexp(1.0, -fmt.frac_bits), 0, fmt.total_bits)


def quantize(x, qp: QuantParams):
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    q = np.clip(q, qp.q_min, qp.q_max).astype(np.int64)
    return _maybe_scalar(q, x)


def dequantize(x_q, qp: QuantParams):
    x = qp.scale * (np.asarray(x_q, dtype=np.int64) - qp.zero_point).astype(np.float64)
    return _maybe_scalar(x, x_q)


def update_observer(obs: ObserverState, batch) -> ObserverState:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("cannot observe an empty batch")
    lo, hi = float(batch.min()), float(batch.max())
    if not obs.initialized:
        return ObserverState(lo, hi, obs.momentum, True)
    m = obs.momentum
    return ObserverState(
        m * obs.alpha + (1.0 - m) * lo,
        m * obs.beta + (1.0 - m) * hi,
        m,
        True,
    )


def quantize_bias(bias, s_x: float, s_w: float):
    """Bias on the accumulator grid ``s_x * s_w`` as int32 values (no zero point)."""
    if s_x <= 0 or s_w <= 0:
        raise ValueError("input and weight scales must be positive")
    q = round_half_away(np.asarray(bias, dtype=np.float64) / (s_x * s_w))
    if np.any(q < INT32_MIN) or np.any(q > INT32_MAX):
        raise OverflowError("quantized bias exceeds the signed 32-bit range")
    return _maybe_scalar(q.astype(np.int64), bias)


def approximate_multiplier(multiplier: float) -> RequantMultiplier:
    """Find ``m0`` in ``[2**30, 2**31)`` and ``shift`` with ``m0 * 2**-shift ~= multiplier``."""
    multiplier = float(multiplier)
    if not multiplier > 0 or not math.isfinite(multiplier):
        raise ValueError(f"multiplier must be positive and finite, got {multiplier}")
    if multiplier >= 2.0**31:
        raise ValueError(f"multiplier {multiplier} too large for a 31-bit mantissa")
    mant, exp = math.frexp(multiplier)  # multiplier = mant * 2**exp, mant in [0.5, 1)
    m0 = int(round_half_away(math.ldexp(mant, 31)))
    shift = 31 - exp
    if m0 == 1 << 31:
        m0 >>= 1
        shift -= 1
    if not 0 <= shift <= 62:
        raise ValueError(f"multiplier {multiplier} needs shift {shift} outside [0, 62]")
    return RequantMultiplier(multiplier, m0, shift)
