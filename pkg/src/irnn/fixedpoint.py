"""Q-format fixed-point scalars and shift/mask rounding.

Requantization multipliers (ratios of quantization scales) are stored as
(raw, fraction_bits) integer pairs.  Applying one to an integer accumulator
is a 64-bit multiply followed by a rounded right shift, so the inference
path never touches floating point.

Rounding is round-to-nearest with ties away from zero, computed on
magnitudes with the sign re-applied afterwards (right-shifting a negative
integer is implementation-defined behaviour we never rely on).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FixedPointScalar",
    "FxOverflow",
    "REQUANT_FRACTION_BITS",
    "format_table",
    "fx_apply",
    "requant_multiplier",
    "round_half_away",
    "rounded_div",
    "rounded_shift",
    "to_fixed",
    "to_float",
]

# Default fraction bits for requantization multipliers; chosen so that an
# int32-range raw mantissa times a 16-bit-operand accumulator stays well
# inside int64.
REQUANT_FRACTION_BITS = 30

_INT64_MAX = 2**63 - 1


class FxOverflow(OverflowError):
    """A fixed-point mantissa or product does not fit its integer width."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero.

    Accepts scalars or arrays; returns a Python int for scalar input and an
    int64 array otherwise.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.where(arr >= 0.0, np.floor(arr + 0.5), np.ceil(arr - 0.5))
    if np.ndim(x) == 0:
        return int(out)
    return out.astype(np.int64)


def rounded_shift(acc, f: int):
    """acc / 2^f rounded half away from zero, as integer shifts and a mask.

    The fraction is inspected via bit f-1 of the magnitude: a set bit means
    the dropped part is >= half, so the magnitude rounds up.
    """
    if f < 0:
        raise ValueError("fraction_bits must be >= 0")
    if f == 0:
        return acc
    if f > 63:
        # The entire product is fractional; int64 magnitudes stay below
        # 2^(f-1), so everything rounds to zero.
        return acc * 0
    if isinstance(acc, np.ndarray):
        mag = np.abs(acc.astype(np.int64))
        out = (mag >> f) + ((mag >> (f - 1)) & 0x1)
        return np.where(acc >= 0, out, -out)
    mag = abs(int(acc))
    out = (mag >> f) + ((mag >> (f - 1)) & 0x1)
    return out if acc >= 0 else -out


def rounded_div(num, den: int):
    """num / den rounded half away from zero; den must be a positive int."""
    if den <= 0:
        raise ValueError("divisor must be positive")
    if isinstance(num, np.ndarray):
        num = num.astype(np.int64)
        mag = (np.abs(num) + den // 2) // den
        return np.where(num >= 0, mag, -mag)
    num = int(num)
    mag = (abs(num) + den // 2) // den
    return mag if num >= 0 else -mag


@dataclass(frozen=True)
class FixedPointScalar:
    """A real number stored as raw * 2^-fraction_bits (Q-format)."""

    raw: int
    fraction_bits: int
    integral_bits: int
    signed: bool = True

    def __post_init__(self):
        if self.fraction_bits < 0:
            raise ValueError("fraction_bits must be >= 0")
        if self.integral_bits < 0:
            raise ValueError("integral_bits must be >= 0")
        total = self.integral_bits + self.fraction_bits
        if self.signed:
            lo, hi = -(2**total), 2**total - 1
        else:
            lo, hi = 0, 2**total - 1
        if not lo <= self.raw <= hi:
            raise FxOverflow(
                f"raw {self.raw} does not fit Q{self.integral_bits}."
                f"{self.fraction_bits} ({'signed' if self.signed else 'unsigned'})"
            )

    @property
    def value(self) -> float:
        return self.raw * 2.0**-self.fraction_bits

    @property
    def resolution(self) -> float:
        return 2.0**-self.fraction_bits

    @property
    def range(self) -> tuple[float, float]:
        """Representable (low, high) of this Q-format."""
        hi = 2.0**self.integral_bits - 2.0**-self.fraction_bits
        lo = -(2.0**self.integral_bits) if self.signed else 0.0
        return (lo, hi)


def to_fixed(m: float, f: int, signed: bool = True) -> FixedPointScalar:
    """Convert a real multiplier to fixed point with f fraction bits."""
    if f < 0:
        raise ValueError("fraction_bits must be >= 0")
    if not math.isfinite(m):
        raise ValueError("multiplier must be finite")
    v = m * 2.0**f
    if not math.isfinite(v) or abs(v) > _INT64_MAX:
        raise FxOverflow(f"mantissa for {m!r} overflows int64 at f={f}")
    raw = round_half_away(v)
    if not signed and raw < 0:
        raise FxOverflow("negative multiplier in unsigned format")
    integral_bits = max(0, int(abs(raw)).bit_length() - f)
    return FixedPointScalar(raw, f, integral_bits, signed)


def to_float(fx: FixedPointScalar) -> float:
    return fx.value


def requant_multiplier(m: float) -> FixedPointScalar:
    """Fixed-point form of a nonnegative requantization multiplier.

    Normalizes m = m_hat * 2^e with m_hat in (0.5, 1] and folds the exponent
    into fraction_bits, so the mantissa always carries REQUANT_FRACTION_BITS
    significant fraction bits regardless of the multiplier's magnitude.
    """
    if m < 0:
        raise ValueError("requantization multipliers are ratios of positive scales")
    if m == 0.0:
        return FixedPointScalar(0, REQUANT_FRACTION_BITS, 0)
    e = math.ceil(math.log2(m))
    # log2 can land on the wrong side of a power of two; nudge until
    # m * 2^-e is in (0.5, 1].
    while m * 2.0**-e > 1.0:
        e += 1
    while m * 2.0**-e <= 0.5:
        e -= 1
    f = REQUANT_FRACTION_BITS - e
    if f < 0:
        raise FxOverflow(f"multiplier {m!r} too large for fixed-point form")
    f = min(f, 62)
    return to_fixed(m, f)


def fx_apply(fx: FixedPointScalar, q, zero_out: int = 0):
    """round(to_float(fx) * q) + zero_out, in integer arithmetic.

    q may be a Python int or an integer ndarray; the result has the same
    kind.  The product raw * q must fit int64.
    """
    raw = fx.raw
    if isinstance(q, np.ndarray):
        q64 = q.astype(np.int64)
        limit = int(np.abs(q64).max(initial=0))
        if abs(raw) * limit > _INT64_MAX:
            raise FxOverflow("fx_apply product overflows int64")
        out = rounded_shift(raw * q64, fx.fraction_bits)
        if zero_out:
            out = out + zero_out
        return out
    q = int(q)
    if abs(raw * q) > _INT64_MAX:
        raise FxOverflow("fx_apply product overflows int64")
    return int(rounded_shift(raw * q, fx.fraction_bits)) + zero_out


def format_table(bitwidth: int = 8) -> list[dict]:
    """Representable ranges of b-bit mantissas over power-of-two scalings.

    One row per scaling factor 2^1 down to 2^-(bitwidth), giving the value
    resolution and the (low, high) representable values for signed and
    unsigned mantissas.
    """
    if bitwidth < 2:
        raise ValueError("bitwidth must be >= 2")
    rows = []
    for e in range(1, -(bitwidth + 1), -1):
        s = 2.0**e
        signed_lo = -(2 ** (bitwidth - 1)) * s
        signed_hi = (2 ** (bitwidth - 1) - 1) * s
        unsigned_hi = (2**bitwidth - 1) * s
        rows.append(
            {
                "scaling": s,
                "precision": s,
                "signed": (signed_lo, signed_hi),
                "unsigned": (0.0, unsigned_hi),
            }
        )
    return rows
