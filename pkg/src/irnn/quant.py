"""Affine quantization: parameters, tensors, and integer-only arithmetic.

Real values x in [min, max] map to unsigned b-bit codes via

    q = round(x / S) + Z        S = (max - min) / (2^b - 1)
    x ~ S * (q - Z)             Z = round(-min / S)

Zero is always representable (code Z exactly).  The arithmetic primitives
(qmul, qadd_same, qadd_diff) combine codes from different parameter sets
using fixed-point multipliers so the hot path is integer-only; each op
performs a single final rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import (
    REQUANT_FRACTION_BITS,
    FixedPointScalar,
    FxOverflow,
    fx_apply,
    requant_multiplier,
    round_half_away,
    rounded_shift,
    to_fixed,
)

__all__ = [
    "Observer",
    "QTensor",
    "QuantParams",
    "STORAGE_DTYPES",
    "dequantize",
    "derive_params",
    "observe",
    "qadd_diff",
    "qadd_same",
    "qlinear",
    "qmul",
    "quantize",
    "quantize_tensor",
    "requantize",
]

STORAGE_DTYPES = {8: np.uint8, 16: np.uint16, 32: np.uint32}

_INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class QuantParams:
    """Clipping range plus derived scale/zero-point for one tensor."""

    min: float
    max: float
    bitwidth: int
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.bitwidth not in STORAGE_DTYPES:
            raise ValueError(f"unsupported bitwidth {self.bitwidth}")
        if not (np.isfinite(self.min) and np.isfinite(self.max)):
            raise ValueError("range bounds must be finite")
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError("zero_point outside storage range")

    @property
    def qmin(self) -> int:
        return 0

    @property
    def qmax(self) -> int:
        return 2**self.bitwidth - 1

    @property
    def dtype(self):
        return STORAGE_DTYPES[self.bitwidth]


def derive_params(rmin: float, rmax: float, bitwidth: int) -> QuantParams:
    """Compute scale and zero-point for the range [rmin, rmax]."""
    if bitwidth not in STORAGE_DTYPES:
        raise ValueError(f"unsupported bitwidth {bitwidth}")
    if not (np.isfinite(rmin) and np.isfinite(rmax)):
        raise ValueError("range bounds must be finite")
    if rmin > rmax:
        raise ValueError("degenerate-range: min exceeds max")
    if rmin > 0.0 or rmax < 0.0:
        raise ValueError("zero-excluded: range must contain 0")
    if rmin == rmax:
        # Only reachable for min == max == 0 (dead channel); pick the
        # identity grid so downstream arithmetic stays well-defined.
        return QuantParams(0.0, 0.0, bitwidth, 1.0, 0)
    levels = 2**bitwidth - 1
    scale = (rmax - rmin) / levels
    zero_point = int(np.clip(round_half_away(-rmin / scale), 0, levels))
    return QuantParams(float(rmin), float(rmax), bitwidth, scale, zero_point)


def quantize(x, p: QuantParams):
    """Map real values to storage codes; clips to [p.min, p.max] first."""
    arr = np.clip(np.asarray(x, dtype=np.float64), p.min, p.max)
    q = round_half_away(arr / p.scale)
    q = np.clip(np.asarray(q) + p.zero_point, p.qmin, p.qmax)
    if np.ndim(x) == 0:
        return int(q)
    return q.astype(p.dtype)


def dequantize(q, p: QuantParams):
    """Real value represented by codes q."""
    if np.ndim(q) == 0:
        return p.scale * (int(q) - p.zero_point)
    return p.scale * (np.asarray(q).astype(np.float64) - p.zero_point)


def _saturate(q, p: QuantParams):
    out = np.clip(q, p.qmin, p.qmax)
    if np.ndim(q) == 0 and not isinstance(q, np.ndarray):
        return int(out)
    return out.astype(p.dtype)


def _centered(q, p: QuantParams):
    return np.asarray(q).astype(np.int64) - p.zero_point


def qmul(qa, pa: QuantParams, qb, pb: QuantParams, pc: QuantParams):
    """Elementwise product of two quantized values, requantized into pc.

    Integer form of S_a(q_a - Z_a) * S_b(q_b - Z_b) = S_c(q_c - Z_c): the
    centered cross terms accumulate exactly, then one fixed-point multiply
    by S_a S_b / S_c rounds into the output grid.
    """
    scalar = np.ndim(qa) == 0 and np.ndim(qb) == 0
    term = _centered(qa, pa) * _centered(qb, pb)
    fx = requant_multiplier(pa.scale * pb.scale / pc.scale)
    out = fx_apply(fx, term, pc.zero_point)
    out = np.clip(out, pc.qmin, pc.qmax)
    if scalar:
        return int(out)
    return out.astype(pc.dtype)


def qadd_same(qa, qb, p_in: QuantParams, p_out: QuantParams):
    """Sum of two values sharing one parameter set, requantized into p_out."""
    scalar = np.ndim(qa) == 0 and np.ndim(qb) == 0
    term = (
        np.asarray(qa).astype(np.int64)
        + np.asarray(qb).astype(np.int64)
        - 2 * p_in.zero_point
    )
    fx = requant_multiplier(p_in.scale / p_out.scale)
    out = fx_apply(fx, term, p_out.zero_point)
    out = np.clip(out, p_out.qmin, p_out.qmax)
    if scalar:
        return int(out)
    return out.astype(p_out.dtype)


def qadd_diff(qa, pa: QuantParams, qb, pb: QuantParams, pc: QuantParams):
    """Sum of two values with distinct parameter sets.

    Both operands are rescaled into the output grid inside one wide
    accumulator (shared fraction bits) so only a single rounding happens.
    """
    scalar = np.ndim(qa) == 0 and np.ndim(qb) == 0
    f = REQUANT_FRACTION_BITS
    raw_a = to_fixed(pa.scale / pc.scale, f).raw
    raw_b = to_fixed(pb.scale / pc.scale, f).raw
    ca, cb = _centered(qa, pa), _centered(qb, pb)
    bound = abs(raw_a) * (2**pa.bitwidth) + abs(raw_b) * (2**pb.bitwidth)
    if bound > _INT64_MAX:
        raise FxOverflow("qadd_diff accumulator would overflow int64")
    acc = raw_a * ca + raw_b * cb
    out = rounded_shift(acc, f) + pc.zero_point
    out = np.clip(out, pc.qmin, pc.qmax)
    if scalar:
        return int(out)
    return out.astype(pc.dtype)


def requantize(acc, in_scale: float, p_out: QuantParams, fx: FixedPointScalar | None = None):
    """Map an integer accumulator holding values at in_scale into p_out.

    acc represents real values acc * in_scale (zero already centered out, as
    produced by matmuls over centered operands).
    """
    if fx is None:
        fx = requant_multiplier(in_scale / p_out.scale)
    out = fx_apply(fx, acc, p_out.zero_point)
    return _saturate(out, p_out)


@dataclass
class QTensor:
    """Integer codes plus the parameters that give them meaning."""

    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != self.params.dtype:
            raise ValueError(
                f"dtype-mismatch: {self.data.dtype} stored against "
                f"{self.params.bitwidth}-bit params"
            )

    @property
    def shape(self):
        return self.data.shape

    def centered(self) -> np.ndarray:
        """Codes minus zero-point, widened for accumulation."""
        return self.data.astype(np.int64) - self.params.zero_point

    def dequantize(self) -> np.ndarray:
        return dequantize(self.data, self.params)


def quantize_tensor(x, p: QuantParams) -> QTensor:
    return QTensor(quantize(np.asarray(x, dtype=np.float64), p), p)


def qlinear(
    qx: QTensor,
    qw: QTensor,
    p_out: QuantParams,
    bias: np.ndarray | None = None,
    fx: FixedPointScalar | None = None,
) -> QTensor:
    """Integer matmul qw @ qx with requantization into p_out.

    Both operands are centered, multiplied with int32/int64 accumulation,
    the optional int32 bias (at scale S_x * S_w) is added, and one
    fixed-point rounding maps the accumulator into the output grid.
    """
    acc = qw.centered() @ qx.centered()
    if bias is not None:
        acc = acc + bias.astype(np.int64)
    scale = qx.params.scale * qw.params.scale
    return QTensor(requantize(acc, scale, p_out, fx=fx), p_out)


@dataclass
class Observer:
    """Running min/max of everything shown to one tensor site."""

    running_min: float = float("inf")
    running_max: float = float("-inf")
    count: int = 0

    def observe(self, batch) -> "Observer":
        arr = np.asarray(batch, dtype=np.float64)
        if arr.size == 0:
            return self
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in calibration batch")
        self.running_min = min(self.running_min, float(arr.min()))
        self.running_max = max(self.running_max, float(arr.max()))
        self.count += arr.size
        return self

    def merged(self, other: "Observer") -> "Observer":
        return Observer(
            running_min=min(self.running_min, other.running_min),
            running_max=max(self.running_max, other.running_max),
            count=self.count + other.count,
        )

    def finalize(self, bitwidth: int) -> QuantParams:
        """Derive parameters, forcing zero into the observed range."""
        if self.count == 0:
            return derive_params(0.0, 0.0, bitwidth)
        return derive_params(
            min(self.running_min, 0.0), max(self.running_max, 0.0), bitwidth
        )


def observe(obs: Observer, batch) -> Observer:
    """Functional alias for Observer.observe."""
    return obs.observe(batch)
