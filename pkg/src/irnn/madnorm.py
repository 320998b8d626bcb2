"""Mean-absolute-deviation normalization.

y = (x - mu) / d with d = mean(|x - mu|): same shape as LayerNorm but the
scale statistic needs no square or square root, which keeps the integer
path cheap.  The integer implementation computes four intermediates
(mu, centered x, d, y), each quantized, rounded once and saturated, with a
max(q_d, 1) guard making the final division total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import (
    REQUANT_FRACTION_BITS,
    FxOverflow,
    fx_apply,
    requant_multiplier,
    rounded_div,
    rounded_shift,
    to_fixed,
)
from .quant import QTensor, QuantParams

_INT64_MAX = 2**63 - 1

__all__ = [
    "GAUSSIAN_MAD_RATIO",
    "NormStats",
    "compute_stats",
    "concentration_check",
    "layernorm_ref",
    "madnorm_int",
    "madnorm_ref",
    "scale_convergence_check",
]

# E|X - mu| / sigma for a Gaussian: sqrt(2/pi)
GAUSSIAN_MAD_RATIO = math.sqrt(2.0 / math.pi)

_LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class NormStats:
    """Per-vector normalization statistics."""

    mu: float
    d: float
    sigma_std: float
    H: int


def compute_stats(x) -> NormStats:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a nonempty 1-D vector")
    mu = float(x.mean())
    return NormStats(
        mu=mu,
        d=float(np.abs(x - mu).mean()),
        sigma_std=float(x.std()),
        H=x.size,
    )


def layernorm_ref(x) -> np.ndarray:
    """Standardize across the hidden dimension: (x - mu) / sigma."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean()
    sigma = x.std()
    return (x - mu) / (sigma + _LAYERNORM_EPS)


def madnorm_ref(x) -> np.ndarray:
    """Normalize by mean absolute deviation; zero deviation gives zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean()
    centered = x - mu
    d = np.abs(centered).mean()
    # constant vectors leave only roundoff in the deviation
    if d <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))):
        return np.zeros_like(centered)
    return centered / d


def madnorm_int(
    qx: QTensor,
    p_mu: QuantParams,
    p_xhat: QuantParams,
    p_d: QuantParams,
    p_y: QuantParams,
) -> QTensor:
    """Integer-only MadNorm over a 1-D quantized vector.

    Four steps, each one rounded saturated tensor: the mean (sum folded
    into one fixed-point multiplier with the 1/H factor), the centered
    values (two-term rescale in one accumulator), the mean absolute
    deviation, and the normalized output via rounded integer division
    guarded by max(q_d, 1).
    """
    if qx.data.ndim != 1:
        raise ValueError("madnorm_int expects a 1-D vector")
    if p_d.zero_point != 0:
        raise ValueError("deviation params must put zero at code 0")
    h = qx.data.size
    px = qx.params
    f = REQUANT_FRACTION_BITS

    # mean
    acc = int(qx.centered().sum())
    fx_mu = requant_multiplier(px.scale / (p_mu.scale * h))
    q_mu = fx_apply(fx_mu, acc, p_mu.zero_point)
    q_mu = int(np.clip(q_mu, p_mu.qmin, p_mu.qmax))

    # centered values: S_x(q_x - Z_x) - S_mu(q_mu - Z_mu), one rounding
    raw_x = to_fixed(px.scale / p_xhat.scale, f).raw
    raw_mu = to_fixed(p_mu.scale / p_xhat.scale, f).raw
    bound = abs(raw_x) * 2**px.bitwidth + abs(raw_mu) * 2**p_mu.bitwidth
    if bound > _INT64_MAX:
        raise FxOverflow("centering accumulator would overflow int64")
    acc_hat = raw_x * qx.centered() - raw_mu * (q_mu - p_mu.zero_point)
    q_xhat = rounded_shift(acc_hat, f) + p_xhat.zero_point
    q_xhat = np.clip(q_xhat, p_xhat.qmin, p_xhat.qmax)

    # mean absolute deviation
    dev = np.abs(q_xhat - p_xhat.zero_point).sum()
    fx_d = requant_multiplier(p_xhat.scale / (p_d.scale * h))
    q_d = fx_apply(fx_d, int(dev), p_d.zero_point)
    q_d = int(np.clip(q_d, p_d.qmin, p_d.qmax))

    # normalized output, division guarded against a zero deviation code
    raw_y = to_fixed(p_xhat.scale / (p_y.scale * p_d.scale), f).raw
    if abs(raw_y) * 2**p_xhat.bitwidth > _INT64_MAX:
        raise FxOverflow("normalization numerator would overflow int64")
    num = raw_y * (q_xhat - p_xhat.zero_point)
    q_y = rounded_div(num, max(q_d, 1) * 2**f) + p_y.zero_point
    q_y = np.clip(q_y, p_y.qmin, p_y.qmax).astype(p_y.dtype)
    return QTensor(q_y, p_y)


def scale_convergence_check(sampler, n: int, mean: float, rng=None) -> float:
    """Empirical mean absolute deviation around the true mean.

    sampler(rng, n) draws n i.i.d. samples; the return value estimates
    E|X - mean| and converges to it almost surely as n grows.
    """
    if rng is None:
        rng = np.random.default_rng(42)
    xs = np.asarray(sampler(rng, n), dtype=np.float64)
    return float(np.abs(xs - mean).mean())


def concentration_check(
    sampler, k: float, n: int, mean: float, mad: float, rng=None
) -> bool:
    """Empirical test of P(|X - mean| / mad < k) >= 1 - 1/k.

    Allows a 3/sqrt(n) Monte Carlo margin below the bound.
    """
    if k <= 1.0:
        raise ValueError("k must exceed 1")
    if rng is None:
        rng = np.random.default_rng(42)
    xs = np.asarray(sampler(rng, n), dtype=np.float64)
    freq = float((np.abs(xs - mean) / mad < k).mean())
    return freq >= 1.0 - 1.0 / k - 3.0 / math.sqrt(n)
