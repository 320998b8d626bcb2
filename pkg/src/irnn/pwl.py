"""Quantization-aware piecewise-linear approximation of scalar activations.

A table starts with one knot per quantized input code (equivalent to a
look-up table of the quantized activation) and is thinned by greedily
removing the shared knot of the most similar adjacent slope pair until a
piece budget is met.  Knots always stay on the input grid and intercepts
always equal the true function value at their knot, so surviving grid
points evaluate exactly.

Integer evaluation uses fixed-point slopes/intercepts sharing one fraction
count, accumulated in int64 with a single final rounding.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import FxOverflow, round_half_away, rounded_shift
from .quant import QuantParams, dequantize

__all__ = [
    "ACTIVATIONS",
    "PwlTable",
    "activation_registry",
    "build_full",
    "eval_float",
    "eval_int",
    "from_points",
    "reduce",
]

TABLE_FRACTION_BITS = 30

_erf = np.frompyfunc(math.erf, 1, 1)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    pos = 1.0 / (1.0 + np.exp(-np.clip(x, 0, None)))
    ex = np.exp(np.clip(x, None, 0))
    return np.where(x >= 0, pos, ex / (1.0 + ex))


def _gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)).astype(np.float64))


# name -> (function, conventional clip range)
ACTIVATIONS = {
    "sigmoid": (_sigmoid, (-8.0, 8.0)),
    "tanh": (lambda x: np.tanh(np.asarray(x, dtype=np.float64)), (-8.0, 8.0)),
    "exp": (lambda x: np.exp(np.asarray(x, dtype=np.float64)), (-10.0, 0.0)),
    "cos": (lambda x: np.cos(np.asarray(x, dtype=np.float64)), (-math.pi, math.pi)),
    "gelu": (_gelu, (-2.0, 2.0)),
}


def activation_registry(name: str):
    """Return (function, default clip range) for a named activation."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown activation {name!r}; choices: {sorted(ACTIVATIONS)}"
        ) from None


@dataclass(frozen=True)
class PwlTable:
    """Piecewise-linear approximation pinned to a quantized input grid.

    knots has one more entry than slopes/intercepts; piece i covers
    [knots[i], knots[i+1]) with g(x) = slopes[i] * (x - knots[i]) +
    intercepts[i] and intercepts[i] = f(knots[i]).
    """

    knots: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    q_knots: np.ndarray
    in_params: QuantParams
    out_params: QuantParams
    fx_slopes: np.ndarray
    fx_intercepts: np.ndarray
    fraction_bits: int = TABLE_FRACTION_BITS

    @property
    def pieces(self) -> int:
        return len(self.slopes)


def _finalize(knots, values, q_knots, in_params, out_params) -> PwlTable:
    knots = np.asarray(knots, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    q_knots = np.asarray(q_knots, dtype=np.int64)
    if len(knots) < 2:
        raise ValueError("a table needs at least two knots")
    if np.any(np.diff(q_knots) <= 0):
        raise ValueError("knots must be strictly increasing")
    if not np.all(np.isfinite(values)):
        raise ValueError("nonfinite-activation: f(k) not finite at some knot")
    slopes = np.diff(values) / np.diff(knots)
    intercepts = values[:-1]

    f = TABLE_FRACTION_BITS
    scale_ratio = in_params.scale / out_params.scale
    fx_slopes = round_half_away(slopes * scale_ratio * 2.0**f)
    fx_intercepts = round_half_away(intercepts / out_params.scale * 2.0**f)
    bound = int(np.abs(fx_slopes).max()) * (in_params.qmax + 1) + int(
        np.abs(fx_intercepts).max(initial=0)
    )
    if bound > 2**62:
        raise FxOverflow("fixed-point table constants would overflow int64")
    return PwlTable(
        knots=knots,
        slopes=slopes,
        intercepts=intercepts,
        q_knots=q_knots,
        in_params=in_params,
        out_params=out_params,
        fx_slopes=fx_slopes,
        fx_intercepts=fx_intercepts,
        fraction_bits=f,
    )


def build_full(fn, in_params: QuantParams, out_params: QuantParams) -> PwlTable:
    """Table with one knot per input code: 2^b - 1 pieces, LUT-equivalent."""
    if in_params.bitwidth > 16:
        raise ValueError("full grid limited to 16-bit inputs")
    grid = np.arange(in_params.qmax + 1, dtype=np.int64)
    knots = dequantize(grid, in_params)
    values = np.asarray(fn(knots), dtype=np.float64)
    return _finalize(knots, values, grid, in_params, out_params)


def from_points(xs, ys, in_params: QuantParams, out_params: QuantParams) -> PwlTable:
    """Table through explicit (x, f(x)) samples; xs must sit on the grid."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    q = round_half_away(xs / in_params.scale) + in_params.zero_point
    q = np.asarray(q, dtype=np.int64)
    if np.any(q < 0) or np.any(q > in_params.qmax):
        raise ValueError("knot outside the input storage range")
    back = dequantize(q, in_params)
    if not np.allclose(back, xs, rtol=0.0, atol=1e-9 * max(1.0, np.abs(xs).max())):
        raise ValueError("knots must be members of the quantized input grid")
    return _finalize(xs, ys, q, in_params, out_params)


def _knot_values(t: PwlTable) -> np.ndarray:
    """f at every knot (intercepts plus the implied last-knot value)."""
    last = t.slopes[-1] * (t.knots[-1] - t.knots[-2]) + t.intercepts[-1]
    return np.append(t.intercepts, last)


def reduce(t: PwlTable, pieces: int) -> PwlTable:
    """Greedy Algorithm-1 knot removal down to a piece budget.

    Repeatedly removes the interior knot shared by the two adjacent pieces
    whose slopes differ least (ties: lowest knot index), recomputing the
    merged slope from the surviving endpoint knots.
    """
    if pieces < 1:
        raise ValueError("invalid-budget: pieces must be >= 1")
    if pieces >= t.pieces:
        return t

    ks = t.knots.tolist()
    ys = _knot_values(t).tolist()
    n = len(ks)
    prev = list(range(-1, n - 1))
    nxt = list(range(1, n + 1))
    alive = [True] * n
    stamp = [0] * n

    def slope(i: int, j: int) -> float:
        return (ys[j] - ys[i]) / (ks[j] - ks[i])

    def cost(j: int) -> float:
        return abs(slope(prev[j], j) - slope(j, nxt[j]))

    heap = [(cost(j), j, 0) for j in range(1, n - 1)]
    heapq.heapify(heap)
    remaining = n - 1

    while remaining > pieces:
        c, j, s = heapq.heappop(heap)
        if not alive[j] or s != stamp[j] or prev[j] < 0 or nxt[j] >= n:
            continue
        alive[j] = False
        lo, hi = prev[j], nxt[j]
        nxt[lo], prev[hi] = hi, lo
        remaining -= 1
        for nb in (lo, hi):
            if alive[nb] and prev[nb] >= 0 and nxt[nb] < n:
                stamp[nb] += 1
                heapq.heappush(heap, (cost(nb), nb, stamp[nb]))

    keep = [i for i in range(n) if alive[i]]
    return _finalize(
        t.knots[keep], _knot_values(t)[keep], t.q_knots[keep], t.in_params, t.out_params
    )


def _piece_index(sorted_knots, x):
    idx = np.searchsorted(sorted_knots, x, side="right") - 1
    return np.clip(idx, 0, len(sorted_knots) - 2)


def eval_float(t: PwlTable, x):
    """Evaluate the approximation; inputs clamp to the knot span."""
    arr = np.clip(np.asarray(x, dtype=np.float64), t.knots[0], t.knots[-1])
    idx = _piece_index(t.knots, arr)
    out = t.slopes[idx] * (arr - t.knots[idx]) + t.intercepts[idx]
    if np.ndim(x) == 0:
        return float(out)
    return out


def eval_int(t: PwlTable, qx):
    """Integer-only evaluation: fixed-point slope/intercept, one rounding."""
    q = np.clip(np.asarray(qx, dtype=np.int64), t.q_knots[0], t.q_knots[-1])
    idx = _piece_index(t.q_knots, q)
    acc = t.fx_slopes[idx] * (q - t.q_knots[idx]) + t.fx_intercepts[idx]
    out = rounded_shift(acc, t.fraction_bits) + t.out_params.zero_point
    out = np.clip(out, t.out_params.qmin, t.out_params.qmax)
    if np.ndim(qx) == 0:
        return int(out)
    return out.astype(t.out_params.dtype)
