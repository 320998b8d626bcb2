"""Additive (Bahdanau) attention: float reference and integer-only path.

Alignment scores e_i = v' tanh(Wq h_dec + Wk h_enc_i) feed a softmax whose
integer form shifts by the row maximum (exact in the integer domain), maps
the shifted scores through an exp PWL table on [-R, 0], and keeps the
denominator as an unreduced 32-bit sum.  The context vector is a weighted
sum divided once per element by that denominator, so no per-weight division
or reciprocal approximation is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import (
    REQUANT_FRACTION_BITS,
    FxOverflow,
    fx_apply,
    requant_multiplier,
    round_half_away,
    rounded_div,
    rounded_shift,
    to_fixed,
)
from .pwl import PwlTable, activation_registry, build_full, eval_int, reduce
from .quant import (
    Observer,
    QTensor,
    QuantParams,
    derive_params,
    qadd_diff,
    quantize_tensor,
    requantize,
)

__all__ = [
    "EXP_DOMAIN",
    "AttentionIntermediates",
    "AttentionWeights",
    "attach_context",
    "attention_int",
    "attention_intermediates",
    "attention_ref",
    "calibrate_attention",
    "integer_softmax_weights",
    "project_keys",
]

# exp approximation domain for shifted alignments; scores below -10 clamp
# to exp(-10) ~ 0
EXP_DOMAIN = (-10.0, 0.0)

_INT32_MAX = 2**31 - 1
_INT64_MAX = 2**63 - 1


@dataclass
class AttentionWeights:
    """Projection weights plus calibrated params for every tensor site.

    sites: hdec, henc, qproj, kproj, sumqk, e, s (eshift and the table
    output grids are fixed analytically).
    """

    wq: QTensor
    wk: QTensor
    v: QTensor
    sites: dict

    def __post_init__(self):
        for name, w in (("wq", self.wq), ("wk", self.wk), ("v", self.v)):
            if w.params.bitwidth != 8:
                raise ValueError(f"{name} must be 8-bit")
        if self.v.data.ndim != 1:
            raise ValueError("v must be a vector")
        m_att = self.v.data.size
        if self.wq.shape[0] != m_att or self.wk.shape[0] != m_att:
            raise ValueError("projection rows must match v's length")

    @property
    def attention_size(self) -> int:
        return self.v.data.size


@dataclass
class AttentionIntermediates:
    query_proj: QTensor
    keys_proj: QTensor
    sum_qk: QTensor
    e: QTensor
    exp_e: QTensor
    denom: int
    s: QTensor


def attention_ref(h_dec, H_enc, wq, wk, v, observers: dict | None = None):
    """Float additive attention; returns (context s, weights alpha)."""
    h_dec = np.asarray(h_dec, dtype=np.float64)
    H_enc = np.asarray(H_enc, dtype=np.float64)
    if H_enc.ndim != 2 or H_enc.shape[0] < 1:
        raise ValueError("encoder states must be [T x m_enc] with T >= 1")
    qp = np.asarray(wq, dtype=np.float64) @ h_dec
    K = H_enc @ np.asarray(wk, dtype=np.float64).T
    sums = qp[None, :] + K
    e = np.tanh(sums) @ np.asarray(v, dtype=np.float64)
    shifted = e - e.max()
    w = np.exp(shifted)
    alpha = w / w.sum()
    s = alpha @ H_enc
    if observers is not None:
        for key, val in (
            ("qproj", qp), ("kproj", K), ("sumqk", sums), ("e", e), ("s", s),
        ):
            observers.setdefault(key, Observer()).observe(val)
    return s, alpha


def _check_int32(acc):
    if acc.size and int(np.abs(acc).max()) > _INT32_MAX:
        raise FxOverflow("matmul accumulator exceeded int32 range")


def project_keys(q_Henc: QTensor, w: AttentionWeights) -> QTensor:
    """Encoder-side projection Wk @ h_enc_i for all i, as [m_att x T] codes.

    Depends only on the encoder states, so callers decoding many steps
    against one source sequence compute it once.
    """
    sites = w.sites
    if q_Henc.params != sites["henc"]:
        raise ValueError("uncalibrated-tensor: henc params differ from calibration")
    acc = w.wk.centered() @ q_Henc.centered().T
    _check_int32(acc)
    scale = sites["henc"].scale * w.wk.params.scale
    return QTensor(requantize(acc, scale, sites["kproj"]), sites["kproj"])


def integer_softmax_weights(q_e, p_e: QuantParams, exp_table: PwlTable):
    """Shift alignments by their max and exponentiate; returns (q_exp, denom).

    The shift happens on integer codes, so any constant offset of q_e
    cancels exactly.  The maximal element lands on the table's top knot,
    whose value quantizes to the top output code; the denominator is
    therefore at least 2^b - 1 > 0.
    """
    q_e = np.asarray(q_e)
    shifted = q_e.astype(np.int64) - int(q_e.max())
    p_in = exp_table.in_params
    fx = requant_multiplier(p_e.scale / p_in.scale)
    q_in = fx_apply(fx, shifted, p_in.zero_point)
    q_exp = eval_int(exp_table, np.clip(q_in, p_in.qmin, p_in.qmax))
    denom = int(q_exp.astype(np.int64).sum())
    if denom <= 0:
        raise AssertionError("softmax denominator must be positive")
    return q_exp, denom


def _degrade_denominator(denom: int, bits: int, t_enc: int, exp_bits: int) -> int:
    """Affine-requantize the denominator to `bits` over [0, T * exp_max].

    Diagnostic only: models storing the softmax denominator at a narrow
    bitwidth instead of the full 32-bit sum.  The grid step is proportional
    to T, so concentrated attention (small denominators) loses the most.
    """
    step = t_enc * (2**exp_bits - 1) / (2**bits - 1)
    code = min(2**bits - 1, round_half_away(denom / step))
    return max(1, round_half_away(code * step))


def attention_intermediates(
    q_hdec: QTensor,
    q_Henc: QTensor,
    w: AttentionWeights,
    exp_table: PwlTable,
    tanh_table: PwlTable,
    keys: QTensor | None = None,
    denom_bits: int | None = None,
) -> AttentionIntermediates:
    """Integer attention with every intermediate exposed.

    denom_bits degrades the 32-bit softmax denominator to the given width
    before the final division; diagnostic only.
    """
    sites = w.sites
    if q_hdec.params != sites["hdec"]:
        raise ValueError("uncalibrated-tensor: hdec params differ from calibration")
    if exp_table.out_params.zero_point != 0:
        raise ValueError("exp output grid must put zero at code 0")
    if keys is None:
        keys = project_keys(q_Henc, w)
    T = q_Henc.data.shape[0]

    acc_q = w.wq.centered() @ q_hdec.centered()
    _check_int32(acc_q)
    q_scale = sites["hdec"].scale * w.wq.params.scale
    q_qp = requantize(acc_q, q_scale, sites["qproj"])

    q_sum = qadd_diff(
        q_qp[:, None], sites["qproj"], keys.data, sites["kproj"], sites["sumqk"]
    )
    q_tanh = eval_int(tanh_table, q_sum)
    p_tanh = tanh_table.out_params

    acc_e = w.v.centered() @ (q_tanh.astype(np.int64) - p_tanh.zero_point)
    _check_int32(acc_e)
    e_scale = w.v.params.scale * p_tanh.scale
    q_e = requantize(acc_e, e_scale, sites["e"])

    q_exp, denom = integer_softmax_weights(q_e, sites["e"], exp_table)
    div_denom = denom
    if denom_bits:
        div_denom = _degrade_denominator(
            denom, denom_bits, T, exp_table.out_params.bitwidth
        )

    # weighted context: one rounded division per output element
    p_h, p_s = sites["henc"], sites["s"]
    raw = to_fixed(p_h.scale / p_s.scale, REQUANT_FRACTION_BITS).raw
    num = q_exp.astype(np.int64) @ q_Henc.centered()
    if abs(raw) * T * 2 ** (exp_table.out_params.bitwidth + p_h.bitwidth) > _INT64_MAX:
        raise FxOverflow("context accumulator would overflow int64")
    q_s = rounded_div(raw * num, div_denom << REQUANT_FRACTION_BITS) + p_s.zero_point
    q_s = np.clip(q_s, p_s.qmin, p_s.qmax).astype(p_s.dtype)

    return AttentionIntermediates(
        query_proj=QTensor(q_qp, sites["qproj"]),
        keys_proj=keys,
        sum_qk=QTensor(q_sum, sites["sumqk"]),
        e=QTensor(q_e, sites["e"]),
        exp_e=QTensor(q_exp, exp_table.out_params),
        denom=denom,
        s=QTensor(q_s, p_s),
    )


def attention_int(
    q_hdec: QTensor,
    q_Henc: QTensor,
    w: AttentionWeights,
    exp_table: PwlTable,
    tanh_table: PwlTable,
    keys: QTensor | None = None,
    denom_bits: int | None = None,
):
    """Integer attention; returns (context QTensor, exp-weight QTensor)."""
    inter = attention_intermediates(
        q_hdec, q_Henc, w, exp_table, tanh_table, keys=keys, denom_bits=denom_bits
    )
    return inter.s, inter.exp_e


def attach_context(
    gates: QTensor, ws: QTensor, s: QTensor, p_out: QuantParams | None = None
) -> QTensor:
    """Add the context projection Ws @ s into gate pre-activations.

    Both the rescaled gates and the projection accumulator share one wide
    fixed-point accumulator, so the sum rounds once.  With p_out omitted the
    result stays on the gate grid and a zero projection passes codes
    through bit-exactly.
    """
    if ws.shape[0] != gates.data.shape[-1] and ws.shape[0] != gates.data.shape[0]:
        raise ValueError("projection rows disagree with gate width")
    if ws.shape[1] != s.data.shape[0]:
        raise ValueError("projection columns disagree with context width")
    p_g = gates.params
    p_out = p_g if p_out is None else p_out
    f = REQUANT_FRACTION_BITS
    raw_g = to_fixed(p_g.scale / p_out.scale, f).raw
    raw_s = to_fixed(s.params.scale * ws.params.scale / p_out.scale, f).raw
    acc_s = ws.centered() @ s.centered()
    _check_int32(acc_s)
    bound = abs(raw_g) * 2**p_g.bitwidth + abs(raw_s) * int(np.abs(acc_s).max(initial=0))
    if bound > _INT64_MAX:
        raise FxOverflow("context attachment would overflow int64")
    acc = raw_g * gates.centered() + raw_s * acc_s
    out = rounded_shift(acc, f) + p_out.zero_point
    out = np.clip(out, p_out.qmin, p_out.qmax).astype(p_out.dtype)
    return QTensor(out, p_out)


def _quantize_weight(w) -> QTensor:
    w = np.asarray(w, dtype=np.float64)
    return quantize_tensor(w, Observer().observe(w.ravel()).finalize(8))


def calibrate_attention(
    wq,
    wk,
    v,
    hdec_samples,
    henc_samples,
    pieces: int = 32,
    p_hdec: QuantParams | None = None,
    p_henc: QuantParams | None = None,
):
    """Observe float attention over samples; freeze weights, params, tables.

    hdec_samples is [N x m_dec]; henc_samples is [N x T x m_enc].  Existing
    hidden-state params may be passed in (the decoder integration shares
    them); otherwise they are derived from the samples.  Returns
    (AttentionWeights, exp_table, tanh_table).
    """
    hdec_samples = np.asarray(hdec_samples, dtype=np.float64)
    henc_samples = np.asarray(henc_samples, dtype=np.float64)
    observers: dict[str, Observer] = {}
    for h_dec, H_enc in zip(hdec_samples, henc_samples):
        attention_ref(h_dec, H_enc, wq, wk, v, observers=observers)

    sixteen = {"sumqk", "e"}
    sites = {k: o.finalize(16 if k in sixteen else 8) for k, o in observers.items()}
    sites["hdec"] = (
        p_hdec
        if p_hdec is not None
        else Observer().observe(hdec_samples.ravel()).finalize(8)
    )
    sites["henc"] = (
        p_henc
        if p_henc is not None
        else Observer().observe(henc_samples.ravel()).finalize(8)
    )

    weights = AttentionWeights(
        _quantize_weight(wq), _quantize_weight(wk), _quantize_weight(v), sites
    )
    p_eshift = derive_params(EXP_DOMAIN[0], EXP_DOMAIN[1], 16)
    p_expout = derive_params(0.0, 1.0, 8)
    p_tanhout = derive_params(-1.0, 1.0, 8)
    exp_fn, _ = activation_registry("exp")
    tanh_fn, _ = activation_registry("tanh")
    exp_table = reduce(build_full(exp_fn, p_eshift, p_expout), pieces)
    tanh_table = reduce(build_full(tanh_fn, sites["sumqk"], p_tanhout), pieces)
    return weights, exp_table, tanh_table
