"""LSTM cells: float reference and integer-only implementations.

The integer cell composes the quantized matmul, fixed-point requantization,
piecewise-linear activations and (optionally) integer MadNorm into a single
step function.  Weight matrices hold the four gates stacked as rows in the
fixed order (i, f, j, o); hidden states are always 8-bit while the cell
state may be 8- or 16-bit.

Calibration runs the float reference over representative sequences with a
min/max observer attached to every intermediate tensor site, then freezes
one QuantParams set per site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import FxOverflow, requant_multiplier, round_half_away
from .madnorm import compute_stats, madnorm_int, madnorm_ref
from .pwl import activation_registry, build_full, eval_int, reduce
from .quant import (
    Observer,
    QTensor,
    QuantParams,
    derive_params,
    qadd_diff,
    qmul,
    quantize_tensor,
    requantize,
)

__all__ = [
    "GATE_ORDER",
    "CellConfig",
    "IntLstmCell",
    "LstmState",
    "LstmWeights",
    "bilstm_run",
    "calibrate_bilstm",
    "calibrate_lstm_cell",
    "lstm_run_ref",
    "lstm_step_int",
    "lstm_step_ref",
    "run_sequence",
]

GATE_ORDER = ("i", "f", "j", "o")

_INT32_MAX = 2**31 - 1

# tensor sites normalized per MadNorm branch: mu, centered, deviation, output
_MN_SITES = tuple(
    f"mn{branch}_{part}" for branch in ("x", "h") for part in ("mu", "xhat", "d", "y")
)


@dataclass(frozen=True)
class CellConfig:
    """Bitwidth and approximation knobs fixed at build time."""

    cell_bits: int = 8
    preact_bits: int = 8
    use_madnorm: bool = False
    pwl_pieces: int = 32

    def __post_init__(self):
        if self.cell_bits not in (8, 16):
            raise ValueError("cell_bits must be 8 or 16")
        if self.preact_bits not in (8, 16):
            raise ValueError("preact_bits must be 8 or 16")
        if self.pwl_pieces < 1:
            raise ValueError("pwl_pieces must be >= 1")


@dataclass
class LstmWeights:
    """Quantized gate weights: wx [4m x n], wh [4m x m], stacked (i, f, j, o).

    bias is int32 at scale S_x * S_wx (folded into the input-branch matmul
    accumulator).  ws, when present, projects an external context vector
    into the gate pre-activations.
    """

    wx: QTensor
    wh: QTensor
    bias: np.ndarray | None = None
    ws: QTensor | None = None
    gate_order: tuple = GATE_ORDER

    def __post_init__(self):
        if self.gate_order != GATE_ORDER:
            raise ValueError(f"gate order is fixed as {GATE_ORDER}")
        for name, w in (("wx", self.wx), ("wh", self.wh), ("ws", self.ws)):
            if w is not None and w.params.bitwidth != 8:
                raise ValueError(f"{name} must be 8-bit")
        four_m, _ = self.wx.shape
        if four_m % 4:
            raise ValueError("gate rows must stack four equal blocks")
        m = four_m // 4
        if self.wh.shape != (four_m, m):
            raise ValueError("wh shape disagrees with wx gate stacking")
        if self.bias is not None and self.bias.shape != (four_m,):
            raise ValueError("bias length must be 4m")
        if self.ws is not None and self.ws.shape[0] != four_m:
            raise ValueError("ws rows must be 4m")

    @property
    def hidden_size(self) -> int:
        return self.wx.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.wx.shape[1]


@dataclass
class LstmState:
    h: QTensor
    c: QTensor

    def __post_init__(self):
        if self.h.params.bitwidth != 8:
            raise ValueError("hidden state must be 8-bit")


def _observe(observers, key, value):
    if observers is None:
        return
    observers.setdefault(key, Observer()).observe(np.atleast_1d(value))


def _observe_madnorm(observers, branch, pre):
    if observers is None:
        return
    st = compute_stats(pre)
    _observe(observers, f"mn{branch}_mu", st.mu)
    _observe(observers, f"mn{branch}_xhat", pre - st.mu)
    _observe(observers, f"mn{branch}_d", st.d)
    _observe(observers, f"mn{branch}_y", madnorm_ref(pre))


def lstm_step_ref(
    x,
    h,
    c,
    wx,
    wh,
    bias=None,
    *,
    ws=None,
    s=None,
    use_madnorm: bool = False,
    observers: dict | None = None,
):
    """One float LSTM step; returns (h', c').

    Gates stack as (i, f, j, o); the cell update is
    c' = sigmoid(f) * c + sigmoid(i) * tanh(j) and h' = sigmoid(o) * tanh(c').
    With use_madnorm the two matmul products are normalized separately
    before the gate sum and the bias joins after normalization.
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    wx = np.asarray(wx, dtype=np.float64)
    wh = np.asarray(wh, dtype=np.float64)
    four_m = wx.shape[0]
    if four_m % 4 or wh.shape != (four_m, four_m // 4):
        raise ValueError("weight shapes disagree")
    m = four_m // 4
    if x.shape != (wx.shape[1],) or h.shape != (m,) or c.shape != (m,):
        raise ValueError("input/state shapes disagree")

    gx = wx @ x
    gh = wh @ h
    _observe(observers, "xprod", gx if use_madnorm or bias is None else gx + bias)
    _observe(observers, "hprod", gh)
    if use_madnorm:
        _observe_madnorm(observers, "x", gx)
        _observe_madnorm(observers, "h", gh)
        total = madnorm_ref(gx) + madnorm_ref(gh)
        if bias is not None:
            total = total + bias
    else:
        if bias is not None:
            gx = gx + bias
        total = gx + gh
    _observe(observers, "sum1", total)
    if ws is not None:
        total = total + np.asarray(ws, dtype=np.float64) @ np.asarray(s, dtype=np.float64)
        _observe(observers, "preact", total)

    gi, gf, gj, go = (total[k * m : (k + 1) * m] for k in range(4))
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    fc = sig(gf) * c
    ij = sig(gi) * np.tanh(gj)
    _observe(observers, "fc", fc)
    _observe(observers, "ij", ij)
    c1 = fc + ij
    h1 = sig(go) * np.tanh(c1)
    _observe(observers, "c", c1)
    _observe(observers, "h", h1)
    return h1, c1


def lstm_run_ref(
    xs,
    wx,
    wh,
    bias=None,
    *,
    ws=None,
    s_seq=None,
    use_madnorm: bool = False,
    observers: dict | None = None,
) -> np.ndarray:
    """Float reference over a [T x n] sequence from zero state; returns [T x m]."""
    xs = np.asarray(xs, dtype=np.float64)
    m = np.asarray(wx).shape[0] // 4
    h = np.zeros(m)
    c = np.zeros(m)
    out = np.empty((xs.shape[0], m))
    for t in range(xs.shape[0]):
        _observe(observers, "x", xs[t])
        s = None
        if s_seq is not None:
            s = s_seq[t]
            _observe(observers, "s", s)
        h, c = lstm_step_ref(
            xs[t], h, c, wx, wh, bias,
            ws=ws, s=s, use_madnorm=use_madnorm, observers=observers,
        )
        out[t] = h
    return out


def _check_int32(acc: np.ndarray):
    if acc.size and int(np.abs(acc).max()) > _INT32_MAX:
        raise FxOverflow("matmul accumulator exceeded int32 range")


class IntLstmCell:
    """Integer-only LSTM cell with precomputed multipliers and PWL tables.

    sites maps tensor-site names to calibrated QuantParams: x, h, c, xprod,
    hprod, sum1, fc, ij, plus preact and s for context-fed cells and the
    mn{x,h}_{mu,xhat,d,y} group for MadNorm cells.
    """

    def __init__(self, weights: LstmWeights, cfg: CellConfig, sites: dict):
        required = {"x", "h", "c", "xprod", "hprod", "sum1", "fc", "ij"}
        if weights.ws is not None:
            required |= {"s", "preact"}
        if cfg.use_madnorm:
            required |= set(_MN_SITES)
        missing = sorted(required - sites.keys())
        if missing:
            raise KeyError(f"uncalibrated-tensor: {', '.join(missing)}")
        self.weights = weights
        self.cfg = cfg
        self.sites = dict(sites)

        self._wx_c = weights.wx.centered()
        self._wh_c = weights.wh.centered()
        self._ws_c = weights.ws.centered() if weights.ws is not None else None

        p = self.sites
        sx, swx = p["x"].scale, weights.wx.params.scale
        self._bias_acc = None
        self._bias_codes = None
        if weights.bias is not None:
            if cfg.use_madnorm:
                # normalization is shift-invariant, so the bias only
                # survives if it joins after the per-branch norms
                self._bias_codes = round_half_away(
                    weights.bias.astype(np.float64) * sx * swx / p["sum1"].scale
                )
            else:
                self._bias_acc = weights.bias.astype(np.int64)
        self._fx_xprod = requant_multiplier(sx * swx / p["xprod"].scale)
        self._fx_hprod = requant_multiplier(
            p["h"].scale * weights.wh.params.scale / p["hprod"].scale
        )

        p_gate = p["preact"] if weights.ws is not None else p["sum1"]
        p_sig = derive_params(0.0, 1.0, 8)
        p_tanh = derive_params(-1.0, 1.0, 8)
        sigmoid_fn, _ = activation_registry("sigmoid")
        tanh_fn, _ = activation_registry("tanh")
        self._sig_table = reduce(build_full(sigmoid_fn, p_gate, p_sig), cfg.pwl_pieces)
        self._tanh_gate = reduce(build_full(tanh_fn, p_gate, p_tanh), cfg.pwl_pieces)
        self._tanh_cell = reduce(build_full(tanh_fn, p["c"], p_tanh), cfg.pwl_pieces)
        self._p_sig = p_sig
        self._p_tanh = p_tanh

    @property
    def hidden_size(self) -> int:
        return self.weights.hidden_size

    @property
    def input_size(self) -> int:
        return self.weights.input_size

    def initial_state(self) -> LstmState:
        """Zero state: every code sits at its zero-point."""
        ph, pc = self.sites["h"], self.sites["c"]
        m = self.hidden_size
        return LstmState(
            QTensor(np.full(m, ph.zero_point, dtype=ph.dtype), ph),
            QTensor(np.full(m, pc.zero_point, dtype=pc.dtype), pc),
        )

    def _require(self, qt: QTensor, site: str):
        if qt.params != self.sites[site]:
            raise ValueError(f"uncalibrated-tensor: {site} params differ from calibration")

    def step(self, qx: QTensor, state: LstmState, qs: QTensor | None = None) -> LstmState:
        p = self.sites
        self._require(qx, "x")
        self._require(state.h, "h")
        self._require(state.c, "c")
        if (qs is None) != (self._ws_c is None):
            raise ValueError("context input does not match cell wiring")

        acc_x = self._wx_c @ qx.centered()
        if self._bias_acc is not None:
            acc_x = acc_x + self._bias_acc
        acc_h = self._wh_c @ state.h.centered()
        _check_int32(acc_x)
        _check_int32(acc_h)
        q_xp = requantize(acc_x, 0.0, p["xprod"], fx=self._fx_xprod)
        q_hp = requantize(acc_h, 0.0, p["hprod"], fx=self._fx_hprod)

        if self.cfg.use_madnorm:
            q_xp = madnorm_int(
                QTensor(q_xp, p["xprod"]),
                p["mnx_mu"], p["mnx_xhat"], p["mnx_d"], p["mnx_y"],
            ).data
            q_hp = madnorm_int(
                QTensor(q_hp, p["hprod"]),
                p["mnh_mu"], p["mnh_xhat"], p["mnh_d"], p["mnh_y"],
            ).data
            gates = qadd_diff(q_xp, p["mnx_y"], q_hp, p["mnh_y"], p["sum1"])
            if self._bias_codes is not None:
                shifted = gates.astype(np.int64) + self._bias_codes
                gates = np.clip(shifted, p["sum1"].qmin, p["sum1"].qmax).astype(
                    p["sum1"].dtype
                )
        else:
            gates = qadd_diff(q_xp, p["xprod"], q_hp, p["hprod"], p["sum1"])

        if self._ws_c is not None:
            self._require(qs, "s")
            acc_s = self._ws_c @ qs.centered()
            _check_int32(acc_s)
            s_scale = p["s"].scale * self.weights.ws.params.scale
            gates = qadd_diff(
                gates.astype(np.int64),
                p["sum1"],
                # context accumulator enters as codes on a unit-zero-point
                # grid at scale S_s * S_ws
                acc_s,
                QuantParams(-1.0, 1.0, 32, s_scale, 0),
                p["preact"],
            )
            p_gate = p["preact"]
        else:
            p_gate = p["sum1"]

        m = self.hidden_size
        gv = np.asarray(gates)
        gi, gf, gj, go = (gv[k * m : (k + 1) * m] for k in range(4))
        q_si = eval_int(self._sig_table, gi)
        q_sf = eval_int(self._sig_table, gf)
        q_so = eval_int(self._sig_table, go)
        q_tj = eval_int(self._tanh_gate, gj)

        q_fc = qmul(q_sf, self._p_sig, state.c.data, p["c"], p["fc"])
        q_ij = qmul(q_si, self._p_sig, q_tj, self._p_tanh, p["ij"])
        q_c1 = qadd_diff(q_fc, p["fc"], q_ij, p["ij"], p["c"])
        q_tc = eval_int(self._tanh_cell, q_c1)
        q_h1 = qmul(q_so, self._p_sig, q_tc, self._p_tanh, p["h"])
        return LstmState(QTensor(q_h1, p["h"]), QTensor(q_c1, p["c"]))

    def run(self, qxs: QTensor, qs_seq: QTensor | None = None) -> QTensor:
        """Drive the cell over a [T x n] input; returns all hidden states."""
        if qxs.data.ndim != 2 or qxs.data.shape[0] < 1:
            raise ValueError("expected a [T x n] input sequence with T >= 1")
        ph = self.sites["h"]
        state = self.initial_state()
        out = np.empty((qxs.data.shape[0], self.hidden_size), dtype=ph.dtype)
        for t in range(qxs.data.shape[0]):
            qs = None
            if qs_seq is not None:
                qs = QTensor(qs_seq.data[t], qs_seq.params)
            state = self.step(QTensor(qxs.data[t], qxs.params), state, qs)
            out[t] = state.h.data
        return QTensor(out, ph)


def lstm_step_int(
    qx: QTensor, state: LstmState, cell: IntLstmCell, qs: QTensor | None = None
) -> LstmState:
    """Single integer step (see IntLstmCell.step)."""
    return cell.step(qx, state, qs)


def run_sequence(cell: IntLstmCell, qxs: QTensor, qs_seq: QTensor | None = None) -> QTensor:
    """Integer hidden-state trajectory from zero state."""
    return cell.run(qxs, qs_seq)


def _bits_for(site: str, cfg: CellConfig) -> int:
    if site in ("fc", "ij", "c"):
        return cfg.cell_bits
    if site in ("xprod", "hprod", "sum1", "preact"):
        return cfg.preact_bits
    return 8


def _quantize_weight(w) -> QTensor:
    w = np.asarray(w, dtype=np.float64)
    params = Observer().observe(w.ravel()).finalize(8)
    return quantize_tensor(w, params)


def _observer_pass(
    seqs, wx, wh, bias, cfg: CellConfig, ws=None, s_seqs=None
) -> dict:
    observers: dict[str, Observer] = {}
    for idx in range(len(seqs)):
        s_seq = None if s_seqs is None else s_seqs[idx]
        lstm_run_ref(
            seqs[idx], wx, wh, bias,
            ws=ws, s_seq=s_seq, use_madnorm=cfg.use_madnorm, observers=observers,
        )
    return observers


def _build_cell(wx, wh, bias, ws, cfg: CellConfig, observers: dict) -> IntLstmCell:
    sites = {k: o.finalize(_bits_for(k, cfg)) for k, o in observers.items()}
    qwx = _quantize_weight(wx)
    qwh = _quantize_weight(wh)
    qws = _quantize_weight(ws) if ws is not None else None
    bias_i32 = None
    if bias is not None:
        codes = round_half_away(
            np.asarray(bias, dtype=np.float64)
            / (sites["x"].scale * qwx.params.scale)
        )
        if int(np.abs(codes).max(initial=0)) > _INT32_MAX:
            raise FxOverflow("bias codes exceed int32 range")
        bias_i32 = codes.astype(np.int32)
    weights = LstmWeights(qwx, qwh, bias_i32, ws=qws)
    return IntLstmCell(weights, cfg, sites)


def calibrate_lstm_cell(
    wx, wh, bias, seqs, cfg: CellConfig, ws=None, s_seqs=None
) -> IntLstmCell:
    """Observe a float run over calibration sequences, then freeze the cell.

    seqs is [N x T x n] (or a list of [T x n] arrays); s_seqs, when the cell
    takes a context input, matches its leading shape.
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim == 2:
        seqs = seqs[None]
    observers = _observer_pass(seqs, wx, wh, bias, cfg, ws=ws, s_seqs=s_seqs)
    return _build_cell(wx, wh, bias, ws, cfg, observers)


def calibrate_bilstm(
    wx_f, wh_f, bias_f, wx_b, wh_b, bias_b, seqs, cfg: CellConfig
) -> tuple[IntLstmCell, IntLstmCell]:
    """Calibrate forward and backward cells with shared x and h params.

    The hidden-state params must agree so the two direction outputs
    concatenate without rescaling; merging the observers guarantees it.
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim == 2:
        seqs = seqs[None]
    obs_f = _observer_pass(seqs, wx_f, wh_f, bias_f, cfg)
    obs_b = _observer_pass(seqs[:, ::-1], wx_b, wh_b, bias_b, cfg)
    for key in ("x", "h"):
        merged = obs_f[key].merged(obs_b[key])
        obs_f[key] = merged
        obs_b[key] = merged
    fwd = _build_cell(wx_f, wh_f, bias_f, None, cfg, obs_f)
    bwd = _build_cell(wx_b, wh_b, bias_b, None, cfg, obs_b)
    return fwd, bwd


def bilstm_run(fwd: IntLstmCell, bwd: IntLstmCell, qxs: QTensor) -> QTensor:
    """Bidirectional pass: [T x 2m] with the backward half time-reversed."""
    if fwd.sites["h"] != bwd.sites["h"]:
        raise ValueError("concat-params-mismatch: fwd/bwd hidden params differ")
    hf = fwd.run(qxs)
    rev = QTensor(np.ascontiguousarray(qxs.data[::-1]), qxs.params)
    hb = bwd.run(rev)
    out = np.concatenate([hf.data, hb.data[::-1]], axis=1)
    return QTensor(out, fwd.sites["h"])
