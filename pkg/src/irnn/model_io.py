"""Binary model container (.irnn) plus float-model and calibration loaders.

Layout: a 16-byte header (magic, u32 format version, u64 manifest length),
a JSON manifest with sorted keys, then 64-byte-aligned little-endian blobs.
Every blob carries a CRC32 in the manifest and is addressed by a byte
offset relative to the blob section, so editing the manifest never
invalidates offsets.

The manifest stores every quantization parameter set and every fixed-point
multiplier as written (multipliers as raw/fraction-bit integer pairs), so a
loaded model replays inference bit-for-bit without re-deriving constants.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights
from .fixedpoint import FixedPointScalar
from .pwl import PwlTable
from .quant import QTensor, QuantParams
from .rnn import CellConfig, IntLstmCell, LstmWeights

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "AttentionPack",
    "FloatModel",
    "IrnnModel",
    "export_float",
    "load",
    "load_calibration",
    "load_file",
    "load_float",
    "save",
    "save_calibration",
    "save_file",
    "save_float",
]

MAGIC = b"IRNN"
FORMAT_VERSION = 1

_ALIGN = 64
_HEADER = struct.Struct("<4sIQ")

# manifest dtype tag -> little-endian numpy dtype
_DTYPES = {
    "uint8": "<u1",
    "uint16": "<u2",
    "uint32": "<u4",
    "int32": "<i4",
    "int64": "<i8",
    "float32": "<f4",
    "float64": "<f8",
}

_CELL_NAMES = {
    "lstm": ("main",),
    "bilstm": ("fwd", "bwd"),
    "encdec": ("enc", "dec"),
}

# cell name -> key prefix in float-model archives
_FLOAT_PREFIX = {"main": "", "fwd": "fwd_", "bwd": "bwd_", "enc": "enc_", "dec": "dec_"}

_ATT_KEYS = ("att_wq", "att_wk", "att_v")


@dataclass
class AttentionPack:
    """Attention weights plus the two activation tables they run with."""

    weights: AttentionWeights
    exp_table: PwlTable
    tanh_table: PwlTable


@dataclass
class IrnnModel:
    """A fully calibrated integer model: named cells plus optional attention."""

    kind: str
    cells: dict
    attention: AttentionPack | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in _CELL_NAMES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        expected = _CELL_NAMES[self.kind]
        if tuple(sorted(self.cells)) != tuple(sorted(expected)):
            raise ValueError(f"{self.kind} model needs cells {expected}")
        if (self.attention is not None) != (self.kind == "encdec"):
            raise ValueError("attention is present exactly for encdec models")

    def num_params(self) -> int:
        total = 0
        for cell in self.cells.values():
            w = cell.weights
            total += w.wx.data.size + w.wh.data.size
            if w.bias is not None:
                total += w.bias.size
            if w.ws is not None:
                total += w.ws.data.size
        if self.attention is not None:
            aw = self.attention.weights
            total += aw.wq.data.size + aw.wk.data.size + aw.v.data.size
        return total


def _align(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def _params_to_json(p: QuantParams) -> dict:
    return {
        "min": float(p.min),
        "max": float(p.max),
        "bitwidth": int(p.bitwidth),
        "scale": float(p.scale),
        "zero_point": int(p.zero_point),
    }


def _params_from_json(d: dict) -> QuantParams:
    return QuantParams(d["min"], d["max"], d["bitwidth"], d["scale"], d["zero_point"])


def _fx_to_json(fx: FixedPointScalar) -> dict:
    return {
        "raw": int(fx.raw),
        "fraction_bits": int(fx.fraction_bits),
        "integral_bits": int(fx.integral_bits),
        "signed": bool(fx.signed),
    }


def _fx_from_json(d: dict) -> FixedPointScalar:
    return FixedPointScalar(d["raw"], d["fraction_bits"], d["integral_bits"], d["signed"])


class _BlobWriter:
    def __init__(self):
        self.order = []
        self.payload = {}

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        tag = str(arr.dtype)
        if tag not in _DTYPES:
            raise ValueError(f"unserializable dtype {tag} for blob {name!r}")
        self.order.append((name, arr.astype(_DTYPES[tag]), tag))

    def table(self) -> tuple[dict, bytes]:
        entries = {}
        chunks = []
        offset = 0
        for name, arr, tag in self.order:
            raw = arr.tobytes()
            entries[name] = {
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
                "dtype": tag,
                "shape": list(arr.shape),
            }
            chunks.append(raw)
            padded = _align(len(raw))
            chunks.append(b"\x00" * (padded - len(raw)))
            offset += padded
        return entries, b"".join(chunks)


def _add_table(w: _BlobWriter, prefix: str, t: PwlTable) -> dict:
    w.add(f"{prefix}/knots", t.knots)
    w.add(f"{prefix}/slopes", t.slopes)
    w.add(f"{prefix}/intercepts", t.intercepts)
    w.add(f"{prefix}/q_knots", t.q_knots)
    w.add(f"{prefix}/fx_slopes", t.fx_slopes)
    w.add(f"{prefix}/fx_intercepts", t.fx_intercepts)
    return {
        "in_params": _params_to_json(t.in_params),
        "out_params": _params_to_json(t.out_params),
        "fraction_bits": int(t.fraction_bits),
        "pieces": int(t.pieces),
    }


def _table_from(entry: dict, prefix: str, blob) -> PwlTable:
    return PwlTable(
        knots=blob(f"{prefix}/knots"),
        slopes=blob(f"{prefix}/slopes"),
        intercepts=blob(f"{prefix}/intercepts"),
        q_knots=blob(f"{prefix}/q_knots"),
        in_params=_params_from_json(entry["in_params"]),
        out_params=_params_from_json(entry["out_params"]),
        fx_slopes=blob(f"{prefix}/fx_slopes"),
        fx_intercepts=blob(f"{prefix}/fx_intercepts"),
        fraction_bits=entry["fraction_bits"],
    )


def _add_cell(w: _BlobWriter, name: str, cell: IntLstmCell) -> dict:
    weights, cfg = cell.weights, cell.cfg
    prefix = f"cells/{name}"
    w.add(f"{prefix}/wx", weights.wx.data)
    w.add(f"{prefix}/wh", weights.wh.data)
    entry = {
        "wx": _params_to_json(weights.wx.params),
        "wh": _params_to_json(weights.wh.params),
        "ws": None,
        "has_bias": weights.bias is not None,
        "cfg": {
            "cell_bits": cfg.cell_bits,
            "preact_bits": cfg.preact_bits,
            "use_madnorm": cfg.use_madnorm,
            "pwl_pieces": cfg.pwl_pieces,
        },
        "sites": {k: _params_to_json(v) for k, v in cell.sites.items()},
        "fx_xprod": _fx_to_json(cell._fx_xprod),
        "fx_hprod": _fx_to_json(cell._fx_hprod),
        "tables": {
            "sigmoid": _add_table(w, f"{prefix}/tables/sigmoid", cell._sig_table),
            "tanh_gate": _add_table(w, f"{prefix}/tables/tanh_gate", cell._tanh_gate),
            "tanh_cell": _add_table(w, f"{prefix}/tables/tanh_cell", cell._tanh_cell),
        },
    }
    if weights.bias is not None:
        w.add(f"{prefix}/bias", weights.bias)
    if weights.ws is not None:
        w.add(f"{prefix}/ws", weights.ws.data)
        entry["ws"] = _params_to_json(weights.ws.params)
    return entry


def _cell_from(entry: dict, name: str, blob) -> IntLstmCell:
    prefix = f"cells/{name}"
    wx = QTensor(blob(f"{prefix}/wx"), _params_from_json(entry["wx"]))
    wh = QTensor(blob(f"{prefix}/wh"), _params_from_json(entry["wh"]))
    bias = blob(f"{prefix}/bias") if entry["has_bias"] else None
    ws = None
    if entry["ws"] is not None:
        ws = QTensor(blob(f"{prefix}/ws"), _params_from_json(entry["ws"]))
    weights = LstmWeights(wx, wh, bias, ws=ws)
    cfg = CellConfig(**entry["cfg"])
    sites = {k: _params_from_json(v) for k, v in entry["sites"].items()}
    cell = IntLstmCell(weights, cfg, sites)
    # the stored integer constants are authoritative; replace whatever the
    # constructor re-derived so replay cannot drift from the saved model
    cell._fx_xprod = _fx_from_json(entry["fx_xprod"])
    cell._fx_hprod = _fx_from_json(entry["fx_hprod"])
    tables = entry["tables"]
    cell._sig_table = _table_from(tables["sigmoid"], f"{prefix}/tables/sigmoid", blob)
    cell._tanh_gate = _table_from(tables["tanh_gate"], f"{prefix}/tables/tanh_gate", blob)
    cell._tanh_cell = _table_from(tables["tanh_cell"], f"{prefix}/tables/tanh_cell", blob)
    return cell


def save(model: IrnnModel) -> bytes:
    """Serialize to bytes; identical models produce identical bytes."""
    writer = _BlobWriter()
    cells_entry = {}
    for name in _CELL_NAMES[model.kind]:
        cells_entry[name] = _add_cell(writer, name, model.cells[name])
    att_entry = None
    if model.attention is not None:
        aw = model.attention.weights
        writer.add("att/wq", aw.wq.data)
        writer.add("att/wk", aw.wk.data)
        writer.add("att/v", aw.v.data)
        att_entry = {
            "wq": _params_to_json(aw.wq.params),
            "wk": _params_to_json(aw.wk.params),
            "v": _params_to_json(aw.v.params),
            "sites": {k: _params_to_json(v) for k, v in aw.sites.items()},
            "exp_table": _add_table(writer, "att/tables/exp", model.attention.exp_table),
            "tanh_table": _add_table(writer, "att/tables/tanh", model.attention.tanh_table),
        }

    blob_table, payload = writer.table()
    manifest = {
        "format_version": model.format_version,
        "kind": model.kind,
        "cells": cells_entry,
        "attention": att_entry,
        "meta": model.meta,
        "blobs": blob_table,
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(body))
    pad = _align(_HEADER.size + len(body)) - _HEADER.size - len(body)
    return header + body + b"\x00" * pad + payload


def load(data: bytes) -> IrnnModel:
    """Parse bytes produced by save(); inference replays bit-identically."""
    if len(data) < _HEADER.size:
        raise ValueError("truncated container: missing header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("bad magic: not an .irnn payload")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"unsupported-version: {version} (this build reads {FORMAT_VERSION})"
        )
    if _HEADER.size + mlen > len(data):
        raise ValueError("truncated container: manifest exceeds payload")
    manifest = json.loads(data[_HEADER.size : _HEADER.size + mlen].decode("utf-8"))
    if manifest.get("format_version") != version:
        raise ValueError("manifest format_version disagrees with header")
    section = _align(_HEADER.size + mlen)
    blob_table = manifest["blobs"]

    def blob(name: str) -> np.ndarray:
        entry = blob_table.get(name)
        if entry is None:
            raise ValueError(f"dangling tensor reference: {name!r}")
        start = section + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ValueError(f"checksum-mismatch: blob {name!r} truncated")
        if zlib.crc32(raw) & 0xFFFFFFFF != entry["crc32"]:
            raise ValueError(f"checksum-mismatch: blob {name!r}")
        if entry["dtype"] not in _DTYPES:
            raise ValueError(f"unknown blob dtype {entry['dtype']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
        return arr.reshape(entry["shape"]).copy()

    cells = {
        name: _cell_from(manifest["cells"][name], name, blob)
        for name in _CELL_NAMES[manifest["kind"]]
    }
    attention = None
    if manifest["attention"] is not None:
        a = manifest["attention"]
        weights = AttentionWeights(
            QTensor(blob("att/wq"), _params_from_json(a["wq"])),
            QTensor(blob("att/wk"), _params_from_json(a["wk"])),
            QTensor(blob("att/v"), _params_from_json(a["v"])),
            {k: _params_from_json(v) for k, v in a["sites"].items()},
        )
        attention = AttentionPack(
            weights,
            _table_from(a["exp_table"], "att/tables/exp", blob),
            _table_from(a["tanh_table"], "att/tables/tanh", blob),
        )
    return IrnnModel(
        kind=manifest["kind"],
        cells=cells,
        attention=attention,
        meta=manifest["meta"],
        format_version=version,
    )


def save_file(model: IrnnModel, path) -> None:
    with open(path, "wb") as f:
        f.write(save(model))


def load_file(path) -> IrnnModel:
    with open(path, "rb") as f:
        return load(f.read())


@dataclass
class FloatModel:
    """Dequantized weights keyed by the archive naming convention.

    lstm: wx, wh[, bias]; bilstm: fwd_/bwd_ prefixes; encdec: enc_/dec_
    prefixes plus dec_ws and att_wq/att_wk/att_v.
    """

    kind: str
    arrays: dict
    meta: dict = field(default_factory=dict)


def export_float(model: IrnnModel) -> FloatModel:
    """Dequantize every weight into a float32 reference model.

    meta["cells"] records each cell's use_madnorm flag; the float
    reference must normalize wherever the integer model does.
    """
    arrays = {}
    cell_meta = {}
    for name in _CELL_NAMES[model.kind]:
        cell = model.cells[name]
        cell_meta[name] = {"use_madnorm": cell.cfg.use_madnorm}
        w = cell.weights
        prefix = _FLOAT_PREFIX[name]
        arrays[prefix + "wx"] = w.wx.dequantize().astype(np.float32)
        arrays[prefix + "wh"] = w.wh.dequantize().astype(np.float32)
        if w.bias is not None:
            scale = cell.sites["x"].scale * w.wx.params.scale
            arrays[prefix + "bias"] = (w.bias.astype(np.float64) * scale).astype(
                np.float32
            )
        if w.ws is not None:
            arrays[prefix + "ws"] = w.ws.dequantize().astype(np.float32)
    if model.attention is not None:
        aw = model.attention.weights
        arrays["att_wq"] = aw.wq.dequantize().astype(np.float32)
        arrays["att_wk"] = aw.wk.dequantize().astype(np.float32)
        arrays["att_v"] = aw.v.dequantize().astype(np.float32)
    meta = dict(model.meta)
    meta["cells"] = cell_meta
    return FloatModel(kind=model.kind, arrays=arrays, meta=meta)


def save_float(fm: FloatModel) -> bytes:
    """Archive a float model as an uncompressed .npz payload."""
    buf = io.BytesIO()
    np.savez(
        buf,
        kind=np.array(fm.kind),
        meta_json=np.array(json.dumps(fm.meta, sort_keys=True)),
        **fm.arrays,
    )
    return buf.getvalue()


def _infer_kind(keys: set) -> str:
    if "wx" in keys:
        return "lstm"
    if "fwd_wx" in keys:
        return "bilstm"
    if "enc_wx" in keys:
        return "encdec"
    raise ValueError("float model archive has no recognizable weight keys")


_REQUIRED_KEYS = {
    "lstm": ("wx", "wh"),
    "bilstm": ("fwd_wx", "fwd_wh", "bwd_wx", "bwd_wh"),
    "encdec": (
        "enc_wx",
        "enc_wh",
        "dec_wx",
        "dec_wh",
        "dec_ws",
        "att_wq",
        "att_wk",
        "att_v",
    ),
}


def load_float(src) -> FloatModel:
    """Read a float model from an .npz path or the bytes of one."""
    if isinstance(src, (bytes, bytearray)):
        src = io.BytesIO(bytes(src))
    with np.load(src) as archive:
        arrays = {k: np.asarray(archive[k]) for k in archive.files}
    kind = str(arrays.pop("kind")) if "kind" in arrays else _infer_kind(set(arrays))
    meta = json.loads(str(arrays.pop("meta_json"))) if "meta_json" in arrays else {}
    if kind not in _REQUIRED_KEYS:
        raise ValueError(f"unknown model kind {kind!r}")
    missing = sorted(set(_REQUIRED_KEYS[kind]) - set(arrays))
    if missing:
        raise ValueError(f"float model missing keys: {', '.join(missing)}")
    return FloatModel(kind=kind, arrays=arrays, meta=meta)


def _read_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise ValueError("raw tensor header truncated")
        (ndim,) = struct.unpack("<I", head)
        if not 1 <= ndim <= 4:
            raise ValueError(f"raw tensor rank {ndim} out of range")
        dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        payload = f.read()
    count = int(np.prod(dims))
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != count:
        raise ValueError("raw tensor length disagrees with header")
    return arr.reshape(dims).astype(np.float64)


def _write_raw(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def load_calibration(path) -> np.ndarray:
    """Read sequences as [N x T x n] float64.

    CSV files hold one sequence (rows are timesteps); anything else is the
    raw format: u32 rank, u64 dims, little-endian float32 payload, rank 2
    ([T x n]) or 3 ([N x T x n]).
    """
    if str(path).lower().endswith(".csv"):
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        return arr[None]
    arr = _read_raw(path)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim != 3:
        raise ValueError("calibration data must be [T x n] or [N x T x n]")
    return arr


def save_calibration(path, arr: np.ndarray) -> None:
    """Write sequences; .csv takes one [T x n] sequence, else raw format."""
    arr = np.asarray(arr, dtype=np.float64)
    if str(path).lower().endswith(".csv"):
        if arr.ndim == 3:
            if arr.shape[0] != 1:
                raise ValueError("CSV holds a single sequence")
            arr = arr[0]
        np.savetxt(path, arr, delimiter=",", fmt="%.17g")
    else:
        _write_raw(path, arr)
