"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"EVFC"
    4       2     format version (u16, currently 1)
    6       2     reserved, zero
    8       4     header length L (u32)
    12      L     UTF-8 JSON header, keys sorted
    ...           zero padding to a multiple of 8
    ...           tensor payloads, in header order, each starting on an 8-byte boundary

The header holds ``kind`` ("model", "packed" or "oracle"), the model
config, the quantization scheme, free-form ``meta`` and a ``tensors`` table.
Each table entry has ``name``, ``dtype``, ``shape``, ``offset`` (from the start
of the payload section) and ``nbytes``. Tensor dtypes:

``f32`` / ``f64``
    raw IEEE values, row-major.
``bits``
    a ±1 tensor as one dense bitstream: row-major, LSB-first, set bit = +1.
    ``layout`` records how it is unpacked into kernel words on load.
``intN`` (N in 2..8)
    integer codes as N-bit two's complement, one dense LSB-first bitstream.

Sub-byte tensors are stored densely (not in kernel word layout), so a 1-bit
tensor costs ``ceil(n / 8)`` bytes and a 4-bit one ``ceil(n / 2)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CollisionNet, ModelConfig
from .quant.bitpack import PackedBitTensor, pack_bits, pack_conv_weight, unpack
from .quant.qat import LsqAct, PackedModel, QuantScheme, _all_quantizers, qat_wrap, set_progress

MAGIC = b"EVFC"
VERSION = 1
_PREFIX = struct.Struct("<4sHHI")
_ALIGN = 8


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    scheme: dict
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> ndarray | PackedBitTensor
    table: list = field(default_factory=list)  # header entries as read


# --------------------------------------------------------------------------
# dense bitstreams


def _dense_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.reshape(-1).astype(bool), bitorder="little").tobytes()


def _undense_bits(buf: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, np.uint8), count=n, bitorder="little").astype(bool)


def _encode_codes(codes: np.ndarray, bits: int) -> bytes:
    c = codes.reshape(-1).astype(np.int64)
    lo, hi = -(2 ** (bits - 1)), 2**bits - 1
    if c.size and (c.min() < lo or c.max() > hi):
        raise CheckpointError(f"codes do not fit in {bits} bits")
    u = (c & (2**bits - 1)).astype(np.uint8)
    planes = (u[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return _dense_bits(planes)


def _decode_codes(buf: bytes, n: int, bits: int, signed: bool) -> np.ndarray:
    planes = _undense_bits(buf, n * bits).reshape(n, bits).astype(np.int64)
    u = (planes << np.arange(bits)).sum(axis=1)
    if signed:
        u = np.where(u >= 2 ** (bits - 1), u - 2**bits, u)
    return u.astype(np.int16)


# --------------------------------------------------------------------------
# raw container


def _entry_bytes(value, dtype: str, extra: dict) -> tuple[bytes, dict]:
    if dtype in ("f32", "f64"):
        arr = np.ascontiguousarray(value, dtype="<f4" if dtype == "f32" else "<f8")
        return arr.tobytes(), {"shape": list(arr.shape)}
    if dtype == "bits":
        vals = unpack(value)
        return _dense_bits(vals > 0), {"shape": list(value.shape), "layout": value.layout}
    bits = int(dtype[3:])
    arr = np.asarray(value)
    return _encode_codes(arr, bits), {"shape": list(arr.shape), "signed": bool(extra.get("signed", True))}


def write_container(path, kind: str, config: dict, scheme: dict, meta: dict, tensors: list) -> int:
    """``tensors`` is a list of ``(name, dtype, value, extra)``. Returns bytes written."""
    payloads, table, offset = [], [], 0
    for name, dtype, value, extra in tensors:
        raw, info = _entry_bytes(value, dtype, extra or {})
        pad = (-offset) % _ALIGN
        offset += pad
        payloads.append(b"\0" * pad + raw)
        table.append({"name": name, "dtype": dtype, "offset": offset, "nbytes": len(raw), **info})
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "config": config, "scheme": scheme, "meta": meta, "tensors": table},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    head = _PREFIX.pack(MAGIC, VERSION, 0, len(header)) + header
    head += b"\0" * ((-len(head)) % _ALIGN)
    blob = head + b"".join(payloads)
    Path(path).write_bytes(blob)
    return len(blob)


def _decode_entry(e: dict, raw: bytes):
    shape = tuple(e["shape"])
    n = int(np.prod(shape)) if shape else 1
    dtype = e["dtype"]
    if dtype in ("f32", "f64"):
        return np.frombuffer(raw, "<f4" if dtype == "f32" else "<f8").reshape(shape).copy()
    if dtype == "bits":
        vals = np.where(_undense_bits(raw, n), 1.0, -1.0).astype(np.float32).reshape(shape)
        if e.get("layout") == "conv_weight":
            return pack_conv_weight(vals)
        return pack_bits(vals)
    if dtype.startswith("int") and 2 <= int(dtype[3:]) <= 8:
        return _decode_codes(raw, n, int(dtype[3:]), e.get("signed", True)).reshape(shape)
    raise CheckpointError(f"unknown tensor dtype {dtype!r} for {e['name']}")


def read_container(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, _, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    end = _PREFIX.size + hlen
    if end > len(data):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[_PREFIX.size:end])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    base = end + (-end) % _ALIGN
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated payload for {e['name']}")
        tensors[e["name"]] = _decode_entry(e, data[lo:hi])
    return Checkpoint(header["kind"], header["config"], header["scheme"], header["meta"], tensors,
                      header["tensors"])


# --------------------------------------------------------------------------
# models


def _progress(model: CollisionNet) -> float:
    return max((getattr(q, "progress", 0.0) for q in _all_quantizers(model)), default=0.0)


def save_model(path, model: CollisionNet, meta: dict | None = None) -> int:
    """Trainable checkpoint: latent float weights plus every quantizer parameter."""
    scheme = model.scheme or QuantScheme()
    meta = dict(meta or {})
    meta.setdefault("progress", _progress(model))
    tensors = [(name, "f32", t.data, None) for name, t in model.parameters()]
    return write_container(path, "model", model.cfg.to_dict(), scheme.to_dict(), meta, tensors)


def _model_from(ck: Checkpoint) -> CollisionNet:
    cfg = ModelConfig(**ck.config)
    scheme = QuantScheme.from_dict(ck.scheme)
    model = CollisionNet(cfg)
    if scheme.kind != "fp32":
        model = qat_wrap(model, scheme)
    else:
        model.scheme = scheme
    params = model.named_parameters()
    if set(params) != set(ck.tensors):
        missing = sorted(set(params) ^ set(ck.tensors))
        raise CheckpointError(f"checkpoint does not match its config/scheme: {missing[:5]}")
    for name, t in params.items():
        value = ck.tensors[name]
        if value.shape != t.data.shape:
            raise CheckpointError(f"{name}: shape {value.shape} != {t.data.shape}")
        t.data = value.astype(np.float32)
    for layer in _all_quantizers(model):
        if isinstance(layer, LsqAct):
            layer.initialized = True
    set_progress(model, float(ck.meta.get("progress", 0.0)))
    return model


# packed models: the nested layer dict is flattened into named tensors


def _flatten(spec, prefix: str, tensors: list, bits_hint: int | None = None):
    if isinstance(spec, dict):
        out = {}
        hint = spec.get("bits") if spec.get("kind") == "lsq" else None
        for k, v in sorted(spec.items()):
            out[k] = _flatten(v, f"{prefix}.{k}" if prefix else k, tensors, hint if k == "codes" else None)
        return out
    if isinstance(spec, list):
        return [_flatten(v, f"{prefix}.{i}", tensors) for i, v in enumerate(spec)]
    if isinstance(spec, PackedBitTensor):
        tensors.append((prefix, "bits", spec, None))
        return {"$tensor": prefix}
    if isinstance(spec, np.ndarray):
        if bits_hint is not None:
            tensors.append((prefix, f"int{bits_hint}", spec, {"signed": True}))
        else:
            tensors.append((prefix, "f32", spec, None))
        return {"$tensor": prefix}
    if isinstance(spec, float):
        # binary scales; f64 keeps python floats exact
        tensors.append((prefix, "f64", np.float64(spec), None))
        return {"$scalar": prefix}
    return spec


def _unflatten(spec, tensors: dict):
    if isinstance(spec, dict):
        if set(spec) == {"$tensor"}:
            return tensors[spec["$tensor"]]
        if set(spec) == {"$scalar"}:
            return float(np.asarray(tensors[spec["$scalar"]]).item())
        return {k: _unflatten(v, tensors) for k, v in spec.items()}
    if isinstance(spec, list):
        return [_unflatten(v, tensors) for v in spec]
    return spec


def save_packed(path, packed: PackedModel, meta: dict | None = None) -> int:
    """Inference checkpoint from :func:`export_packed`; sub-byte tensors are bit-dense."""
    tensors: list = []
    layout = _flatten(packed.layers, "", tensors)
    meta = dict(meta or {})
    meta["layers"] = layout
    return write_container(path, "packed", packed.cfg.to_dict(), packed.scheme.to_dict(), meta, tensors)


def save_oracle(path, config: ModelConfig, predictor: str = "oracle", meta: dict | None = None) -> int:
    """Label-echo (``oracle``) or constant (``mean``) predictor, used as an evaluation fixture."""
    meta = dict(meta or {})
    meta["predictor"] = predictor
    return write_container(path, "oracle", config.to_dict(), QuantScheme().to_dict(), meta, [])


def load(path):
    """Returns ``(model, checkpoint)``; ``model`` is a CollisionNet, PackedModel or None for oracles."""
    ck = read_container(path)
    if ck.kind == "model":
        return _model_from(ck), ck
    if ck.kind == "packed":
        layers = _unflatten(ck.meta["layers"], ck.tensors)
        return PackedModel(ModelConfig(**ck.config), QuantScheme.from_dict(ck.scheme), layers), ck
    if ck.kind == "oracle":
        return None, ck
    raise CheckpointError(f"unknown checkpoint kind {ck.kind!r}")


def load_model(path) -> CollisionNet:
    model, ck = load(path)
    if not isinstance(model, CollisionNet):
        raise CheckpointError(f"{path} holds a {ck.kind!r} checkpoint, not a trainable model")
    return model


def weight_payload_bytes(ck: Checkpoint, quantized_only: bool = True) -> tuple[int, int]:
    """(stored bytes, FP32-equivalent bytes) over weight tensors of a packed checkpoint."""
    stored = fp32 = 0
    for e in ck.table:
        if quantized_only and e["dtype"] in ("f32", "f64"):
            continue
        if e["dtype"] == "f64":
            continue
        if not (e["name"].endswith(".weight") or e["name"].endswith(".codes") or e["name"].endswith(".packed")):
            continue
        n = int(np.prod(e["shape"]))
        stored += e["nbytes"]
        fp32 += 4 * n
    return stored, fp32
