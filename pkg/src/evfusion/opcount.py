"""Operation and memory accounting by numeric type.

A multiply-accumulate counts as two operations. Layers run at 1 bit count
BOPs, at 2-4 bits INT4 ops, at 5-8 bits INT8 ops and in float FLOPs; the
reduction to one number is ``BOPs/64 + INT4/8 + INT8/4 + FLOPs``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from fractions import Fraction

from .model import CollisionNet, LayerDescriptor, ModelConfig, describe_layers
from .quant.qat import QuantScheme

BUCKETS = ("bops", "int4_ops", "int8_ops", "flops")
DIVISORS = {"bops": 64, "int4_ops": 8, "int8_ops": 4, "flops": 1}
SOFTMAX_FLOPS = 5
F32_BYTES = 4


@dataclass(frozen=True)
class OpsReport:
    bops: int = 0
    int4_ops: int = 0
    int8_ops: int = 0
    flops: int = 0
    param_bytes: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v!r}")

    def __add__(self, other: "OpsReport") -> "OpsReport":
        return OpsReport(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def bucket(self, name: str) -> int:
        return getattr(self, name)

    @property
    def total_ops(self) -> float:
        return float(total(self))


def total(report: OpsReport) -> Fraction:
    """Exact rational OPs."""
    return sum((Fraction(report.bucket(b), DIVISORS[b]) for b in BUCKETS), Fraction(0))


def bucket_for_bits(bits: int) -> str:
    if bits == 1:
        return "bops"
    if 2 <= bits <= 4:
        return "int4_ops"
    if 5 <= bits <= 8:
        return "int8_ops"
    if bits == 32:
        return "flops"
    raise ValueError(f"no accounting bucket for {bits}-bit layers")


def _source_conv(desc: LayerDescriptor) -> LayerDescriptor:
    """The conv whose output a relu/pool row processes."""
    idx = int(desc.name.rsplit(".", 1)[1][4:])
    return LayerDescriptor(f"{desc.group}.conv{idx}", "conv", desc.group, first=idx == 0)


def _quant_overhead(desc: LayerDescriptor, scheme: QuantScheme, n_out: int, n_in: int, n_tensors: int) -> int:
    """Bytes of quantizer parameters stored alongside one layer."""
    if scheme.kind == "lsq+":
        return F32_BYTES * n_out * n_tensors + 2 * F32_BYTES
    extra = F32_BYTES * n_in if scheme.kind == "reactnet" else 0
    return F32_BYTES * n_tensors + extra


def count_layer(desc: LayerDescriptor, scheme: QuantScheme | None = None) -> OpsReport:
    scheme = scheme or QuantScheme()
    s = desc.shape
    counts = dict.fromkeys(BUCKETS, 0)
    if desc.kind in ("relu", "pool"):
        counts[bucket_for_bits(scheme.layer_bits(_source_conv(desc)))] += s["elements"]
        rprelu = 3 * F32_BYTES * s["channels"] if scheme.kind == "reactnet" and desc.kind == "relu" else 0
        return OpsReport(**counts, param_bytes=rprelu)

    bits = scheme.layer_bits(desc)
    bucket = bucket_for_bits(bits)
    quantized = bits != 32
    if desc.kind == "conv":
        outputs = s["cout"] * s["h"] * s["w"]
        counts[bucket] += 2 * outputs * s["cin"] * 9
        n_w, n_bias, n_out, n_in, n_tensors = s["cout"] * s["cin"] * 9, s["cout"], s["cout"], s["cin"], 1
        scale_flops = outputs
    elif desc.kind == "linear":
        counts[bucket] += 2 * s["dout"] * s["din"]
        n_w, n_bias, n_out, n_in, n_tensors = s["dout"] * s["din"], s["dout"], s["dout"], s["din"], 1
        scale_flops = s["dout"]
    elif desc.kind == "attention":
        n, d = s["tokens"], s["dim"]
        counts[bucket] += 3 * 2 * n * d * d
        counts["flops"] += 2 * (2 * n * n * d) + SOFTMAX_FLOPS * n * n
        n_w, n_bias, n_out, n_in, n_tensors = 3 * d * d, 0, d, d, 3
        scale_flops = 3 * n * d
    else:
        raise ValueError(f"unknown layer kind {desc.kind!r}")

    if not quantized:
        return OpsReport(**counts, param_bytes=F32_BYTES * (n_w + n_bias))
    counts["flops"] += scale_flops
    weight_bytes = math.ceil(n_w * bits / 8)
    overhead = _quant_overhead(desc, scheme, n_out, n_in, n_tensors)
    return OpsReport(**counts, param_bytes=weight_bytes + F32_BYTES * n_bias + overhead)


@dataclass(frozen=True)
class TableRow:
    layer: str
    kind: str
    bucket: str
    count: int
    bytes: int


def model_report(model: CollisionNet | ModelConfig, scheme: QuantScheme | None = None
                 ) -> tuple[OpsReport, list[TableRow]]:
    """Sum of :func:`count_layer` over every layer, plus one table row per used bucket."""
    if scheme is None:
        scheme = getattr(model, "scheme", None) or QuantScheme()
    report = OpsReport()
    rows: list[TableRow] = []
    for desc in describe_layers(model):
        r = count_layer(desc, scheme)
        report = report + r
        used = [b for b in BUCKETS if r.bucket(b)] or ["flops"]
        # bytes go on the layer's main bucket row; secondary rows carry 0
        main = max(used, key=r.bucket)
        for b in used:
            rows.append(TableRow(desc.name, desc.kind, b, r.bucket(b), r.param_bytes if b == main else 0))
    return report, rows


def group_report(model: CollisionNet | ModelConfig, group: str, scheme: QuantScheme | None = None) -> OpsReport:
    """Sum over the layers of one descriptor group (``evs``, ``rgb``, ``fusion``)."""
    scheme = scheme or QuantScheme()
    out = OpsReport()
    for desc in describe_layers(model):
        if desc.group == group:
            out = out + count_layer(desc, scheme)
    return out


CSV_COLUMNS = ("layer", "kind", "bucket", "count", "bytes")


def write_table_csv(rows: list[TableRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow((r.layer, r.kind, r.bucket, r.count, r.bytes))
