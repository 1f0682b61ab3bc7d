import csv
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from evfusion.model import LayerDescriptor, ModelConfig, describe_layers
from evfusion.opcount import (
    BUCKETS,
    OpsReport,
    bucket_for_bits,
    count_layer,
    group_report,
    model_report,
    total,
    write_table_csv,
)
from evfusion.quant.qat import QuantScheme

CONV_1_8 = LayerDescriptor("evs.conv1", "conv", "evs", {"cin": 1, "cout": 8, "h": 80, "w": 80})
BIN = QuantScheme.parse("dorefa")


def test_total_examples():
    assert total(OpsReport(bops=64)) == 1
    assert total(OpsReport(int4_ops=8, int8_ops=4)) == 2
    assert total(OpsReport(flops=100)) == 100
    assert total(OpsReport(bops=1, int4_ops=1, int8_ops=1, flops=1)) == Fraction(1, 64) + Fraction(1, 8) + \
        Fraction(1, 4) + 1


reports = st.builds(OpsReport, *(st.integers(0, 10**12) for _ in range(4)), st.integers(0, 10**9))


@given(reports, reports)
def test_total_is_linear(a, b):
    assert total(a) + total(b) == total(a + b)


def test_report_rejects_negative_or_float():
    with pytest.raises(ValueError):
        OpsReport(flops=-1)
    with pytest.raises(ValueError):
        OpsReport(bops=1.5)


@pytest.mark.parametrize("bits,bucket", [(1, "bops"), (2, "int4_ops"), (4, "int4_ops"), (5, "int8_ops"),
                                         (8, "int8_ops"), (32, "flops")])
def test_bucket_for_bits(bits, bucket):
    assert bucket_for_bits(bits) == bucket


def test_bucket_for_unsupported_width():
    with pytest.raises(ValueError):
        bucket_for_bits(16)


def test_conv_counts():
    assert count_layer(CONV_1_8).flops == 2 * 8 * 80 * 80 * 1 * 9 == 921_600
    r = count_layer(CONV_1_8, BIN)
    assert r.bops == 921_600 and r.flops == 8 * 80 * 80
    r4 = count_layer(CONV_1_8, QuantScheme.parse("lsq+:4"))
    assert r4.int4_ops == 921_600


def test_linear_and_attention_counts():
    head = LayerDescriptor("head", "linear", "evs", {"din": 1600, "dout": 3}, last=True)
    assert count_layer(head).flops == 9_600
    att = LayerDescriptor("attention", "attention", "evs", {"tokens": 25, "dim": 64})
    n, d = 25, 64
    assert count_layer(att).flops == 3 * 2 * n * d * d + 2 * 2 * n * n * d + 5 * n * n


def test_unknown_kind():
    with pytest.raises(ValueError):
        count_layer(LayerDescriptor("x", "lstm", "evs", {}))


def hand_flops(cfg: ModelConfig) -> int:
    """Independent closed-form FLOP count of the FP32 network."""
    flops = 0
    for cin0 in [{"evs": cfg.in_channels_evs, "rgb": cfg.in_channels_rgb}[b] for b in cfg.branches]:
        size, cin = 80, cin0
        for i, cout in enumerate(cfg.conv_widths):
            flops += 2 * cout * size * size * cin * 9 + cout * size * size  # conv + relu
            if i < 4:
                flops += cout * size * size  # pool
                size //= 2
            cin = cout
    n, d = 25 * len(cfg.branches), cfg.conv_widths[-1]
    flops += 6 * n * d * d + 4 * n * n * d + 5 * n * n
    flops += 2 * 3 * n * d
    return flops


@pytest.mark.parametrize("modality", ["evs", "rgb", "fusion"])
def test_fp32_model_report_matches_hand_count(modality):
    cfg = ModelConfig(modality=modality)
    r, _ = model_report(cfg)
    assert r.flops == hand_flops(cfg)
    assert r.bops == r.int4_ops == r.int8_ops == 0


def test_fusion_decomposes_into_encoders_and_fusion_layers():
    fus, _ = model_report(ModelConfig(modality="fusion"))
    evs, _ = model_report(ModelConfig(modality="evs"))
    rgb, _ = model_report(ModelConfig(modality="rgb"))
    single_top = {m: sum(count_layer(d).flops for d in describe_layers(ModelConfig(modality=m))
                         if d.kind in ("attention", "linear")) for m in ("evs", "rgb")}
    fusion_top = group_report(ModelConfig(modality="fusion"), "fusion").flops
    assert fus.flops == evs.flops + rgb.flops + fusion_top - single_top["evs"] - single_top["rgb"]
    assert fus.flops == (group_report(ModelConfig(modality="fusion"), "evs").flops
                         + group_report(ModelConfig(modality="fusion"), "rgb").flops + fusion_top)


@pytest.mark.parametrize("scheme", ["fp32", "lsq+:8", "lsq+:4", "dorefa", "reactnet"])
def test_fusion_dominates_single_in_every_bucket(scheme):
    s = QuantScheme.parse(scheme)
    fus, _ = model_report(ModelConfig(modality="fusion"), s)
    for m in ("evs", "rgb"):
        single, _ = model_report(ModelConfig(modality=m), s)
        for b in BUCKETS + ("param_bytes",):
            assert getattr(fus, b) >= getattr(single, b)


@pytest.mark.parametrize("modality", ["evs", "rgb", "fusion"])
@pytest.mark.parametrize("scheme", ["dorefa", "irnet", "reactnet"])
def test_binarizing_reduces_total_ops(modality, scheme):
    cfg = ModelConfig(modality=modality)
    fp, _ = model_report(cfg)
    b, _ = model_report(cfg, QuantScheme.parse(scheme))
    assert total(b) < total(fp)


def test_lsq4_param_bytes_are_an_eighth_plus_overhead():
    cfg = ModelConfig(modality="evs")
    s = QuantScheme.parse("lsq+:4")
    for d in describe_layers(cfg):
        if d.kind not in ("conv", "linear") or s.layer_bits(d) == 32:
            continue
        q, fp = count_layer(d, s), count_layer(d)
        n_w = d.shape["cout"] * d.shape["cin"] * 9
        bias = 4 * d.shape["cout"]
        overhead = q.param_bytes - (-(-n_w * 4 // 8)) - bias
        assert 0 < overhead <= 4 * d.shape["cout"] + 8
        assert q.param_bytes - overhead == -(-(fp.param_bytes - bias) // 8) + bias


def test_fusion_cost_ratios_within_band():
    f, _ = model_report(ModelConfig(modality="fusion"))
    e, _ = model_report(ModelConfig(modality="evs"))
    r, _ = model_report(ModelConfig(modality="rgb"))
    assert 1.9 <= f.flops / ((e.flops + r.flops) / 2) <= 2.2
    assert 1.6 <= f.param_bytes / ((e.param_bytes + r.param_bytes) / 2) <= 1.9


def test_report_is_deterministic():
    a = model_report(ModelConfig(modality="evs"))
    b = model_report(ModelConfig(modality="evs"))
    assert a == b


def test_table_csv(tmp_path):
    r, rows = model_report(ModelConfig(modality="evs"), BIN)
    path = tmp_path / "ops.csv"
    write_table_csv(rows, path)
    with open(path, newline="") as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["layer", "kind", "bucket", "count", "bytes"]
    for b in BUCKETS:
        assert sum(int(x["count"]) for x in got if x["bucket"] == b) == getattr(r, b)
    assert sum(int(x["bytes"]) for x in got) == r.param_bytes
