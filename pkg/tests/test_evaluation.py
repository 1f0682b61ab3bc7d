import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evfusion.dataset import load_split
from evfusion.evaluation import (
    BIN_COLUMNS,
    BIN_LABELS,
    RECORD_COLUMNS,
    EvalRecord,
    MeanPredictor,
    ModelPredictor,
    OraclePredictor,
    benchmark_throughput,
    bin_by_distance,
    bin_index,
    emit_report,
    evaluate,
    evaluate_windows,
    position_error,
    stats,
    tables,
    time_error,
)
from evfusion.model import CollisionNet, CollisionPrediction, ModelConfig
from evfusion.opcount import model_report
from evfusion.quant.qat import QuantScheme, export_packed, init_quantizers, qat_wrap
from evfusion.synthetic import CollisionLabel


def test_error_examples():
    lab = CollisionLabel(10.0, -20.0, 300.0)
    assert position_error(CollisionPrediction(10.0, -20.0, 300.0), lab) == 0.0
    assert position_error(CollisionPrediction(40.0, 20.0, 0.0), lab) == 50.0
    assert time_error(CollisionPrediction(0, 0, 280.0), lab) == 20.0
    swapped = position_error(CollisionPrediction(20.0, 40.0, 0), CollisionLabel(-20.0, 10.0, 0))
    assert swapped == position_error(CollisionPrediction(40.0, 20.0, 0), lab)


@pytest.mark.parametrize("d,label", [(0.2, "0.2-0.5"), (0.4999, "0.2-0.5"), (0.5, "0.5-1.0"), (1.5, "1.5-2.0"),
                                     (2.0, "2.0+"), (3.2, "2.0+")])
def test_bin_boundaries(d, label):
    assert BIN_LABELS[bin_index(d)] == label


def test_close_records_are_dropped():
    assert bin_index(0.19) is None


def rec(d, pos=1.0, t=1.0):
    return EvalRecord("r", 0, d, pos, t)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), max_size=80))
def test_binning_is_a_partition(distances):
    binned = bin_by_distance([rec(d) for d in distances])
    assert sum(len(v) for v in binned.values()) == sum(d >= 0.2 for d in distances)


def test_stats_examples():
    one = stats([5.0])
    assert (one.mean, one.median, one.sd, one.mad, one.n) == (5.0, 5.0, 0.0, 0.0, 1)
    s = stats([1.0, 2.0, 3.0, 4.0])
    assert (s.mean, s.median, s.mad) == (2.5, 2.5, 1.5)
    assert s.sd == pytest.approx(math.sqrt(1.25))
    assert stats([1.0, 2.0, 3.0, 4.0], mad="median").mad == 1.0
    with pytest.raises(ValueError):
        stats([])
    with pytest.raises(ValueError):
        stats([1.0], mad="mean")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=30), st.floats(0.01, 100), st.randoms())
def test_stats_scale_and_permutation(values, c, rnd):
    base = stats(values)
    shuffled = list(values)
    rnd.shuffle(shuffled)
    perm = stats(shuffled)
    assert (perm.median, perm.mad, perm.n) == (base.median, base.mad, base.n)
    assert (perm.mean, perm.sd) == pytest.approx((base.mean, base.sd), rel=1e-12, abs=1e-12)
    scaled = stats([c * v for v in values])
    for f in ("mean", "median", "sd", "mad"):
        assert getattr(scaled, f) == pytest.approx(c * getattr(base, f), rel=1e-9, abs=1e-9)


def test_tables_omit_empty_bins():
    tabs = tables([rec(0.3), rec(0.4), rec(2.5)])
    assert [b.range for b in tabs["pos_err_mm"]] == ["0.2-0.5", "2.0+"]
    assert tables([]) == {"pos_err_mm": [], "time_err_ms": []}


@pytest.fixture(scope="module")
def test1(tiny_dataset):
    return load_split(tiny_dataset, "test1")


def test_oracle_predictor_has_zero_error(tiny_dataset):
    records, tabs = evaluate(OraclePredictor(), tiny_dataset, "test1")
    assert records and all(r.pos_err_mm == 0 and r.time_err_ms == 0 for r in records)
    assert all(b.mean == 0 and b.mad == 0 for rows in tabs.values() for b in rows)


def test_mean_predictor_matches_closed_form(test1):
    mean = np.array([12.0, -30.0, 400.0])
    records, _ = evaluate_windows(MeanPredictor(mean), test1)
    lab = test1.labels.astype(np.float64)
    expected_pos = np.sqrt((lab[:, 0] - 12.0) ** 2 + (lab[:, 1] + 30.0) ** 2)
    np.testing.assert_allclose([r.pos_err_mm for r in records], expected_pos, atol=1e-6)
    np.testing.assert_allclose([r.time_err_ms for r in records], np.abs(lab[:, 2] - 400.0), atol=1e-6)


def test_unknown_split_is_rejected(tiny_dataset):
    with pytest.raises(ValueError):
        evaluate(OraclePredictor(), tiny_dataset, "holdout")


def test_modalities_share_record_counts(test1):
    counts = []
    for m in ("evs", "rgb", "fusion"):
        net = CollisionNet(ModelConfig(modality=m, conv_widths=(2, 2, 4, 4, 4, 4)))
        _, tabs = evaluate_windows(ModelPredictor(net, np.zeros(3), np.ones(3)), test1)
        counts.append([(b.range, b.n) for b in tabs["pos_err_mm"]])
    assert counts[0] == counts[1] == counts[2]


def test_report_files(tmp_path, test1):
    records, tabs = evaluate_windows(MeanPredictor([0, 0, 500]), test1)
    paths = emit_report(tabs, records, tmp_path / "a", ops_points=[("mean", 1.0, 10.0)])
    names = sorted(p.name for p in paths)
    assert names == ["bins.csv", "error_vs_distance.svg", "error_vs_ops.svg", "records.csv"]
    with open(tmp_path / "a" / "records.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == RECORD_COLUMNS and len(rows) == len(records)
    with open(tmp_path / "a" / "bins.csv", newline="") as fh:
        bins = list(csv.DictReader(fh))
    assert tuple(bins[0]) == BIN_COLUMNS
    assert len(bins) == 2 * len(tabs["pos_err_mm"])
    emit_report(tabs, records, tmp_path / "b", ops_points=[("mean", 1.0, 10.0)])
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_report_has_headers_only(tmp_path):
    paths = emit_report(tables([]), [], tmp_path)
    assert [p.name for p in paths] == ["records.csv", "bins.csv"]
    assert (tmp_path / "records.csv").read_text() == ",".join(RECORD_COLUMNS) + "\n"
    assert (tmp_path / "bins.csv").read_text() == ",".join(BIN_COLUMNS) + "\n"


def test_unwritable_report_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(tables([]), [], blocker / "sub")


def test_throughput_report_is_consistent():
    r = benchmark_throughput(CollisionNet(ModelConfig(modality="evs")), n_iters=20, warmup=2)
    assert r["n_iters"] == 20 and r["hz"] > 0
    # Hz counts the whole timed loop, so it cannot exceed the per-call mean rate
    assert r["hz"] <= 1000.0 / r["mean_ms"] * 1.0001
    assert r["median_ms"] <= r["p95_ms"]


def test_binary_export_has_fewer_ops_than_fp32(rng):
    net = CollisionNet(ModelConfig(modality="evs"))
    q = qat_wrap(net, QuantScheme.parse("dorefa"))
    init_quantizers(q, rng.uniform(-1, 1, (2, 1, 80, 80)).astype(np.float32))
    packed = export_packed(q)
    fp, _ = model_report(net)
    b, _ = model_report(packed.cfg, packed.scheme)
    assert b.total_ops < fp.total_ops
    assert benchmark_throughput(packed, n_iters=5, warmup=1)["hz"] > 0
