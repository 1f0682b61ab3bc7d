"""Position/time error metrics binned by distance to the collision point."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import WindowSet, load_split
from .events import WindowConfig
from .model import CollisionPrediction
from .synthetic import CollisionLabel

BINS = ((0.2, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0), (2.0, math.inf))
METRICS = ("pos_err_mm", "time_err_ms")
RECORD_COLUMNS = ("id", "t_end_us", "distance_m", "pos_err_mm", "time_err_ms")
BIN_COLUMNS = ("range", "metric", "mean", "median", "sd", "mad", "n")


def bin_label(lo: float, hi: float) -> str:
    return f"{lo:.1f}+" if math.isinf(hi) else f"{lo:.1f}-{hi:.1f}"


BIN_LABELS = tuple(bin_label(lo, hi) for lo, hi in BINS)


@dataclass(frozen=True)
class EvalRecord:
    id: str
    t_end_us: int
    distance_m: float
    pos_err_mm: float
    time_err_ms: float


@dataclass(frozen=True)
class BinStats:
    range: str
    mean: float
    median: float
    sd: float
    mad: float
    n: int


def position_error(pred: CollisionPrediction, label: CollisionLabel) -> float:
    return math.hypot(pred.x_mm - label.x_mm, pred.y_mm - label.y_mm)


def time_error(pred: CollisionPrediction, label: CollisionLabel) -> float:
    return abs(pred.t_ms - label.t_ms)


def bin_index(distance_m: float) -> int | None:
    for i, (lo, hi) in enumerate(BINS):
        if lo <= distance_m < hi:
            return i
    return None


def bin_by_distance(records) -> dict[str, list[EvalRecord]]:
    """Half-open distance bins; records nearer than 0.2 m are dropped."""
    out = {label: [] for label in BIN_LABELS}
    for r in records:
        i = bin_index(r.distance_m)
        if i is not None:
            out[BIN_LABELS[i]].append(r)
    return out


def stats(values, range_label: str = "", mad: str = "max") -> BinStats:
    """Mean, median, population SD and M.A.D.

    ``mad="max"`` gives the maximum absolute deviation from the median;
    ``mad="median"`` the median absolute deviation.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("stats of an empty sample")
    med = float(np.median(v))
    dev = np.abs(v - med)
    if mad == "max":
        m = float(dev.max())
    elif mad == "median":
        m = float(np.median(dev))
    else:
        raise ValueError(f"mad must be 'max' or 'median', got {mad!r}")
    return BinStats(range_label, float(v.mean()), med, float(v.std()), m, int(v.size))


def tables(records, mad: str = "max") -> dict[str, list[BinStats]]:
    """One list of per-bin stats per metric; empty bins are omitted."""
    binned = bin_by_distance(records)
    return {
        metric: [stats([getattr(r, metric) for r in rs], label, mad) for label, rs in binned.items() if rs]
        for metric in METRICS
    }


# --------------------------------------------------------------------------
# predictors


class OraclePredictor:
    """Echoes the true labels; an evaluation sanity fixture."""

    name = "oracle"

    def predict(self, ws: WindowSet) -> np.ndarray:
        return ws.labels.astype(np.float64)


class MeanPredictor:
    """Predicts one constant label (the training-split mean)."""

    name = "mean"

    def __init__(self, mean):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(3)

    def predict(self, ws: WindowSet) -> np.ndarray:
        return np.broadcast_to(self.mean, (len(ws), 3)).copy()


class ModelPredictor:
    """Network (float or packed) plus the label standardization it was trained with."""

    def __init__(self, model, mean, std, name: str = "model"):
        self.model, self.name = model, name
        self.mean = np.asarray(mean, np.float32)
        self.std = np.asarray(std, np.float32)

    def predict(self, ws: WindowSet) -> np.ndarray:
        from .training import predict_array

        return predict_array(self.model, ws, self.mean, self.std).astype(np.float64)


def evaluate_windows(predictor, ws: WindowSet, mad: str = "max"):
    """Records for every window and the per-metric bin tables."""
    pred = predictor.predict(ws)
    lab = ws.labels.astype(np.float64)
    pos = np.hypot(pred[:, 0] - lab[:, 0], pred[:, 1] - lab[:, 1])
    tim = np.abs(pred[:, 2] - lab[:, 2])
    records = [
        EvalRecord(ws.rec_ids[i], int(ws.t_end_us[i]), float(ws.distance_m[i]), float(pos[i]), float(tim[i]))
        for i in range(len(ws))
    ]
    return records, tables(records, mad)


def evaluate(predictor, manifest, split: str, window: WindowConfig = WindowConfig(), mad: str = "max"):
    """Evaluate every eligible window of one manifest split."""
    if split not in ("train", "val", "test1", "test2"):
        raise ValueError(f"unknown split {split!r}")
    return evaluate_windows(predictor, load_split(manifest, split, window), mad)


# --------------------------------------------------------------------------
# throughput


def benchmark_throughput(model, n_iters: int = 200, warmup: int = 20, seed: int = 0) -> dict:
    """Single-window latency over ``n_iters`` runs after ``warmup``; returns Hz and ms stats."""
    from . import tensor as T
    from .model import CollisionNet

    cfg = model.cfg
    rng = np.random.default_rng(seed)
    inputs = {}
    if cfg.modality in ("evs", "fusion"):
        inputs["evs"] = rng.uniform(-1, 1, (1, cfg.in_channels_evs, 80, 80)).astype(np.float32)
    if cfg.modality in ("rgb", "fusion"):
        inputs["rgb"] = rng.uniform(-1, 1, (1, cfg.in_channels_rgb, 80, 80)).astype(np.float32)
    if isinstance(model, CollisionNet):
        def run():
            model.forward(**inputs, mode="eval")
    else:
        def run():
            model.forward(**inputs)
    lat = np.empty(n_iters)
    with T.no_grad():
        for _ in range(warmup):
            run()
        start = time.perf_counter()
        for i in range(n_iters):
            t0 = time.perf_counter()
            run()
            lat[i] = time.perf_counter() - t0
        elapsed = time.perf_counter() - start
    return {
        "hz": n_iters / elapsed,
        "median_ms": float(np.median(lat) * 1e3),
        "p95_ms": float(np.percentile(lat, 95) * 1e3),
        "mean_ms": float(lat.mean() * 1e3),
        "n_iters": n_iters,
    }


def compare_latency(models: dict, n_iters: int = 300, warmup: int = 20, seed: int = 0) -> dict:
    """Interleaved single-window timing, so drifting machine load hits every model alike."""
    from . import tensor as T
    from .model import CollisionNet

    rng = np.random.default_rng(seed)
    runners = {}
    for name, model in models.items():
        cfg = model.cfg
        inputs = {}
        if cfg.modality in ("evs", "fusion"):
            inputs["evs"] = rng.uniform(-1, 1, (1, cfg.in_channels_evs, 80, 80)).astype(np.float32)
        if cfg.modality in ("rgb", "fusion"):
            inputs["rgb"] = rng.uniform(-1, 1, (1, cfg.in_channels_rgb, 80, 80)).astype(np.float32)
        if isinstance(model, CollisionNet):
            runners[name] = (lambda m, x: lambda: m.forward(**x, mode="eval"))(model, inputs)
        else:
            runners[name] = (lambda m, x: lambda: m.forward(**x))(model, inputs)
    lat = {name: np.empty(n_iters) for name in runners}
    with T.no_grad():
        for _ in range(warmup):
            for run in runners.values():
                run()
        for i in range(n_iters):
            for name, run in runners.items():
                t0 = time.perf_counter()
                run()
                lat[name][i] = time.perf_counter() - t0
    return {name: {"median_ms": float(np.median(v) * 1e3), "p95_ms": float(np.percentile(v, 95) * 1e3),
                   "hz": float(1.0 / np.median(v))} for name, v in lat.items()}


# --------------------------------------------------------------------------
# reports


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow((r.id, r.t_end_us, f"{r.distance_m:.6f}", f"{r.pos_err_mm:.6f}", f"{r.time_err_ms:.6f}"))


def write_bins_csv(tabs: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BIN_COLUMNS)
        for metric in METRICS:
            for b in tabs.get(metric, []):
                w.writerow((b.range, metric, f"{b.mean:.6f}", f"{b.median:.6f}", f"{b.sd:.6f}", f"{b.mad:.6f}", b.n))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "evfusion"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_error_vs_distance(tables_by_model: dict, path) -> None:
    """Mean +- SD of both metrics per distance bin, one line per model."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric, unit in zip(axes, METRICS, ("mm", "ms")):
        for name, tabs in tables_by_model.items():
            rows = tabs.get(metric, [])
            if not rows:
                continue
            x = [BIN_LABELS.index(r.range) for r in rows]
            ax.errorbar(x, [r.mean for r in rows], yerr=[r.sd for r in rows], marker="o", capsize=3, label=name)
        ax.set_xticks(range(len(BIN_LABELS)))
        ax.set_xticklabels(BIN_LABELS)
        ax.set_xlabel("distance to collision point (m)")
        ax.set_ylabel(f"{metric.split('_')[0]} error ({unit})")
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_error_vs_ops(points: list[tuple[str, float, float]], path) -> None:
    """Scatter of (name, total OPs, mean position error)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ops, err in points:
        ax.scatter([ops], [err])
        ax.annotate(name, (ops, err), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xscale("log")
    ax.set_xlabel("OPs")
    ax.set_ylabel("mean position error (mm)")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def emit_report(tabs: dict, records, out_dir, name: str = "model",
                ops_points: list[tuple[str, float, float]] | None = None) -> list[Path]:
    """Write records.csv, bins.csv and, when there is data, SVG plots. Returns written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    paths = [out / "records.csv", out / "bins.csv"]
    write_records_csv(records, paths[0])
    write_bins_csv(tabs, paths[1])
    if records:
        paths.append(out / "error_vs_distance.svg")
        plot_error_vs_distance({name: tabs}, paths[-1])
    if ops_points:
        paths.append(out / "error_vs_ops.svg")
        plot_error_vs_ops(ops_points, paths[-1])
    return paths
