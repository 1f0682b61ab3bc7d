"""Turn recordings into fixed-size network inputs and per-window labels.

A window ending at ``t_end`` is eligible when all ``stack_k`` stacked
windows lie after launch and ``t_end`` precedes the collision time, so every
label time is positive. RGB uses the latest frame captured before each
window's end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import WindowConfig, accumulate_events, resize_rgb, stack_windows, validate_events
from .synthetic import TRAJ_DT_US, Recording, load_recording, read_manifest


@dataclass
class WindowSet:
    """Stacked inputs for many windows; ``labels`` columns are (x_mm, y_mm, t_ms)."""

    evs: np.ndarray  # (N, k, 80, 80) float32
    rgb: np.ndarray  # (N, 3k, 80, 80) float32
    labels: np.ndarray  # (N, 3) float32
    rec_ids: list = field(default_factory=list)
    t_end_us: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    distance_m: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.evs[idx], self.rgb[idx], self.labels[idx], [self.rec_ids[i] for i in idx],
                         self.t_end_us[idx], self.distance_m[idx])

    def inputs(self, modality: str, idx=None) -> dict:
        sel = slice(None) if idx is None else idx
        out = {}
        if modality in ("evs", "fusion"):
            out["evs"] = self.evs[sel]
        if modality in ("rgb", "fusion"):
            out["rgb"] = self.rgb[sel]
        return out

    @staticmethod
    def concat(parts: list["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return WindowSet(np.zeros((0, 1, 80, 80), np.float32), np.zeros((0, 3, 80, 80), np.float32),
                             np.zeros((0, 3), np.float32))
        return WindowSet(
            np.concatenate([p.evs for p in parts]), np.concatenate([p.rgb for p in parts]),
            np.concatenate([p.labels for p in parts]), sum((p.rec_ids for p in parts), []),
            np.concatenate([p.t_end_us for p in parts]), np.concatenate([p.distance_m for p in parts]),
        )


def launch_time_us(rec: Recording) -> int:
    """Last sample before the ball first moves."""
    moved = np.any(rec.ball_traj != rec.ball_traj[0], axis=1)
    if not moved.any():
        return rec.duration_us
    return (int(np.argmax(moved)) - 1) * TRAJ_DT_US


def eligible_window_ends(rec: Recording, cfg: WindowConfig) -> np.ndarray:
    """Window end times on the ``T`` grid that lie in flight and before collision."""
    T = cfg.T_us
    t_star_us = rec.label.t_ms * 1000.0
    first = launch_time_us(rec) + cfg.stack_k * T
    ends = np.arange(T * int(np.ceil(first / T)), rec.duration_us + 1, T, dtype=np.int64)
    return ends[(ends >= first) & (ends < t_star_us)]


def select_evenly(ends: np.ndarray, max_windows: int | None) -> np.ndarray:
    if max_windows is None or len(ends) <= max_windows:
        return ends
    idx = np.round(np.linspace(0, len(ends) - 1, max_windows)).astype(int)
    return ends[np.unique(idx)]


def _rgb_frame_before(rec: Recording, t_us: int):
    i = int(np.searchsorted(rec.rgb_times_us, t_us, side="left")) - 1
    if i < 0:
        raise ValueError(f"{rec.id}: no RGB frame before t={t_us} us")
    return resize_rgb(rec.rgb_frames[i], int(rec.rgb_times_us[i]))


def collision_point(rec: Recording) -> np.ndarray:
    return rec.ball_at(rec.label.t_ms * 1000.0)


def build_windows(rec: Recording, cfg: WindowConfig = WindowConfig(), max_windows: int | None = None,
                  ends: np.ndarray | None = None) -> WindowSet:
    validate_events(rec.events)
    if ends is None:
        ends = select_evenly(eligible_window_ends(rec, cfg), max_windows)
    T, k = cfg.T_us, cfg.stack_k
    one = WindowConfig(T_ms=cfg.T_ms, stack_k=1)
    evs, rgb, labels, dist = [], [], [], []
    hit = collision_point(rec)
    for t_end in ends:
        starts = [int(t_end) - (k - j) * T for j in range(k)]
        evs.append(stack_windows([accumulate_events(rec.events, s, one, validate=False) for s in starts]))
        rgb.append(stack_windows([_rgb_frame_before(rec, s + T) for s in starts]))
        lab = rec.label_at(int(t_end))
        labels.append((lab.x_mm, lab.y_mm, lab.t_ms))
        dist.append(float(np.linalg.norm(rec.ball_at(int(t_end)) - hit)))
    n = len(ends)
    return WindowSet(
        np.asarray(evs, np.float32).reshape(n, k, 80, 80),
        np.asarray(rgb, np.float32).reshape(n, 3 * k, 80, 80),
        np.asarray(labels, np.float32).reshape(n, 3),
        [rec.id] * n, np.asarray(ends, np.int64), np.asarray(dist, np.float64),
    )


def load_split(manifest, split: str, cfg: WindowConfig = WindowConfig(),
               max_windows: int | None = None) -> WindowSet:
    """All windows of one manifest split; raises if the split has no recordings."""
    entries = [p for p, s in read_manifest(manifest) if s == split]
    if not entries:
        raise ValueError(f"split {split!r} is empty in {manifest}")
    return WindowSet.concat([build_windows(load_recording(Path(p)), cfg, max_windows) for p in entries])


def label_stats(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and standard deviation used to z-score targets."""
    mean = labels.mean(axis=0).astype(np.float32)
    std = labels.std(axis=0).astype(np.float32)
    return mean, np.where(std > 0, std, 1.0).astype(np.float32)
