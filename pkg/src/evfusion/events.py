"""Event-stream and RGB preprocessing into 80x80 network inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SENSOR_SIZE = 320
FRAME_SIZE = 80
BIN = SENSOR_SIZE // FRAME_SIZE

# structured layout shared with the recording file format
EVENT_DTYPE = np.dtype([("t_us", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventStreamError(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    T_ms: float = 20.0
    stack_k: int = 1

    def __post_init__(self):
        if self.T_ms <= 0:
            raise ValueError("T_ms must be positive")
        if self.stack_k < 1:
            raise ValueError("stack_k must be >= 1")

    @property
    def T_us(self) -> int:
        return int(round(self.T_ms * 1000))


@dataclass
class EventFrame:
    grid: np.ndarray  # (80, 80) int32, row = y, col = x
    window_start_us: int
    window_len_us: int


@dataclass
class RgbFrame:
    pixels: np.ndarray  # (80, 80, 3) float32 in [-1, 1]
    timestamp_us: int = 0


def make_events(t_us, x, y, p) -> np.ndarray:
    ev = np.empty(len(t_us), dtype=EVENT_DTYPE)
    ev["t_us"], ev["x"], ev["y"], ev["p"] = t_us, x, y, p
    return ev


def validate_events(events: np.ndarray) -> None:
    if len(events) == 0:
        return
    if np.any(np.diff(events["t_us"].astype(np.int64)) < 0):
        raise EventStreamError("event stream is not sorted by timestamp")
    if events["x"].max() >= SENSOR_SIZE or events["y"].max() >= SENSOR_SIZE:
        raise EventStreamError(f"event coordinate outside the {SENSOR_SIZE}x{SENSOR_SIZE} sensor")
    if not np.all(np.abs(events["p"]) == 1):
        raise EventStreamError("polarity must be +1 or -1")


def window_slice(events: np.ndarray, t0_us: int, t1_us: int) -> np.ndarray:
    """Events with ``t0 <= t < t1`` from a sorted stream."""
    ts = events["t_us"]
    lo = np.searchsorted(ts, t0_us, side="left")
    hi = np.searchsorted(ts, t1_us, side="left")
    return events[lo:hi]


def accumulate_events(
    events: np.ndarray, t0_us: int, config: WindowConfig = WindowConfig(), validate: bool = True
) -> EventFrame:
    """Polarity-difference frame over the half-open window ``[t0, t0 + T)``.

    Sensor pixels are binned 4x4 onto the 80x80 grid.
    """
    if validate:
        validate_events(events)
    t1_us = t0_us + config.T_us
    ev = window_slice(events, t0_us, t1_us)
    cell = (ev["y"].astype(np.int64) // BIN) * FRAME_SIZE + ev["x"].astype(np.int64) // BIN
    grid = np.bincount(cell, weights=ev["p"].astype(np.float64), minlength=FRAME_SIZE * FRAME_SIZE)
    return EventFrame(grid.astype(np.int32).reshape(FRAME_SIZE, FRAME_SIZE), t0_us, config.T_us)


def normalize_event_frame(frame: EventFrame | np.ndarray, clip: float = 8.0) -> np.ndarray:
    """Clamp counts to ``±clip`` and scale into [-1, 1]; returns (1, 80, 80) float32."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    grid = frame.grid if isinstance(frame, EventFrame) else np.asarray(frame)
    out = np.clip(grid.astype(np.float32), -clip, clip) / np.float32(clip)
    return out[None]


def resize_rgb(raw: np.ndarray, timestamp_us: int = 0) -> RgbFrame:
    """Box-average an 8-bit HxWx3 image down to 80x80 and map [0, 255] to [-1, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {raw.shape}")
    h, w = raw.shape[:2]
    if h < FRAME_SIZE or w < FRAME_SIZE:
        raise ValueError(f"image {h}x{w} is smaller than {FRAME_SIZE}x{FRAME_SIZE}")
    img = raw.astype(np.float64)
    if h % FRAME_SIZE == 0 and w % FRAME_SIZE == 0:
        fy, fx = h // FRAME_SIZE, w // FRAME_SIZE
        small = img.reshape(FRAME_SIZE, fy, FRAME_SIZE, fx, 3).mean(axis=(1, 3))
    else:
        small = np.einsum("ih,hwc,jw->ijc", _box_weights(h), img, _box_weights(w))
    pixels = (small / 127.5 - 1.0).astype(np.float32)
    return RgbFrame(np.clip(pixels, -1.0, 1.0), timestamp_us)


def _box_weights(n: int) -> np.ndarray:
    """Area-overlap weights mapping n input samples onto 80 output cells."""
    edges = np.linspace(0.0, n, FRAME_SIZE + 1)
    w = np.zeros((FRAME_SIZE, n))
    for i in range(FRAME_SIZE):
        a, b = edges[i], edges[i + 1]
        lo, hi = int(np.floor(a)), int(np.ceil(b))
        for j in range(lo, min(hi, n)):
            w[i, j] = min(b, j + 1) - max(a, j)
        w[i] /= b - a
    return w


def rgb_tensor(frame: RgbFrame) -> np.ndarray:
    """Channel-first (3, 80, 80) view of an RGB frame."""
    return np.ascontiguousarray(frame.pixels.transpose(2, 0, 1))


def stack_windows(frames) -> np.ndarray:
    """Concatenate consecutive frames along channels, oldest first.

    Event frames must tile time without gaps or overlaps; RGB frames must be
    evenly spaced.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    if isinstance(frames[0], EventFrame):
        for a, b in zip(frames, frames[1:]):
            if b.window_len_us != a.window_len_us:
                raise ValueError("windows differ in length")
            if b.window_start_us != a.window_start_us + a.window_len_us:
                raise ValueError(
                    f"windows not contiguous: {a.window_start_us}+{a.window_len_us} != {b.window_start_us}"
                )
        return np.concatenate([normalize_event_frame(f) for f in frames], axis=0)
    if isinstance(frames[0], RgbFrame):
        if len(frames) > 2:
            steps = np.diff([f.timestamp_us for f in frames])
            if np.any(steps != steps[0]):
                raise ValueError("RGB frames are not evenly spaced")
        return np.concatenate([rgb_tensor(f) for f in frames], axis=0)
    return np.concatenate([np.asarray(f, dtype=np.float32) for f in frames], axis=0)
