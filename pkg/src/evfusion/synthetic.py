"""Synthetic ball-throw recordings with RGB frames, events and collision labels.

World coordinates coincide with the drone camera frame: X right, Y down,
Z along the optical axis. The drone sits at the origin behind a wall plane
at ``Scene.wall_z``; a thrown ball stops (no bounce) once its surface
touches the wall. Gravity points along +Y.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EVENT_DTYPE, SENSOR_SIZE, make_events

GRAVITY = 9.81
BALL_DIAMETER_M = 0.15
BALL_RADIUS_M = BALL_DIAMETER_M / 2
RGB_RAW_SIZE = 160
RGB_PERIOD_US = 20_000
TRAJ_DT_US = 1_000
CONTRAST_THRESHOLD = 0.2

SPEED_RANGE = (0.329, 7.739)
LENGTH_RANGE = (0.502, 2.469)
ELEVATION_RANGE = (0.017, 2.009)
DURATION_RANGE = (2.0, 4.0)
SPLITS = ("train", "val", "test1", "test2")
SPLIT_RATIOS = (0.60, 0.15, 0.125, 0.125)
CENTRAL_HALF_WIDTH_MM = 300.0


class RecordingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    drone_pos: tuple = (0.0, 0.0, 0.0)
    fov_deg: float = 90.0
    wall_z: float = 0.6
    ground_y: float = 1.2  # floor height below the drone, along +Y
    texture_seed: int = 0
    ball_diameter_m: float = BALL_DIAMETER_M
    gravity: float = GRAVITY

    def focal(self, size: int) -> float:
        return (size / 2) / math.tan(math.radians(self.fov_deg) / 2)

    def principal(self, size: int) -> float:
        return (size - 1) / 2


@dataclass(frozen=True)
class ThrowParams:
    launch_pos: tuple
    launch_vel: tuple
    t_launch_s: float
    duration_s: float
    seed: int = 0

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.launch_vel))


@dataclass(frozen=True)
class CollisionLabel:
    x_mm: float
    y_mm: float
    t_ms: float


@dataclass
class Recording:
    id: str
    events: np.ndarray  # EVENT_DTYPE, sorted by time
    rgb_frames: np.ndarray  # (F, 160, 160, 3) uint8
    rgb_times_us: np.ndarray  # (F,) uint32
    ball_traj: np.ndarray  # (S, 3) float32, metres, one sample per TRAJ_DT_US
    drone_traj: np.ndarray  # (S, 3) float32
    label: CollisionLabel  # t_ms counted from the recording start
    split: str = ""
    scene: Scene = field(default_factory=Scene)

    @property
    def duration_us(self) -> int:
        return (len(self.ball_traj) - 1) * TRAJ_DT_US

    @property
    def traj_times_us(self) -> np.ndarray:
        return np.arange(len(self.ball_traj), dtype=np.int64) * TRAJ_DT_US

    def ball_at(self, t_us: float) -> np.ndarray:
        """Ball position linearly interpolated at ``t_us``."""
        t = np.clip(t_us / TRAJ_DT_US, 0, len(self.ball_traj) - 1)
        i = min(int(t), len(self.ball_traj) - 2)
        f = t - i
        return (1 - f) * self.ball_traj[i].astype(np.float64) + f * self.ball_traj[i + 1].astype(np.float64)

    def label_at(self, t_end_us: float) -> CollisionLabel:
        """Label relative to a window ending at ``t_end_us``."""
        return CollisionLabel(self.label.x_mm, self.label.y_mm, self.label.t_ms - t_end_us / 1000.0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.id == other.id and self.split == other.split and self.label == other.label
            and self.scene == other.scene
            and np.array_equal(self.events, other.events)
            and np.array_equal(self.rgb_frames, other.rgb_frames)
            and np.array_equal(self.rgb_times_us, other.rgb_times_us)
            and np.array_equal(self.ball_traj, other.ball_traj)
            and np.array_equal(self.drone_traj, other.drone_traj)
        )


# --------------------------------------------------------------------------
# dynamics and labels


def n_samples(duration_s: float, dt_s: float = TRAJ_DT_US / 1e6) -> int:
    return int(math.floor(duration_s / dt_s + 1e-9)) + 1


def simulate_trajectory(p: ThrowParams, dt: float = 1e-3, gravity: float = GRAVITY,
                        wall_z: float | None = None) -> np.ndarray:
    """Ballistic path sampled every ``dt`` seconds, float64 ``(S, 3)``.

    The ball rests at ``launch_pos`` until ``t_launch_s``. With ``wall_z`` set,
    motion stops where the ball's front surface reaches that plane.
    """
    t = np.arange(n_samples(p.duration_s, dt)) * dt
    tau = np.clip(t - p.t_launch_s, 0.0, None)
    x0, v0 = np.asarray(p.launch_pos, float), np.asarray(p.launch_vel, float)
    if wall_z is not None:
        t_hit = impact_time(p, wall_z)
        if t_hit is not None:
            tau = np.minimum(tau, t_hit)
    g = np.array([0.0, gravity, 0.0])
    return x0 + v0 * tau[:, None] + 0.5 * g * tau[:, None] ** 2


def impact_time(p: ThrowParams, wall_z: float) -> float | None:
    """Flight time until the ball surface touches the wall (Z is unaffected by gravity)."""
    vz = p.launch_vel[2]
    stop = wall_z + BALL_RADIUS_M
    if vz >= 0 or p.launch_pos[2] <= stop:
        return None
    return (stop - p.launch_pos[2]) / vz


def _segment_closest(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Fraction along a->b and squared distance of the point closest to the origin."""
    d = b - a
    dd = float(d @ d)
    f = 0.0 if dd == 0 else min(max(-float(a @ d) / dd, 0.0), 1.0)
    p = a + f * d
    return f, float(p @ p)


def compute_label(ball_traj, drone_traj, dt_ms: float = 1.0, t_ref_ms: float = 0.0) -> CollisionLabel:
    """Closest approach of two time-aligned 3D paths.

    The sampled argmin (earliest on ties) is refined on its two neighbouring
    segments, treating the path as piecewise linear between samples. The
    label is the relative XY in mm and the time from ``t_ref_ms``.
    """
    ball = np.asarray(ball_traj, dtype=np.float64)
    drone = np.asarray(drone_traj, dtype=np.float64)
    if ball.size == 0 or drone.size == 0:
        raise ValueError("compute_label needs non-empty trajectories")
    if ball.shape != drone.shape:
        raise ValueError(f"trajectories differ in shape: {ball.shape} vs {drone.shape}")
    rel = ball - drone
    d2 = np.einsum("ij,ij->i", rel, rel)
    k = int(np.argmin(d2))
    best_t, best_d, best_p = float(k), d2[k], rel[k]
    for lo in (k - 1, k):
        if lo < 0 or lo + 1 >= len(rel):
            continue
        f, dist = _segment_closest(rel[lo], rel[lo + 1])
        if dist < best_d and lo + f != best_t:
            best_t, best_d, best_p = lo + f, dist, rel[lo] + f * (rel[lo + 1] - rel[lo])
    return CollisionLabel(float(best_p[0] * 1000), float(best_p[1] * 1000), float(best_t * dt_ms - t_ref_ms))


def is_central(label: CollisionLabel) -> bool:
    return abs(label.x_mm) <= CENTRAL_HALF_WIDTH_MM and abs(label.y_mm) <= CENTRAL_HALF_WIDTH_MM


# --------------------------------------------------------------------------
# throw sampling


def _flight_in_view(scene: Scene, launch, vel, flight: float, samples: int = 24) -> bool:
    """Whole ball inside the square field of view along the launch-to-impact arc."""
    t = np.linspace(0.0, flight, samples)[:, None]
    pos = launch + vel * t + 0.5 * np.array([0.0, scene.gravity, 0.0]) * t**2
    half = math.tan(math.radians(scene.fov_deg) / 2)
    lim = pos[:, 2] * half - BALL_RADIUS_M
    return bool(np.all(np.abs(pos[:, 0]) <= lim) and np.all(np.abs(pos[:, 1]) <= lim))


def sample_throw(rng: np.random.Generator, scene: Scene = Scene(), max_tries: int = 20000) -> ThrowParams:
    """Random throw aimed at the wall in front of the drone, within the dataset ranges."""
    stop = scene.wall_z + BALL_RADIUS_M
    for _ in range(max_tries):
        target = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), stop])
        elevation = rng.uniform(*ELEVATION_RANGE)
        launch_y = scene.ground_y - elevation
        length = rng.uniform(*LENGTH_RANGE)
        # keep the launch point roughly inside the field of view
        dz2 = length**2 - (launch_y - target[1]) ** 2
        if dz2 <= 0:
            continue
        half = 0.5 * (stop + math.sqrt(dz2))
        launch_x = target[0] + rng.uniform(-half, half)
        dz2 -= (launch_x - target[0]) ** 2
        if dz2 <= 0:
            continue
        launch = np.array([launch_x, launch_y, stop + math.sqrt(dz2)])
        flight = rng.uniform(0.15, 1.2)
        g = np.array([0.0, scene.gravity, 0.0])
        vel = (target - launch - 0.5 * g * flight**2) / flight
        speed = float(np.linalg.norm(vel))
        if not SPEED_RANGE[0] <= speed <= SPEED_RANGE[1]:
            continue
        if not _flight_in_view(scene, launch, vel, flight):
            continue
        duration = rng.uniform(*DURATION_RANGE)
        latest = duration - flight - 0.1
        if latest < 0.2:
            continue
        t_launch = rng.uniform(0.2, latest)
        return ThrowParams(tuple(launch), tuple(vel), float(t_launch), float(duration), int(rng.integers(2**31)))
    raise RuntimeError("could not sample a throw within the configured ranges")


def throw_in_ranges(p: ThrowParams, scene: Scene = Scene()) -> bool:
    stop = scene.wall_z + BALL_RADIUS_M
    t_hit = impact_time(p, scene.wall_z)
    if t_hit is None:
        return False
    end = np.asarray(p.launch_pos) + np.asarray(p.launch_vel) * t_hit + 0.5 * np.array([0, scene.gravity, 0]) * t_hit**2
    length = float(np.linalg.norm(end - np.asarray(p.launch_pos)))
    # straight-line launch-to-impact distance; allow rounding slack on the z stop
    elevation = scene.ground_y - p.launch_pos[1]
    return (
        SPEED_RANGE[0] <= p.speed <= SPEED_RANGE[1]
        and LENGTH_RANGE[0] - 1e-9 <= length <= LENGTH_RANGE[1] + 1e-9
        and ELEVATION_RANGE[0] <= elevation <= ELEVATION_RANGE[1]
        and abs(end[2] - stop) < 1e-9
        and DURATION_RANGE[0] <= p.duration_s <= DURATION_RANGE[1]
    )


# --------------------------------------------------------------------------
# rendering


def project(scene: Scene, pos, size: int) -> tuple[float, float, float] | None:
    """Pixel ``(u, v)`` and radius of the ball at ``pos``; None behind the camera."""
    x, y, z = (float(c) for c in pos)
    if z <= 1e-6:
        return None
    f, c = scene.focal(size), scene.principal(size)
    return f * x / z + c, f * y / z + c, f * (scene.ball_diameter_m / 2) / z


def _texture(scene: Scene, size: int, y0=0, y1=None, x0=0, x1=None) -> np.ndarray:
    """Smooth static background in [0, 1]^3 as a function of viewing direction."""
    y1 = size if y1 is None else y1
    x1 = size if x1 is None else x1
    f, c = scene.focal(size), scene.principal(size)
    a = (np.arange(x0, x1) - c) / f
    b = (np.arange(y0, y1) - c) / f
    A, B = np.meshgrid(a, b)
    rng = np.random.default_rng(scene.texture_seed)
    ph = rng.uniform(0, 2 * np.pi, size=(3, 3))
    fr = rng.uniform(2.0, 6.0, size=(3, 2))
    chans = []
    for k in range(3):
        v = 0.30 + 0.06 * np.sin(fr[k, 0] * A + ph[k, 0]) * np.cos(fr[k, 1] * B + ph[k, 1])
        v += 0.03 * np.sin(fr[k, 0] * (A + B) + ph[k, 2])
        chans.append(v)
    return np.stack(chans, axis=-1)


BALL_RGB = np.array([0.90, 0.45, 0.15])
_LUMA = np.array([0.299, 0.587, 0.114])


def _coverage(u: float, v: float, r: float, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Anti-aliased disk coverage: one-pixel linear ramp across the edge."""
    d = np.sqrt((xs[None, :] - u) ** 2 + (ys[:, None] - v) ** 2)
    return np.clip(r - d + 0.5, 0.0, 1.0)


def _compose(scene: Scene, pos, size: int, box=None) -> np.ndarray:
    y0, y1, x0, x1 = box if box is not None else (0, size, 0, size)
    img = _texture(scene, size, y0, y1, x0, x1)
    pr = project(scene, pos, size)
    if pr is not None:
        u, v, r = pr
        cov = _coverage(u, v, r, np.arange(y0, y1, dtype=float), np.arange(x0, x1, dtype=float))
        img = img * (1 - cov[..., None]) + BALL_RGB * cov[..., None]
    return img


def render_rgb(scene: Scene, ball_pos, t: float = 0.0) -> np.ndarray:
    """160x160x3 uint8 frame of the ball over the static background."""
    del t  # static scene apart from the ball
    img = _compose(scene, ball_pos, RGB_RAW_SIZE)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def render_log_luminance(scene: Scene, ball_pos, box=None) -> np.ndarray:
    """Log-luminance on the 320x320 event sensor (optionally a ``(y0, y1, x0, x1)`` crop)."""
    img = _compose(scene, ball_pos, SENSOR_SIZE, box)
    return np.log(img @ _LUMA + 1e-3)


def render_events(frame_prev, frame_cur, t_prev: int, t_cur: int,
                  contrast_threshold: float = CONTRAST_THRESHOLD, offset=(0, 0)) -> np.ndarray:
    """Brightness-change events between two log-luminance frames.

    Each pixel emits ``floor(|delta| / threshold)`` events of the sign of the
    change, spread linearly over ``(t_prev, t_cur]``. ``offset`` is the
    ``(row, col)`` of a cropped frame's origin on the sensor.
    """
    delta = np.asarray(frame_cur, np.float64) - np.asarray(frame_prev, np.float64)
    counts = np.floor(np.abs(delta) / contrast_threshold + 1e-9).astype(np.int64)
    ys, xs = np.nonzero(counts)
    if len(ys) == 0:
        return np.zeros(0, dtype=EVENT_DTYPE)
    n = counts[ys, xs]
    rep = np.repeat(np.arange(len(ys)), n)
    k = np.arange(len(rep)) - np.repeat(np.cumsum(n) - n, n) + 1
    frac = k * contrast_threshold / np.abs(delta[ys, xs])[rep]
    span = t_cur - t_prev
    t = t_prev + np.minimum(np.ceil(frac * span - 1e-9), span).astype(np.int64)
    t = np.maximum(t, t_prev + 1)
    pol = np.sign(delta[ys, xs])[rep].astype(np.int8)
    y = ys[rep] + offset[0]
    x = xs[rep] + offset[1]
    order = np.lexsort((x, y, t))
    return make_events(t[order], x[order], y[order], pol[order])


class EventSimulator:
    """Per-pixel reference memory: a pixel fires once its log-luminance drifts a full threshold."""

    def __init__(self, reference: np.ndarray, threshold: float = CONTRAST_THRESHOLD):
        self.ref = reference.astype(np.float64).copy()
        self.threshold = threshold

    def step(self, frame: np.ndarray, t_prev: int, t_cur: int, box=None) -> np.ndarray:
        y0, y1, x0, x1 = box if box is not None else (0, self.ref.shape[0], 0, self.ref.shape[1])
        ref = self.ref[y0:y1, x0:x1]
        ev = render_events(ref, frame, t_prev, t_cur, self.threshold, offset=(y0, x0))
        delta = frame - ref
        fired = np.floor(np.abs(delta) / self.threshold + 1e-9)
        ref += np.sign(delta) * fired * self.threshold
        return ev


def _ball_box(scene: Scene, positions, size: int, margin: int = 3):
    boxes = [project(scene, p, size) for p in positions]
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    u = [b[0] for b in boxes]
    v = [b[1] for b in boxes]
    r = max(b[2] for b in boxes) + margin
    y0, y1 = int(math.floor(min(v) - r)), int(math.ceil(max(v) + r)) + 1
    x0, x1 = int(math.floor(min(u) - r)), int(math.ceil(max(u) + r)) + 1
    y0, x0 = max(y0, 0), max(x0, 0)
    y1, x1 = min(y1, size), min(x1, size)
    if y0 >= y1 or x0 >= x1:
        return None
    return y0, y1, x0, x1


def simulate_events(scene: Scene, traj: np.ndarray, step_us: int = TRAJ_DT_US,
                    threshold: float = CONTRAST_THRESHOLD) -> np.ndarray:
    """Event stream for a sampled trajectory, rendered only where the ball moves."""
    size = SENSOR_SIZE
    sim = EventSimulator(render_log_luminance(scene, traj[0]), threshold)
    chunks = []
    stride = max(1, step_us // TRAJ_DT_US)
    for i in range(stride, len(traj), stride):
        a, b = traj[i - stride], traj[i]
        if np.array_equal(a, b):
            continue
        box = _ball_box(scene, (a, b), size)
        if box is None:
            continue
        frame = render_log_luminance(scene, b, box)
        ev = sim.step(frame, (i - stride) * TRAJ_DT_US, i * TRAJ_DT_US, box)
        if len(ev):
            chunks.append(ev)
    if not chunks:
        return np.zeros(0, dtype=EVENT_DTYPE)
    ev = np.concatenate(chunks)
    # chunks cover disjoint (t_prev, t_cur] intervals, so this is already time-sorted
    return ev


@dataclass
class ThrowPlan:
    params: ThrowParams
    ball_traj: np.ndarray
    drone_traj: np.ndarray
    label: CollisionLabel


def plan_throw(rng: np.random.Generator, scene: Scene = Scene()) -> ThrowPlan:
    """Sample a throw and its label without rendering anything."""
    p = sample_throw(rng, scene)
    traj = simulate_trajectory(p, TRAJ_DT_US / 1e6, scene.gravity, scene.wall_z).astype(np.float32)
    drone = np.broadcast_to(np.asarray(scene.drone_pos, np.float32), traj.shape).copy()
    lab = compute_label(traj, drone)
    # stored as f32 in recording files; round now so files round-trip exactly
    label = CollisionLabel(*(float(np.float32(v)) for v in (lab.x_mm, lab.y_mm, lab.t_ms)))
    return ThrowPlan(p, traj, drone, label)


def render_recording(rec_id: str, plan: ThrowPlan, scene: Scene = Scene(), split: str = "") -> Recording:
    traj = plan.ball_traj
    times = np.arange(0, (len(traj) - 1) * TRAJ_DT_US + 1, RGB_PERIOD_US, dtype=np.uint32)
    frames = np.stack([render_rgb(scene, traj[t // TRAJ_DT_US]) for t in times])
    events = simulate_events(scene, traj.astype(np.float64))
    return Recording(rec_id, events, frames, times, traj, plan.drone_traj, plan.label, split, scene)


def generate_recording(rec_id: str, rng: np.random.Generator, scene: Scene = Scene()) -> Recording:
    return render_recording(rec_id, plan_throw(rng, scene), scene)


# --------------------------------------------------------------------------
# splits


def make_splits(labels: list[CollisionLabel], seed: int = 0) -> list[str]:
    """Stratified train/val/test1/test2 assignment over central and peripheral labels."""
    rng = np.random.default_rng(seed)
    out = [""] * len(labels)
    strata = {True: [], False: []}
    for i, lab in enumerate(labels):
        strata[is_central(lab)].append(i)
    for name, idx in strata.items():
        if len(idx) < len(SPLITS):
            kind = "central" if name else "peripheral"
            raise ValueError(f"need at least {len(SPLITS)} recordings per stratum, {kind} has {len(idx)}")
        idx = list(rng.permutation(idx))
        counts = _split_counts(len(idx))
        start = 0
        for split, c in zip(SPLITS, counts):
            for i in idx[start : start + c]:
                out[i] = split
            start += c
    return out


def _split_counts(n: int) -> list[int]:
    """Largest-remainder rounding of the split ratios, at least one per split."""
    raw = [r * n for r in SPLIT_RATIOS]
    counts = [max(1, int(math.floor(x))) for x in raw]
    while sum(counts) < n:
        i = max(range(len(raw)), key=lambda j: raw[j] - counts[j])
        counts[i] += 1
    while sum(counts) > n:
        i = max(range(len(raw)), key=lambda j: (counts[j] - raw[j], counts[j]))
        counts[i] -= 1
    return counts


# --------------------------------------------------------------------------
# recording files

MAGIC = b"ABCD"
VERSION = 1
_SPLIT_CODES = {"": 255, **{s: i for i, s in enumerate(SPLITS)}}
_HEADER = struct.Struct("<4sHH I I IHH I I 3f 3d 5d I")
_EVENT_PACKED = np.dtype([("t_us", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
EVENT_BYTES = _EVENT_PACKED.itemsize  # 9, no padding


def header_size(rec_id: str) -> int:
    return _HEADER.size + 2 + len(rec_id.encode())


def file_size(rec: Recording) -> int:
    f, h, w, _ = rec.rgb_frames.shape
    return header_size(rec.id) + EVENT_BYTES * len(rec.events) + f * (4 + h * w * 3) + 2 * 12 * len(rec.ball_traj)


def save_recording(rec: Recording, path) -> int:
    """Little-endian layout: header, id, packed events, frames (u32 time + raw RGB), trajectories."""
    f, h, w, c = rec.rgb_frames.shape if len(rec.rgb_frames) else (0, RGB_RAW_SIZE, RGB_RAW_SIZE, 3)
    if c != 3:
        raise RecordingFormatError("RGB frames must have 3 channels")
    s = rec.scene
    rid = rec.id.encode()
    head = _HEADER.pack(
        MAGIC, VERSION, _SPLIT_CODES[rec.split],
        rec.duration_us, len(rec.events), f, h, w, len(rec.ball_traj), TRAJ_DT_US,
        rec.label.x_mm, rec.label.y_mm, rec.label.t_ms,
        *s.drone_pos, s.fov_deg, s.wall_z, s.ground_y, s.ball_diameter_m, s.gravity, s.texture_seed,
    )
    ev = np.empty(len(rec.events), dtype=_EVENT_PACKED)
    for k in ("t_us", "x", "y", "p"):
        ev[k] = rec.events[k]
    frames = np.empty(f, dtype=np.dtype([("t", "<u4"), ("px", "u1", (h, w, 3))]))
    frames["t"] = rec.rgb_times_us
    frames["px"] = rec.rgb_frames
    blob = b"".join([
        head, struct.pack("<H", len(rid)), rid, ev.tobytes(), frames.tobytes(),
        np.ascontiguousarray(rec.ball_traj, "<f4").tobytes(),
        np.ascontiguousarray(rec.drone_traj, "<f4").tobytes(),
    ])
    Path(path).write_bytes(blob)
    return len(blob)


def load_recording(path) -> Recording:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 2:
        raise RecordingFormatError(f"{path}: truncated header")
    (magic, version, split_code, _dur, n_ev, n_fr, h, w, n_traj, dt_us, lx, ly, lt,
     dx, dy, dz, fov, wall, ground, diam, grav, tex) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RecordingFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RecordingFormatError(f"{path}: unsupported version {version}")
    if dt_us != TRAJ_DT_US:
        raise RecordingFormatError(f"{path}: trajectory step {dt_us} us, expected {TRAJ_DT_US}")
    codes = {v: k for k, v in _SPLIT_CODES.items()}
    if split_code not in codes:
        raise RecordingFormatError(f"{path}: unknown split code {split_code}")
    pos = _HEADER.size
    (id_len,) = struct.unpack_from("<H", data, pos)
    pos += 2
    need = pos + id_len + EVENT_BYTES * n_ev + n_fr * (4 + h * w * 3) + 24 * n_traj
    if len(data) != need:
        raise RecordingFormatError(f"{path}: size {len(data)} bytes, layout needs {need}")
    rid = data[pos : pos + id_len].decode()
    pos += id_len
    packed = np.frombuffer(data, _EVENT_PACKED, n_ev, pos)
    pos += EVENT_BYTES * n_ev
    events = make_events(packed["t_us"], packed["x"], packed["y"], packed["p"])
    fdt = np.dtype([("t", "<u4"), ("px", "u1", (h, w, 3))])
    frames = np.frombuffer(data, fdt, n_fr, pos)
    pos += fdt.itemsize * n_fr
    ball = np.frombuffer(data, "<f4", 3 * n_traj, pos).reshape(n_traj, 3).astype(np.float32)
    pos += 12 * n_traj
    drone = np.frombuffer(data, "<f4", 3 * n_traj, pos).reshape(n_traj, 3).astype(np.float32)
    scene = Scene((dx, dy, dz), fov, wall, ground, tex, diam, grav)
    label = CollisionLabel(lx, ly, lt)
    return Recording(rid, events, frames["px"].copy(), frames["t"].astype(np.uint32), ball, drone, label,
                     codes[split_code], scene)


# --------------------------------------------------------------------------
# manifest: one "<path>\t<split>" line per recording, paths relative to the manifest


def write_manifest(path, entries: list[tuple[str, str]]) -> None:
    lines = [f"{p}\t{s}" for p, s in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[tuple[Path, str]]:
    base = Path(path).parent
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ValueError(f"{path}:{n}: expected '<path>\\t<split>', got {line!r}")
        out.append((base / parts[0], parts[1]))
    return out


def generate_dataset(out_dir, count: int, seed: int = 0, scene: Scene | None = None, progress=None) -> Path:
    """Write ``count`` recordings plus ``manifest.tsv``; returns the manifest path."""
    if count <= 0:
        raise ValueError("count must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene = scene or Scene(texture_seed=seed)
    width = max(3, len(str(count - 1)))
    plans = [plan_throw(np.random.default_rng(rng.integers(2**63)), scene) for _ in range(count)]
    splits = make_splits([p.label for p in plans], seed)
    entries = []
    for i, (plan, split) in enumerate(zip(plans, splits)):
        rec = render_recording(f"rec{i:0{width}d}", plan, scene, split)
        name = f"{rec.id}.abcd"
        save_recording(rec, out / name)
        entries.append((name, split))
        if progress:
            progress(i + 1, count)
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
