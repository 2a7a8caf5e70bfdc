"""Deterministic 2D closed-loop driving world: kinematic bicycle vehicle,
closed-centerline tracks, a perspective ground-plane camera, a pure-pursuit
expert, and the episode loop that ties rendering, attacks and control together.

Conventions: world coordinates in meters; heading theta with forward
vector (cos t, sin t) and the vehicle's right-hand side along (-sin t, cos t),
so positive steering (command +1) turns toward positive lateral offset.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks, nn
from .model import preprocess
from .telemetry import FrameRecord, Telemetry

WHEELBASE = 2.5          # m
SPEED = 10.0             # m/s, constant
DELTA_MAX = math.radians(25.0)
DEFAULT_DT = 0.05        # s, 20 Hz control period
LOOKAHEAD = 8.0          # m, pure-pursuit lookahead along the centerline

# camera intrinsics for the synthetic front camera (128 wide x 96 tall)
CAM_W = 128
CAM_H = 96
HORIZON_ROW = 37
CAM_HEIGHT = 1.6         # m above ground
FOCAL_PX = 64.0
MAX_DEPTH = 100.0        # m, haze cutoff

COLOR_SKY = np.array([0.55, 0.78, 0.95], dtype=np.float32)
COLOR_HAZE = np.array([0.62, 0.72, 0.78], dtype=np.float32)
COLOR_GRASS = np.array([0.18, 0.52, 0.20], dtype=np.float32)
COLOR_ROAD = np.array([0.50, 0.50, 0.50], dtype=np.float32)
COLOR_EDGE = np.array([0.15, 0.15, 0.15], dtype=np.float32)
COLOR_DASH = np.array([0.95, 0.95, 0.95], dtype=np.float32)
EDGE_BAND = 0.35         # m inside each road boundary painted dark
DASH_HALF_WIDTH = 0.15   # m
DASH_PERIOD = 4.0        # m of arclength
DASH_ON = 2.2            # m painted white within each period


class ExpertLostError(Exception):
    """Vehicle wandered too far from the track for the expert to recover."""


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = SPEED
    steering_cmd: float = 0.0


class Track:
    """Closed centerline polyline with a road width, loaded from JSON."""

    def __init__(self, name, road_width, waypoints):
        self.name = str(name)
        self.road_width = float(road_width)
        wp = np.asarray(waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 8:
            raise ValueError("track needs at least 8 [x, y] waypoints")
        if not np.isfinite(wp).all() or not math.isfinite(self.road_width):
            raise ValueError("track contains non-finite values")
        if self.road_width <= 0:
            raise ValueError("road_width must be positive")
        self.waypoints = wp
        self.segments = np.roll(wp, -1, axis=0) - wp
        self.seg_len = np.linalg.norm(self.segments, axis=1)
        if (self.seg_len < 1e-9).any():
            raise ValueError("track has duplicate consecutive waypoints")
        self.seg_len2 = self.seg_len ** 2
        self.cum_s = np.concatenate([[0.0], np.cumsum(self.seg_len)[:-1]])
        self.total_len = float(self.seg_len.sum())
        self._check_self_intersection()

    def _check_self_intersection(self):
        """Reject tracks whose road surface would overlap itself.

        Segment pairs close together *along* the loop trace the same stretch
        of road and are allowed to be near; distant pairs must stay at least
        a road width apart so the two surfaces cannot overlap.
        """
        n = len(self.waypoints)
        a0 = self.waypoints
        a1 = self.waypoints + self.segments
        mid_s = self.cum_s + self.seg_len / 2.0
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue  # adjacent through the loop closure
                ds = abs(mid_s[i] - mid_s[j])
                ds = min(ds, self.total_len - ds)
                local = 2.0 * self.road_width + (self.seg_len[i] + self.seg_len[j])
                if ds < local:
                    continue
                d = _segment_distance(a0[i], a1[i], a0[j], a1[j])
                if d < self.road_width:
                    raise ValueError(
                        f"centerline segments {i} and {j} are {d:.2f} m apart, "
                        f"closer than the road width {self.road_width}")

    # -- geometry ------------------------------------------------------------

    def nearest(self, points: np.ndarray):
        """Signed offset (positive right of path) and arclength for (m, 2) points."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        wp, seg = self.waypoints, self.segments
        # t = (p - wp_i) . seg_i / |seg_i|^2, clamped to the segment
        proj = p @ seg.T - np.einsum("ns,ns->n", wp, seg)
        t = np.clip(proj / self.seg_len2, 0.0, 1.0)
        d0 = (p ** 2).sum(axis=1)[:, None] - 2.0 * (p @ wp.T) + (wp ** 2).sum(axis=1)
        dist2 = d0 - 2.0 * t * proj + t ** 2 * self.seg_len2
        j = np.argmin(dist2, axis=1)
        rows = np.arange(len(p))
        tj = t[rows, j]
        closest = wp[j] + tj[:, None] * seg[j]
        off = p - closest
        tangent = seg[j] / self.seg_len[j][:, None]
        signed = -off[:, 0] * tangent[:, 1] + off[:, 1] * tangent[:, 0]
        s = self.cum_s[j] + tj * self.seg_len[j]
        return signed, s

    def point_at(self, s: float):
        """Centerline point and unit tangent at arclength s (wrapped)."""
        s = float(s) % self.total_len
        j = int(np.searchsorted(self.cum_s, s, side="right")) - 1
        t = (s - self.cum_s[j]) / self.seg_len[j]
        point = self.waypoints[j] + t * self.segments[j]
        tangent = self.segments[j] / self.seg_len[j]
        return point, tangent

    def to_json(self):
        return {"name": self.name, "road_width": self.road_width,
                "waypoints": self.waypoints.tolist()}


def _segment_distance(p0, p1, q0, q1):
    if _segments_intersect(p0, p1, q0, q1):
        return 0.0
    return min(_point_segment_distance(p0, q0, q1),
               _point_segment_distance(p1, q0, q1),
               _point_segment_distance(q0, p0, p1),
               _point_segment_distance(q1, p0, p1))


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-18), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _segments_intersect(p0, p1, q0, q1):
    def ccw(a, b, c):
        return (c[1] - a[1]) * (b[0] - a[0]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = ccw(q0, q1, p0), ccw(q0, q1, p1)
    d3, d4 = ccw(p0, p1, q0), ccw(p0, p1, q1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def load_track(path) -> Track:
    data = json.loads(Path(path).read_text())
    for key in ("name", "road_width", "waypoints"):
        if key not in data:
            raise ValueError(f"track file missing {key!r}")
    return Track(data["name"], data["road_width"], data["waypoints"])


def bundled_track_path(name: str) -> Path:
    return Path(__file__).parent / "tracks" / f"{name}.json"


def resolve_track(spec: str) -> Track:
    """Load a track from a path, or by bundled name (train_track / eval_track)."""
    p = Path(spec)
    if p.exists():
        return load_track(p)
    bundled = bundled_track_path(Path(spec).stem)
    if bundled.exists():
        return load_track(bundled)
    raise FileNotFoundError(f"no track file or bundled track named {spec!r}")


# ---------------------------------------------------------------------------
# vehicle dynamics

def _normalize_heading(theta: float) -> float:
    t = math.remainder(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    return t


def step(state: VehicleState, steering_cmd: float, dt: float) -> VehicleState:
    """Kinematic bicycle update at constant speed."""
    if not (0.0 < dt <= 0.1):
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    if not all(map(math.isfinite, (state.x, state.y, state.heading, steering_cmd))):
        raise ValueError("non-finite vehicle state or command")
    cmd = min(1.0, max(-1.0, float(steering_cmd)))
    delta = cmd * DELTA_MAX
    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = _normalize_heading(state.heading + (v / WHEELBASE) * math.tan(delta) * dt)
    return replace(state, x=x, y=y, heading=heading, steering_cmd=cmd)


def start_state(track: Track) -> VehicleState:
    point, tangent = track.point_at(0.0)
    return VehicleState(x=float(point[0]), y=float(point[1]),
                        heading=math.atan2(tangent[1], tangent[0]))


def lateral_offset(track: Track, state: VehicleState) -> float:
    """Signed distance to the nearest centerline point; positive = right of path."""
    signed, _ = track.nearest(np.array([[state.x, state.y]]))
    return float(signed[0])


def off_road(track: Track, state: VehicleState) -> bool:
    return abs(lateral_offset(track, state)) > track.road_width / 2.0


# ---------------------------------------------------------------------------
# expert controller

def expert_control(track: Track, state: VehicleState) -> float:
    """Pure-pursuit steering toward a lookahead point on the centerline."""
    signed, s = track.nearest(np.array([[state.x, state.y]]))
    if abs(float(signed[0])) > track.road_width * 3.0:
        raise ExpertLostError(
            f"vehicle {abs(float(signed[0])):.1f} m off centerline")
    target, _ = track.point_at(float(s[0]) + LOOKAHEAD)
    dx = target[0] - state.x
    dy = target[1] - state.y
    cos_t, sin_t = math.cos(state.heading), math.sin(state.heading)
    forward = dx * cos_t + dy * sin_t
    lateral = -dx * sin_t + dy * cos_t   # positive toward the vehicle's right
    dist = math.hypot(forward, lateral)
    if dist < 1e-9:
        return 0.0
    alpha = math.atan2(lateral, forward)
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), dist)
    return min(1.0, max(-1.0, delta / DELTA_MAX))


# ---------------------------------------------------------------------------
# camera renderer

def render_camera(track: Track, state: VehicleState) -> np.ndarray:
    """Flat-ground perspective raster of the road; deterministic per state."""
    img = np.empty((CAM_H, CAM_W, 3), dtype=np.float32)
    img[:HORIZON_ROW] = COLOR_SKY

    rows = np.arange(HORIZON_ROW, CAM_H, dtype=np.float64)
    depth = CAM_HEIGHT * FOCAL_PX / (rows + 0.5 - HORIZON_ROW)
    cols = (np.arange(CAM_W, dtype=np.float64) + 0.5) - CAM_W / 2.0

    visible = depth <= MAX_DEPTH
    img[HORIZON_ROW:][~visible] = COLOR_HAZE

    d = depth[visible]
    x_lat = cols[None, :] * (d[:, None] / FOCAL_PX)
    fwd = np.array([math.cos(state.heading), math.sin(state.heading)])
    right = np.array([-fwd[1], fwd[0]])
    px = state.x + d[:, None] * fwd[0] + x_lat * right[0]
    py = state.y + d[:, None] * fwd[1] + x_lat * right[1]
    pts = np.stack([px.ravel(), py.ravel()], axis=1)

    signed, s = track.nearest(pts)
    adist = np.abs(signed)
    half = track.road_width / 2.0

    block = np.where((adist <= half)[:, None], COLOR_ROAD, COLOR_GRASS)
    on_edge = (adist <= half) & (adist >= half - EDGE_BAND)
    block[on_edge] = COLOR_EDGE
    on_dash = (adist <= DASH_HALF_WIDTH) & ((s % DASH_PERIOD) < DASH_ON)
    block[on_dash] = COLOR_DASH

    ground = img[HORIZON_ROW:]
    ground[visible] = block.reshape(-1, CAM_W, 3).astype(np.float32)
    img[HORIZON_ROW:] = ground
    return img


# ---------------------------------------------------------------------------
# episode loop

def run_episode(track: Track, model: nn.Network, attack=None, steps=200,
                dt=DEFAULT_DT, hooks=None, start=None,
                start_frame_id=0) -> Telemetry:
    """Closed-loop drive: render, optionally attack, predict, step.

    The attacked command drives the vehicle. Ends early when the vehicle
    leaves the road; the trace records the cause and frame index.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    attacker = attacks.make_attacker(attack, model)
    state = start if start is not None else start_state(track)
    trace = Telemetry()
    half = track.road_width / 2.0
    for i in range(steps):
        frame_id = start_frame_id + i
        img = render_camera(track, state)
        x = preprocess(img)
        t0 = time.perf_counter()
        x_adv, eta = attacker.perturb(model, x)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        clean = nn.forward(model, x)
        attacked = clean if x_adv is x else nn.forward(model, x_adv)
        offset, s = track.nearest(np.array([[state.x, state.y]]))
        offset = float(offset[0])
        is_off = abs(offset) > half
        record = FrameRecord(
            frame_id=frame_id, clean_pred=clean, attacked_pred=attacked,
            lateral_offset=offset, off_road=is_off, method=attacker.method,
            latency_ms=latency_ms, arclength_m=float(s[0]))
        trace.append(record)
        if hooks:
            hooks(record, {"image": img, "model_input": x,
                           "perturbed": x_adv, "eta": eta, "state": state})
        if is_off:
            trace.termination = "off_road"
            trace.off_road_frame = frame_id
            break
        state = step(state, attacked, dt)
    return trace


def generate_training_data(track: Track, n_frames, seed=0, noise_std=0.1,
                           dt=DEFAULT_DT, both_directions=True):
    """Expert-labeled camera frames for behavioral cloning.

    The expert's command is recorded as the label while a noise-perturbed
    command is executed, so the corpus covers off-center poses and the
    recoveries from them. With both_directions half the frames come from
    driving the loop the opposite way, giving the mirrored curvature
    distribution a single direction would miss.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    passes = [(track, n_frames)]
    if both_directions:
        reverse = Track(track.name, track.road_width,
                        track.waypoints[::-1].tolist())
        passes = [(track, n_frames // 2), (reverse, n_frames - n_frames // 2)]
    frames, labels = [], []
    for tr, want in passes:
        state = start_state(tr)
        got = 0
        while got < want:
            try:
                cmd = expert_control(tr, state)
            except ExpertLostError:
                state = start_state(tr)
                continue
            frames.append(render_camera(tr, state))
            labels.append(cmd)
            got += 1
            noisy = float(np.clip(cmd + rng.normal(0.0, noise_std), -1.0, 1.0))
            state = step(state, noisy, dt)
    return frames, np.asarray(labels, dtype=np.float32)


def lap_progress(trace: Telemetry, track: Track) -> float:
    """Total signed arclength advanced over a trace, in meters."""
    total, L = 0.0, track.total_len
    frames = trace.frames
    for a, b in zip(frames, frames[1:]):
        ds = (b.arclength_m - a.arclength_m + L / 2.0) % L - L / 2.0
        total += ds
    return total
