"""Tests for the driving world: vehicle kinematics, track geometry,
the pure-pursuit expert, the camera renderer and the episode loop."""

import hashlib
import json
import math

import numpy as np
import pytest

from advdrive import simulator as sim
from tests.test_model import zero_weight_model

# frozen render of the canonical start pose on the bundled training track;
# recompute only when the renderer or track intentionally changes
GOLDEN_RENDER_SHA256 = (
    "141fb8157ff4fb4969bf492bb1f36b4e7ef71365e8a53e5b65c66c2539bc3332")


def stadium_track(straight=150.0, radius=80.0, n_arc=24):
    """Closed loop with a long straight lying exactly on the x axis."""
    pts = []
    for x in np.linspace(-straight, straight, 13):
        pts.append([float(x), 0.0])
    for a in np.linspace(-math.pi / 2, math.pi / 2, n_arc + 1)[1:-1]:
        pts.append([straight + radius * math.cos(a),
                    radius + radius * math.sin(a)])
    for x in np.linspace(straight, -straight, 13):
        pts.append([float(x), 2 * radius])
    for a in np.linspace(math.pi / 2, 3 * math.pi / 2, n_arc + 1)[1:-1]:
        pts.append([-straight + radius * math.cos(a),
                    radius + radius * math.sin(a)])
    return sim.Track("stadium", 8.0, pts)


@pytest.fixture(scope="module")
def train_track():
    return sim.load_track(sim.bundled_track_path("train_track"))


@pytest.fixture(scope="module")
def eval_track():
    return sim.load_track(sim.bundled_track_path("eval_track"))


# ---------------------------------------------------------------------------
# vehicle kinematics

def test_step_straight_advances_one_meter():
    s0 = sim.VehicleState(x=0.0, y=0.0, heading=0.0)
    s1 = sim.step(s0, steering_cmd=0.0, dt=0.1)
    assert s1.x == pytest.approx(1.0, abs=1e-12)
    assert s1.y == pytest.approx(0.0, abs=1e-12)
    assert s1.heading == pytest.approx(0.0, abs=1e-12)


def test_step_full_right_heading_change():
    # (v / L) * tan(25 deg) * dt with v=10, L=2.5, dt=0.1
    expected = (10.0 / 2.5) * math.tan(math.radians(25.0)) * 0.1
    s1 = sim.step(sim.VehicleState(0.0, 0.0, 0.0), steering_cmd=1.0, dt=0.1)
    assert s1.heading == pytest.approx(expected, rel=1e-12)
    assert s1.heading == pytest.approx(0.18652, abs=5e-6)


def test_step_left_right_symmetry():
    s0 = sim.VehicleState(0.0, 0.0, 0.0)
    right = sim.step(s0, 0.7, dt=0.05)
    left = sim.step(s0, -0.7, dt=0.05)
    assert right.heading == pytest.approx(-left.heading, rel=1e-12)
    assert right.y == pytest.approx(left.y, rel=1e-12)  # position moves before turning


def test_step_clamps_command():
    s0 = sim.VehicleState(0.0, 0.0, 0.0)
    assert sim.step(s0, 5.0, dt=0.05) == sim.step(s0, 1.0, dt=0.05)
    assert sim.step(s0, -3.0, dt=0.05) == sim.step(s0, -1.0, dt=0.05)


def test_step_rejects_bad_dt():
    s0 = sim.VehicleState(0.0, 0.0, 0.0)
    for dt in (0.0, -0.01, 0.11, 1.0):
        with pytest.raises(ValueError):
            sim.step(s0, 0.0, dt)


def test_step_rejects_non_finite_state():
    with pytest.raises(ValueError):
        sim.step(sim.VehicleState(math.nan, 0.0, 0.0), 0.0, 0.05)
    with pytest.raises(ValueError):
        sim.step(sim.VehicleState(0.0, 0.0, 0.0), math.inf, 0.05)


def test_heading_stays_normalized():
    state = sim.VehicleState(0.0, 0.0, heading=math.pi - 0.01)
    for _ in range(200):
        state = sim.step(state, 1.0, 0.05)
        assert -math.pi < state.heading <= math.pi


# ---------------------------------------------------------------------------
# track geometry

def test_track_requires_eight_waypoints():
    with pytest.raises(ValueError):
        sim.Track("tiny", 8.0, [[0, 0], [10, 0], [10, 10], [0, 10]])


def test_track_rejects_nonpositive_width():
    pts = [[math.cos(a) * 50, math.sin(a) * 50]
           for a in np.linspace(0, 2 * math.pi, 12, endpoint=False)]
    with pytest.raises(ValueError):
        sim.Track("flat", 0.0, pts)


def test_track_rejects_duplicate_waypoints():
    pts = [[math.cos(a) * 50, math.sin(a) * 50]
           for a in np.linspace(0, 2 * math.pi, 12, endpoint=False)]
    pts.append(pts[0])  # explicit closure duplicates the first point
    with pytest.raises(ValueError):
        sim.Track("dup", 8.0, pts)


def test_track_rejects_self_intersection():
    # figure-eight: two lobes crossing at the origin
    t = np.linspace(0, 2 * math.pi, 32, endpoint=False)
    pts = np.stack([60 * np.sin(t), 40 * np.sin(t) * np.cos(t)], axis=1)
    with pytest.raises(ValueError, match="segments"):
        sim.Track("eight", 8.0, pts.tolist())


def test_track_rejects_pinched_loop():
    # hourglass squeezed to a 4.5 m waist: no crossing, but opposite sides
    # of the loop come closer than the road width
    t = np.linspace(0, 2 * math.pi, 48, endpoint=False)
    x = 80 * np.cos(t)
    y = 45 * np.sin(t) * (0.05 + np.abs(np.cos(t)))
    with pytest.raises(ValueError):
        sim.Track("pinch", 8.0, np.stack([x, y], axis=1).tolist())


def test_load_track_missing_keys(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps({"name": "x", "waypoints": [[0, 0]] * 10}))
    with pytest.raises(ValueError, match="road_width"):
        sim.load_track(path)


def test_bundled_tracks_load(train_track, eval_track):
    for track in (train_track, eval_track):
        assert track.road_width == 8.0
        assert len(track.waypoints) >= 8
        assert track.total_len > 300


def test_lateral_offset_on_centerline_is_zero():
    track = stadium_track()
    assert sim.lateral_offset(track, sim.VehicleState(5.0, 0.0, 0.0)) == (
        pytest.approx(0.0, abs=1e-9))


def test_lateral_offset_one_meter_right_is_positive_one():
    # on the +x straight the vehicle's right-hand side points toward +y
    track = stadium_track()
    assert sim.lateral_offset(track, sim.VehicleState(5.0, 1.0, 0.0)) == (
        pytest.approx(1.0, abs=1e-9))
    assert sim.lateral_offset(track, sim.VehicleState(5.0, -1.0, 0.0)) == (
        pytest.approx(-1.0, abs=1e-9))


def test_nearest_matches_dense_resampling(train_track):
    """Oracle: resample the centerline at 1 cm and search exhaustively."""
    track = train_track
    dense, dense_s = [], []
    for j in range(len(track.waypoints)):
        n = max(2, int(track.seg_len[j] / 0.01))
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        dense.append(track.waypoints[j] + t * track.segments[j])
        dense_s.append(track.cum_s[j] + t[:, 0] * track.seg_len[j])
    dense = np.concatenate(dense)
    dense_s = np.concatenate(dense_s)

    rng = np.random.default_rng(0)
    idx = rng.integers(0, len(dense), size=25)
    offsets = rng.uniform(-3.5, 3.5, size=25)
    normals = np.zeros((25, 2))
    for k, i in enumerate(idx):
        d = dense[(i + 1) % len(dense)] - dense[i - 1]
        d /= np.linalg.norm(d)
        normals[k] = [-d[1], d[0]]
    points = dense[idx] + offsets[:, None] * normals

    signed, s = track.nearest(points)
    brute = np.linalg.norm(points[:, None, :] - dense[None, :, :], axis=2)
    nearest_i = brute.argmin(axis=1)
    assert np.abs(np.abs(signed) - brute.min(axis=1)).max() < 0.02
    ds = np.abs(s - dense_s[nearest_i])
    ds = np.minimum(ds, track.total_len - ds)
    assert ds.max() < 0.05


def test_point_at_wraps_arclength(train_track):
    p0, t0 = train_track.point_at(0.0)
    p1, t1 = train_track.point_at(train_track.total_len)
    assert np.allclose(p0, p1)
    assert np.allclose(t0, t1)
    assert np.linalg.norm(t0) == pytest.approx(1.0, rel=1e-12)


# ---------------------------------------------------------------------------
# expert controller

def test_expert_zero_on_straight():
    track = stadium_track()
    cmd = sim.expert_control(track, sim.VehicleState(0.0, 0.0, 0.0))
    assert abs(cmd) <= 1e-6


def test_expert_steers_back_toward_centerline():
    track = stadium_track()
    # displaced to the right of the path: must steer left (negative)
    assert sim.expert_control(track, sim.VehicleState(0.0, 2.0, 0.0)) < 0
    assert sim.expert_control(track, sim.VehicleState(0.0, -2.0, 0.0)) > 0


def test_expert_mirror_antisymmetry():
    track = stadium_track()
    for d in (0.5, 1.5, 3.0):
        right = sim.expert_control(track, sim.VehicleState(0.0, d, 0.0))
        left = sim.expert_control(track, sim.VehicleState(0.0, -d, 0.0))
        assert right == pytest.approx(-left, abs=1e-9)


def test_expert_raises_when_lost():
    track = stadium_track()
    with pytest.raises(sim.ExpertLostError):
        sim.expert_control(track, sim.VehicleState(0.0, -30.0, 0.0))


@pytest.mark.parametrize("name", ["train_track", "eval_track"])
def test_expert_drives_three_laps_within_quarter_width(name):
    track = sim.load_track(sim.bundled_track_path(name))
    state = sim.start_state(track)
    steps = int(3 * track.total_len / (sim.SPEED * sim.DEFAULT_DT)) + 40
    progressed = 0.0
    prev_s = None
    for _ in range(steps):
        cmd = sim.expert_control(track, state)
        state = sim.step(state, cmd, sim.DEFAULT_DT)
        signed, s = track.nearest(np.array([[state.x, state.y]]))
        assert abs(float(signed[0])) < track.road_width / 4.0
        s = float(s[0])
        if prev_s is not None:
            half = track.total_len / 2.0
            progressed += (s - prev_s + half) % track.total_len - half
        prev_s = s
    assert progressed > 3 * track.total_len


# ---------------------------------------------------------------------------
# camera renderer

def test_render_shape_dtype_range(train_track):
    img = sim.render_camera(train_track, sim.start_state(train_track))
    assert img.shape == (sim.CAM_H, sim.CAM_W, 3)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_deterministic(train_track):
    state = sim.start_state(train_track)
    a = sim.render_camera(train_track, state)
    b = sim.render_camera(train_track, state)
    assert np.array_equal(a, b)


def test_render_mirror_symmetric_on_straight():
    track = stadium_track()
    img = sim.render_camera(track, sim.VehicleState(0.0, 0.0, 0.0))
    assert np.abs(img - img[:, ::-1, :]).max() <= 1.0 / 255.0


def test_render_golden_frame(train_track):
    img = sim.render_camera(train_track, sim.start_state(train_track))
    assert hashlib.sha256(img.tobytes()).hexdigest() == GOLDEN_RENDER_SHA256


def test_render_contains_road_and_sky(train_track):
    img = sim.render_camera(train_track, sim.start_state(train_track))
    sky = img[:sim.HORIZON_ROW]
    assert np.allclose(sky, sim.COLOR_SKY[None, None, :])
    bottom = img[-10:]
    road_frac = np.isclose(bottom, sim.COLOR_ROAD).all(axis=2).mean()
    assert road_frac > 0.2


# ---------------------------------------------------------------------------
# episode loop

def test_run_episode_zero_model_leaves_road(train_track):
    model = zero_weight_model()
    trace = sim.run_episode(train_track, model, steps=600)
    assert trace.termination == "off_road"
    assert trace.off_road_frame == trace.frames[-1].frame_id
    assert all(f.method == "none" for f in trace.frames)
    assert all(f.attacked_pred == f.clean_pred == 0.0 for f in trace.frames)
    ids = [f.frame_id for f in trace.frames]
    assert ids == list(range(len(ids)))


def test_run_episode_completes_and_tracks_progress(train_track):
    model = zero_weight_model()
    trace = sim.run_episode(train_track, model, steps=5)
    assert trace.termination == "completed"
    assert len(trace.frames) == 5
    assert trace.off_road_frame is None


def test_run_episode_hooks_see_every_frame(train_track):
    seen = []
    sim.run_episode(train_track, zero_weight_model(), steps=4,
                    hooks=lambda rec, extras: seen.append(
                        (rec.frame_id, extras["image"].shape)))
    assert seen == [(i, (sim.CAM_H, sim.CAM_W, 3)) for i in range(4)]


def test_run_episode_respects_start_frame_id(train_track):
    trace = sim.run_episode(train_track, zero_weight_model(), steps=3,
                            start_frame_id=100)
    assert [f.frame_id for f in trace.frames] == [100, 101, 102]


def test_generate_training_data_labels_match_expert(train_track):
    frames, labels = sim.generate_training_data(train_track, 30, seed=3,
                                                noise_std=0.0,
                                                both_directions=False)
    assert len(frames) == 30 and labels.shape == (30,)
    assert frames[0].shape == (sim.CAM_H, sim.CAM_W, 3)
    assert np.all(np.abs(labels) <= 1.0)
    # with zero noise the drive replays the expert exactly
    state = sim.start_state(train_track)
    for lbl in labels:
        assert sim.expert_control(train_track, state) == pytest.approx(lbl)
        state = sim.step(state, lbl, sim.DEFAULT_DT)


def test_generate_training_data_covers_both_directions(train_track):
    _, labels = sim.generate_training_data(train_track, 400, seed=4,
                                           noise_std=0.1)
    assert labels.min() < -0.02 and labels.max() > 0.02


def test_lap_progress_counts_wraps(train_track):
    # step the expert manually and feed arclengths into a telemetry trace
    state = sim.start_state(train_track)
    from advdrive.telemetry import FrameRecord, Telemetry
    trace = Telemetry()
    steps = int(1.2 * train_track.total_len / (sim.SPEED * sim.DEFAULT_DT))
    for i in range(steps):
        _, s = train_track.nearest(np.array([[state.x, state.y]]))
        trace.append(FrameRecord(
            frame_id=i, clean_pred=0.0, attacked_pred=0.0, lateral_offset=0.0,
            off_road=False, method="none", latency_ms=0.0,
            arclength_m=float(s[0])))
        state = sim.step(state, sim.expert_control(train_track, state),
                         sim.DEFAULT_DT)
    assert sim.lap_progress(trace, train_track) > train_track.total_len
