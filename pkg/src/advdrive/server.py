"""Online attack server: a WebSocket endpoint that scores incoming camera
frames, applies the configured perturbation attack, and returns steering
commands, plus a built-in 20 Hz simulator and a dashboard static mount.

Wire protocol (JSON messages over /ws):

* simulator -> server   {"type": "telemetry", "frame_id", "image" (base64
                         PNG), "speed", "pose": [x, y, heading]}
* server -> simulator   {"type": "control", "steering", "throttle"}
* viewer -> server      {"type": "attack", "method", ...}
* server -> viewers     {"type": "status", "attack": {...}, "metrics": {...}}
                        {"type": "preview", "frame_id", "clean",
                         "perturbed", "perturbation"}
* server -> anyone      {"type": "error", "code", "detail"}

One client at a time may hold the simulator role (the built-in loop holds it
unless the server runs in external mode). Everyone else is a viewer.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import contextlib
import io
import json
import math
import os
import threading
import time
from collections import deque
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import attacks, nn, simulator
from .model import preprocess

FRAME_BUFFER_SIZE = 200      # recent clean inputs kept for uapr learning
UAPR_MIN_FRAMES = 100        # minimum buffered frames before uapr can learn
STATUS_EVERY = 5             # status broadcast cadence, in frames
PREVIEW_EVERY = 5            # preview broadcast cadence, in frames
VIEWER_QUEUE_SIZE = 32       # per-viewer outbox; slow viewers drop messages
PREVIEW_GAIN = 10.0          # perturbation visualization amplification


def encode_image_png(img: np.ndarray) -> str:
    """Base64 PNG of an image in [0, 1] (rounded to 8 bits)."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float32) * 255.0),
                  0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_png(data: str) -> np.ndarray:
    """Inverse of encode_image_png; raises ValueError on bad input."""
    try:
        raw = base64.b64decode(data, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (binascii.Error, OSError, ValueError) as e:
        raise ValueError(f"undecodable image payload: {e}") from None
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def perturbation_preview(eta: np.ndarray | None) -> np.ndarray:
    """Perturbation rendered around mid-gray, amplified for visibility."""
    if eta is None:
        eta = np.zeros((64, 64, 3), dtype=np.float32)
    return np.clip(eta * PREVIEW_GAIN + 0.5, 0.0, 1.0)


class MetricsAccumulator:
    """Running deviation statistics since the last attack change."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.n = 0
        self.sum_abs_dev = 0.0
        self.sum_abs_clean = 0.0
        self.sum_sq_dev = 0.0
        self.sum_latency = 0.0
        self.off_road_frame = None

    def add(self, frame_id, clean, attacked, latency_ms, off_road):
        self.n += 1
        dev = attacked - clean
        self.sum_abs_dev += abs(dev)
        self.sum_abs_clean += abs(clean)
        self.sum_sq_dev += dev * dev
        self.sum_latency += latency_ms
        if off_road and self.off_road_frame is None:
            self.off_road_frame = frame_id

    def snapshot(self) -> dict:
        if self.n == 0:
            return {"abs_dev": 0.0, "rel_dev_pct": None, "rmse": 0.0,
                    "frames": 0, "off_road_frame": None,
                    "mean_latency_ms": 0.0}
        abs_dev = self.sum_abs_dev / self.n
        clean_scale = self.sum_abs_clean / self.n
        rel = abs_dev / clean_scale * 100.0 if clean_scale >= 1e-6 else None
        return {"abs_dev": abs_dev, "rel_dev_pct": rel,
                "rmse": math.sqrt(self.sum_sq_dev / self.n),
                "frames": self.n, "off_road_frame": self.off_road_frame,
                "mean_latency_ms": self.sum_latency / self.n}


def _error(code: str, detail: str) -> dict:
    return {"type": "error", "code": code, "detail": detail}


class ServerSession:
    """Synchronous protocol core shared by the socket layer and the
    built-in simulator; holds the model, attack state and frame buffer."""

    def __init__(self, model: nn.Network, track: simulator.Track | None = None):
        self.model = model
        self.track = track
        self.attack_config = attacks.AttackConfig(method="none")
        self.attack_info = self.attack_config.to_wire()
        self.attacker = attacks.NoAttack()
        self.metrics = MetricsAccumulator()
        self.frame_buffer = deque(maxlen=FRAME_BUFFER_SIZE)
        self.frames_since_attack = 0
        self.last_preview = None
        self.attack_generation = 0
        # frames may be processed off the event loop (built-in simulator)
        # while attacks are installed on it; the lock makes each frame and
        # each attack swap atomic, so swaps land on frame boundaries
        self.lock = threading.RLock()

    # -- attack management -------------------------------------------------

    def parse_attack(self, payload: dict) -> attacks.AttackConfig:
        return attacks.AttackConfig.from_wire(payload)

    def uapr_frames_needed(self) -> int:
        return max(0, UAPR_MIN_FRAMES - len(self.frame_buffer))

    def snapshot_frames(self) -> np.ndarray:
        with self.lock:
            return np.stack(list(self.frame_buffer))

    def install_attack(self, config: attacks.AttackConfig, attacker,
                       extras: dict | None = None) -> dict:
        """Swap the active attack; takes effect from the next frame."""
        with self.lock:
            self.attack_config = config
            self.attack_info = config.to_wire()
            if extras:
                self.attack_info.update(extras)
            self.attacker = attacker
            self.metrics.reset()
            self.frames_since_attack = 0
            self.attack_generation += 1
            return self.status_message()

    def learn_uapr(self, config: attacks.AttackConfig):
        """Learn a universal perturbation from the frame buffer; returns
        (attacker, extras for the status message)."""
        t0 = time.perf_counter()
        eta = attacks.uapr_learn(self.model, self.snapshot_frames(),
                                 config.direction, config.p, config.xi)
        learning_ms = (time.perf_counter() - t0) * 1000.0
        extras = {"learning_ms": learning_ms,
                  "eta_norm": float(attacks.lp_norm(eta, config.p))}
        return attacks.FixedPerturbation(eta, method="uapr"), extras

    def set_attack(self, payload: dict) -> dict:
        """Parse and apply an attack message synchronously (uapr learns
        inline; the socket layer offloads that to a thread instead)."""
        config = self.parse_attack(payload)
        if config.method == "uapr":
            if self.uapr_frames_needed() > 0:
                raise InsufficientFramesError(
                    f"uapr needs {UAPR_MIN_FRAMES} buffered frames, "
                    f"have {len(self.frame_buffer)}")
            attacker, extras = self.learn_uapr(config)
            return self.install_attack(config, attacker, extras)
        return self.install_attack(config,
                                   attacks.make_attacker(config, self.model))

    # -- message handling ---------------------------------------------------

    def handle_telemetry(self, msg: dict):
        """Returns (control_reply, broadcasts) or raises ValueError."""
        frame_id = msg.get("frame_id")
        if not isinstance(frame_id, int) or isinstance(frame_id, bool) \
                or frame_id < 0:
            raise ValueError("telemetry requires a non-negative integer "
                             "frame_id")
        image = msg.get("image")
        if not isinstance(image, str):
            raise ValueError("telemetry requires a base64 image string")
        pose = msg.get("pose")
        if (not isinstance(pose, (list, tuple)) or len(pose) != 3
                or not all(isinstance(v, (int, float))
                           and not isinstance(v, bool)
                           and math.isfinite(v) for v in pose)):
            raise ValueError("telemetry requires pose [x, y, heading]")
        speed = msg.get("speed")
        if not isinstance(speed, (int, float)) or isinstance(speed, bool) \
                or not math.isfinite(speed):
            raise ValueError("telemetry requires a finite speed")

        try:
            x = preprocess(decode_image_png(image))
        except ValueError as e:
            raise ImagePayloadError(str(e)) from None
        self.frame_buffer.append(x)

        t0 = time.perf_counter()
        x_adv, eta = self.attacker.perturb(self.model, x)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        clean = nn.forward(self.model, x)
        attacked = clean if x_adv is x else nn.forward(self.model, x_adv)

        off_road = False
        if self.track is not None:
            signed, _ = self.track.nearest(np.array([[pose[0], pose[1]]]))
            off_road = abs(float(signed[0])) > self.track.road_width / 2.0
        self.metrics.add(frame_id, clean, attacked, latency_ms, off_road)
        self.frames_since_attack += 1

        control = {"type": "control", "steering": attacked, "throttle": 0.0}
        broadcasts = []
        if self.frames_since_attack % STATUS_EVERY == 0:
            broadcasts.append(self.status_message())
        if self.frames_since_attack % PREVIEW_EVERY == 0:
            preview = {
                "type": "preview", "frame_id": frame_id,
                "clean": encode_image_png(x),
                "perturbed": encode_image_png(x_adv),
                "perturbation": encode_image_png(perturbation_preview(eta)),
            }
            self.last_preview = preview
            broadcasts.append(preview)
        return control, broadcasts

    def status_message(self) -> dict:
        return {"type": "status", "attack": dict(self.attack_info),
                "metrics": self.metrics.snapshot()}

    def handle_message(self, msg) -> tuple:
        """Route one already-parsed message; returns (replies, broadcasts)."""
        if not isinstance(msg, dict):
            return [_error("bad_type", "message must be a JSON object")], []
        mtype = msg.get("type")
        if mtype == "telemetry":
            try:
                with self.lock:
                    control, broadcasts = self.handle_telemetry(msg)
            except ImagePayloadError as e:
                return [_error("bad_image", str(e))], []
            except ValueError as e:
                return [_error("bad_frame", str(e))], []
            return [control], broadcasts
        if mtype == "attack":
            try:
                status = self.set_attack(msg)
            except InsufficientFramesError as e:
                return [_error("insufficient_frames", str(e))], []
            except ValueError as e:
                return [_error("bad_config", str(e))], []
            return [status], [status]
        return [_error("bad_type", f"unknown message type {mtype!r}")], []


class InsufficientFramesError(Exception):
    """uapr requested before enough frames were buffered."""


class ImagePayloadError(ValueError):
    """Telemetry carried an image field that could not be decoded."""


# ---------------------------------------------------------------------------
# built-in simulator loop

class InternalSimulator:
    """Drives the bundled track against the session at a fixed rate,
    feeding frames through the same handler external simulators use."""

    def __init__(self, session: ServerSession, track: simulator.Track,
                 dt: float = simulator.DEFAULT_DT):
        self.session = session
        self.track = track
        self.dt = dt
        self.state = simulator.start_state(track)
        self.frame_id = 0
        self.frame_times = deque(maxlen=200)

    def make_telemetry(self) -> dict:
        img = simulator.render_camera(self.track, self.state)
        return {"type": "telemetry", "frame_id": self.frame_id,
                "image": encode_image_png(img),
                "speed": self.state.speed,
                "pose": [self.state.x, self.state.y, self.state.heading]}

    def advance(self):
        """One closed-loop step; returns broadcasts for the viewers."""
        replies, broadcasts = self.session.handle_message(self.make_telemetry())
        reply = replies[0]
        if reply.get("type") != "control":
            raise RuntimeError(f"simulator frame rejected: {reply}")
        self.frame_id += 1
        if abs(simulator.lateral_offset(self.track, self.state)) > \
                self.track.road_width / 2.0:
            # the off-road pose was just reported; restart the lap
            self.state = simulator.start_state(self.track)
        else:
            self.state = simulator.step(self.state, reply["steering"], self.dt)
        self.frame_times.append(time.perf_counter())
        return broadcasts

    def measured_hz(self) -> float:
        if len(self.frame_times) < 2:
            return 0.0
        span = self.frame_times[-1] - self.frame_times[0]
        return (len(self.frame_times) - 1) / span if span > 0 else 0.0


# ---------------------------------------------------------------------------
# FastAPI application

def find_ui_dir() -> Path | None:
    env = os.environ.get("ADVDRIVE_UI_DIR")
    candidates = []
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).parent / "static")
    candidates.append(Path.cwd() / "frontend" / "dist")
    for c in candidates:
        if (c / "index.html").is_file():
            return c
    return None


PLACEHOLDER_PAGE = """<!doctype html>
<html><head><title>advdrive</title></head>
<body><h1>advdrive attack server</h1>
<p>The dashboard assets are not built. Connect to <code>/ws</code> for the
WebSocket protocol, or build the frontend and set
<code>ADVDRIVE_UI_DIR</code>.</p></body></html>
"""


def create_app(model: nn.Network, track: simulator.Track,
               internal_sim: bool = True, headless: bool = False,
               dt: float = simulator.DEFAULT_DT):
    @contextlib.asynccontextmanager
    async def lifespan(_app):
        task = None
        if app.state.internal is not None:
            task = asyncio.create_task(run_internal_sim())
        app.state.sim_task = task
        try:
            yield
        finally:
            if task is not None:
                task.cancel()

    app = FastAPI(title="advdrive attack server", lifespan=lifespan)
    session = ServerSession(model, track)
    app.state.session = session
    app.state.viewers = set()
    app.state.sim_role = None       # websocket currently acting as simulator
    app.state.internal = InternalSimulator(session, track, dt) \
        if internal_sim else None
    app.state.sim_task = None

    def broadcast(messages, exclude=None):
        """Best-effort fan-out: slow viewers drop messages, never stall."""
        for message in messages:
            data = json.dumps(message)
            for queue in list(app.state.viewers):
                if queue is exclude:
                    continue
                try:
                    queue.put_nowait(data)
                except asyncio.QueueFull:
                    pass

    async def run_internal_sim():
        internal = app.state.internal
        loop = asyncio.get_running_loop()
        next_tick = loop.time()
        while True:
            broadcasts = await asyncio.to_thread(internal.advance)
            broadcast(broadcasts)
            next_tick += dt
            delay = next_tick - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            else:
                next_tick = loop.time()  # fell behind; don't burst

    async def apply_attack(reply, queue, msg):
        session_ = app.state.session
        try:
            config = session_.parse_attack(msg)
        except ValueError as e:
            await reply(_error("bad_config", str(e)))
            return
        if config.method == "uapr":
            if session_.uapr_frames_needed() > 0:
                await reply(_error(
                    "insufficient_frames",
                    f"uapr needs {UAPR_MIN_FRAMES} buffered frames, have "
                    f"{len(session_.frame_buffer)}"))
                return
            generation = session_.attack_generation
            attacker, extras = await asyncio.to_thread(
                session_.learn_uapr, config)
            if session_.attack_generation != generation:
                return  # a newer attack arrived while learning
            status = session_.install_attack(config, attacker, extras)
        else:
            status = session_.install_attack(
                config, attacks.make_attacker(config, session_.model))
        await reply(status)
        broadcast([status], exclude=queue)

    @app.websocket("/ws")
    async def websocket_endpoint(ws: WebSocket):
        await ws.accept()
        # single-writer discipline: every outgoing message for this
        # connection goes through one queue drained by one task, so
        # replies and broadcasts never interleave mid-frame
        queue = asyncio.Queue(maxsize=VIEWER_QUEUE_SIZE)
        app.state.viewers.add(queue)

        async def reply(message):
            await queue.put(json.dumps(message))

        try:
            queue.put_nowait(json.dumps(app.state.session.status_message()))
            if app.state.session.last_preview is not None:
                queue.put_nowait(json.dumps(app.state.session.last_preview))
        except asyncio.QueueFull:
            pass

        async def writer():
            while True:
                await ws.send_text(await queue.get())

        writer_task = asyncio.create_task(writer())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError as e:
                    await reply(_error("bad_json", f"unparseable message: {e}"))
                    continue
                if not isinstance(msg, dict):
                    await reply(_error("bad_type",
                                       "message must be a JSON object"))
                    continue
                mtype = msg.get("type")
                if mtype == "telemetry":
                    if app.state.internal is not None or \
                            app.state.sim_role not in (None, ws):
                        await reply(_error(
                            "role_taken",
                            "another simulator is already connected"))
                        continue
                    app.state.sim_role = ws
                    replies, broadcasts = app.state.session.handle_message(msg)
                    for item in replies:
                        await reply(item)
                    broadcast(broadcasts, exclude=queue)
                elif mtype == "attack":
                    await apply_attack(reply, queue, msg)
                else:
                    await reply(_error("bad_type",
                                       f"unknown message type {mtype!r}"))
        except WebSocketDisconnect:
            pass
        finally:
            writer_task.cancel()
            app.state.viewers.discard(queue)
            if app.state.sim_role is ws:
                app.state.sim_role = None

    if headless:
        @app.get("/")
        async def root_headless():
            return HTMLResponse(PLACEHOLDER_PAGE)
    else:
        ui_dir = find_ui_dir()
        if ui_dir is None:
            @app.get("/")
            async def root_placeholder():
                return HTMLResponse(PLACEHOLDER_PAGE)
        else:
            app.mount("/", StaticFiles(directory=ui_dir, html=True),
                      name="ui")
    return app


def serve(model: nn.Network, track: simulator.Track, host="127.0.0.1",
          port=8000, internal_sim=True, headless=False,
          dt=simulator.DEFAULT_DT):
    """Run the attack server until interrupted."""
    import uvicorn

    app = create_app(model, track, internal_sim=internal_sim,
                     headless=headless, dt=dt)
    uvicorn.run(app, host=host, port=port, log_level="warning")
