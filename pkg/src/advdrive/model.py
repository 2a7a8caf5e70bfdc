"""Steering model: PilotNetLite architecture, image preprocessing, weight
serialization, dataset I/O and the behavioral-cloning trainer."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import nn

INPUT_SHAPE = (64, 64, 3)

MAGIC = b"ADNN"
FORMAT_VERSION = 1

# 4-byte record tags for the binary tensor container
LAYER_TAGS = {"conv2d": b"CONV", "relu": b"RELU", "flatten": b"FLAT",
              "dense": b"DENS", "tanh": b"TANH"}
TAG_TO_KIND = {v: k for k, v in LAYER_TAGS.items()}
PERTURBATION_TAG = b"PERT"


def pilotnet_layers():
    """Fixed architecture: 3 strided convs, 3 dense layers, tanh head."""
    return [
        nn.conv2d(3, 8, 5, stride=2), nn.relu(),
        nn.conv2d(8, 16, 5, stride=2), nn.relu(),
        nn.conv2d(16, 32, 3, stride=2), nn.relu(),
        nn.flatten(),
        nn.dense(1152, 64), nn.relu(),
        nn.dense(64, 16), nn.relu(),
        nn.dense(16, 1), nn.tanh(),
    ]


def build_pilotnet(seed=0) -> nn.Network:
    layers = pilotnet_layers()
    return nn.Network(INPUT_SHAPE, layers, nn.init_params(INPUT_SHAPE, layers, seed))


# ---------------------------------------------------------------------------
# preprocessing

def preprocess(raw_image: np.ndarray) -> np.ndarray:
    """Bilinear resize of an HxWx3 image in [0,1] down to the model input size."""
    img = np.asarray(raw_image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    oh, ow = INPUT_SHAPE[:2]
    if h < oh or w < ow:
        raise ValueError(f"image {h}x{w} smaller than {oh}x{ow}")
    if (h, w) == (oh, ow):
        return img
    return _bilinear_resize(img, oh, ow)


def _bilinear_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def predict(model: nn.Network, raw_image: np.ndarray) -> float:
    """Preprocess then run the model; steering scalar in [-1, 1]."""
    return nn.forward(model, preprocess(raw_image))


# ---------------------------------------------------------------------------
# binary tensor container (weight files and saved perturbations)

class WeightFileError(Exception):
    """Base for malformed weight/perturbation files."""


class WeightMagicError(WeightFileError):
    pass


class WeightVersionError(WeightFileError):
    pass


class WeightTruncatedError(WeightFileError):
    pass


class WeightShapeError(WeightFileError):
    pass


def write_records(path, records):
    """Write tagged tensor records: magic, version, count, then per record a
    4-byte tag, tensor count, and per tensor ndim + dims + raw f32 LE data."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(records)))
    for tag, tensors in records:
        if len(tag) != 4:
            raise ValueError(f"record tag must be 4 bytes, got {tag!r}")
        buf.write(tag)
        buf.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            arr = np.ascontiguousarray(t, dtype="<f4")
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_records(path):
    data = Path(path).read_bytes()
    off = 0

    def take(n, what, record_idx=None):
        nonlocal off
        if off + n > len(data):
            where = f" in record {record_idx}" if record_idx is not None else ""
            raise WeightTruncatedError(f"file truncated reading {what}{where}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightMagicError(f"bad magic, expected {MAGIC!r}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != FORMAT_VERSION:
        raise WeightVersionError(f"unsupported format version {version}")
    count = struct.unpack("<I", take(4, "record count"))[0]
    records = []
    for i in range(count):
        tag = take(4, "record tag", i)
        n_tensors = struct.unpack("<I", take(4, "tensor count", i))[0]
        tensors = []
        for _ in range(n_tensors):
            ndim = struct.unpack("<I", take(4, "tensor rank", i))[0]
            if ndim > 8:
                raise WeightShapeError(f"implausible tensor rank {ndim} in record {i}")
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor dims", i))
            n_elem = int(np.prod(dims)) if ndim else 1
            raw = take(4 * n_elem, "tensor data", i)
            tensors.append(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
        records.append((tag, tensors))
    return records


def save_weights(model: nn.Network, path):
    records = []
    for spec, p in zip(model.layers, model.params):
        tag = LAYER_TAGS[spec.kind]
        tensors = [p["w"], p["b"]] if p is not None else []
        records.append((tag, tensors))
    write_records(path, records)


def load_weights(path) -> nn.Network:
    """Rebuild PilotNetLite from a weight file, validating every layer."""
    records = read_records(path)
    layers = pilotnet_layers()
    if len(records) != len(layers):
        raise WeightShapeError(
            f"expected {len(layers)} layer records, found {len(records)}")
    params = []
    for i, (spec, (tag, tensors)) in enumerate(zip(layers, records)):
        if TAG_TO_KIND.get(tag) != spec.kind:
            raise WeightShapeError(
                f"layer {i}: expected {spec.kind} record, found tag {tag!r}")
        if spec.kind in ("conv2d", "dense"):
            if len(tensors) != 2:
                raise WeightShapeError(f"layer {i}: expected weight+bias tensors")
            params.append({"w": tensors[0], "b": tensors[1]})
        else:
            if tensors:
                raise WeightShapeError(f"layer {i}: {spec.kind} carries no tensors")
            params.append(None)
    try:
        return nn.Network(INPUT_SHAPE, layers, params)
    except ValueError as e:
        raise WeightShapeError(str(e)) from e


def save_perturbation(eta: np.ndarray, path):
    write_records(path, [(PERTURBATION_TAG, [eta])])


def load_perturbation(path) -> np.ndarray:
    records = read_records(path)
    if len(records) != 1 or records[0][0] != PERTURBATION_TAG:
        raise WeightShapeError("not a perturbation file")
    eta = records[0][1][0]
    if eta.shape != INPUT_SHAPE:
        raise WeightShapeError(f"perturbation shape {eta.shape} != {INPUT_SHAPE}")
    return eta


# ---------------------------------------------------------------------------
# dataset I/O: directory of PNG frames plus a CSV index (frame,steering)

@dataclass
class DrivingDataset:
    images: np.ndarray            # (n, 64, 64, 3) float32 in [0, 1]
    steering: np.ndarray          # (n,) float32 in [-1, 1]
    track_name: str = ""
    seed: int | None = None

    def __post_init__(self):
        if len(self.images) != len(self.steering):
            raise ValueError("images/steering length mismatch")
        if len(self.steering) and (np.abs(self.steering) > 1).any():
            raise ValueError("steering values outside [-1, 1]")

    def __len__(self):
        return len(self.steering)


def save_dataset(out_dir, frames, steering, track_name="", seed=None):
    """Write raw frames as 8-bit PNGs plus index.csv; frames are HxWx3 [0,1]."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(frames):
        name = f"frame_{i:05d}.png"
        arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / name)
        names.append(name)
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "steering"])
        for name, s in zip(names, steering):
            writer.writerow([name, repr(float(s))])
    meta = {"track": track_name, "seed": seed}
    (out / "meta.json").write_text(json.dumps(meta))


def load_raw_frames(data_dir):
    """Frames at their stored resolution plus steering labels and metadata."""
    root = Path(data_dir)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no index.csv in {root}")
    frames, steering = [], []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame", "steering"]:
            raise ValueError(f"unexpected index columns {reader.fieldnames}")
        for row in reader:
            img = np.asarray(Image.open(root / row["frame"]).convert("RGB"),
                             dtype=np.float32) / 255.0
            frames.append(img)
            steering.append(float(row["steering"]))
    meta = {}
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    return frames, np.asarray(steering, dtype=np.float32), meta


def load_dataset(data_dir) -> DrivingDataset:
    frames, steering, meta = load_raw_frames(data_dir)
    images = np.stack([preprocess(f) for f in frames])
    return DrivingDataset(images=images, steering=steering,
                          track_name=meta.get("track", ""), seed=meta.get("seed"))


# ---------------------------------------------------------------------------
# behavioral cloning

@dataclass
class TrainResult:
    model: nn.Network
    val_mse: float
    epoch_losses: list = field(default_factory=list)


def train_bc(dataset: DrivingDataset, epochs, lr, seed,
             batch_size=32, val_fraction=0.1,
             mirror_augment=True) -> TrainResult:
    """Fit PilotNetLite to the dataset by MSE regression; deterministic per seed.

    With mirror_augment every batch also contains the left-right flipped
    frames with negated steering, pushing the model toward mirror
    antisymmetry so both steering directions are learned equally well.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = len(dataset)
    if n < 1000:
        raise ValueError(f"dataset too small ({n} < 1000 samples)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, int(n * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    xs, ys = dataset.images, dataset.steering
    model = build_pilotnet(seed=seed)

    params = model.params
    state = nn.AdamState()
    epoch_losses = []
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        total, count = 0.0, 0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            batch_x, batch_y = xs[idx], ys[idx]
            if mirror_augment:
                batch_x = np.concatenate([batch_x, batch_x[:, :, ::-1, :]])
                batch_y = np.concatenate([batch_y, -batch_y])
            net = nn.Network(INPUT_SHAPE, model.layers, params)
            loss, grads = nn.mse_loss_and_grads(net, batch_x, batch_y)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged (non-finite loss at epoch {epoch})")
            params, state = nn.adam_step(params, grads, state, lr)
            total += loss * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
    final = nn.Network(INPUT_SHAPE, model.layers, params)
    val_preds = _predict_batches(final, xs[val_idx])
    val_mse = float(np.mean((val_preds - ys[val_idx]) ** 2))
    return TrainResult(model=final, val_mse=val_mse, epoch_losses=epoch_losses)


def _predict_batches(model, xs, batch_size=256):
    preds = [nn.forward_batch(model, xs[i:i + batch_size])
             for i in range(0, len(xs), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.float32)
