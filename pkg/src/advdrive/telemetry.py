"""Per-frame telemetry records produced by closed-loop episodes."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class FrameRecord:
    frame_id: int
    clean_pred: float
    attacked_pred: float
    lateral_offset: float
    off_road: bool
    method: str
    latency_ms: float
    arclength_m: float = 0.0


@dataclass
class Telemetry:
    frames: list = field(default_factory=list)
    termination: str = "completed"     # "completed" | "off_road" | "lost"
    off_road_frame: int | None = None

    def append(self, record: FrameRecord):
        if self.frames and record.frame_id <= self.frames[-1].frame_id:
            raise ValueError("frame_ids must be strictly increasing")
        self.frames.append(record)

    def __len__(self):
        return len(self.frames)
