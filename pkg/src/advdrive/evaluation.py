"""Attack evaluation: deviation metrics against the clean model output,
closed-loop evaluation runs, budget-matched random baselines and reports.

The clean (unattacked) prediction on each frame serves as the reference;
a perturbation is scored by how far it moves the prediction away from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, nn, simulator
from .telemetry import Telemetry

# steering deviations below this mean magnitude make relative deviation
# meaningless (division by ~zero), reported as undefined instead
REL_DEV_FLOOR = 1e-6

DEFAULT_EPSILON = 0.04   # L-inf pixel budget for fgsmr / random
DEFAULT_P = 2
DEFAULT_XI = 2.0         # L2 budget for the universal perturbation
DEFAULT_FRAMES = 500
UAPR_LEARN_FRAMES = 100


@dataclass(frozen=True)
class DeviationMetrics:
    abs_dev: float
    rel_dev_pct: float | None   # None when the clean signal is ~zero
    rmse: float
    frames: int
    off_road_frame: int | None
    mean_latency_ms: float


@dataclass(frozen=True)
class RunResult:
    label: str
    config: attacks.AttackConfig
    metrics: DeviationMetrics


def deviation_metrics(trace: Telemetry) -> DeviationMetrics:
    """Summarize attacked-vs-clean prediction deviation over a trace."""
    if not trace.frames:
        raise ValueError("cannot compute metrics over an empty trace")
    clean = np.array([f.clean_pred for f in trace.frames], dtype=np.float64)
    attacked = np.array([f.attacked_pred for f in trace.frames], dtype=np.float64)
    latency = np.array([f.latency_ms for f in trace.frames], dtype=np.float64)
    abs_dev = float(np.mean(np.abs(attacked - clean)))
    clean_scale = float(np.mean(np.abs(clean)))
    rel = abs_dev / clean_scale * 100.0 if clean_scale >= REL_DEV_FLOOR else None
    rmse = float(math.sqrt(np.mean((attacked - clean) ** 2)))
    return DeviationMetrics(
        abs_dev=abs_dev, rel_dev_pct=rel, rmse=rmse, frames=len(trace.frames),
        off_road_frame=trace.off_road_frame,
        mean_latency_ms=float(latency.mean()))


# ---------------------------------------------------------------------------
# closed-loop evaluation

def evaluate_attack(model: nn.Network, track: simulator.Track, attack,
                    n_frames=DEFAULT_FRAMES, dt=simulator.DEFAULT_DT,
                    max_episodes=1000) -> Telemetry:
    """Drive under an attack until n_frames are collected.

    Episodes restart from the track start whenever the vehicle leaves the
    road, so strong attacks still produce a full-length trace. Frame ids keep
    increasing across restarts; the recorded off-road frame is the first one.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    attacker = attacks.make_attacker(attack, model)
    combined = Telemetry()
    first_off = None
    episodes = 0
    while len(combined.frames) < n_frames:
        episodes += 1
        if episodes > max_episodes:
            raise RuntimeError(
                f"gave up after {max_episodes} episodes with "
                f"{len(combined.frames)} of {n_frames} frames")
        start_id = combined.frames[-1].frame_id + 1 if combined.frames else 0
        trace = simulator.run_episode(
            track, model, attacker, steps=n_frames - len(combined.frames),
            dt=dt, start_frame_id=start_id)
        for record in trace.frames:
            combined.append(record)
        if trace.off_road_frame is not None and first_off is None:
            first_off = trace.off_road_frame
    combined.termination = "off_road" if first_off is not None else "completed"
    combined.off_road_frame = first_off
    return combined


def collect_clean_frames(model: nn.Network, track: simulator.Track,
                         n_frames, dt=simulator.DEFAULT_DT,
                         max_episodes=1000) -> np.ndarray:
    """Model inputs gathered from an unattacked closed-loop drive."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = []
    episodes = 0
    while len(frames) < n_frames:
        episodes += 1
        if episodes > max_episodes:
            raise RuntimeError("clean drive keeps leaving the road; "
                               "cannot collect frames")
        simulator.run_episode(
            track, model, None, steps=n_frames - len(frames), dt=dt,
            hooks=lambda rec, extras: frames.append(extras["model_input"]))
    return np.stack(frames[:n_frames])


def prepare_attacker(model: nn.Network, config: attacks.AttackConfig,
                     learn_frames: np.ndarray | None = None,
                     passes: int = 5):
    """Resolve a config into a per-frame attacker, learning uapr if needed."""
    if config.method == "uapr":
        if learn_frames is None:
            raise ValueError("uapr needs frames to learn from")
        eta = attacks.uapr_learn(model, learn_frames, config.direction,
                                 config.p, config.xi, passes=passes)
        return attacks.FixedPerturbation(eta, method="uapr")
    return attacks.make_attacker(config, model)


def matched_random_attacker(config: attacks.AttackConfig, shape, seed=0):
    """Random baseline with the same budget as the given attack.

    fgsmr gets fresh uniform noise per frame in the same L-inf ball; uapr
    gets a single fixed random perturbation with the same lp budget.
    """
    if config.method in ("fgsmr", "random"):
        return attacks.RandomAttack(config.epsilon, seed=seed)
    if config.method == "uapr":
        rng = np.random.default_rng(seed)
        eta = attacks.random_in_ball(shape, config.p, config.xi, rng)
        return attacks.FixedPerturbation(eta, method="random")
    raise ValueError(f"no random baseline for method {config.method!r}")


# ---------------------------------------------------------------------------
# the standard evaluation suite

def standard_configs(epsilon=DEFAULT_EPSILON, p=DEFAULT_P, xi=DEFAULT_XI,
                     seed=0):
    return [
        ("none", attacks.AttackConfig(method="none")),
        ("random", attacks.AttackConfig(method="random", epsilon=epsilon,
                                        seed=seed)),
        ("fgsmr-left", attacks.AttackConfig(method="fgsmr", direction="left",
                                            epsilon=epsilon)),
        ("fgsmr-right", attacks.AttackConfig(method="fgsmr", direction="right",
                                             epsilon=epsilon)),
        ("uapr-left", attacks.AttackConfig(method="uapr", direction="left",
                                           p=p, xi=xi)),
        ("uapr-right", attacks.AttackConfig(method="uapr", direction="right",
                                            p=p, xi=xi)),
    ]


def run_suite(model: nn.Network, track: simulator.Track, labels=None,
              epsilon=DEFAULT_EPSILON, p=DEFAULT_P, xi=DEFAULT_XI,
              n_frames=DEFAULT_FRAMES, seed=0, dt=simulator.DEFAULT_DT,
              progress=None):
    """Evaluate the chosen standard attacks; returns a list of RunResults."""
    configs = standard_configs(epsilon=epsilon, p=p, xi=xi, seed=seed)
    if labels is not None:
        by_label = dict(configs)
        unknown = [l for l in labels if l not in by_label]
        if unknown:
            raise ValueError(f"unknown attack labels {unknown}; "
                             f"choose from {[l for l, _ in configs]}")
        configs = [(l, by_label[l]) for l in labels]

    learn_frames = None
    if any(cfg.method == "uapr" for _, cfg in configs):
        if progress:
            progress("collecting clean frames for uapr learning")
        learn_frames = collect_clean_frames(model, track, UAPR_LEARN_FRAMES,
                                            dt=dt)
    results = []
    for label, cfg in configs:
        if progress:
            progress(f"evaluating {label}")
        attacker = prepare_attacker(model, cfg, learn_frames)
        trace = evaluate_attack(model, track, attacker, n_frames=n_frames,
                                dt=dt)
        results.append(RunResult(label=label, config=cfg,
                                 metrics=deviation_metrics(trace)))
    return results


# ---------------------------------------------------------------------------
# reporting

def results_to_json(results) -> dict:
    runs = []
    for r in results:
        entry = {"label": r.label, "method": r.config.method}
        if r.config.direction is not None:
            entry["direction"] = r.config.direction
        if r.config.epsilon is not None:
            entry["epsilon"] = r.config.epsilon
        if r.config.p is not None:
            entry["p"] = r.config.p
        if r.config.xi is not None:
            entry["xi"] = r.config.xi
        m = r.metrics
        entry.update(abs_dev=m.abs_dev, rel_dev_pct=m.rel_dev_pct,
                     rmse=m.rmse, frames=m.frames,
                     off_road_frame=m.off_road_frame,
                     mean_latency_ms=m.mean_latency_ms)
        runs.append(entry)
    return {"runs": runs}


def format_table(results) -> str:
    headers = ["label", "method", "abs_dev", "rel_dev_pct", "rmse",
               "frames", "off_road", "latency_ms"]
    rows = [headers]
    for r in results:
        m = r.metrics
        rows.append([
            r.label, r.config.method,
            f"{m.abs_dev:.2f}",
            "n/a" if m.rel_dev_pct is None else f"{m.rel_dev_pct:.2f}",
            f"{m.rmse:.2f}",
            str(m.frames),
            "-" if m.off_road_frame is None else str(m.off_road_frame),
            f"{m.mean_latency_ms:.2f}",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report(results, path):
    Path(path).write_text(json.dumps(results_to_json(results), indent=2) + "\n")
