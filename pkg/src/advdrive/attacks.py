"""White-box perturbation attacks against the steering regressor.

Two attack families plus a noise baseline, all producing additive
perturbations in pixel space ([0, 1] images):

* fgsmr    -- per-frame signed-gradient step of size epsilon that pushes the
              predicted steering toward the chosen direction.
* uapr     -- a single input-agnostic perturbation learned over a frame
              corpus by normalized gradient ascent, kept inside an lp ball.
* random   -- uniform noise with a matched budget, the control baseline.

Directions: "right" drives the prediction up (positive steering),
"left" drives it down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn

DIRECTIONS = ("left", "right")
METHODS = ("none", "random", "fgsmr", "uapr")

UAPR_STEP = 0.02          # gradient-ascent step size per frame update
UAPR_MARGIN = 0.1         # required steering shift before a frame is skipped
UAPR_GRAD_FLOOR = 1e-12   # gradients below this norm are treated as zero


@dataclass(frozen=True)
class AttackConfig:
    """Validated description of an attack, matching the wire schema."""
    method: str = "none"
    direction: str | None = None
    epsilon: float | None = None
    p: object = None          # 2 or "inf"
    xi: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.method in ("fgsmr", "uapr"):
            if self.direction not in DIRECTIONS:
                raise ValueError(
                    f"{self.method} requires direction 'left' or 'right'")
        if self.method in ("fgsmr", "random"):
            if self.epsilon is None or not (0 < float(self.epsilon) <= 1):
                raise ValueError(
                    f"{self.method} requires epsilon in (0, 1]")
        if self.method == "uapr":
            if self.p not in (2, "inf"):
                raise ValueError("uapr requires p = 2 or \"inf\"")
            if self.xi is None or not (float(self.xi) > 0):
                raise ValueError("uapr requires xi > 0")
        if self.seed is not None and int(self.seed) < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_wire(cls, payload: dict) -> "AttackConfig":
        known = {"type", "method", "direction", "epsilon", "p", "xi", "seed"}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown attack fields {sorted(unknown)}")
        method = payload.get("method")
        if not isinstance(method, str):
            raise ValueError("attack message requires a string 'method'")
        kwargs = {"method": method}
        if "direction" in payload:
            kwargs["direction"] = payload["direction"]
        if "epsilon" in payload:
            eps = payload["epsilon"]
            if not isinstance(eps, (int, float)) or isinstance(eps, bool):
                raise ValueError("epsilon must be a number")
            kwargs["epsilon"] = float(eps)
        if "p" in payload:
            p = payload["p"]
            if p not in (2, "inf"):
                raise ValueError("p must be 2 or \"inf\"")
            kwargs["p"] = p
        if "xi" in payload:
            xi = payload["xi"]
            if not isinstance(xi, (int, float)) or isinstance(xi, bool):
                raise ValueError("xi must be a number")
            kwargs["xi"] = float(xi)
        if "seed" in payload:
            seed = payload["seed"]
            if not isinstance(seed, int) or isinstance(seed, bool):
                raise ValueError("seed must be an integer")
            kwargs["seed"] = seed
        return cls(**kwargs)

    def to_wire(self) -> dict:
        out = {"method": self.method}
        if self.direction is not None:
            out["direction"] = self.direction
        if self.epsilon is not None:
            out["epsilon"] = self.epsilon
        if self.p is not None:
            out["p"] = self.p
        if self.xi is not None:
            out["xi"] = self.xi
        if self.seed is not None:
            out["seed"] = self.seed
        return out


# ---------------------------------------------------------------------------
# core operations

def apply(x: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Perturbed image clip(x + eta, 0, 1); shapes must match."""
    if x.shape != eta.shape:
        raise ValueError(f"shape mismatch: image {x.shape}, "
                         f"perturbation {eta.shape}")
    return np.clip(x + eta, 0.0, 1.0).astype(np.float32, copy=False)


def project_lp(eta: np.ndarray, p, xi: float) -> np.ndarray:
    """Project onto the lp ball of radius xi (p = 2 or "inf")."""
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    if p == "inf":
        return np.clip(eta, -xi, xi).astype(eta.dtype, copy=False)
    if p == 2:
        norm = float(np.linalg.norm(eta.ravel()))
        if norm <= xi:
            return eta
        return (eta * (xi / norm)).astype(eta.dtype, copy=False)
    raise ValueError(f"p must be 2 or \"inf\", got {p!r}")


def lp_norm(eta: np.ndarray, p) -> float:
    if p == "inf":
        return float(np.abs(eta).max())
    if p == 2:
        return float(np.linalg.norm(eta.ravel()))
    raise ValueError(f"p must be 2 or \"inf\", got {p!r}")


def fgsmr(model: nn.Network, x: np.ndarray, direction: str,
          epsilon: float) -> np.ndarray:
    """Signed-gradient perturbation epsilon * sign(+-grad f(x)).

    "right" follows the gradient (raises the steering prediction),
    "left" follows the negated gradient.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    g = nn.grad_input(model, x)
    sign = 1.0 if direction == "right" else -1.0
    return (epsilon * sign * np.sign(g)).astype(np.float32, copy=False)


def random_noise(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise in [-epsilon, epsilon], the per-frame baseline."""
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    return rng.uniform(-epsilon, epsilon, size=shape).astype(np.float32)


def random_in_ball(shape, p, budget: float, rng: np.random.Generator) -> np.ndarray:
    """Fixed random perturbation with the same lp budget as a learned one."""
    if not budget > 0:
        raise ValueError(f"budget must be positive, got {budget}")
    if p == "inf":
        return rng.uniform(-budget, budget, size=shape).astype(np.float32)
    if p == 2:
        g = rng.standard_normal(size=shape)
        norm = float(np.linalg.norm(g.ravel()))
        if norm < 1e-30:
            g.flat[0] = 1.0
            norm = 1.0
        return (g * (budget / norm)).astype(np.float32)
    raise ValueError(f"p must be 2 or \"inf\", got {p!r}")


def uapr_learn(model: nn.Network, frames: np.ndarray, direction: str,
               p, xi: float, passes: int = 5, step: float = UAPR_STEP,
               margin: float = UAPR_MARGIN) -> np.ndarray:
    """Learn one perturbation that steers the model on every frame.

    Repeatedly sweeps the corpus; for each frame whose prediction has not yet
    shifted by ``margin`` in the desired direction, takes a normalized
    gradient step at the perturbed input and re-projects onto the lp ball.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    if p not in (2, "inf"):
        raise ValueError(f"p must be 2 or \"inf\", got {p!r}")
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("frames must be a non-empty (n, h, w, c) array")
    if not (margin >= 0 and math.isfinite(margin)):
        raise ValueError(f"margin must be finite and >= 0, got {margin}")

    sign = 1.0 if direction == "right" else -1.0
    clean = np.array([nn.forward(model, f) for f in frames])
    eta = np.zeros(frames.shape[1:], dtype=np.float32)
    updates = 0
    satisfied = 0
    for _ in range(passes):
        for i in range(frames.shape[0]):
            x_adv = apply(frames[i], eta)
            shift = sign * (nn.forward(model, x_adv) - clean[i])
            if shift >= margin:
                satisfied += 1
                continue
            g = nn.grad_input(model, x_adv)
            norm = float(np.linalg.norm(g.ravel()))
            if norm < UAPR_GRAD_FLOOR:
                continue
            eta = eta + (step * sign / norm) * g
            eta = project_lp(eta.astype(np.float32, copy=False), p, xi)
            updates += 1
    if updates == 0 and satisfied == 0:
        raise RuntimeError(
            "model gradient vanished on every frame; cannot learn a "
            "universal perturbation from a degenerate model")
    return eta.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# per-frame attacker engines used by the episode loop and the server

class NoAttack:
    method = "none"

    def perturb(self, model, x):
        return x, None


class RandomAttack:
    """Fresh uniform noise each frame, seeded for reproducibility."""
    method = "random"

    def __init__(self, epsilon: float, seed: int = 0):
        if not 0 < epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
        self.epsilon = float(epsilon)
        self._rng = np.random.default_rng(seed)

    def perturb(self, model, x):
        eta = random_noise(x.shape, self.epsilon, self._rng)
        return apply(x, eta), eta


class FgsmrAttack:
    method = "fgsmr"

    def __init__(self, direction: str, epsilon: float):
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
        if not 0 < epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
        self.direction = direction
        self.epsilon = float(epsilon)

    def perturb(self, model, x):
        eta = fgsmr(model, x, self.direction, self.epsilon)
        return apply(x, eta), eta


class FixedPerturbation:
    """Applies one precomputed perturbation to every frame (uapr or a
    budget-matched fixed random baseline)."""

    def __init__(self, eta: np.ndarray, method: str = "uapr"):
        if method not in METHODS:
            raise ValueError(f"unknown attack method {method!r}")
        self.method = method
        self.eta = np.asarray(eta, dtype=np.float32)

    def perturb(self, model, x):
        return apply(x, self.eta), self.eta


def make_attacker(attack, model=None):
    """Normalize None / AttackConfig / ready-made attacker to an attacker."""
    if attack is None:
        return NoAttack()
    if hasattr(attack, "perturb"):
        return attack
    if isinstance(attack, AttackConfig):
        if attack.method == "none":
            return NoAttack()
        if attack.method == "random":
            return RandomAttack(attack.epsilon,
                                0 if attack.seed is None else attack.seed)
        if attack.method == "fgsmr":
            return FgsmrAttack(attack.direction, attack.epsilon)
        raise ValueError(
            "uapr needs a perturbation learned from frames; build one with "
            "uapr_learn and wrap it in FixedPerturbation")
    raise TypeError(f"cannot interpret {type(attack).__name__} as an attack")
