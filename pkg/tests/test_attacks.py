"""Tests for the perturbation attacks: signed-gradient steps, lp projection,
universal perturbation learning and the per-frame attacker engines."""

import numpy as np
import pytest

from advdrive import attacks as A
from advdrive import model as M
from advdrive import nn
from tests.test_model import zero_weight_model


def linear_probe(weights):
    """Tiny network tanh(w . x) over a (1, 1, c) input, for exact gradients."""
    w = np.asarray(weights, dtype=np.float32)
    layers = [nn.flatten(), nn.dense(w.size, 1), nn.tanh()]
    params = [None,
              {"w": w.reshape(-1, 1), "b": np.zeros(1, np.float32)},
              None]
    return nn.Network((1, 1, w.size), layers, params)


@pytest.fixture(scope="module")
def pilot():
    return M.build_pilotnet(seed=1)


@pytest.fixture(scope="module")
def frames():
    rng = np.random.default_rng(2)
    return rng.random((8, 64, 64, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# fgsmr

def test_fgsmr_follows_gradient_sign_exactly():
    net = linear_probe([0.2, -0.5, 0.0])
    x = np.zeros((1, 1, 3), dtype=np.float32)
    # gradient of tanh(w.x) at x=0 is w, so the step is eps * sign(w)
    right = A.fgsmr(net, x, "right", 0.1)
    assert np.array_equal(right.ravel(), np.float32([0.1, -0.1, 0.0]))
    left = A.fgsmr(net, x, "left", 0.1)
    assert np.array_equal(left, -right)


def test_fgsmr_values_are_ternary(pilot, frames):
    eta = A.fgsmr(pilot, frames[0], "right", 0.03)
    assert eta.shape == frames[0].shape and eta.dtype == np.float32
    assert set(np.unique(eta)) <= {np.float32(-0.03), np.float32(0.0),
                                   np.float32(0.03)}


def test_fgsmr_moves_prediction_in_requested_direction(pilot, frames):
    shifts = {"right": [], "left": []}
    for direction in shifts:
        for x in frames:
            eta = A.fgsmr(pilot, x, direction, 0.02)
            shift = nn.forward(pilot, A.apply(x, eta)) - nn.forward(pilot, x)
            shifts[direction].append(shift)
    assert np.mean(shifts["right"]) > 0.0
    assert np.mean(shifts["left"]) < 0.0


def test_fgsmr_validates_arguments(pilot, frames):
    with pytest.raises(ValueError):
        A.fgsmr(pilot, frames[0], "up", 0.1)
    with pytest.raises(ValueError):
        A.fgsmr(pilot, frames[0], "left", 0.0)
    with pytest.raises(ValueError):
        A.fgsmr(pilot, frames[0], "left", 1.5)


# ---------------------------------------------------------------------------
# lp projection

def test_project_l2_scales_onto_sphere():
    eta = np.array([3.0, 4.0], dtype=np.float32)
    out = A.project_lp(eta, 2, 2.5)
    assert np.array_equal(out, np.float32([1.5, 2.0]))


def test_project_l2_inside_ball_unchanged():
    eta = np.array([0.3, 0.4], dtype=np.float32)
    out = A.project_lp(eta, 2, 1.0)
    assert np.array_equal(out, eta)


def test_project_linf_clamps_components():
    eta = np.array([3.0, -4.0, 0.5], dtype=np.float32)
    out = A.project_lp(eta, "inf", 2.0)
    assert np.array_equal(out, np.float32([2.0, -2.0, 0.5]))


@pytest.mark.parametrize("p,xi", [(2, 0.7), ("inf", 0.01)])
def test_project_feasibility_random(p, xi):
    rng = np.random.default_rng(3)
    for _ in range(20):
        eta = rng.normal(0, 1, size=(16, 16, 3)).astype(np.float32)
        out = A.project_lp(eta, p, xi)
        assert A.lp_norm(out, p) <= xi * (1 + 1e-6)


def test_project_linf_idempotent_bitwise():
    rng = np.random.default_rng(4)
    eta = rng.normal(0, 1, size=(8, 8, 3)).astype(np.float32)
    once = A.project_lp(eta, "inf", 0.3)
    twice = A.project_lp(once, "inf", 0.3)
    assert np.array_equal(once, twice)


def test_project_l2_idempotent_within_tolerance():
    rng = np.random.default_rng(5)
    eta = rng.normal(0, 1, size=(8, 8, 3)).astype(np.float32)
    once = A.project_lp(eta, 2, 0.5)
    twice = A.project_lp(once, 2, 0.5)
    assert np.abs(once - twice).max() <= 1e-7


def test_project_validates_arguments():
    eta = np.ones(3, dtype=np.float32)
    with pytest.raises(ValueError):
        A.project_lp(eta, 3, 1.0)
    with pytest.raises(ValueError):
        A.project_lp(eta, 2, 0.0)
    with pytest.raises(ValueError):
        A.lp_norm(eta, 1)


# ---------------------------------------------------------------------------
# apply

def test_apply_zero_perturbation_is_identity():
    x = np.random.default_rng(6).random((4, 4, 3)).astype(np.float32)
    out = A.apply(x, np.zeros_like(x))
    assert np.array_equal(out, x)


def test_apply_clips_to_image_range():
    x = np.array([[[0.9, 0.1, 0.5]]], dtype=np.float32)
    eta = np.array([[[0.3, -0.3, 0.2]]], dtype=np.float32)
    out = A.apply(x, eta)
    assert np.allclose(out.ravel(), [1.0, 0.0, 0.7], atol=1e-7)


def test_apply_range_property():
    rng = np.random.default_rng(7)
    x = rng.random((16, 16, 3)).astype(np.float32)
    eta = rng.normal(0, 0.5, size=x.shape).astype(np.float32)
    out = A.apply(x, eta)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.dtype == np.float32


def test_apply_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        A.apply(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4, 1), np.float32))


# ---------------------------------------------------------------------------
# random baselines

def test_random_noise_bounds_and_reproducibility():
    a = A.random_noise((8, 8, 3), 0.05, np.random.default_rng(8))
    b = A.random_noise((8, 8, 3), 0.05, np.random.default_rng(8))
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 0.05
    c = A.random_noise((8, 8, 3), 0.05, np.random.default_rng(9))
    assert not np.array_equal(a, c)


def test_random_in_ball_matches_budget():
    rng = np.random.default_rng(10)
    l2 = A.random_in_ball((16, 16, 3), 2, 1.5, rng)
    assert A.lp_norm(l2, 2) == pytest.approx(1.5, rel=1e-5)
    linf = A.random_in_ball((16, 16, 3), "inf", 0.04, rng)
    assert A.lp_norm(linf, "inf") <= 0.04


# ---------------------------------------------------------------------------
# uapr learning

def test_uapr_zero_margin_never_updates(pilot, frames):
    eta = A.uapr_learn(pilot, frames, "right", 2, 1.0, passes=2, margin=0.0)
    assert np.array_equal(eta, np.zeros(frames.shape[1:], np.float32))


def test_uapr_degenerate_model_raises(frames):
    with pytest.raises(RuntimeError, match="gradient"):
        A.uapr_learn(zero_weight_model(), frames, "right", 2, 1.0, passes=1)


@pytest.mark.parametrize("p,xi", [(2, 2.0), ("inf", 0.05)])
def test_uapr_respects_budget(pilot, frames, p, xi):
    eta = A.uapr_learn(pilot, frames, "right", p, xi, passes=2)
    assert A.lp_norm(eta, p) <= xi * (1 + 1e-6)
    assert eta.dtype == np.float32


def test_uapr_shifts_predictions_toward_direction(pilot, frames):
    eta = A.uapr_learn(pilot, frames, "right", 2, 2.0, passes=5)
    shifts = [nn.forward(pilot, A.apply(x, eta)) - nn.forward(pilot, x)
              for x in frames]
    assert np.mean(shifts) > 0.0

    eta_l = A.uapr_learn(pilot, frames, "left", 2, 2.0, passes=5)
    shifts_l = [nn.forward(pilot, A.apply(x, eta_l)) - nn.forward(pilot, x)
                for x in frames]
    assert np.mean(shifts_l) < 0.0


def test_uapr_validates_arguments(pilot, frames):
    with pytest.raises(ValueError):
        A.uapr_learn(pilot, frames, "sideways", 2, 1.0)
    with pytest.raises(ValueError):
        A.uapr_learn(pilot, frames, "right", 1, 1.0)
    with pytest.raises(ValueError):
        A.uapr_learn(pilot, frames, "right", 2, 0.0)
    with pytest.raises(ValueError):
        A.uapr_learn(pilot, frames, "right", 2, 1.0, passes=0)
    with pytest.raises(ValueError):
        A.uapr_learn(pilot, np.zeros((0, 64, 64, 3), np.float32), "right", 2, 1.0)
    with pytest.raises(ValueError):
        A.uapr_learn(pilot, frames, "right", 2, 1.0, margin=-0.1)


# ---------------------------------------------------------------------------
# attack configuration

def test_config_accepts_valid_combinations():
    A.AttackConfig(method="none")
    A.AttackConfig(method="random", epsilon=0.04, seed=3)
    A.AttackConfig(method="fgsmr", direction="left", epsilon=0.04)
    A.AttackConfig(method="uapr", direction="right", p=2, xi=2.0)
    A.AttackConfig(method="uapr", direction="right", p="inf", xi=0.05)


def test_config_rejects_invalid_combinations():
    with pytest.raises(ValueError):
        A.AttackConfig(method="warp")
    with pytest.raises(ValueError):
        A.AttackConfig(method="fgsmr", epsilon=0.04)  # no direction
    with pytest.raises(ValueError):
        A.AttackConfig(method="fgsmr", direction="right")  # no epsilon
    with pytest.raises(ValueError):
        A.AttackConfig(method="fgsmr", direction="right", epsilon=2.0)
    with pytest.raises(ValueError):
        A.AttackConfig(method="uapr", direction="left", p=3, xi=1.0)
    with pytest.raises(ValueError):
        A.AttackConfig(method="uapr", direction="left", p=2)  # no xi
    with pytest.raises(ValueError):
        A.AttackConfig(method="random", epsilon=0.04, seed=-1)


def test_config_wire_round_trip():
    cfg = A.AttackConfig(method="uapr", direction="left", p="inf",
                         xi=0.05, seed=7)
    wire = cfg.to_wire()
    assert wire == {"method": "uapr", "direction": "left", "p": "inf",
                    "xi": 0.05, "seed": 7}
    assert A.AttackConfig.from_wire(dict(wire, type="attack")) == cfg


def test_config_from_wire_rejects_bad_payloads():
    with pytest.raises(ValueError):
        A.AttackConfig.from_wire({"method": "fgsmr", "direction": "right",
                                  "epsilon": 0.04, "extra": 1})
    with pytest.raises(ValueError):
        A.AttackConfig.from_wire({"method": 5})
    with pytest.raises(ValueError):
        A.AttackConfig.from_wire({"method": "fgsmr", "direction": "right",
                                  "epsilon": "big"})
    with pytest.raises(ValueError):
        A.AttackConfig.from_wire({"method": "fgsmr", "direction": "right",
                                  "epsilon": True})
    with pytest.raises(ValueError):
        A.AttackConfig.from_wire({"method": "uapr", "direction": "left",
                                  "p": 1, "xi": 0.1})
    with pytest.raises(ValueError):
        A.AttackConfig.from_wire({"method": "random", "epsilon": 0.04,
                                  "seed": 1.5})


# ---------------------------------------------------------------------------
# attacker engines

def test_make_attacker_dispatch(pilot):
    assert A.make_attacker(None, pilot).method == "none"
    assert isinstance(A.make_attacker(A.AttackConfig(method="none"), pilot),
                      A.NoAttack)
    rnd = A.make_attacker(A.AttackConfig(method="random", epsilon=0.04,
                                         seed=1), pilot)
    assert isinstance(rnd, A.RandomAttack)
    fg = A.make_attacker(A.AttackConfig(method="fgsmr", direction="left",
                                        epsilon=0.04), pilot)
    assert isinstance(fg, A.FgsmrAttack)
    fixed = A.FixedPerturbation(np.zeros((64, 64, 3), np.float32))
    assert A.make_attacker(fixed, pilot) is fixed
    with pytest.raises(ValueError):
        A.make_attacker(A.AttackConfig(method="uapr", direction="left",
                                       p=2, xi=1.0), pilot)
    with pytest.raises(TypeError):
        A.make_attacker("fgsmr", pilot)


def test_no_attack_returns_input_unchanged(pilot, frames):
    x = frames[0]
    x_adv, eta = A.NoAttack().perturb(pilot, x)
    assert x_adv is x
    assert eta is None


def test_random_attack_is_seeded_and_fresh_per_frame(pilot, frames):
    a = A.RandomAttack(0.04, seed=5)
    b = A.RandomAttack(0.04, seed=5)
    xa1, ea1 = a.perturb(pilot, frames[0])
    xb1, eb1 = b.perturb(pilot, frames[0])
    assert np.array_equal(ea1, eb1) and np.array_equal(xa1, xb1)
    _, ea2 = a.perturb(pilot, frames[0])
    assert not np.array_equal(ea1, ea2)


def test_fgsmr_attack_applies_its_perturbation(pilot, frames):
    atk = A.FgsmrAttack("right", 0.03)
    x_adv, eta = atk.perturb(pilot, frames[0])
    assert np.array_equal(x_adv, A.apply(frames[0], eta))
    assert A.lp_norm(eta, "inf") <= 0.03


def test_fixed_perturbation_is_constant_across_frames(pilot, frames):
    eta = np.full((64, 64, 3), 0.01, dtype=np.float32)
    atk = A.FixedPerturbation(eta, method="uapr")
    for x in frames[:3]:
        x_adv, used = atk.perturb(pilot, x)
        assert used is atk.eta
        assert np.array_equal(x_adv, A.apply(x, eta))
