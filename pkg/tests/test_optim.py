import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionqa.optim import OptimizerConfig, adamw_step, clip_grad_norm, init_state, radam_rectification, radam_step

STEPS = [adamw_step, radam_step]


def scalar(x):
    return {"x": np.array(float(x))}


@pytest.mark.parametrize("step", STEPS)
def test_zero_grads_scale_by_decay_exactly(step):
    lr, lam = 0.01, 0.3
    p = {"w": np.array([1.5, -2.0, 0.25])}
    want = p["w"] * (1 - lr * lam)
    step(p, {"w": np.zeros(3)}, init_state(p), OptimizerConfig(lr=lr, weight_decay=lam))
    assert np.array_equal(p["w"], want)


def test_adamw_one_step_hand_value():
    hp = OptimizerConfig(lr=0.1, weight_decay=0.5)
    p = scalar(2.0)
    adamw_step(p, scalar(1.0), init_state(p), hp)
    # m_hat = 1, v_hat = 1 after bias correction; decay first, then the Adam step
    want = 2.0 * (1 - 0.1 * 0.5) - 0.1 * 1.0 / (1.0 + 1e-8)
    assert float(p["x"]) == pytest.approx(want, abs=1e-15)


def test_adamw_two_step_hand_value():
    hp = OptimizerConfig(lr=0.1)
    p = scalar(0.0)
    s = init_state(p)
    adamw_step(p, scalar(1.0), s, hp)
    adamw_step(p, scalar(-2.0), s, hp)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    step2 = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert float(p["x"]) == pytest.approx(-0.1 / (1 + 1e-8) - step2, abs=1e-15)


def test_radam_step_one_is_momentum_only():
    rho1, r1 = radam_rectification(1, 0.999)
    assert rho1 == pytest.approx(1.0, abs=1e-9) and math.isnan(r1)
    p = scalar(1.0)
    s = init_state(p)
    radam_step(p, scalar(1.0), s, OptimizerConfig(lr=0.1))
    assert s["adaptive"] is False
    assert float(p["x"]) == pytest.approx(0.9, abs=1e-15)


def test_radam_switches_to_adaptive_after_threshold():
    hp = OptimizerConfig(lr=0.1)
    p = scalar(1.0)
    s = init_state(p)
    flags = []
    for _ in range(8):
        radam_step(p, scalar(1.0), s, hp)
        flags.append(s["adaptive"])
    assert flags == [False] * 5 + [True] * 3
    rho, r = radam_rectification(6, 0.999)
    assert rho > 5 and 0 < r < 1


def test_radam_rectification_formula():
    beta2 = 0.999
    rho_inf = 2 / (1 - beta2) - 1
    t = 50
    rho = rho_inf - 2 * t * beta2 ** t / (1 - beta2 ** t)
    r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
    assert radam_rectification(t, beta2) == pytest.approx((rho, r), rel=1e-12)


def test_radam_zero_grads_unchanged():
    p = {"w": np.array([3.0, -1.0])}
    s = init_state(p)
    for _ in range(10):
        radam_step(p, {"w": np.zeros(2)}, s, OptimizerConfig(lr=0.5))
    assert p["w"].tolist() == [3.0, -1.0]


def test_radam_quadratic_converges_monotonically():
    p = scalar(1.0)
    s = init_state(p)
    xs = [1.0]
    for _ in range(100):
        radam_step(p, {"x": 2 * p["x"].copy()}, s, OptimizerConfig(lr=0.05))
        xs.append(abs(float(p["x"])))
    assert all(b < a for a, b in zip(xs, xs[1:]))
    assert xs[-1] < 0.1


@pytest.mark.parametrize("step", STEPS)
def test_identical_runs_bit_identical(step):
    rng = np.random.default_rng(0)
    grads = [{"w": rng.normal(size=5)} for _ in range(30)]
    out = []
    for _ in range(2):
        p = {"w": np.ones(5)}
        s = init_state(p)
        for g in grads:
            step(p, {"w": g["w"].copy()}, s, OptimizerConfig(lr=0.01, weight_decay=0.1))
        out.append(p["w"].tobytes())
    assert out[0] == out[1]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.integers(1, 12))
def test_zero_lr_leaves_params(values, steps):
    for step in STEPS:
        p = {"w": np.array(values)}
        s = init_state(p)
        for _ in range(steps):
            step(p, {"w": np.array(values) * 3 + 1}, s, OptimizerConfig(lr=0.0))
        assert p["w"].tolist() == values


@pytest.mark.parametrize("step", STEPS)
def test_non_finite_grads_fatal(step):
    p = scalar(1.0)
    with pytest.raises(FloatingPointError):
        step(p, scalar(np.inf), init_state(p), OptimizerConfig())


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert math.sqrt(g["a"][0] ** 2 + g["b"][0] ** 2) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_grad_norm(g, 1.0)
    assert g["a"][0] == 0.3
