import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clsched.errors import NumericalError
from clsched.motion import (
    AgentState,
    Belief,
    OdometryInput,
    OdometryNoiseModel,
    motion_jacobians,
    propagate_belief,
    unicycle_step,
    wrap_angle,
)

from conftest import random_pd, random_state


@pytest.mark.parametrize("theta, expected", [
    (0.0, 0.0),
    (3 * math.pi, math.pi),
    (-math.pi, math.pi),
    (math.pi, math.pi),
    (-3 * math.pi / 2, math.pi / 2),
])
def test_wrap_angle_examples(theta, expected):
    assert wrap_angle(theta) == pytest.approx(expected, abs=1e-12)


def test_wrap_angle_rejects_nan():
    with pytest.raises(ValueError):
        wrap_angle(float("nan"))


@given(st.floats(min_value=-1e4, max_value=1e4, allow_nan=False))
def test_wrap_angle_range_and_congruence(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    k = (theta - w) / (2 * math.pi)
    assert k == pytest.approx(round(k), abs=1e-9)


def test_zero_input_zero_noise_is_identity(rng):
    bel = Belief(AgentState(1.0, -2.0, 0.3), random_pd(rng))
    out = propagate_belief(bel, OdometryInput(0.0, 0.0, 0.5), OdometryNoiseModel(0.0, 0.0))
    assert out.estimate == bel.estimate
    np.testing.assert_array_equal(out.cov, bel.cov)


def test_axis_aligned_motion():
    bel = Belief(AgentState(0.0, 0.0, 0.0), np.eye(3) * 0.1)
    out = propagate_belief(bel, OdometryInput(1.0, 0.0, 1.0), OdometryNoiseModel(0.0, 0.0))
    assert out.estimate.x == 1.0
    assert out.estimate.y == 0.0
    assert out.estimate.phi == 0.0


def test_jacobians_examples():
    F, _ = motion_jacobians(AgentState(0, 0, 0.7), OdometryInput(0.0, 0.3, 0.1))
    np.testing.assert_array_equal(F, np.eye(3))
    F, _ = motion_jacobians(AgentState(0, 0, math.pi / 2), OdometryInput(1.0, 0.0, 0.1))
    assert F[0, 2] == pytest.approx(-0.1)
    assert F[1, 2] == pytest.approx(0.0, abs=1e-15)


def _step(x, u, eta=(0.0, 0.0)):
    # independent array form of the unicycle map with additive velocity noise
    v, w = u.v_m + eta[0], u.omega_m + eta[1]
    return np.array([x[0] + u.dt * v * np.cos(x[2]), x[1] + u.dt * v * np.sin(x[2]), x[2] + u.dt * w])


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(1000):
        est = random_state(rng)
        u = OdometryInput(rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(0.01, 1.0))
        F, G = motion_jacobians(est, u)
        x0 = est.as_array()
        F_fd = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            F_fd[:, k] = (_step(x0 + e, u) - _step(x0 - e, u)) / (2 * h)
        G_fd = np.empty((3, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            G_fd[:, k] = (_step(x0, u, e) - _step(x0, u, -e)) / (2 * h)
        np.testing.assert_allclose(F, F_fd, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(G, G_fd, rtol=1e-6, atol=1e-8)


def test_propagated_cov_matches_monte_carlo(rng):
    est = AgentState(0.5, -1.0, 0.8)
    P = random_pd(rng, scale=0.01)
    bel = Belief(est, P)
    u = OdometryInput(0.4, -0.2, 0.5)
    noise = OdometryNoiseModel()
    out = propagate_belief(bel, u, noise)

    n = 1_000_000
    F, G = motion_jacobians(est, u)
    dx = rng.multivariate_normal(np.zeros(3), P, size=n)
    eta = rng.multivariate_normal(np.zeros(2), noise.covariance(u), size=n)
    samples = dx @ F.T + eta @ G.T
    mc_cov = np.cov(samples, rowvar=False)
    assert np.trace(out.cov) == pytest.approx(np.trace(mc_cov), rel=0.05)
    np.testing.assert_allclose(out.cov, mc_cov, atol=0.05 * np.trace(mc_cov))


def test_det_non_decreasing_and_valid(rng):
    noise = OdometryNoiseModel()
    for _ in range(200):
        bel = Belief(random_state(rng), random_pd(rng, scale=0.01))
        u = OdometryInput(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.01, 0.5))
        out = propagate_belief(bel, u, noise)
        assert np.linalg.det(out.cov) >= np.linalg.det(bel.cov) * (1 - 1e-12)
        assert out.is_valid()
        assert -math.pi < out.estimate.phi <= math.pi


def test_degenerate_noise_raises():
    bel = Belief(AgentState(0, 0, 0), np.zeros((3, 3)))
    with pytest.raises(NumericalError):
        propagate_belief(bel, OdometryInput(1.0, 0.0, 0.1), OdometryNoiseModel(0.0, 0.0))


def test_dt_must_be_positive():
    with pytest.raises(ValueError):
        OdometryInput(1.0, 0.0, 0.0)


def test_unicycle_step_wraps_heading():
    out = unicycle_step(AgentState(0, 0, 3.1), OdometryInput(0.0, 1.0, 0.1))
    assert out.phi == pytest.approx(3.2 - 2 * math.pi)
