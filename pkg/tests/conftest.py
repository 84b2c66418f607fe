import numpy as np
import pytest

from clsched.fusion import RelativeMeasurement, predict_measurement, range_noise
from clsched.motion import AgentState, Belief


def random_pd(rng, n=3, scale=1.0, cond=50.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = scale * np.exp(rng.uniform(0.0, np.log(cond), size=n))
    P = (Q * eig) @ Q.T
    return 0.5 * (P + P.T)


def random_state(rng, spread=5.0):
    return AgentState(*rng.uniform(-spread, spread, 2), rng.uniform(-np.pi, np.pi))


def random_instance(rng):
    """Observer belief, landmark belief and a noisy measurement between them."""
    xi, xj = random_state(rng), random_state(rng)
    while np.hypot(xi.x - xj.x, xi.y - xj.y) < 0.2:
        xj = random_state(rng)
    bel_i = Belief(xi, random_pd(rng, scale=10 ** rng.uniform(-3, 0)))
    bel_j = Belief(xj, random_pd(rng, scale=10 ** rng.uniform(-3, 0)))
    R = random_pd(rng, 2, scale=10 ** rng.uniform(-3, -1), cond=5.0)
    rho, head = predict_measurement(xi, xj)
    z = RelativeMeasurement(max(rho + rng.normal(0, 0.1), 0.0), head + rng.normal(0, 0.05), R)
    return bel_i, bel_j, z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def default_R():
    return range_noise()
