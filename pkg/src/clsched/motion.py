"""Unicycle dead reckoning: agent state, belief propagation and its Jacobians."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from clsched.errors import NumericalError

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into the half-open interval (-pi, pi]."""
    if isinstance(theta, (float, int)):
        if not math.isfinite(theta):
            raise ValueError(f"cannot wrap non-finite angle {theta!r}")
        w = theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)
        if w <= -math.pi:
            w += TWO_PI
        elif w > math.pi:
            w -= TWO_PI
        return float(w)
    arr = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    w = arr - TWO_PI * np.ceil((arr - math.pi) / TWO_PI)
    w = np.where(w <= -math.pi, w + TWO_PI, w)
    w = np.where(w > math.pi, w - TWO_PI, w)
    if w.ndim == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class AgentState:
    """Planar pose: position in meters, heading in radians."""

    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi], dtype=float)

    @classmethod
    def from_array(cls, arr) -> AgentState:
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class Belief:
    """State estimate and its 3x3 error covariance."""

    estimate: AgentState
    cov: np.ndarray

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError(f"belief covariance must be 3x3, got {cov.shape}")
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))

    def is_valid(self, sym_tol: float = 1e-10) -> bool:
        """True when the covariance is symmetric to ``sym_tol`` and positive definite."""
        if not np.all(np.isfinite(self.cov)):
            return False
        if np.max(np.abs(self.cov - self.cov.T)) > sym_tol:
            return False
        return bool(np.all(np.linalg.eigvalsh(self.cov) > 0.0))


@dataclass(frozen=True)
class OdometryInput:
    """Measured linear / angular velocity held over one step of length ``dt``."""

    v_m: float
    omega_m: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"odometry dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class OdometryNoiseModel:
    """Velocity-proportional linear noise plus constant angular-rate noise.

    Both values are standard deviations: the linear-velocity noise std is
    ``sigma_v_scale * |v_m|`` (m/s) and the angular-rate noise std is
    ``sigma_omega`` (rad/s).
    """

    sigma_v_scale: float = 2.253
    sigma_omega: float = 0.587

    def __post_init__(self):
        if self.sigma_v_scale < 0 or self.sigma_omega < 0:
            raise ValueError("odometry noise stds must be non-negative")

    def covariance(self, u: OdometryInput) -> np.ndarray:
        sv = self.sigma_v_scale * abs(u.v_m)
        return np.diag([sv * sv, self.sigma_omega * self.sigma_omega])


def unicycle_step(est: AgentState, u: OdometryInput) -> AgentState:
    """Advance a pose by one Euler step of the unicycle kinematics."""
    c, s = math.cos(est.phi), math.sin(est.phi)
    return AgentState(
        est.x + u.dt * u.v_m * c,
        est.y + u.dt * u.v_m * s,
        est.phi + u.dt * u.omega_m,
    )


def motion_jacobians(est: AgentState, u: OdometryInput) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of :func:`unicycle_step` w.r.t. the state (F, 3x3) and the
    odometry noise (G, 3x2), evaluated at the prior estimate."""
    c, s = math.cos(est.phi), math.sin(est.phi)
    dt, v = u.dt, u.v_m
    F = np.array([
        [1.0, 0.0, -dt * v * s],
        [0.0, 1.0, dt * v * c],
        [0.0, 0.0, 1.0],
    ])
    G = np.array([
        [dt * c, 0.0],
        [dt * s, 0.0],
        [0.0, dt],
    ])
    return F, G


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def check_pd(P: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(P)):
        raise NumericalError(f"{what}: non-finite covariance")
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what}: covariance is not positive definite") from None
    return P


def propagate_belief(bel: Belief, u: OdometryInput, noise: OdometryNoiseModel) -> Belief:
    """One dead-reckoning step: ``x <- f(x, u)``, ``P <- F P F^T + G Q G^T``.

    Raises NumericalError if the propagated covariance is not positive definite.
    """
    F, G = motion_jacobians(bel.estimate, u)
    Q = noise.covariance(u)
    P = symmetrize(F @ bel.cov @ F.T + G @ Q @ G.T)
    check_pd(P, "propagate_belief")
    return Belief(unicycle_step(bel.estimate, u), P)
