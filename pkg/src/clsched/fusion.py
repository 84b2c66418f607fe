"""Discorrelated minimum-variance (DMV) update for one relative measurement.

The unknown cross-covariance between the observing agent ``i`` and the
landmark agent ``j`` is bounded by inflating the two priors by ``1/omega``
and ``1/(1 - omega)``; ``omega`` is then chosen to minimise the log
determinant of the updated covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from clsched.errors import NumericalError, SingularGeometryError
from clsched.motion import AgentState, Belief, check_pd, symmetrize, wrap_angle

OMEGA_MIN = 1e-3
EPS_POS = 1e-9
GRID_POINTS = 50
GOLDEN_TOL = 1e-6

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class RelativeMeasurement:
    """Range (m) and relative heading ``phi_j - phi_i`` (rad) with 2x2 noise covariance."""

    range: float
    rel_heading: float
    noise_cov: np.ndarray

    def __post_init__(self):
        if not self.range >= 0:
            raise ValueError(f"range must be non-negative, got {self.range}")
        R = np.array(self.noise_cov, dtype=float)
        if R.shape != (2, 2):
            raise ValueError(f"measurement noise must be 2x2, got {R.shape}")
        if np.max(np.abs(R - R.T)) > 1e-12:
            raise ValueError("measurement noise covariance must be symmetric")
        if np.any(np.linalg.eigvalsh(R) <= 0):
            raise ValueError("measurement noise covariance must be positive definite")
        R.setflags(write=False)
        object.__setattr__(self, "noise_cov", R)
        object.__setattr__(self, "rel_heading", wrap_angle(self.rel_heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.range, self.rel_heading])


@dataclass(frozen=True)
class MeasurementJacobians:
    H_i: np.ndarray  # 2x3, w.r.t. the observing agent
    H_j: np.ndarray  # 2x3, w.r.t. the landmark agent


def range_noise(sigma_range: float = 0.147, sigma_heading: float = 0.1) -> np.ndarray:
    return np.diag([sigma_range**2, sigma_heading**2])


def predict_measurement(xi: AgentState, xj: AgentState) -> tuple[float, float]:
    dx, dy = xi.x - xj.x, xi.y - xj.y
    rho = math.hypot(dx, dy)
    if rho <= EPS_POS:
        raise SingularGeometryError(f"agents co-located (range {rho:.3e} m)")
    return rho, wrap_angle(xj.phi - xi.phi)


def measurement_jacobians(xi: AgentState, xj: AgentState) -> MeasurementJacobians:
    dx, dy = xi.x - xj.x, xi.y - xj.y
    rho = math.hypot(dx, dy)
    if rho <= EPS_POS:
        raise SingularGeometryError(f"agents co-located (range {rho:.3e} m)")
    ux, uy = dx / rho, dy / rho
    H_i = np.array([[ux, uy, 0.0], [0.0, 0.0, -1.0]])
    H_j = np.array([[-ux, -uy, 0.0], [0.0, 0.0, 1.0]])
    return MeasurementJacobians(H_i, H_j)


def _check_omega(omega: float, omega_min: float) -> float:
    omega = float(omega)
    if not (omega_min <= omega <= 1.0):
        raise ValueError(f"omega={omega} outside [{omega_min}, 1]")
    return omega


def dmv_updated_cov(P_i, P_j, jac: MeasurementJacobians, R, omega: float,
                    omega_min: float = OMEGA_MIN) -> np.ndarray:
    """Updated covariance for a fixed ``omega``.

    ``(omega P_i^-1 + (1-omega) H_i^T (H_j P_j H_j^T + (1-omega) R)^-1 H_i)^-1``;
    at ``omega == 1`` this is ``P_i`` itself.
    """
    omega = _check_omega(omega, omega_min)
    P_i = np.asarray(P_i, dtype=float)
    if omega == 1.0:
        return P_i.copy()
    H_i, H_j = jac.H_i, jac.H_j
    inner = H_j @ P_j @ H_j.T + (1.0 - omega) * np.asarray(R)
    try:
        info = omega * np.linalg.inv(P_i) + (1.0 - omega) * H_i.T @ np.linalg.solve(inner, H_i)
        P = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"dmv_updated_cov: {exc}") from None
    return check_pd(symmetrize(P), "dmv_updated_cov")


def dmv_gain(P_i, P_j, jac: MeasurementJacobians, R, omega: float,
             omega_min: float = OMEGA_MIN) -> np.ndarray:
    """3x2 gain of the DMV update with priors inflated by ``1/omega`` and ``1/(1-omega)``.

    ``omega == 1`` is clamped to ``1 - omega_min`` (the landmark term has a
    ``1/(1-omega)`` factor).
    """
    omega = _check_omega(omega, omega_min)
    if omega == 1.0:
        omega = 1.0 - omega_min
    H_i, H_j = jac.H_i, jac.H_j
    Pi_w = np.asarray(P_i) / omega
    S = H_i @ Pi_w @ H_i.T + H_j @ (np.asarray(P_j) / (1.0 - omega)) @ H_j.T + np.asarray(R)
    try:
        K = np.linalg.solve(S, H_i @ Pi_w).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"dmv_gain: singular innovation covariance ({exc})") from None
    if not np.all(np.isfinite(K)):
        raise NumericalError("dmv_gain: non-finite gain")
    return K


class _LogdetObjective:
    """``omega -> logdet P(omega)`` reduced to 2x2 determinants.

    With ``S = H_j P_j H_j^T + (1-omega) R`` and ``C = H_i P_i H_i^T`` the
    determinant lemma gives
    ``logdet P(omega) = logdet P_i - n log(omega) + logdet S - logdet(S + (1-omega)/omega C)``.
    """

    def __init__(self, P_i, P_j, jac, R):
        B = jac.H_j @ P_j @ jac.H_j.T
        C = jac.H_i @ P_i @ jac.H_i.T
        R = np.asarray(R, dtype=float)
        self.n = P_i.shape[0]
        self.b = (B[0, 0], 0.5 * (B[0, 1] + B[1, 0]), B[1, 1])
        self.c = (C[0, 0], 0.5 * (C[0, 1] + C[1, 0]), C[1, 1])
        self.r = (R[0, 0], 0.5 * (R[0, 1] + R[1, 0]), R[1, 1])
        sign, self.logdet_prior = np.linalg.slogdet(P_i)
        if sign <= 0:
            raise NumericalError("optimize_omega: prior covariance is not positive definite")
        self.logdet_prior = float(self.logdet_prior)

    def __call__(self, omega: float) -> float:
        if omega == 1.0:
            return self.logdet_prior
        (b0, b1, b2), (c0, c1, c2), (r0, r1, r2) = self.b, self.c, self.r
        u = 1.0 - omega
        s0, s1, s2 = b0 + u * r0, b1 + u * r1, b2 + u * r2
        k = u / omega
        det_s = s0 * s2 - s1 * s1
        det_t = (s0 + k * c0) * (s2 + k * c2) - (s1 + k * c1) ** 2
        if not (det_s > 0 and det_t > 0):
            return math.inf
        return self.logdet_prior - self.n * math.log(omega) + math.log(det_s) - math.log(det_t)

    def batch(self, omegas: np.ndarray) -> np.ndarray:
        (b0, b1, b2), (c0, c1, c2), (r0, r1, r2) = self.b, self.c, self.r
        u = 1.0 - omegas
        s0, s1, s2 = b0 + u * r0, b1 + u * r1, b2 + u * r2
        k = u / omegas
        det_s = s0 * s2 - s1 * s1
        det_t = (s0 + k * c0) * (s2 + k * c2) - (s1 + k * c1) ** 2
        ok = (det_s > 0) & (det_t > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.logdet_prior - self.n * np.log(omegas) + np.log(det_s) - np.log(det_t)
        out = np.where(ok, val, np.inf)
        out[omegas == 1.0] = self.logdet_prior
        return out


def golden_section(f, a: float, b: float, tol: float = GOLDEN_TOL) -> tuple[float, float]:
    """Minimise a scalar function on ``[a, b]``; returns ``(x, f(x))``."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def optimize_omega(P_i, P_j, jac: MeasurementJacobians, R,
                   omega_min: float = OMEGA_MIN) -> float:
    """Weight in ``[omega_min, 1]`` minimising ``logdet`` of the updated covariance.

    A coarse grid locates the best bracket, golden-section search refines it.
    ``omega = 1`` (ignore the measurement) is always a candidate, so the
    result is never worse than skipping the update.
    """
    try:
        obj = _LogdetObjective(np.asarray(P_i, float), np.asarray(P_j, float), jac, R)
        grid = np.linspace(omega_min, 1.0, GRID_POINTS)
        values = obj.batch(grid)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"optimize_omega: {exc}") from None
    if not np.any(np.isfinite(values)):
        raise NumericalError("optimize_omega: objective not finite anywhere on the grid")

    k = int(np.argmin(values))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, GRID_POINTS - 1)]
    best_w, best_f = float(grid[k]), float(values[k])
    try:
        w, fw = golden_section(obj, float(lo), float(hi))
    except np.linalg.LinAlgError:
        w, fw = best_w, math.inf
    if fw < best_f:
        best_w, best_f = w, fw
    if obj.logdet_prior <= best_f:
        best_w = 1.0
    return best_w


def dmv_update(bel_i: Belief, bel_j: Belief, z: RelativeMeasurement,
               omega_min: float = OMEGA_MIN) -> Belief:
    """Correct ``bel_i`` with a relative measurement of landmark agent ``j``."""
    jac = measurement_jacobians(bel_i.estimate, bel_j.estimate)
    R = z.noise_cov
    omega = optimize_omega(bel_i.cov, bel_j.cov, jac, R, omega_min)
    if omega == 1.0:
        return bel_i
    K = dmv_gain(bel_i.cov, bel_j.cov, jac, R, omega, omega_min)
    P = dmv_updated_cov(bel_i.cov, bel_j.cov, jac, R, omega, omega_min)
    rho_hat, head_hat = predict_measurement(bel_i.estimate, bel_j.estimate)
    innov = np.array([z.range - rho_hat, wrap_angle(z.rel_heading - head_hat)])
    x = bel_i.estimate.as_array() + K @ innov
    if not np.all(np.isfinite(x)):
        raise NumericalError("dmv_update: non-finite state estimate")
    return Belief(AgentState.from_array(x), P)


def pose_fix_update(bel: Belief, z: AgentState, R_fix) -> Belief:
    """Kalman update with a direct measurement of the full pose (external aiding)."""
    R_fix = np.asarray(R_fix, dtype=float)
    P = bel.cov
    try:
        K = np.linalg.solve(P + R_fix, P).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"pose_fix_update: {exc}") from None
    x = bel.estimate.as_array()
    innov = z.as_array() - x
    innov[2] = wrap_angle(float(innov[2]))
    A = np.eye(3) - K
    P_new = symmetrize(A @ P @ A.T + K @ R_fix @ K.T)
    check_pd(P_new, "pose_fix_update")
    return Belief(AgentState.from_array(x + K @ innov), P_new)


class SequentialUpdateError(NumericalError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"measurement #{index} failed: {cause}")
        self.index = index
        self.cause = cause


def sequential_update(bel_i: Belief,
                      landmarks: Sequence[tuple[Belief, RelativeMeasurement]],
                      omega_min: float = OMEGA_MIN) -> Belief:
    """Process measurements one after another, left to right."""
    bel = bel_i
    for idx, (bel_j, z) in enumerate(landmarks):
        try:
            bel = dmv_update(bel, bel_j, z, omega_min)
        except NumericalError as exc:
            raise SequentialUpdateError(idx, exc) from exc
    return bel
