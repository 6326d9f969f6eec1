"""Pose and velocity estimation.

An extended Kalman filter over the planar state [px, py, psi, vx, vy, r]
driven by body-frame accelerometer input, updated by GPS position, body
velocity, yaw rate, and the localizer's virtual pose. Every update is gated
on Mahalanobis distance against a chi-square quantile; per-sensor sliding
windows of gate verdicts drive a Healthy/Unhealthy self-diagnosis that stops
fusing a sensor while it misbehaves and reports estimator divergence.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np
from scipy.stats import chi2

from . import kernels
from .core import Pose2, symmetrize, validate_cov, wrap_angle

STATE_DIM = 6
MAX_PREDICT_DT = 0.1
# tuned for a smooth dead-reckoned pose: mapping has no heading-bearing
# sensor, so heading process noise stays at zero
DEFAULT_Q_DIAG = np.array([0.0, 0.0, 0.0, 0.5**2, 0.5**2, 0.3**2])
DEFAULT_GATE_P = 0.99


class SensorKind(str, Enum):
    GPS_POSITION = "gps_position"
    BODY_VELOCITY = "body_velocity"
    YAW_RATE = "yaw_rate"
    VIRTUAL_POSE = "virtual_pose"


SENSOR_DOF = {
    SensorKind.GPS_POSITION: 2,
    SensorKind.BODY_VELOCITY: 2,
    SensorKind.YAW_RATE: 1,
    SensorKind.VIRTUAL_POSE: 3,
}

# rows of the state picked out by each (linear) measurement model
_H_ROWS = {
    SensorKind.GPS_POSITION: (0, 1),
    SensorKind.BODY_VELOCITY: (3, 4),
    SensorKind.YAW_RATE: (5,),
    SensorKind.VIRTUAL_POSE: (0, 1, 2),
}

POSITION_BEARING_KINDS = (SensorKind.GPS_POSITION, SensorKind.VIRTUAL_POSE)


class SingularInnovationError(RuntimeError):
    """Innovation covariance is numerically singular (covariance collapse)."""

    def __init__(self, message: str, cond: float):
        super().__init__(f"{message} (cond estimate {cond:.3e})")
        self.cond = cond


@dataclass(frozen=True)
class VehicleState:
    """Filter state at time t: mean x (6,) and covariance P (6, 6)."""

    t: float
    x: np.ndarray
    P: np.ndarray

    @property
    def pose(self) -> Pose2:
        return Pose2(float(self.x[0]), float(self.x[1]), float(self.x[2]))


@dataclass(frozen=True)
class ImuInput:
    t: float
    ax: float
    ay: float


@dataclass(frozen=True)
class Measurement:
    t: float
    kind: SensorKind
    z: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        dof = SENSOR_DOF[self.kind]
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if z.shape[0] != dof:
            raise ValueError(f"{self.kind.value} expects {dof}-dim z, got {z.shape[0]}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "R", validate_cov(self.R, require_pd=True, name="R"))
        if self.R.shape[0] != dof:
            raise ValueError(f"{self.kind.value} expects {dof}x{dof} R")


@dataclass(frozen=True)
class UpdateOutcome:
    """Gate verdict for one measurement evaluation.

    `accepted` is the pure chi-square gate verdict; `fused` additionally
    requires the sensor to be Healthy, and is what actually changed the state.
    """

    accepted: bool
    fused: bool
    d2: float
    innovation: np.ndarray
    dof: int


class HealthStatus(str, Enum):
    HEALTHY = "healthy"
    UNHEALTHY = "unhealthy"


@dataclass
class SensorHealth:
    """Sliding-window rejection monitor for one sensor kind.

    Healthy -> Unhealthy when the rejected fraction over a full window
    exceeds `theta_rej`; Unhealthy -> Healthy after `n_rec` consecutive
    accepted evaluations (the window is cleared on recovery so stale
    rejections cannot re-trip immediately).
    """

    window_size: int = 50
    theta_rej: float = 0.5
    n_rec: int = 20
    window: deque = field(default_factory=deque)
    status: HealthStatus = HealthStatus.HEALTHY
    streak: int = 0

    def rejection_fraction(self) -> float:
        if not self.window:
            return 0.0
        return 1.0 - sum(self.window) / len(self.window)


def health_step(h: SensorHealth, o: UpdateOutcome) -> SensorHealth:
    """Advance a sensor's health window with one gate verdict."""
    window = deque(h.window, maxlen=h.window_size)
    window.append(bool(o.accepted))
    streak = h.streak + 1 if o.accepted else 0
    status = h.status
    if status is HealthStatus.HEALTHY:
        if len(window) == h.window_size:
            rejected = len(window) - sum(window)
            if rejected / len(window) > h.theta_rej:
                status = HealthStatus.UNHEALTHY
    elif streak >= h.n_rec:
        status = HealthStatus.HEALTHY
        window.clear()
    return SensorHealth(h.window_size, h.theta_rej, h.n_rec, window, status, streak)


@dataclass(frozen=True)
class EstimatorDiagnostics:
    sensor_status: dict
    divergence: bool
    pos_cov_trace: float


def chi2_gate(dof: int, p: float) -> float:
    """Chi-square inverse CDF used as the Mahalanobis gate threshold."""
    if dof not in (1, 2, 3):
        raise ValueError(f"dof must be 1..3, got {dof}")
    if not 0.5 < p < 1.0:
        raise ValueError(f"gate probability must be in (0.5, 1), got {p}")
    return _chi2_ppf_cached(dof, p)


@lru_cache(maxsize=64)
def _chi2_ppf_cached(dof: int, p: float) -> float:
    return float(chi2.ppf(p, dof))


def measurement_model(x: np.ndarray, kind: SensorKind):
    """Predicted measurement and Jacobian H for a state mean."""
    rows = _H_ROWS[kind]
    H = np.zeros((len(rows), STATE_DIM))
    for i, r in enumerate(rows):
        H[i, r] = 1.0
    return x[list(rows)].copy(), H


def predict(s: VehicleState, u: ImuInput, dt: float,
            q_diag: np.ndarray = DEFAULT_Q_DIAG) -> VehicleState:
    """Propagate mean and covariance through the kinematic process model.

    Explicit Euler; callers with sparse inputs must sub-step to keep
    dt <= 0.1 s.
    """
    if not 0.0 < dt <= MAX_PREDICT_DT:
        raise ValueError(f"dt must be in (0, {MAX_PREDICT_DT}], got {dt}")
    if not (math.isfinite(u.ax) and math.isfinite(u.ay)):
        raise ValueError("IMU input must be finite")
    x, _, P = kernels.ekf_predict(s.x, s.P, u.ax, u.ay, dt, np.asarray(q_diag, dtype=np.float64))
    return VehicleState(t=s.t + dt, x=x, P=P)


def transition_jacobian(x: np.ndarray, u: ImuInput, dt: float) -> np.ndarray:
    """Analytic Jacobian of the discrete transition (for consistency checks)."""
    _, F, _ = kernels.ekf_predict(x, np.eye(STATE_DIM), u.ax, u.ay, dt,
                                  np.zeros(STATE_DIM))
    return F


def update(s: VehicleState, m: Measurement, health: Optional[SensorHealth] = None,
           gate_p: float = DEFAULT_GATE_P, gate_d2: Optional[float] = None):
    """Gated EKF measurement update.

    Returns (state, UpdateOutcome). The state is returned unchanged (same
    object) unless the measurement both passes the gate and comes from a
    Healthy sensor; unhealthy sensors are still evaluated so their gate
    record can drive recovery.
    """
    if m.t < s.t:
        raise ValueError(f"out-of-order measurement: m.t={m.t} < state t={s.t}")
    dof = SENSOR_DOF[m.kind]
    z_hat, H = measurement_model(s.x, m.kind)
    nu = m.z - z_hat
    if m.kind is SensorKind.VIRTUAL_POSE:
        nu[2] = wrap_angle(nu[2])

    S = symmetrize(H @ s.P @ H.T) + m.R
    if dof == 1:
        s00 = S[0, 0]
        if not math.isfinite(s00) or s00 <= 0.0:
            raise SingularInnovationError("innovation covariance not positive", cond=math.inf)
        Sinv = np.array([[1.0 / s00]])
    else:
        cond = np.linalg.cond(S)
        if not math.isfinite(cond) or cond > 1e12:
            raise SingularInnovationError("innovation covariance near-singular", cond=float(cond))
        Sinv = np.linalg.inv(S)

    d2 = float(nu @ Sinv @ nu)
    threshold = chi2_gate(dof, gate_p) if gate_d2 is None else gate_d2
    accepted = d2 <= threshold
    healthy = health is None or health.status is HealthStatus.HEALTHY
    fused = accepted and healthy
    outcome = UpdateOutcome(accepted=accepted, fused=fused, d2=d2,
                            innovation=nu, dof=dof)
    if not fused:
        return s, outcome

    K = s.P @ H.T @ Sinv
    x = s.x + K @ nu
    x[2] = wrap_angle(x[2])
    IKH = np.eye(STATE_DIM) - K @ H
    P = symmetrize(IKH @ s.P @ IKH.T + K @ m.R @ K.T)
    return VehicleState(t=m.t, x=x, P=P), outcome


def diagnostics(s: VehicleState, healths: Mapping[SensorKind, SensorHealth],
                theta_div: float = 25.0) -> EstimatorDiagnostics:
    """Divergence self-check: position covariance blown up, or every
    position-bearing sensor that has ever been evaluated is Unhealthy."""
    pos_trace = float(s.P[0, 0] + s.P[1, 1])
    tracked = [healths[k] for k in POSITION_BEARING_KINDS
               if k in healths and len(healths[k].window) > 0]
    all_pos_unhealthy = bool(tracked) and all(
        h.status is HealthStatus.UNHEALTHY for h in tracked)
    return EstimatorDiagnostics(
        sensor_status={k: h.status for k, h in healths.items()},
        divergence=pos_trace > theta_div or all_pos_unhealthy,
        pos_cov_trace=pos_trace,
    )


@dataclass
class EkfParams:
    q_diag: np.ndarray = field(default_factory=lambda: DEFAULT_Q_DIAG.copy())
    gate_p: float = DEFAULT_GATE_P
    window: int = 50
    theta_rej: float = 0.5
    n_rec: int = 20
    theta_div: float = 25.0
    outlier_rejection: bool = True


class Estimator:
    """Stateful wrapper tying predict/update/health together for the harness.

    Single-owner: one logical thread drives it; the VehicleState snapshots
    it hands out are immutable.
    """

    def __init__(self, initial: VehicleState, params: Optional[EkfParams] = None):
        self.params = params or EkfParams()
        self.state = initial
        self.healths = {}
        self.counts = {k: [0, 0] for k in SensorKind}  # [evaluated, rejected]

    def predict(self, u: ImuInput, dt: float) -> VehicleState:
        self.state = predict(self.state, u, dt, self.params.q_diag)
        return self.state

    def update(self, m: Measurement) -> Optional[UpdateOutcome]:
        if m.t < self.state.t:
            # causal filter: stale measurements are dropped, not re-filtered
            logging.getLogger(__name__).warning(
                "dropping out-of-order %s measurement (t=%.6f < state t=%.6f)",
                m.kind.value, m.t, self.state.t)
            return None
        p = self.params
        health = self.healths.setdefault(
            m.kind, SensorHealth(p.window, p.theta_rej, p.n_rec))
        gate_d2 = None if p.outlier_rejection else math.inf
        self.state, outcome = update(self.state, m, health, p.gate_p, gate_d2)
        if p.outlier_rejection:
            self.healths[m.kind] = health_step(health, outcome)
        self.counts[m.kind][0] += 1
        if not outcome.accepted:
            self.counts[m.kind][1] += 1
        return outcome

    def diagnostics(self) -> EstimatorDiagnostics:
        return diagnostics(self.state, self.healths, self.params.theta_div)

    def rejection_rates(self) -> dict:
        return {k: (c[1] / c[0] if c[0] else 0.0) for k, c in self.counts.items()}
