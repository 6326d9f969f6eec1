"""Monte Carlo localization against a fixed cone map.

A particle filter over pose only: odometry-driven proposal, per-observation
maximum gated likelihood against the map, systematic resampling. Each step
condenses the particle cloud into a pose measurement (weighted mean plus
covariance) that a downstream filter can fuse like any other sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    STREAM_MCL_PARTICLES,
    STREAM_MCL_RESAMPLE,
    Pose2,
    SeededRng,
    symmetrize,
    wrap_angle,
    wrap_angle_array,
)
from .ekf import Measurement, SensorKind, chi2_gate
from .slam import ConeMap, MotionNoise


class LocalizationLostError(RuntimeError):
    """Raised when every particle's weight underflows to zero."""


@dataclass(frozen=True)
class LocalizerParams:
    m_particles: int = 200
    gate_p: float = 0.99
    miss_p: float = 1e-4
    init_sigma_xy: float = 0.1
    init_sigma_psi: float = 0.02
    motion_noise: MotionNoise = field(default_factory=MotionNoise)
    # reported pose covariance never shrinks below these std-devs
    r_min_xy: float = 0.05
    r_min_psi: float = math.pi / 180.0


class LocalizerState:
    """Pose particles over a fixed map, with slot-keyed RNG streams."""

    def __init__(self, poses, log_w, map_xy, streams, resample_rng, epoch=0):
        self.poses = poses
        self.log_w = log_w
        self.map_xy = map_xy
        self.streams = streams
        self.resample_rng = resample_rng
        self.epoch = epoch

    @classmethod
    def create(cls, cone_map: ConeMap, init_pose: Pose2, seed: int,
               params: LocalizerParams = LocalizerParams()) -> "LocalizerState":
        if len(cone_map) == 0:
            raise ValueError("localization needs a non-empty map")
        m = params.m_particles
        if m < 1:
            raise ValueError(f"need at least one particle, got {m}")
        streams = [SeededRng(seed, STREAM_MCL_PARTICLES + i).generator() for i in range(m)]
        eps = np.stack([g.standard_normal(3) for g in streams])
        poses = np.tile(init_pose.as_array(), (m, 1))
        poses[:, :2] += eps[:, :2] * params.init_sigma_xy
        poses[:, 2] = wrap_angle_array(poses[:, 2] + eps[:, 2] * params.init_sigma_psi)
        map_xy = np.array(cone_map.cones, dtype=np.float64)
        map_xy.setflags(write=False)
        return cls(
            poses=poses,
            log_w=np.zeros(m),
            map_xy=map_xy,
            streams=streams,
            resample_rng=SeededRng(seed, STREAM_MCL_RESAMPLE).generator(),
        )

    @property
    def m(self) -> int:
        return self.poses.shape[0]

    def clone(self) -> "LocalizerState":
        return LocalizerState(self.poses.copy(), self.log_w.copy(), self.map_xy,
                              self.streams, self.resample_rng, self.epoch)

    def weights(self) -> np.ndarray:
        mx = self.log_w.max()
        if not np.isfinite(mx):
            raise LocalizationLostError("all localization particle weights are zero")
        w = np.exp(self.log_w - mx)
        return w / w.sum()


def estimate_pose(ls: LocalizerState, params: LocalizerParams = LocalizerParams()):
    """Weighted mean pose (circular mean heading) and floored 3x3 covariance."""
    w = ls.weights()
    x = float(w @ ls.poses[:, 0])
    y = float(w @ ls.poses[:, 1])
    psi = math.atan2(float(w @ np.sin(ls.poses[:, 2])),
                     float(w @ np.cos(ls.poses[:, 2])))
    res = ls.poses - np.array([x, y, psi])
    res[:, 2] = wrap_angle_array(res[:, 2])
    # ridge keeps the matrix PD even when resampling collapses the cloud
    cov = symmetrize((res * w[:, None]).T @ res) + 1e-12 * np.eye(3)
    floor = np.array([params.r_min_xy ** 2, params.r_min_xy ** 2,
                      params.r_min_psi ** 2])
    for i in range(3):
        cov[i, i] = max(cov[i, i], floor[i])
    return Pose2(x, y, psi), cov


def mcl_step(ls: LocalizerState, odom, observations, t: float,
             params: LocalizerParams = LocalizerParams()):
    """One localization cycle: propagate, weight, resample, summarize.

    odom is a body-frame (dx, dy, dpsi) increment. With no observations the
    step is pure odometric propagation (the particle spread, and so the
    reported covariance, grows). Returns the new state and the pose
    pseudo-measurement.
    """
    odom = np.asarray(odom, dtype=np.float64)
    if odom.shape != (3,) or not np.all(np.isfinite(odom)):
        raise ValueError("odometry increment must be 3 finite values")
    out = ls.clone()
    s_xy, s_psi = params.motion_noise.sigmas(odom)
    eps = np.stack([g.standard_normal(3) for g in ls.streams])
    inc = odom[None, :] + eps * np.array([s_xy, s_xy, s_psi])
    c = np.cos(out.poses[:, 2])
    s = np.sin(out.poses[:, 2])
    out.poses[:, 0] += c * inc[:, 0] - s * inc[:, 1]
    out.poses[:, 1] += s * inc[:, 0] + c * inc[:, 1]
    out.poses[:, 2] = wrap_angle_array(out.poses[:, 2] + inc[:, 2])

    if observations:
        obs_rb = np.array([[o.range, o.bearing] for o in observations])
        obs_r = np.array([[o.R[0, 0], o.R[1, 1]] for o in observations])
        out.log_w += kernels.mcl_scores(out.poses, out.map_xy, obs_rb, obs_r,
                                        chi2_gate(2, params.gate_p),
                                        math.log(params.miss_p))
    w = out.weights()
    m = out.m
    if 1.0 / float(np.dot(w, w)) < 0.5 * m:
        u0 = out.resample_rng.uniform(0.0, 1.0 / m)
        idx = np.searchsorted(np.cumsum(w), u0 + np.arange(m) / m, side="right")
        np.clip(idx, 0, m - 1, out=idx)
        out.poses = out.poses[idx].copy()
        out.log_w = np.zeros(m)
    out.epoch += 1

    pose, cov = estimate_pose(out, params)
    meas = Measurement(t=t, kind=SensorKind.VIRTUAL_POSE,
                       z=np.array([pose.x, pose.y, pose.psi]), R=cov)
    return out, meas


def observation_loglik(pose, map_xy: np.ndarray, observations,
                       gate_p: float = 0.99, miss_p: float = 1e-4) -> float:
    """Total gated max-likelihood score of observations at one pose."""
    poses = np.asarray(pose, dtype=np.float64).reshape(1, 3)
    if not observations:
        return 0.0
    obs_rb = np.array([[o.range, o.bearing] for o in observations])
    obs_r = np.array([[o.R[0, 0], o.R[1, 1]] for o in observations])
    return float(kernels.mcl_scores(poses, map_xy, obs_rb, obs_r,
                                    chi2_gate(2, gate_p), math.log(miss_p))[0])


def loglik_gradient(pose, map_xy: np.ndarray, observations,
                    gate_p: float = 0.99) -> np.ndarray:
    """Analytic gradient of observation_loglik with respect to (x, y, psi).

    Valid away from association switches; missed observations contribute
    zero. Used to cross-check the measurement geometry against finite
    differences.
    """
    pose = np.asarray(pose, dtype=np.float64).reshape(3)
    gate = chi2_gate(2, gate_p)
    grad = np.zeros(3)
    for o in observations:
        dx = map_xy[:, 0] - pose[0]
        dy = map_xy[:, 1] - pose[1]
        q = dx * dx + dy * dy
        r = np.sqrt(q)
        nu_r = o.range - r
        nu_b = wrap_angle_array(o.bearing - (np.arctan2(dy, dx) - pose[2]))
        d2 = nu_r ** 2 / o.R[0, 0] + nu_b ** 2 / o.R[1, 1]
        d2[q <= 0] = np.inf
        j = int(np.argmin(d2))
        if d2[j] > gate:
            continue
        # dr/dpose = (-dx/r, -dy/r, 0); dbearing/dpose = (dy/q, -dx/q, -1)
        gr = np.array([-dx[j] / r[j], -dy[j] / r[j], 0.0])
        gb = np.array([dy[j] / q[j], -dx[j] / q[j], -1.0])
        grad += (nu_r[j] / o.R[0, 0]) * gr + (nu_b[j] / o.R[1, 1]) * gb
    return grad
