"""Closed-loop simulation: track generation, vehicle, controller, sensors.

The track is a smooth closed loop built from a periodic spline through
jittered control points, resampled to uniform arc length and scaled to a
target length. Cones line both sides at staggered arc stations. The
vehicle is a kinematic bicycle with first-order speed tracking, driven by
a pure-pursuit steering law. Sensor models emit LiDAR point clouds and
navigation measurements with seeded noise, optionally distorted by a
weather profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .core import (
    STREAM_TRACK,
    Pose2,
    SeededRng,
    wrap_angle,
)
from .ekf import ImuInput, Measurement, SensorKind
from .lidar import PointCloud


class TrackGenerationError(RuntimeError):
    """No acceptable track found within the attempt budget."""


# ---------------------------------------------------------------------------
# track

@dataclass(frozen=True)
class Track:
    """Closed centerline polyline (first vertex not repeated) plus cone rows."""

    centerline: np.ndarray      # (v, 2)
    width: float
    cones_left: np.ndarray      # (nl, 2)
    cones_right: np.ndarray     # (nr, 2)

    def __post_init__(self):
        c = np.asarray(self.centerline, dtype=np.float64).reshape(-1, 2)
        if c.shape[0] < 3:
            raise ValueError("centerline needs at least 3 vertices")
        if self.width <= 0:
            raise ValueError(f"track width must be positive, got {self.width}")
        object.__setattr__(self, "centerline", c)
        object.__setattr__(self, "cones_left",
                           np.asarray(self.cones_left, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "cones_right",
                           np.asarray(self.cones_right, dtype=np.float64).reshape(-1, 2))
        closed = np.vstack([c, c[:1]])
        seg = np.hypot(np.diff(closed[:, 0]), np.diff(closed[:, 1]))
        object.__setattr__(self, "_cum_s", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self._cum_s[-1])

    @property
    def cones(self) -> np.ndarray:
        """All cones, left rows first."""
        return np.vstack([self.cones_left, self.cones_right])

    def nearest_s(self, point) -> float:
        """Arc-length station of the closest centerline vertex."""
        p = np.asarray(point, dtype=np.float64)
        d2 = np.sum((self.centerline - p) ** 2, axis=1)
        return float(self._cum_s[int(np.argmin(d2))])

    def point_at_s(self, s: float) -> np.ndarray:
        """Centerline point at arc station s (wraps around the loop)."""
        s = float(s) % self.length
        closed = np.vstack([self.centerline, self.centerline[:1]])
        return np.array([np.interp(s, self._cum_s, closed[:, 0]),
                         np.interp(s, self._cum_s, closed[:, 1])])

    def heading_at_s(self, s: float) -> float:
        h = 0.05
        a = self.point_at_s(s - h)
        b = self.point_at_s(s + h)
        return math.atan2(b[1] - a[1], b[0] - a[0])

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("side,x,y\n")
            for x, y in self.centerline:
                f.write(f"center,{float(x)!r},{float(y)!r}\n")
            for x, y in self.cones_left:
                f.write(f"left,{float(x)!r},{float(y)!r}\n")
            for x, y in self.cones_right:
                f.write(f"right,{float(x)!r},{float(y)!r}\n")

    @classmethod
    def load_csv(cls, path) -> "Track":
        rows = {"center": [], "left": [], "right": []}
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "side,x,y":
                raise ValueError(f"bad track header: {header!r}")
            for line in f:
                line = line.strip()
                if not line:
                    continue
                side, xs, ys = line.split(",")
                if side not in rows:
                    raise ValueError(f"bad track side: {side!r}")
                rows[side].append((float(xs), float(ys)))
        center = np.array(rows["center"]).reshape(-1, 2)
        left = np.array(rows["left"]).reshape(-1, 2)
        right = np.array(rows["right"]).reshape(-1, 2)
        if center.shape[0] < 3:
            raise ValueError("track file has no usable centerline")
        if left.size:
            d = [np.min(np.hypot(center[:, 0] - x, center[:, 1] - y)) for x, y in left]
            width = 2.0 * float(np.median(d))
        else:
            width = 3.5
        return cls(center, width, left, right)


def _segments_intersect(p, q):
    """Boolean matrix of proper intersections between two segment arrays."""
    def orient(a, b, c):
        return ((b[:, None, 0] - a[:, None, 0]) * (c[None, :, 1] - a[:, None, 1])
                - (b[:, None, 1] - a[:, None, 1]) * (c[None, :, 0] - a[:, None, 0]))

    a, b = p
    c, d = q
    o1 = orient(a, b, c)
    o2 = orient(a, b, d)
    o3 = orient(c, d, a).T
    o4 = orient(c, d, b).T
    return (o1 * o2 < 0) & (o3 * o4 < 0)


def _self_intersects(poly: np.ndarray) -> bool:
    v = poly.shape[0]
    a = poly
    b = np.roll(poly, -1, axis=0)
    hit = _segments_intersect((a, b), (a, b))
    i = np.arange(v)
    adj = (np.abs(i[:, None] - i[None, :]) <= 1) | (np.abs(i[:, None] - i[None, :]) == v - 1)
    return bool(np.any(hit & ~adj))


def _closed_curvature(poly: np.ndarray) -> np.ndarray:
    xp = (np.roll(poly, -1, axis=0) - np.roll(poly, 1, axis=0)) / 2.0
    xpp = np.roll(poly, -1, axis=0) - 2.0 * poly + np.roll(poly, 1, axis=0)
    num = np.abs(xp[:, 0] * xpp[:, 1] - xp[:, 1] * xpp[:, 0])
    den = (xp[:, 0] ** 2 + xp[:, 1] ** 2) ** 1.5
    return num / np.maximum(den, 1e-12)


def generate_track(seed: int, length: float = 300.0, width: float = 3.5,
                   cone_spacing: float = 5.0, n_ctrl: int = 12,
                   max_attempts: int = 40) -> Track:
    """Seeded random closed circuit of (almost exactly) the given length.

    Control points are jittered around a circle, joined by a periodic cubic
    spline, resampled at uniform arc length, and scaled so the polyline
    length hits the target within a fraction of a percent. Candidates with
    a turn radius tighter than the track width or a self-intersecting
    centerline are rejected and redrawn; running out of attempts raises
    TrackGenerationError. Cone rows sit at +-width/2 along the normal,
    left cones at stations k*spacing, right cones staggered half a spacing.
    """
    if length < 50:
        raise ValueError(f"track length must be >= 50 m, got {length}")
    if width <= 0 or cone_spacing <= 0:
        raise ValueError("width and cone_spacing must be positive")
    rng = SeededRng(seed, STREAM_TRACK).generator()
    r0 = length / (2.0 * math.pi)
    for _ in range(max_attempts):
        k = np.arange(n_ctrl)
        ang = (k + rng.uniform(-0.25, 0.25, n_ctrl)) * (2.0 * math.pi / n_ctrl)
        rad = r0 * rng.uniform(0.75, 1.3, n_ctrl)
        ctrl = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        ctrl_closed = np.vstack([ctrl, ctrl[:1]])
        spline = CubicSpline(np.arange(n_ctrl + 1), ctrl_closed, axis=0,
                             bc_type="periodic")
        dense = spline(np.linspace(0.0, n_ctrl, 4096, endpoint=False))
        closed = np.vstack([dense, dense[:1]])
        seg = np.hypot(np.diff(closed[:, 0]), np.diff(closed[:, 1]))
        dense = dense * (length / float(seg.sum()))
        closed = np.vstack([dense, dense[:1]])
        cum = np.concatenate([[0.0], np.cumsum(
            np.hypot(np.diff(closed[:, 0]), np.diff(closed[:, 1])))])
        total = float(cum[-1])
        v = max(64, int(round(length / 0.5)))
        s_grid = np.arange(v) * (total / v)
        poly = np.column_stack([np.interp(s_grid, cum, closed[:, 0]),
                                np.interp(s_grid, cum, closed[:, 1])])
        kappa = _closed_curvature(poly)         # per-vertex curvature, 1/m
        if kappa.max() > 1.0 / width:
            continue
        if _self_intersects(poly):
            continue
        track = Track(poly, width, np.empty((0, 2)), np.empty((0, 2)))
        left, right = [], []
        s = 0.0
        while s < track.length - 1e-9:
            c = track.point_at_s(s)
            psi = track.heading_at_s(s)
            n = np.array([-math.sin(psi), math.cos(psi)])
            left.append(c + n * (width / 2.0))
            s_r = s + cone_spacing / 2.0
            if s_r < track.length:
                cr = track.point_at_s(s_r)
                psr = track.heading_at_s(s_r)
                nr = np.array([-math.sin(psr), math.cos(psr)])
                right.append(cr - nr * (width / 2.0))
            s += cone_spacing
        return Track(poly, width, np.array(left), np.array(right))
    raise TrackGenerationError(
        f"no valid track in {max_attempts} attempts (seed {seed}, length {length})")


# ---------------------------------------------------------------------------
# vehicle and controller

@dataclass(frozen=True)
class TruthState:
    pose: Pose2
    vx: float
    vy: float
    r: float
    t: float


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 1.6
    max_steer: float = 0.5
    speed_tau: float = 0.5          # first-order speed tracking constant, s
    lookahead_time: float = 2.0
    min_lookahead: float = 3.0
    # uncapped speed-proportional lookahead cuts corners by more than a
    # meter on short circuits, so clamp it
    max_lookahead: float = 5.0


def step_vehicle(s: TruthState, cmd, dt: float,
                 params: VehicleParams = VehicleParams()) -> TruthState:
    """Advance the kinematic bicycle one explicit-Euler step.

    cmd is (speed_command, steer); steer is clamped to max_steer and the
    speed command floored at zero. Lateral slip is zero by construction.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v_cmd = max(0.0, float(cmd[0]))
    delta = min(params.max_steer, max(-params.max_steer, float(cmd[1])))
    r = s.vx * math.tan(delta) / params.wheelbase
    x = s.pose.x + s.vx * math.cos(s.pose.psi) * dt
    y = s.pose.y + s.vx * math.sin(s.pose.psi) * dt
    psi = wrap_angle(s.pose.psi + r * dt)
    vx = s.vx + (v_cmd - s.vx) / params.speed_tau * dt
    return TruthState(pose=Pose2(x, y, psi), vx=vx, vy=0.0,
                      r=vx * math.tan(delta) / params.wheelbase, t=s.t + dt)


def pure_pursuit(s: TruthState, track: Track, target_speed: float,
                 params: VehicleParams = VehicleParams()):
    """Steer toward the centerline point one lookahead arc ahead.

    Lookahead distance is max(speed * lookahead_time, min_lookahead)
    clamped to max_lookahead, measured along the centerline from the
    nearest station. Returns (speed_command, steer).
    """
    ld = min(max(s.vx * params.lookahead_time, params.min_lookahead),
             params.max_lookahead)
    s0 = track.nearest_s((s.pose.x, s.pose.y))
    target = track.point_at_s(s0 + ld)
    dx = target[0] - s.pose.x
    dy = target[1] - s.pose.y
    c, si = math.cos(s.pose.psi), math.sin(s.pose.psi)
    tx = c * dx + si * dy
    ty = -si * dx + c * dy
    d2 = tx * tx + ty * ty
    if d2 < 1e-12:
        return target_speed, 0.0
    kappa = 2.0 * ty / d2
    steer = math.atan(kappa * params.wheelbase)
    steer = min(params.max_steer, max(-params.max_steer, steer))
    return target_speed, steer


# ---------------------------------------------------------------------------
# weather and sensors

@dataclass(frozen=True)
class WeatherProfile:
    """Distortion knobs; the defaults mean clear conditions."""

    lidar_range_factor: float = 1.0
    clutter_rate: float = 0.0        # mean clutter points per scan
    gps_dropout: float = 0.0         # probability a GPS fix is skipped
    gps_bias_ramp: float = 0.0       # m/s of accumulating GPS position bias
    gps_bias_start: float = 0.0      # time the bias ramp switches on

    def __post_init__(self):
        if not 0.0 < self.lidar_range_factor <= 1.0:
            raise ValueError("lidar_range_factor must be in (0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be >= 0")
        if not 0.0 <= self.gps_dropout <= 1.0:
            raise ValueError("gps_dropout must be in [0, 1]")
        if self.gps_bias_ramp < 0:
            raise ValueError("gps_bias_ramp must be >= 0")
        if self.gps_bias_start < 0:
            raise ValueError("gps_bias_start must be >= 0")


@dataclass(frozen=True)
class LidarSimParams:
    rate: float = 10.0
    r_max: float = 12.0
    points_at_1m: float = 60.0       # support scales as max(3, round(60 / range))
    min_points: int = 3
    cone_height: float = 0.31
    cone_radius: float = 0.11
    sigma_pt: float = 0.02


def sense_lidar(truth: TruthState, track: Track, weather: WeatherProfile,
                rng: np.random.Generator,
                params: LidarSimParams = LidarSimParams()) -> PointCloud:
    """Simulate one scan: surface samples of visible cones plus clutter.

    Every cone within the (weather-reduced) range gets max(3, round(60/d))
    samples on its conical surface with Gaussian noise sigma_pt per axis.
    Clutter points are Poisson-distributed, uniform over the range disc at
    low height. Points are in the sensor (body) frame.
    """
    r_eff = params.r_max * weather.lidar_range_factor
    px, py, psi = truth.pose.x, truth.pose.y, truth.pose.psi
    c, s = math.cos(psi), math.sin(psi)
    chunks = []
    for cx, cy in track.cones:
        d = math.hypot(cx - px, cy - py)
        if d > r_eff or d <= 0.0:
            continue
        n = max(params.min_points, int(round(params.points_at_1m / d)))
        z = rng.uniform(0.0, params.cone_height, n)
        th = rng.uniform(-math.pi, math.pi, n)
        rad = (1.0 - z / params.cone_height) * params.cone_radius
        pts = np.column_stack([cx + rad * np.cos(th), cy + rad * np.sin(th), z])
        pts += rng.normal(0.0, params.sigma_pt, pts.shape)
        bx = c * (pts[:, 0] - px) + s * (pts[:, 1] - py)
        by = -s * (pts[:, 0] - px) + c * (pts[:, 1] - py)
        chunks.append(np.column_stack([bx, by, pts[:, 2]]))
    k = int(rng.poisson(weather.clutter_rate)) if weather.clutter_rate > 0 else 0
    if k > 0:
        r = r_eff * np.sqrt(rng.uniform(0.0, 1.0, k))
        th = rng.uniform(-math.pi, math.pi, k)
        z = rng.uniform(0.0, 0.5, k)
        chunks.append(np.column_stack([r * np.cos(th), r * np.sin(th), z]))
    pts = np.vstack(chunks) if chunks else np.empty((0, 3))
    return PointCloud(truth.t, pts)


@dataclass(frozen=True)
class NavNoise:
    sigma_gps: float = 0.15
    sigma_vel: float = 0.05
    sigma_gyro: float = 0.01
    sigma_acc: float = 0.1
    gps_rate: float = 10.0
    vel_rate: float = 50.0
    gyro_rate: float = 200.0
    imu_rate: float = 200.0


class NavSensorBank:
    """Clocked navigation sensors over ground truth.

    Emission happens on integer multiples of each sensor's period relative
    to the base (IMU) rate, so rates must divide the base rate. GPS bias
    direction is drawn once at construction; dropout decisions draw on
    every GPS tick whether or not the fix is kept, keeping stream positions
    independent of the outcome.
    """

    def __init__(self, noise: NavNoise, weather: WeatherProfile, seed: int):
        from .core import STREAM_GPS, STREAM_GYRO, STREAM_IMU, STREAM_VELOCITY

        self.noise = noise
        self.weather = weather
        base = noise.imu_rate
        for name in ("gps_rate", "vel_rate", "gyro_rate"):
            rate = getattr(noise, name)
            if rate <= 0 or abs(base / rate - round(base / rate)) > 1e-9:
                raise ValueError(f"{name} ({rate}) must divide imu_rate ({base})")
        self._gps_every = int(round(base / noise.gps_rate))
        self._vel_every = int(round(base / noise.vel_rate))
        self._gyro_every = int(round(base / noise.gyro_rate))
        self._gps = SeededRng(seed, STREAM_GPS).generator()
        self._vel = SeededRng(seed, STREAM_VELOCITY).generator()
        self._gyro = SeededRng(seed, STREAM_GYRO).generator()
        self._imu = SeededRng(seed, STREAM_IMU).generator()
        ang = self._gps.uniform(-math.pi, math.pi)
        self.bias_dir = np.array([math.cos(ang), math.sin(ang)])

    def step(self, prev: TruthState, cur: TruthState, step_index: int, dt: float):
        """Sensors for the step ending at cur.t; returns (ImuInput, measurements)."""
        n = self.noise

        def var(sigma):
            # zero-noise profiles still need invertible covariances downstream
            return max(sigma ** 2, 1e-12)

        ax = (cur.vx - prev.vx) / dt + n.sigma_acc * self._imu.standard_normal()
        ay = cur.r * cur.vx + n.sigma_acc * self._imu.standard_normal()
        imu = ImuInput(t=cur.t, ax=ax, ay=ay)
        meas = []
        if step_index % self._gyro_every == 0:
            z = cur.r + n.sigma_gyro * self._gyro.standard_normal()
            meas.append(Measurement(t=cur.t, kind=SensorKind.YAW_RATE,
                                    z=np.array([z]),
                                    R=np.array([[var(n.sigma_gyro)]])))
        if step_index % self._vel_every == 0:
            z = np.array([cur.vx, cur.vy]) + n.sigma_vel * self._vel.standard_normal(2)
            meas.append(Measurement(t=cur.t, kind=SensorKind.BODY_VELOCITY,
                                    z=z, R=np.eye(2) * var(n.sigma_vel)))
        if step_index % self._gps_every == 0:
            u = self._gps.uniform()
            eps = self._gps.standard_normal(2)
            if u >= self.weather.gps_dropout:
                ramp_t = max(0.0, cur.t - self.weather.gps_bias_start)
                bias = self.weather.gps_bias_ramp * ramp_t * self.bias_dir
                z = np.array([cur.pose.x, cur.pose.y]) + bias + n.sigma_gps * eps
                meas.append(Measurement(t=cur.t, kind=SensorKind.GPS_POSITION,
                                        z=z, R=np.eye(2) * var(n.sigma_gps)))
        return imu, meas
