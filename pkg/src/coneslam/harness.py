"""Scenario configuration, the run log, and the closed-loop driver.

A scenario is a TOML file with optional sections [track] [vehicle]
[sensors] [weather] [ekf] [slam] [localizer] [run]; every key has a
default and a documented range, and unknown sections or keys are rejected
outright. `run_scenario` plays the whole loop at the IMU rate and records
everything on a channelized JSONL log, one `{"t":..., "ch":..., "data":...}`
object per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from .core import (
    STREAM_LIDAR,
    Pose2,
    SeededRng,
    pose_compose,
    pose_inverse,
    wrap_angle,
)
from .ekf import (
    EkfParams,
    Estimator,
    SensorKind,
    VehicleState,
)
from .lidar import ConeGeometryBounds, LidarParams, RangeBearingNoise, detect_cones
from .localize import LocalizerParams, LocalizerState, mcl_step
from .sim import (
    LidarSimParams,
    NavNoise,
    NavSensorBank,
    Track,
    TruthState,
    VehicleParams,
    WeatherProfile,
    generate_track,
    pure_pursuit,
    sense_lidar,
    step_vehicle,
)
from .slam import (
    ConeMap,
    MotionNoise,
    ParticleSet,
    SlamParams,
    anchor_weights,
    detect_loop_closure,
    extract_map,
    pf_predict,
    resample,
    slam_step_all,
)

MODES = ("slam", "localization", "full")
END_REASONS = ("laps_completed", "diverged", "timeout")


class ScenarioError(ValueError):
    """Configuration rejected: unknown key/section or out-of-range value."""


@dataclass(frozen=True)
class TrackConfig:
    length: float = 300.0
    width: float = 3.5
    cone_spacing: float = 5.0
    seed: Optional[int] = None      # None: reuse the run seed


@dataclass(frozen=True)
class RunConfig:
    mode: str = "full"
    laps: int = 10
    seed: int = 0
    slam_speed: float = 5.0
    loc_speed: float = 15.0
    log_rate: float = 20.0
    max_duration: Optional[float] = None


@dataclass(frozen=True)
class Scenario:
    track: TrackConfig = field(default_factory=TrackConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    nav: NavNoise = field(default_factory=NavNoise)
    lidar_sim: LidarSimParams = field(default_factory=LidarSimParams)
    detector: LidarParams = field(default_factory=LidarParams)
    weather: WeatherProfile = field(default_factory=WeatherProfile)
    ekf: EkfParams = field(default_factory=EkfParams)
    slam: SlamParams = field(default_factory=SlamParams)
    localizer: LocalizerParams = field(default_factory=LocalizerParams)
    run: RunConfig = field(default_factory=RunConfig)


# key -> (kind, lo, hi); closed ranges unless noted in _check_value
_TRACK_KEYS = {
    "length": ("float", 50.0, 2000.0),
    "width": ("float", 2.0, 8.0),
    "cone_spacing": ("float", 1.0, 10.0),
    "seed": ("int", 0, 2**31 - 1),
}
_VEHICLE_KEYS = {
    "wheelbase": ("float", 0.1, 5.0),
    "max_steer": ("float", 0.05, 1.2),
    "speed_tau": ("float", 0.05, 10.0),
    "lookahead_time": ("float", 0.1, 10.0),
    "min_lookahead": ("float", 0.5, 50.0),
    "max_lookahead": ("float", 1.0, 100.0),
}
_SENSOR_KEYS = {
    "sigma_gps": ("float", 0.0, 5.0),
    "sigma_vel": ("float", 0.0, 5.0),
    "sigma_gyro": ("float", 0.0, 1.0),
    "sigma_acc": ("float", 0.0, 10.0),
    "gps_rate": ("float", 1.0, 200.0),
    "vel_rate": ("float", 1.0, 200.0),
    "gyro_rate": ("float", 1.0, 200.0),
    "imu_rate": ("float", 10.0, 1000.0),
    "lidar_rate": ("float", 1.0, 50.0),
    "lidar_range": ("float", 1.0, 100.0),
    "lidar_points_at_1m": ("float", 1.0, 1000.0),
    "lidar_sigma_pt": ("float", 0.0, 0.1),
    "cell": ("float", 0.01, 2.0),
    "min_pts": ("int", 1, 100),
    "link_dist": ("float", 0.01, 2.0),
    "z_min": ("float", 0.0, 1.0),
    "z_max": ("float", 0.01, 2.0),
    "cone_n_min": ("int", 1, 1000),
    "cone_n_max": ("int", 1, 5000),
    "cone_e_xy": ("float", 0.01, 5.0),
    "cone_e_z": ("float", 0.01, 5.0),
}
_WEATHER_KEYS = {
    "lidar_range_factor": ("float", 0.05, 1.0),
    "clutter_rate": ("float", 0.0, 100.0),
    "gps_dropout": ("float", 0.0, 1.0),
    "gps_bias_ramp": ("float", 0.0, 10.0),
    "gps_bias_start": ("float", 0.0, 1e5),
}
_EKF_KEYS = {
    "q_diag": ("floatlist6", 0.0, 1e3),
    "gate_p": ("float", 0.5, 0.9999),
    "window": ("int", 2, 1000),
    "theta_rej": ("float", 0.01, 0.99),
    "n_rec": ("int", 1, 1000),
    "theta_div": ("float", 0.1, 1e6),
    "outlier_rejection": ("bool", None, None),
}
_MOTION_KEYS = {
    "trans_floor": ("float", 0.0, 1.0),
    "trans_per_m": ("float", 0.0, 1.0),
    "rot_floor": ("float", 0.0, 1.0),
    "rot_per_rad": ("float", 0.0, 1.0),
    "rot_per_m": ("float", 0.0, 1.0),
}
_SLAM_KEYS = {
    "n_particles": ("int", 1, 5000),
    "gate_p": ("float", 0.5, 0.9999),
    "new_landmark_p0": ("float", 1e-12, 1.0),
    "min_hits": ("int", 1, 100),
    "d_merge": ("float", 0.01, 5.0),
    "anchor_sigma_xy": ("float", 0.01, 100.0),
    "anchor_sigma_psi": ("float", 0.001, 10.0),
    "closure_radius": ("float", 0.1, 20.0),
    "closure_heading": ("float", 0.01, math.pi),
    "closure_min_travel_frac": ("float", 0.05, 1.0),
    **_MOTION_KEYS,
}
_LOCALIZER_KEYS = {
    "m_particles": ("int", 1, 5000),
    "gate_p": ("float", 0.5, 0.9999),
    "miss_p": ("float", 1e-12, 1.0),
    "init_sigma_xy": ("float", 0.0, 5.0),
    "init_sigma_psi": ("float", 0.0, 1.0),
    "r_min_xy": ("float", 1e-4, 1.0),
    "r_min_psi": ("float", 1e-5, 1.0),
    **_MOTION_KEYS,
}
_RUN_KEYS = {
    "mode": ("str", None, None),
    "laps": ("int", 1, 100),
    "seed": ("int", 0, 2**31 - 1),
    "slam_speed": ("float", 0.5, 30.0),
    "loc_speed": ("float", 0.5, 30.0),
    "log_rate": ("float", 1.0, 200.0),
    "max_duration": ("float", 1.0, 1e5),
}
_SECTION_KEYS = {
    "track": _TRACK_KEYS,
    "vehicle": _VEHICLE_KEYS,
    "sensors": _SENSOR_KEYS,
    "weather": _WEATHER_KEYS,
    "ekf": _EKF_KEYS,
    "slam": _SLAM_KEYS,
    "localizer": _LOCALIZER_KEYS,
    "run": _RUN_KEYS,
}


def _check_value(section: str, key: str, kind: str, lo, hi, value):
    where = f"[{section}] {key}"
    if kind == "bool":
        if not isinstance(value, bool):
            raise ScenarioError(f"{where} must be a boolean, got {value!r}")
        return value
    if kind == "str":
        if value not in MODES:
            raise ScenarioError(f"{where} must be one of {MODES}, got {value!r}")
        return value
    if kind == "floatlist6":
        if (not isinstance(value, list) or len(value) != 6
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           for v in value)):
            raise ScenarioError(f"{where} must be a list of 6 numbers")
        vals = [float(v) for v in value]
        if any(not lo <= v <= hi for v in vals):
            raise ScenarioError(f"{where} entries must be in [{lo}, {hi}]")
        return vals
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where} must be a number, got {value!r}")
    if kind == "int" and not isinstance(value, int):
        raise ScenarioError(f"{where} must be an integer, got {value!r}")
    if not (math.isfinite(value) and lo <= value <= hi):
        raise ScenarioError(f"{where} must be in [{lo}, {hi}], got {value!r}")
    return int(value) if kind == "int" else float(value)


def _section(raw: dict, name: str) -> dict:
    got = raw.get(name, {})
    if not isinstance(got, dict):
        raise ScenarioError(f"[{name}] must be a table")
    keys = _SECTION_KEYS[name]
    unknown = sorted(set(got) - set(keys))
    if unknown:
        raise ScenarioError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    out = {}
    for key, value in got.items():
        kind, lo, hi = keys[key]
        out[key] = _check_value(name, key, kind, lo, hi, value)
    return out


def _divides(base: float, rate: float) -> bool:
    return rate > 0 and abs(base / rate - round(base / rate)) < 1e-9


def scenario_from_dict(raw: dict) -> Scenario:
    """Validate a parsed config tree and build the Scenario."""
    if not isinstance(raw, dict):
        raise ScenarioError("config root must be a table")
    unknown = sorted(set(raw) - set(_SECTION_KEYS))
    if unknown:
        raise ScenarioError(f"unknown config sections: {', '.join(unknown)}")
    tr = _section(raw, "track")
    ve = _section(raw, "vehicle")
    se = _section(raw, "sensors")
    we = _section(raw, "weather")
    ek = _section(raw, "ekf")
    sl = _section(raw, "slam")
    lo = _section(raw, "localizer")
    ru = _section(raw, "run")

    def split(d: dict, keys) -> dict:
        return {k: d[k] for k in keys if k in d}

    nav = NavNoise(**split(se, ("sigma_gps", "sigma_vel", "sigma_gyro", "sigma_acc",
                                "gps_rate", "vel_rate", "gyro_rate", "imu_rate")))
    lidar_sim = LidarSimParams(
        rate=se.get("lidar_rate", 10.0),
        r_max=se.get("lidar_range", 12.0),
        points_at_1m=se.get("lidar_points_at_1m", 60.0),
        sigma_pt=se.get("lidar_sigma_pt", 0.02),
    )
    geometry = ConeGeometryBounds(
        n_min=se.get("cone_n_min", 3), n_max=se.get("cone_n_max", 200),
        e_xy=se.get("cone_e_xy", 0.40), e_z=se.get("cone_e_z", 0.50))
    if geometry.n_min > geometry.n_max:
        raise ScenarioError("[sensors] cone_n_min must be <= cone_n_max")
    detector = LidarParams(
        z_min=se.get("z_min", 0.05), z_max=se.get("z_max", 0.50),
        cell=se.get("cell", 0.25), min_pts=se.get("min_pts", 2),
        link_dist=se.get("link_dist", 0.20), geometry=geometry,
        noise=RangeBearingNoise())
    if detector.z_min >= detector.z_max:
        raise ScenarioError("[sensors] z_min must be < z_max")
    ekf = EkfParams(
        q_diag=np.array(ek["q_diag"]) if "q_diag" in ek else EkfParams().q_diag,
        gate_p=ek.get("gate_p", 0.99), window=ek.get("window", 50),
        theta_rej=ek.get("theta_rej", 0.5), n_rec=ek.get("n_rec", 20),
        theta_div=ek.get("theta_div", 25.0),
        outlier_rejection=ek.get("outlier_rejection", True))
    slam = SlamParams(
        n_particles=sl.get("n_particles", 200), gate_p=sl.get("gate_p", 0.99),
        new_landmark_p0=sl.get("new_landmark_p0", 1e-4),
        min_hits=sl.get("min_hits", 3), d_merge=sl.get("d_merge", 0.5),
        motion_noise=MotionNoise(**split(sl, tuple(_MOTION_KEYS))),
        anchor_sigma_xy=sl.get("anchor_sigma_xy", 0.3),
        anchor_sigma_psi=sl.get("anchor_sigma_psi", 0.03),
        closure_radius=sl.get("closure_radius", 3.0),
        closure_heading=sl.get("closure_heading", math.pi / 4),
        closure_min_travel_frac=sl.get("closure_min_travel_frac", 0.5))
    localizer = LocalizerParams(
        m_particles=lo.get("m_particles", 200), gate_p=lo.get("gate_p", 0.99),
        miss_p=lo.get("miss_p", 1e-4),
        init_sigma_xy=lo.get("init_sigma_xy", 0.1),
        init_sigma_psi=lo.get("init_sigma_psi", 0.02),
        motion_noise=MotionNoise(**split(lo, tuple(_MOTION_KEYS))),
        r_min_xy=lo.get("r_min_xy", 0.05),
        r_min_psi=lo.get("r_min_psi", math.pi / 180.0))
    run = RunConfig(
        mode=ru.get("mode", "full"), laps=ru.get("laps", 10),
        seed=ru.get("seed", 0), slam_speed=ru.get("slam_speed", 5.0),
        loc_speed=ru.get("loc_speed", 15.0), log_rate=ru.get("log_rate", 20.0),
        max_duration=ru.get("max_duration"))
    sc = Scenario(
        track=TrackConfig(length=tr.get("length", 300.0), width=tr.get("width", 3.5),
                          cone_spacing=tr.get("cone_spacing", 5.0),
                          seed=tr.get("seed")),
        vehicle=VehicleParams(**ve), nav=nav, lidar_sim=lidar_sim,
        detector=detector, weather=WeatherProfile(**we), ekf=ekf, slam=slam,
        localizer=localizer, run=run)
    base = sc.nav.imu_rate
    for label, rate in (("gps_rate", sc.nav.gps_rate), ("vel_rate", sc.nav.vel_rate),
                        ("gyro_rate", sc.nav.gyro_rate),
                        ("lidar_rate", sc.lidar_sim.rate),
                        ("log_rate", sc.run.log_rate)):
        if not _divides(base, rate):
            raise ScenarioError(f"{label} ({rate}) must divide imu_rate ({base})")
    if 1.0 / base > 0.1:
        raise ScenarioError(f"imu_rate {base} gives dt > 0.1 s")
    return sc


def load_scenario(path) -> Scenario:
    """Parse and validate a TOML scenario file."""
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError(f"invalid TOML in {path}: {e}") from e
    return scenario_from_dict(raw)


# ---------------------------------------------------------------------------
# run log

def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Enum):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o)}")


class RunLog:
    """Append-only channelized event log; JSONL on disk."""

    def __init__(self, events: Optional[list] = None):
        self.events = events if events is not None else []

    def append(self, t: float, ch: str, data: dict) -> None:
        self.events.append({"t": float(t), "ch": str(ch), "data": data})

    def channel(self, ch: str) -> list:
        return [e for e in self.events if e["ch"] == ch]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.events:
                f.write(json.dumps(e, sort_keys=True, separators=(",", ":"),
                                   default=_json_default))
                f.write("\n")

    @classmethod
    def load(cls, path) -> "RunLog":
        events = []
        with open(path, "r", encoding="utf-8") as f:
            for i, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                e = json.loads(line)
                if set(e) != {"t", "ch", "data"}:
                    raise ValueError(f"{path}:{i}: event must have keys t, ch, data")
                events.append(e)
        return cls(events)


# ---------------------------------------------------------------------------
# closed-loop driver

def _true_cone_map(track: Track, min_hits: int) -> ConeMap:
    cones = track.cones
    return ConeMap(cones, np.full(len(cones), min_hits, dtype=np.int64))


def _path_travel(traj) -> float:
    poses = np.array([p.as_array() for p in traj])
    return float(np.sum(np.hypot(np.diff(poses[:, 0]), np.diff(poses[:, 1]))))


def run_scenario(sc: Scenario) -> RunLog:
    """Play one scenario end to end and return its log.

    The loop runs at the IMU rate. Per step: control (50 Hz), vehicle
    integration, sensor emission, EKF predict and updates in sensor
    priority order, then the LiDAR branch (detection plus SLAM or
    localization) when due. Truth and estimate snapshots go to the log at
    the configured rate, sensor health at 1 Hz.
    """
    run = sc.run
    track = generate_track(run.seed if sc.track.seed is None else sc.track.seed,
                           sc.track.length, sc.track.width, sc.track.cone_spacing)
    dt = 1.0 / sc.nav.imu_rate
    lidar_every = int(round(sc.nav.imu_rate / sc.lidar_sim.rate))
    log_every = int(round(sc.nav.imu_rate / run.log_rate))
    ctrl_every = max(1, int(round(sc.nav.imu_rate / 50.0)))
    health_every = int(round(sc.nav.imu_rate))
    min_speed = min(run.slam_speed, run.loc_speed)
    max_duration = run.max_duration
    if max_duration is None:
        max_duration = 3.0 * run.laps * track.length / min_speed + 60.0
    max_steps = int(round(max_duration / dt))

    start = Pose2(*track.point_at_s(0.0), track.heading_at_s(0.0))
    truth = TruthState(pose=start, vx=0.0, vy=0.0, r=0.0, t=0.0)
    nav = NavSensorBank(sc.nav, sc.weather, run.seed)
    lidar_rng = SeededRng(run.seed, STREAM_LIDAR).generator()
    p0 = np.diag([0.1**2, 0.1**2, 0.05**2, 0.1**2, 0.1**2, 0.05**2])
    est = Estimator(VehicleState(t=0.0, x=np.array([start.x, start.y, start.psi,
                                                    0.0, 0.0, 0.0]), P=p0), sc.ekf)

    log = RunLog()
    log.append(0.0, "scenario", {
        "mode": run.mode, "laps": run.laps, "seed": run.seed,
        "track_length": track.length, "track_width": track.width,
        "n_cones": int(len(track.cones)),
    })
    log.append(0.0, "track", {
        "cones_left": track.cones_left.tolist(),
        "cones_right": track.cones_right.tolist(),
        "length": track.length, "width": track.width,
    })

    mapping = run.mode != "localization"
    ps = traj = ls = None
    if mapping:
        ps = ParticleSet.create(sc.slam.n_particles, run.seed, start)
        traj = [start]
    else:
        cone_map = _true_cone_map(track, sc.slam.min_hits)
        log.append(0.0, "map", {"cones": cone_map.cones.tolist(),
                                "hits": cone_map.hits.tolist()})
        ls = LocalizerState.create(cone_map, start, run.seed, sc.localizer)
    log.append(0.0, "mode", {"mode": "slam" if mapping else "localization"})
    target_speed = run.slam_speed if mapping else run.loc_speed
    closure_min_travel = sc.slam.closure_min_travel_frac * track.length
    closure_latched = False
    map_logged = not mapping

    last_lidar_pose = est.state.pose
    cmd = (0.0, 0.0)
    prev_s = track.nearest_s((start.x, start.y))
    progress = 0.0
    next_lap_at = track.length
    laps_done = 0
    end_reason = "timeout"
    step = 0

    def log_pose_pair(t: float) -> None:
        err = est.state.x - np.array([truth.pose.x, truth.pose.y, truth.pose.psi,
                                      truth.vx, truth.vy, truth.r])
        err[2] = wrap_angle(err[2])
        try:
            nees = float(err @ np.linalg.solve(est.state.P, err))
        except np.linalg.LinAlgError:
            nees = float("nan")
        log.append(t, "truth", {"x": truth.pose.x, "y": truth.pose.y,
                                "psi": truth.pose.psi, "vx": truth.vx,
                                "vy": truth.vy, "r": truth.r})
        log.append(t, "estimate", {"x": est.state.x.tolist(),
                                   "p_diag": np.diag(est.state.P).tolist(),
                                   "nees": nees})

    def log_health(t: float) -> bool:
        diag = est.diagnostics()
        sensors = {}
        for kind in SensorKind:
            h = est.healths.get(kind)
            ev, rej = est.counts[kind]
            if h is None and ev == 0:
                continue
            sensors[kind.value] = {
                "status": h.status.value if h else "healthy",
                "evaluated": ev, "rejected": rej,
                "window_fraction": h.rejection_fraction() if h else 0.0,
            }
        log.append(t, "health", {"sensors": sensors,
                                 "divergent": diag.divergence,
                                 "pos_cov_trace": diag.pos_cov_trace})
        return diag.divergence

    log_pose_pair(0.0)

    while step < max_steps:
        if step % ctrl_every == 0:
            cmd = pure_pursuit(truth, track, target_speed, sc.vehicle)
        prev = truth
        truth = step_vehicle(truth, cmd, dt, sc.vehicle)
        step += 1
        t = truth.t

        imu, measurements = nav.step(prev, truth, step, dt)
        est.predict(imu, dt)
        for m in measurements:
            outcome = est.update(m)
            if outcome is None:
                continue
            if m.kind is SensorKind.GPS_POSITION:
                log.append(t, "meas", {
                    "kind": m.kind.value, "accepted": outcome.accepted,
                    "fused": outcome.fused, "d2": outcome.d2,
                    "status": est.healths[m.kind].status.value,
                })

        if step % lidar_every == 0:
            cloud = sense_lidar(truth, track, sc.weather, lidar_rng, sc.lidar_sim)
            obs = detect_cones(cloud, sc.detector)
            cur_pose = est.state.pose
            odom = pose_compose(pose_inverse(last_lidar_pose), cur_pose)
            odom_arr = odom.as_array()
            last_lidar_pose = cur_pose
            log.append(t, "detect", {"n_points": len(cloud), "n_obs": len(obs)})
            if mapping:
                ps = pf_predict(ps, odom_arr, 1.0, sc.slam.motion_noise)
                ps = slam_step_all(ps, obs, sc.slam.gate_p, sc.slam.new_landmark_p0)
                ps = anchor_weights(ps, cur_pose, sc.slam.anchor_sigma_xy,
                                    sc.slam.anchor_sigma_psi)
                ps = resample(ps)
                best = ps.best_index()
                traj.append(Pose2.from_array(ps.poses[best]))
                log.append(t, "slam", {
                    "n_landmarks": int(ps.lm_n[best]),
                    "n_eff": ps.effective_sample_size(),
                    "pose": ps.poses[best].tolist(),
                })
                if not closure_latched and detect_loop_closure(
                        traj, closure_min_travel, sc.slam.closure_radius,
                        sc.slam.closure_heading):
                    closure_latched = True
                    log.append(t, "loop_closure", {"travel": _path_travel(traj)})
                    cone_map = extract_map(ps, sc.slam.min_hits, sc.slam.d_merge)
                    log.append(t, "map", {"cones": cone_map.cones.tolist(),
                                          "hits": cone_map.hits.tolist()})
                    map_logged = True
                    if run.mode == "full":
                        ls = LocalizerState.create(cone_map, cur_pose, run.seed,
                                                   sc.localizer)
                        mapping = False
                        ps = traj = None
                        target_speed = run.loc_speed
                        log.append(t, "mode", {"mode": "localization"})
            else:
                ls, vpose = mcl_step(ls, odom_arr, obs, t, sc.localizer)
                log.append(t, "mcl", {
                    "n_eff": 1.0 / float(np.dot(ls.weights(), ls.weights())),
                    "pose": list(vpose.z),
                    "cov_trace": float(np.trace(vpose.R)),
                })
                if obs:
                    outcome = est.update(vpose)
                    if outcome is not None:
                        log.append(t, "meas", {
                            "kind": vpose.kind.value, "accepted": outcome.accepted,
                            "fused": outcome.fused, "d2": outcome.d2,
                            "status": est.healths[vpose.kind].status.value,
                        })

        if step % log_every == 0:
            log_pose_pair(t)
            s_now = track.nearest_s((truth.pose.x, truth.pose.y))
            ds = s_now - prev_s
            if ds < -track.length / 2.0:
                ds += track.length
            elif ds > track.length / 2.0:
                ds -= track.length
            progress += ds
            prev_s = s_now
            if progress >= next_lap_at:
                laps_done += 1
                log.append(t, "lap", {"lap": laps_done})
                next_lap_at += track.length
                if laps_done >= run.laps:
                    end_reason = "laps_completed"
                    break

        if step % health_every == 0:
            if log_health(t):
                end_reason = "diverged"
                break

    t_end = truth.t
    if mapping and not map_logged:
        cone_map = extract_map(ps, sc.slam.min_hits, sc.slam.d_merge)
        log.append(t_end, "map", {"cones": cone_map.cones.tolist(),
                                  "hits": cone_map.hits.tolist()})
    log_health(t_end)
    log.append(t_end, "end", {"reason": end_reason, "laps": laps_done,
                              "t": t_end})
    return log
