"""Particle-filter landmark SLAM over range/bearing cone observations.

Each particle carries a pose hypothesis and its own map of landmarks, one
small 2-D EKF per landmark. Data association is per-particle maximum
likelihood with a chi-square gate; unmatched observations spawn new
landmarks at a fixed prior likelihood. Systematic resampling triggers on
effective sample size.

Particle state is stored as structure-of-arrays so the whole measurement
step can run batched (see kernels.slam_step). `Particle`/`Landmark` views
plus the per-particle functions here are the plain reference
implementation of the same math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    STREAM_SLAM_PARTICLES,
    STREAM_SLAM_RESAMPLE,
    Pose2,
    SeededRng,
    symmetrize,
    wrap_angle,
    wrap_angle_array,
)
from .ekf import chi2_gate

NEW_LANDMARK = -1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MotionNoise:
    """Std-dev model for one odometry increment (floor plus per-unit growth)."""

    trans_floor: float = 0.01
    trans_per_m: float = 0.02
    rot_floor: float = 0.002
    rot_per_rad: float = 0.05
    rot_per_m: float = 0.002

    def sigmas(self, odom) -> tuple[float, float]:
        d = math.hypot(odom[0], odom[1])
        s_xy = self.trans_floor + self.trans_per_m * d
        s_psi = self.rot_floor + self.rot_per_rad * abs(odom[2]) + self.rot_per_m * d
        return s_xy, s_psi


@dataclass(frozen=True)
class SlamParams:
    n_particles: int = 200
    gate_p: float = 0.99
    new_landmark_p0: float = 1e-4
    min_hits: int = 3
    d_merge: float = 0.5
    motion_noise: MotionNoise = field(default_factory=MotionNoise)
    # gauge anchor: particles are re-weighted against the absolute pose
    # estimate so the map cannot drift away from the world frame
    anchor_sigma_xy: float = 0.3
    anchor_sigma_psi: float = 0.03
    closure_radius: float = 3.0
    closure_heading: float = math.pi / 4
    closure_min_travel_frac: float = 0.5


@dataclass
class Landmark:
    mu: np.ndarray              # (2,) world position
    Sigma: np.ndarray           # (2, 2) covariance
    hits: int


@dataclass
class Particle:
    """Copy view of one particle; edits do not write back to the set."""

    pose: Pose2
    log_weight: float
    landmarks: list[Landmark]


class ParticleSet:
    """SoA particle state plus the slot-keyed RNG streams.

    Streams are keyed by slot index, not by ancestry, so a resampled set
    keeps drawing from the same per-slot sequences and runs stay
    reproducible. Operations return new sets with copied arrays; the
    streams are shared and advance monotonically, so sets form a linear
    history (re-running an op on a stale set will not replay its draws).
    """

    def __init__(self, poses, log_w, lm_xy, lm_cov, lm_hits, lm_n,
                 streams, resample_rng, epoch=0):
        self.poses = poses
        self.log_w = log_w
        self.lm_xy = lm_xy
        self.lm_cov = lm_cov
        self.lm_hits = lm_hits
        self.lm_n = lm_n
        self.streams = streams
        self.resample_rng = resample_rng
        self.epoch = epoch

    @classmethod
    def create(cls, n: int, seed: int, init_pose: Pose2, capacity: int = 64) -> "ParticleSet":
        if n < 1:
            raise ValueError(f"need at least one particle, got {n}")
        poses = np.tile(init_pose.as_array(), (n, 1))
        streams = [SeededRng(seed, STREAM_SLAM_PARTICLES + i).generator() for i in range(n)]
        return cls(
            poses=poses,
            log_w=np.zeros(n),
            lm_xy=np.zeros((n, capacity, 2)),
            lm_cov=np.zeros((n, capacity, 2, 2)),
            lm_hits=np.zeros((n, capacity), dtype=np.int64),
            lm_n=np.zeros(n, dtype=np.int64),
            streams=streams,
            resample_rng=SeededRng(seed, STREAM_SLAM_RESAMPLE).generator(),
        )

    @property
    def n(self) -> int:
        return self.poses.shape[0]

    @property
    def capacity(self) -> int:
        return self.lm_xy.shape[1]

    def clone(self) -> "ParticleSet":
        return ParticleSet(
            self.poses.copy(), self.log_w.copy(), self.lm_xy.copy(),
            self.lm_cov.copy(), self.lm_hits.copy(), self.lm_n.copy(),
            self.streams, self.resample_rng, self.epoch,
        )

    def grown(self, capacity: int) -> "ParticleSet":
        """Copy with landmark capacity at least `capacity`."""
        cap = max(capacity, self.capacity)
        out = self.clone()
        if cap > self.capacity:
            n = self.n
            xy = np.zeros((n, cap, 2))
            cov = np.zeros((n, cap, 2, 2))
            hits = np.zeros((n, cap), dtype=np.int64)
            xy[:, :self.capacity] = self.lm_xy
            cov[:, :self.capacity] = self.lm_cov
            hits[:, :self.capacity] = self.lm_hits
            out.lm_xy, out.lm_cov, out.lm_hits = xy, cov, hits
        return out

    def weights(self) -> np.ndarray:
        """Normalized weights; raises if every weight underflowed."""
        m = self.log_w.max()
        if not np.isfinite(m):
            raise ValueError("all particle weights are zero")
        w = np.exp(self.log_w - m)
        return w / w.sum()

    def effective_sample_size(self) -> float:
        w = self.weights()
        return 1.0 / float(np.dot(w, w))

    def best_index(self) -> int:
        return int(np.argmax(self.log_w))

    def particle(self, i: int) -> Particle:
        k = int(self.lm_n[i])
        lms = [Landmark(self.lm_xy[i, j].copy(), self.lm_cov[i, j].copy(),
                        int(self.lm_hits[i, j])) for j in range(k)]
        return Particle(Pose2.from_array(self.poses[i]), float(self.log_w[i]), lms)


def pf_predict(ps: ParticleSet, odom, noise_scale: float = 1.0,
               noise: MotionNoise = MotionNoise()) -> ParticleSet:
    """Apply a body-frame odometry increment (dx, dy, dpsi) with sampled noise.

    Every particle composes its pose with the increment perturbed by
    zero-mean Gaussian noise from its own slot stream. Draws happen even at
    noise_scale 0 so stream positions do not depend on parameter values.
    """
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    odom = np.asarray(odom, dtype=np.float64)
    if odom.shape != (3,) or not np.all(np.isfinite(odom)):
        raise ValueError("odometry increment must be 3 finite values")
    out = ps.clone()
    s_xy, s_psi = noise.sigmas(odom)
    eps = np.stack([g.standard_normal(3) for g in ps.streams])
    eps[:, :2] *= noise_scale * s_xy
    eps[:, 2] *= noise_scale * s_psi
    inc = odom[None, :] + eps
    c = np.cos(out.poses[:, 2])
    s = np.sin(out.poses[:, 2])
    out.poses[:, 0] += c * inc[:, 0] - s * inc[:, 1]
    out.poses[:, 1] += s * inc[:, 0] + c * inc[:, 1]
    out.poses[:, 2] = wrap_angle_array(out.poses[:, 2] + inc[:, 2])
    return out


# ---------------------------------------------------------------------------
# per-particle reference implementation

def _expected_obs(pose: Pose2, mu: np.ndarray):
    dx = mu[0] - pose.x
    dy = mu[1] - pose.y
    q = dx * dx + dy * dy
    r = math.sqrt(q)
    b = wrap_angle(math.atan2(dy, dx) - pose.psi)
    H = np.array([[dx / r, dy / r], [-dy / q, dx / q]])
    return r, b, H


def landmark_likelihood(pose: Pose2, lm: Landmark, obs) -> tuple[float, float]:
    """(log_likelihood, d2) of an observation against one landmark EKF."""
    r, b, H = _expected_obs(pose, lm.mu)
    S = symmetrize(H @ lm.Sigma @ H.T + obs.R)
    nu = np.array([obs.range - r, wrap_angle(obs.bearing - b)])
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    if det <= 0:
        raise ValueError("singular innovation covariance in landmark update")
    d2 = float(nu @ np.linalg.solve(S, nu))
    return -0.5 * d2 - _LOG_2PI - 0.5 * math.log(det), d2


def associate(p: Particle, obs, gate_p: float = 0.99):
    """Max-likelihood association: (landmark index, log_likelihood) or None.

    None means no landmark passes the chi-square gate and the observation
    should start a new one. Ties keep the lowest landmark index.
    """
    gate = chi2_gate(2, gate_p)
    best = None
    for j, lm in enumerate(p.landmarks):
        ll, d2 = landmark_likelihood(p.pose, lm, obs)
        if d2 <= gate and (best is None or ll > best[1]):
            best = (j, ll)
    return best


def landmark_update(lm: Landmark, obs, pose: Pose2) -> Landmark:
    """Joseph-form EKF update of one landmark from a range/bearing observation."""
    r, b, H = _expected_obs(pose, lm.mu)
    S = symmetrize(H @ lm.Sigma @ H.T + obs.R)
    nu = np.array([obs.range - r, wrap_angle(obs.bearing - b)])
    K = lm.Sigma @ H.T @ np.linalg.inv(S)
    mu = lm.mu + K @ nu
    IKH = np.eye(2) - K @ H
    Sigma = symmetrize(IKH @ lm.Sigma @ IKH.T + K @ obs.R @ K.T)
    return Landmark(mu, Sigma, lm.hits + 1)


def landmark_init(pose: Pose2, obs) -> Landmark:
    """New landmark at the observed point; covariance mapped from R."""
    a = pose.psi + obs.bearing
    ca, sa = math.cos(a), math.sin(a)
    mu = np.array([pose.x + obs.range * ca, pose.y + obs.range * sa])
    G = np.array([[ca, -obs.range * sa], [sa, obs.range * ca]])
    return Landmark(mu, symmetrize(G @ obs.R @ G.T), 1)


def sort_observations(observations):
    """Deterministic processing order: by bearing, then range, then support."""
    if not observations:
        return [], np.empty(0, dtype=np.int64)
    key = np.lexsort((
        [o.support for o in observations],
        [o.range for o in observations],
        [o.bearing for o in observations],
    ))
    return [observations[i] for i in key], key


def weigh_and_update(p: Particle, observations, gate_p: float = 0.99,
                     p0: float = 1e-4, forced_ids=None) -> Particle:
    """Reference measurement step for a single particle.

    Observations are processed in bearing order. Each either updates its
    best gated landmark (weight gains that likelihood) or spawns a new
    landmark (weight gains log p0). `forced_ids`, aligned with the input
    observation order, overrides association per observation: a landmark
    index, NEW_LANDMARK, or None for free association.
    """
    obs_sorted, order = sort_observations(observations)
    if forced_ids is not None:
        if len(forced_ids) != len(observations):
            raise ValueError("forced_ids length must match observations")
        forced_sorted = [forced_ids[i] for i in order]
    else:
        forced_sorted = [None] * len(obs_sorted)
    lms = [Landmark(lm.mu.copy(), lm.Sigma.copy(), lm.hits) for lm in p.landmarks]
    out = Particle(p.pose, p.log_weight, lms)
    log_p0 = math.log(p0)
    for obs, forced in zip(obs_sorted, forced_sorted):
        if forced is None:
            match = associate(out, obs, gate_p)
        elif forced == NEW_LANDMARK:
            match = None
        else:
            ll, _ = landmark_likelihood(p.pose, lms[forced], obs)
            match = (forced, ll)
        if match is None:
            lms.append(landmark_init(p.pose, obs))
            out.log_weight += log_p0
        else:
            j, ll = match
            lms[j] = landmark_update(lms[j], obs, p.pose)
            out.log_weight += ll
    return out


# ---------------------------------------------------------------------------
# batched step

def slam_step_all(ps: ParticleSet, observations, gate_p: float = 0.99,
                  p0: float = 1e-4) -> ParticleSet:
    """Measurement update of every particle (batched kernel path)."""
    k = len(observations)
    if k == 0:
        out = ps.clone()
        out.epoch += 1
        return out
    obs_sorted, _ = sort_observations(observations)
    obs_rb = np.array([[o.range, o.bearing] for o in obs_sorted])
    obs_r = np.array([[o.R[0, 0], o.R[1, 1]] for o in obs_sorted])
    out = ps.grown(int(ps.lm_n.max()) + k)
    kernels.slam_step(out.poses, out.log_w, out.lm_xy, out.lm_cov,
                      out.lm_hits, out.lm_n, obs_rb, obs_r,
                      chi2_gate(2, gate_p), math.log(p0))
    out.epoch += 1
    return out


def anchor_weights(ps: ParticleSet, pose: Pose2, sigma_xy: float,
                   sigma_psi: float) -> ParticleSet:
    """Weight particles against an absolute pose estimate (gauge anchor).

    A landmark map built purely from relative motion is free to drift as a
    whole; scoring each particle's pose under a Gaussian centered on the
    externally fused estimate pins that gauge freedom without touching the
    per-particle maps.
    """
    if sigma_xy <= 0 or sigma_psi <= 0:
        raise ValueError("anchor sigmas must be positive")
    out = ps.clone()
    dx = out.poses[:, 0] - pose.x
    dy = out.poses[:, 1] - pose.y
    dpsi = wrap_angle_array(out.poses[:, 2] - pose.psi)
    out.log_w -= 0.5 * ((dx * dx + dy * dy) / sigma_xy**2
                        + dpsi * dpsi / sigma_psi**2)
    return out


def resample(ps: ParticleSet, threshold: float = 0.5) -> ParticleSet:
    """Systematic resampling when N_eff < threshold * N.

    One uniform draw places N evenly spaced pointers over the weight CDF,
    so offspring counts stay within 1 of N * w_i. Landmark maps are copied
    and weights reset to uniform; otherwise the set is returned unchanged
    (same arrays, no copies).
    """
    w = ps.weights()
    n = ps.n
    n_eff = 1.0 / float(np.dot(w, w))
    if n_eff >= threshold * n:
        return ps
    u0 = ps.resample_rng.uniform(0.0, 1.0 / n)
    pointers = u0 + np.arange(n) / n
    idx = np.searchsorted(np.cumsum(w), pointers, side="right")
    np.clip(idx, 0, n - 1, out=idx)
    return ParticleSet(
        poses=ps.poses[idx].copy(),
        log_w=np.zeros(n),
        lm_xy=ps.lm_xy[idx].copy(),
        lm_cov=ps.lm_cov[idx].copy(),
        lm_hits=ps.lm_hits[idx].copy(),
        lm_n=ps.lm_n[idx].copy(),
        streams=ps.streams,
        resample_rng=ps.resample_rng,
        epoch=ps.epoch,
    )


# ---------------------------------------------------------------------------
# map extraction and loop closure

@dataclass(frozen=True)
class ConeMap:
    """Point landmark map; cones is (m, 2), hits the per-cone support count."""

    cones: np.ndarray
    hits: np.ndarray

    def __post_init__(self):
        cones = np.asarray(self.cones, dtype=np.float64).reshape(-1, 2)
        hits = np.asarray(self.hits, dtype=np.int64).reshape(-1)
        if hits.shape[0] != cones.shape[0]:
            raise ValueError("cones and hits lengths differ")
        object.__setattr__(self, "cones", cones)
        object.__setattr__(self, "hits", hits)

    def __len__(self) -> int:
        return self.cones.shape[0]

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("x,y,hits\n")
            for (x, y), h in zip(self.cones, self.hits):
                f.write(f"{float(x)!r},{float(y)!r},{int(h)}\n")

    @classmethod
    def load_csv(cls, path) -> "ConeMap":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "x,y,hits":
                raise ValueError(f"bad cone map header: {header!r}")
            rows = [line.strip().split(",") for line in f if line.strip()]
        if not rows:
            return cls(np.empty((0, 2)), np.empty(0, dtype=np.int64))
        data = np.array([[float(a), float(b), float(c)] for a, b, c in rows])
        return cls(data[:, :2], data[:, 2].astype(np.int64))


def extract_map(ps: ParticleSet, min_hits: int = 3, d_merge: float = 0.5) -> ConeMap:
    """Map of the highest-weight particle, thresholded and deduplicated.

    Landmarks with fewer than min_hits sightings are dropped; remaining
    pairs closer than d_merge merge (hit-weighted mean) until none are
    left. Merging always takes the current closest pair, lowest indices on
    ties, so the result is deterministic.
    """
    if ps.n == 0:
        raise ValueError("empty particle set")
    b = ps.best_index()
    k = int(ps.lm_n[b])
    keep = ps.lm_hits[b, :k] >= min_hits
    pts = [p.copy() for p in ps.lm_xy[b, :k][keep]]
    hits = [int(h) for h in ps.lm_hits[b, :k][keep]]
    merged = True
    while merged and len(pts) > 1:
        merged = False
        best = None
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d = math.hypot(*(pts[i] - pts[j]))
                if d < d_merge and (best is None or d < best[0]):
                    best = (d, i, j)
        if best is not None:
            _, i, j = best
            hi, hj = hits[i], hits[j]
            pts[i] = (pts[i] * hi + pts[j] * hj) / (hi + hj)
            hits[i] = hi + hj
            del pts[j], hits[j]
            merged = True
    return ConeMap(np.array(pts).reshape(-1, 2), np.array(hits, dtype=np.int64))


def detect_loop_closure(trajectory, min_travel: float, radius: float,
                        max_heading_diff: float) -> bool:
    """True when the path has looped back near its start, facing the same way.

    trajectory is a sequence of Pose2 (or an (n, 3) array); travel is the
    cumulative polyline length.
    """
    poses = np.array([p.as_array() if isinstance(p, Pose2) else np.asarray(p)
                      for p in trajectory], dtype=np.float64).reshape(-1, 3)
    if poses.shape[0] < 2:
        return False
    travel = float(np.sum(np.hypot(np.diff(poses[:, 0]), np.diff(poses[:, 1]))))
    if travel < min_travel:
        return False
    if math.hypot(poses[-1, 0] - poses[0, 0], poses[-1, 1] - poses[0, 1]) > radius:
        return False
    return abs(wrap_angle(poses[-1, 2] - poses[0, 2])) <= max_heading_diff
