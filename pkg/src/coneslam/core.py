"""Planar geometry and probability primitives shared by all estimators.

Conventions: angles are radians in (-pi, pi] (closed at +pi), frames are
planar rigid transforms, covariances are plain float64 ndarrays validated
by the helpers below rather than wrapped in a class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the canonical interval (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    wrapped = theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)
    # guard against rounding at the boundary for very large inputs
    if wrapped > math.pi:
        wrapped -= TWO_PI
    elif wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    wrapped = theta - TWO_PI * np.ceil((theta - np.pi) / TWO_PI)
    wrapped = np.where(wrapped > np.pi, wrapped - TWO_PI, wrapped)
    wrapped = np.where(wrapped <= -np.pi, wrapped + TWO_PI, wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2:
    """Planar rigid-body pose: translation (x, y) metres, heading psi radians."""

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    @staticmethod
    def from_array(a) -> "Pose2":
        return Pose2(float(a[0]), float(a[1]), float(a[2]))


def pose_compose(a: Pose2, b: Pose2) -> Pose2:
    """a ⊕ b: express pose b (given in a's frame) in the world frame."""
    c, s = math.cos(a.psi), math.sin(a.psi)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        wrap_angle(a.psi + b.psi),
    )


def pose_inverse(a: Pose2) -> Pose2:
    """Inverse transform: pose_compose(a, pose_inverse(a)) is the identity."""
    c, s = math.cos(a.psi), math.sin(a.psi)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), wrap_angle(-a.psi))


def transform_point(frame: Pose2, p) -> np.ndarray:
    """Map point p from `frame` coordinates to world coordinates."""
    c, s = math.cos(frame.psi), math.sin(frame.psi)
    px, py = float(p[0]), float(p[1])
    return np.array([frame.x + c * px - s * py, frame.y + s * px + c * py])


def transform_points(frame: Pose2, pts: np.ndarray) -> np.ndarray:
    """Map an (n, 2) array of points from `frame` coordinates to world."""
    c, s = math.cos(frame.psi), math.sin(frame.psi)
    out = np.empty_like(pts, dtype=np.float64)
    out[:, 0] = frame.x + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = frame.y + s * pts[:, 0] + c * pts[:, 1]
    return out


# ---------------------------------------------------------------------------
# covariance helpers

def symmetrize(m: np.ndarray) -> np.ndarray:
    """(M + M^T) / 2 — standard drift suppression after filter updates."""
    return 0.5 * (m + m.T)


def validate_cov(m: np.ndarray, require_pd: bool = False, name: str = "cov") -> np.ndarray:
    """Check a covariance matrix: square, 1..6 dim, symmetric, PSD (PD if asked).

    Returns the symmetrized matrix as float64.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not 1 <= m.shape[0] <= 6:
        raise ValueError(f"{name} dimension must be 1..6, got {m.shape[0]}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > 1e-9 * scale:
        raise ValueError(f"{name} is not symmetric within 1e-9 relative tolerance")
    m = symmetrize(m)
    eig = np.linalg.eigvalsh(m)
    if require_pd:
        if eig.min() <= 0.0 or np.any(np.diag(m) <= 0.0):
            raise ValueError(f"{name} must be positive definite (min eig {eig.min():.3e})")
    elif eig.min() < -1e-9 * scale:
        raise ValueError(f"{name} is not PSD (min eig {eig.min():.3e})")
    return m


# ---------------------------------------------------------------------------
# deterministic random streams

@dataclass(frozen=True)
class SeededRng:
    """Named random stream: identical (seed, stream_id) gives identical samples.

    Streams with distinct ids are statistically independent (numpy
    SeedSequence spawn-key derivation).
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, offset: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream_id + offset)


# stream-id layout used by the simulator and filters; spacing leaves room
# for per-particle streams allocated at PARTICLE base + slot index.
STREAM_TRACK = 1
STREAM_LIDAR = 2
STREAM_GPS = 3
STREAM_VELOCITY = 4
STREAM_GYRO = 5
STREAM_IMU = 6
STREAM_SLAM_RESAMPLE = 7
STREAM_MCL_RESAMPLE = 8
STREAM_SLAM_PARTICLES = 1_000
STREAM_MCL_PARTICLES = 100_000
