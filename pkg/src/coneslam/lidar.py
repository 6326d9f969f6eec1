"""Cone detection from 3-D point clouds.

Two-stage clustering: a coarse occupancy-grid pass groups points into
regions of interest (8-connected components of occupied cells), then each
ROI is refined by single-linkage Euclidean clustering. Clusters that look
like a cone (support and extent bounds) become range/bearing observations
with a range-dependent noise model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .core import wrap_angle

_EIGHT_CONN = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class PointCloud:
    """Sensor-frame point cloud at time t; points is an (n, 3) float array."""

    t: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Roi:
    """One coarse region of interest: point indices plus its grid footprint."""

    indices: np.ndarray         # indices into the source cloud, ascending
    cells: np.ndarray           # (m, 2) occupied (ix, iy) cells of the component


@dataclass(frozen=True)
class ConeObservation:
    t: float
    range: float
    bearing: float
    R: np.ndarray               # 2x2 diag(range var, bearing var)
    support: int


@dataclass(frozen=True)
class ConeGeometryBounds:
    n_min: int = 3
    n_max: int = 200
    e_xy: float = 0.40          # max horizontal distance of any point from centroid
    e_z: float = 0.50           # max vertical extent


@dataclass(frozen=True)
class RangeBearingNoise:
    """sigma_r grows linearly with range; bearing noise is constant."""

    sigma_r0: float = 0.05
    sigma_r_slope: float = 0.01
    sigma_b: float = 0.0175

    def covariance(self, rng_m: float) -> np.ndarray:
        sr = self.sigma_r0 + self.sigma_r_slope * rng_m
        return np.diag([sr * sr, self.sigma_b * self.sigma_b])


@dataclass(frozen=True)
class LidarParams:
    z_min: float = 0.05
    z_max: float = 0.50
    cell: float = 0.25
    min_pts: int = 2
    link_dist: float = 0.20
    geometry: ConeGeometryBounds = field(default_factory=ConeGeometryBounds)
    noise: RangeBearingNoise = field(default_factory=RangeBearingNoise)


def remove_ground(cloud: PointCloud, z_min: float, z_max: float) -> PointCloud:
    """Keep points with z in [z_min, z_max], preserving order."""
    if z_min >= z_max:
        raise ValueError(f"z_min ({z_min}) must be < z_max ({z_max})")
    if len(cloud) == 0:
        return cloud
    z = cloud.points[:, 2]
    return PointCloud(cloud.t, cloud.points[(z >= z_min) & (z <= z_max)])


def coarse_cluster(cloud: PointCloud, cell: float, min_pts: int) -> list[Roi]:
    """Stage one: bin points into a 2-D grid and group occupied cells.

    Cells holding >= min_pts points are occupied; ROIs are the 8-connected
    components of occupied cells. Points in sparse cells are dropped.
    """
    if cell <= 0:
        raise ValueError(f"cell must be positive, got {cell}")
    if len(cloud) == 0:
        return []
    ix = np.floor(cloud.points[:, 0] / cell).astype(np.int64)
    iy = np.floor(cloud.points[:, 1] / cell).astype(np.int64)
    x0, y0 = ix.min(), iy.min()
    nx = int(ix.max() - x0) + 1
    ny = int(iy.max() - y0) + 1
    if nx * ny > 100_000_000:
        raise ValueError("grid too large; check cell size against cloud extent")
    counts = np.zeros((nx, ny), dtype=np.int64)
    np.add.at(counts, (ix - x0, iy - y0), 1)
    labels, n_rois = ndimage.label(counts >= min_pts, structure=_EIGHT_CONN)
    if n_rois == 0:
        return []
    point_label = labels[ix - x0, iy - y0]
    rois = []
    for k in range(1, n_rois + 1):
        idx = np.nonzero(point_label == k)[0]
        cell_idx = np.argwhere(labels == k)
        cell_idx[:, 0] += x0
        cell_idx[:, 1] += y0
        rois.append(Roi(indices=idx, cells=cell_idx))
    return rois


def refine_clusters(cloud: PointCloud, rois: list[Roi], link_dist: float) -> list[np.ndarray]:
    """Stage two: single-linkage Euclidean clustering inside each ROI.

    Returns index arrays (into the cloud) that partition each ROI's points.
    Output order is deterministic: ROI order, then first-occurrence order of
    clusters within an ROI.
    """
    if link_dist <= 0:
        raise ValueError(f"link_dist must be positive, got {link_dist}")
    clusters = []
    for roi in rois:
        pts = cloud.points[roi.indices]
        labels = kernels.linkage_labels(pts, link_dist)
        for lab in range(labels.max() + 1):
            clusters.append(roi.indices[labels == lab])
    return clusters


def filter_cones(cloud: PointCloud, clusters: list[np.ndarray],
                 geometry: ConeGeometryBounds,
                 noise: RangeBearingNoise) -> list[ConeObservation]:
    """Accept clusters with cone-like support and extent; emit observations.

    The observation is the cluster centroid in polar sensor coordinates.
    """
    obs = []
    for idx in clusters:
        n = idx.shape[0]
        if not geometry.n_min <= n <= geometry.n_max:
            continue
        pts = cloud.points[idx]
        centroid = pts.mean(axis=0)
        horiz = np.hypot(pts[:, 0] - centroid[0], pts[:, 1] - centroid[1])
        if horiz.max() > geometry.e_xy:
            continue
        if pts[:, 2].max() - pts[:, 2].min() > geometry.e_z:
            continue
        rng_m = math.hypot(centroid[0], centroid[1])
        if rng_m <= 0.0:
            continue
        obs.append(ConeObservation(
            t=cloud.t,
            range=rng_m,
            bearing=wrap_angle(math.atan2(centroid[1], centroid[0])),
            R=noise.covariance(rng_m),
            support=n,
        ))
    return obs


def detect_cones(cloud: PointCloud, params: LidarParams) -> list[ConeObservation]:
    """Full pipeline: ground removal, coarse grid ROIs, refinement, filtering."""
    kept = remove_ground(cloud, params.z_min, params.z_max)
    rois = coarse_cluster(kept, params.cell, params.min_pts)
    clusters = refine_clusters(kept, rois, params.link_dist)
    return filter_cones(kept, clusters, params.geometry, params.noise)


# ---------------------------------------------------------------------------
# debug CSV snapshots

def cloud_to_csv(cloud: PointCloud, path) -> None:
    """Dump as one `x,y,z` line per point."""
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud.points:
            # repr of a Python float round-trips bit-exactly
            f.write(f"{float(x)!r},{float(y)!r},{float(z)!r}\n")


def cloud_from_csv(path, t: float = 0.0) -> PointCloud:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return PointCloud(t, np.empty((0, 3)))
    data = np.loadtxt(text.splitlines(), delimiter=",", ndmin=2)
    return PointCloud(t, data)
