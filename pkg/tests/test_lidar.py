"""Cone detection pipeline against brute-force clustering oracles."""

import math

import numpy as np
import pytest

from coneslam.lidar import (
    ConeGeometryBounds,
    LidarParams,
    PointCloud,
    RangeBearingNoise,
    Roi,
    cloud_from_csv,
    cloud_to_csv,
    coarse_cluster,
    detect_cones,
    filter_cones,
    refine_clusters,
    remove_ground,
)
from coneslam.sim import LidarSimParams, WeatherProfile, sense_lidar
from coneslam.sim import Track, TruthState
from coneslam.core import Pose2, SeededRng


def cloud(pts, t=0.0):
    return PointCloud(t, np.asarray(pts, dtype=np.float64))


def cone_blob(center, n=20, spread=0.05, z=0.2, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([
        rng.normal(center[0], spread, n),
        rng.normal(center[1], spread, n),
        rng.uniform(0.05, z + 0.2, n),
    ])
    return pts


def brute_force_single_linkage(pts, link_dist):
    # O(n^2) flood fill over the distance graph, first-occurrence labels
    n = len(pts)
    labels = [-1] * n
    label = 0
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        queue = [seed]
        labels[seed] = label
        while queue:
            i = queue.pop()
            d2 = np.sum((pts - pts[i]) ** 2, axis=1)
            for j in np.nonzero(d2 <= link_dist ** 2)[0]:
                if labels[j] < 0:
                    labels[j] = label
                    queue.append(int(j))
        label += 1
    return np.array(labels)


def grid_components_oracle(pts, cell, min_pts):
    """Brute-force stage-one oracle: flood fill over occupied grid cells."""
    keys = {}
    for i, p in enumerate(pts):
        k = (math.floor(p[0] / cell), math.floor(p[1] / cell))
        keys.setdefault(k, []).append(i)
    occupied = {k for k, v in keys.items() if len(v) >= min_pts}
    comp_of = {}
    comps = []
    for k in sorted(occupied):
        if k in comp_of:
            continue
        comp = set()
        queue = [k]
        comp_of[k] = len(comps)
        while queue:
            cx, cy = queue.pop()
            comp.add((cx, cy))
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    nb = (cx + dx, cy + dy)
                    if nb in occupied and nb not in comp_of:
                        comp_of[nb] = len(comps)
                        queue.append(nb)
        comps.append(comp)
    groups = []
    for comp in comps:
        idx = sorted(i for c in comp for i in keys[c])
        groups.append(frozenset(idx))
    return set(groups)


class TestPointCloud:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            cloud([[0, 0, np.nan]])

    def test_len_and_reshape(self):
        c = cloud([[1, 2, 3], [4, 5, 6]])
        assert len(c) == 2
        assert c.points.shape == (2, 3)


class TestRemoveGround:
    def test_empty(self):
        c = remove_ground(cloud(np.empty((0, 3))), 0.05, 0.5)
        assert len(c) == 0

    def test_all_ground(self):
        c = remove_ground(cloud([[1, 1, 0.0], [2, 2, 0.0]]), 0.05, 0.5)
        assert len(c) == 0

    def test_matches_linear_scan(self, rng):
        pts = rng.uniform([-5, -5, -0.2], [5, 5, 1.0], size=(300, 3))
        got = remove_ground(cloud(pts), 0.05, 0.5).points
        want = np.array([p for p in pts if 0.05 <= p[2] <= 0.5])
        assert np.array_equal(got, want)

    def test_rejects_inverted_band(self):
        with pytest.raises(ValueError):
            remove_ground(cloud([[0, 0, 0]]), 0.5, 0.05)


class TestCoarseCluster:
    def test_two_distant_points(self):
        rois = coarse_cluster(cloud([[0, 0, 0.1], [10, 0, 0.1]]), 0.25, 1)
        assert len(rois) == 2

    def test_min_pts_threshold(self):
        pts = [[0.1, 0.1, 0.1]] * 5
        assert coarse_cluster(cloud(pts), 0.25, 6) == []

    def test_every_retained_point_in_exactly_one_roi(self, rng):
        pts = rng.uniform(-4, 4, size=(200, 3))
        rois = coarse_cluster(cloud(pts), 0.25, 2)
        seen = np.concatenate([r.indices for r in rois]) if rois else np.empty(0)
        assert len(seen) == len(set(seen.tolist()))

    def test_matches_flood_fill_oracle(self, rng):
        for trial in range(10):
            pts = rng.uniform(-3, 3, size=(200, 3))
            rois = coarse_cluster(cloud(pts), 0.25, 2)
            got = {frozenset(r.indices.tolist()) for r in rois}
            want = grid_components_oracle(pts, 0.25, 2)
            assert got == want, f"trial {trial}"

    def test_roi_cells_are_connected_footprint(self):
        pts = np.array([[0.1, 0.1, 0], [0.1, 0.12, 0], [0.3, 0.3, 0], [0.32, 0.3, 0]])
        rois = coarse_cluster(cloud(pts), 0.25, 2)
        assert len(rois) == 1  # diagonal cells are 8-connected
        assert rois[0].cells.shape[0] == 2

    def test_rejects_non_positive_cell(self):
        with pytest.raises(ValueError):
            coarse_cluster(cloud([[0, 0, 0]]), 0.0, 1)


class TestRefineClusters:
    def test_singleton_roi(self):
        c = cloud([[0, 0, 0.1]])
        rois = [Roi(indices=np.array([0]), cells=np.zeros((1, 2), dtype=np.int64))]
        out = refine_clusters(c, rois, 0.1)
        assert len(out) == 1 and np.array_equal(out[0], [0])

    def test_two_blobs_split_within_one_roi(self):
        pts = np.vstack([cone_blob((0, 0), spread=0.01, seed=1),
                         cone_blob((0.5, 0), spread=0.01, seed=2)])
        c = cloud(pts)
        roi = Roi(indices=np.arange(len(pts)), cells=np.zeros((1, 2), dtype=np.int64))
        out = refine_clusters(c, [roi], 0.1)
        assert len(out) == 2
        assert {len(x) for x in out} == {20}

    def test_matches_brute_force_oracle(self, rng):
        pts = rng.uniform(0, 1.5, size=(80, 3))
        c = cloud(pts)
        roi = Roi(indices=np.arange(80), cells=np.zeros((1, 2), dtype=np.int64))
        out = refine_clusters(c, [roi], 0.25)
        got = {frozenset(idx.tolist()) for idx in out}
        labels = brute_force_single_linkage(pts, 0.25)
        want = {frozenset(np.nonzero(labels == v)[0].tolist()) for v in set(labels)}
        assert got == want

    def test_rejects_non_positive_link_dist(self):
        with pytest.raises(ValueError):
            refine_clusters(cloud([[0, 0, 0]]),
                            [Roi(np.array([0]), np.zeros((1, 2), dtype=np.int64))], 0.0)

    def test_partitions_roi_points(self, rng):
        pts = rng.uniform(0, 2, size=(60, 3))
        c = cloud(pts)
        roi = Roi(indices=np.arange(60), cells=np.zeros((1, 2), dtype=np.int64))
        out = refine_clusters(c, [roi], 0.3)
        merged = sorted(int(i) for idx in out for i in idx)
        assert merged == list(range(60))


class TestFilterCones:
    geometry = ConeGeometryBounds()
    noise = RangeBearingNoise()

    def test_cone_at_five_meters(self):
        pts = cone_blob((5, 0), n=20, spread=0.03, seed=3)
        c = cloud(pts)
        obs = filter_cones(c, [np.arange(20)], self.geometry, self.noise)
        assert len(obs) == 1
        assert obs[0].range == pytest.approx(5.0, abs=0.1)
        assert obs[0].bearing == pytest.approx(0.0, abs=0.05)
        assert obs[0].support == 20

    def test_wide_wall_rejected(self):
        xs = np.linspace(-1.0, 1.0, 50)
        pts = np.column_stack([np.full(50, 4.0) + 0.0 * xs, xs, np.full(50, 0.2)])
        c = cloud(pts)
        assert filter_cones(c, [np.arange(50)], self.geometry, self.noise) == []

    def test_tall_cluster_rejected(self):
        pts = np.column_stack([np.full(10, 4.0), np.zeros(10), np.linspace(0, 0.8, 10)])
        c = cloud(pts)
        assert filter_cones(c, [np.arange(10)], self.geometry, self.noise) == []

    def test_support_bounds(self):
        small = cone_blob((3, 1), n=2, seed=4)
        c = cloud(small)
        assert filter_cones(c, [np.arange(2)], self.geometry, self.noise) == []

    def test_r_matches_noise_model(self):
        pts = cone_blob((8, 0), n=15, spread=0.02, seed=5)
        c = cloud(pts)
        obs = filter_cones(c, [np.arange(15)], self.geometry, self.noise)
        sr = 0.05 + 0.01 * obs[0].range
        assert obs[0].R[0, 0] == pytest.approx(sr ** 2)
        assert obs[0].R[1, 1] == pytest.approx(0.0175 ** 2)
        assert obs[0].R[0, 1] == 0.0

    def test_extent_uses_distance_from_centroid(self):
        # two points 0.9 m apart: 0.45 m from centroid, above the 0.40 bound
        base = [[0, -0.45, 0.2], [0, 0.45, 0.2], [0.01, 0.0, 0.2]]
        c = cloud(base)
        assert filter_cones(c, [np.arange(3)], self.geometry, self.noise) == []
        near = cloud([[4, -0.3, 0.2], [4, 0.3, 0.2], [4.01, 0.0, 0.2]])
        assert len(filter_cones(near, [np.arange(3)], self.geometry, self.noise)) == 1


class TestPipeline:
    def test_detect_cones_finds_separated_cones(self):
        pts = np.vstack([
            cone_blob((5, 0), seed=10), cone_blob((0, 6), seed=11),
            cone_blob((-4, -4), seed=12),
        ])
        obs = detect_cones(cloud(pts), LidarParams())
        assert len(obs) == 3
        bearings = sorted(o.bearing for o in obs)
        assert bearings == pytest.approx(
            sorted([0.0, math.pi / 2, math.atan2(-4, -4)]), abs=0.05)

    def test_deterministic(self, rng):
        pts = rng.uniform(-6, 6, size=(400, 3)) * [1, 1, 0.05]
        a = detect_cones(cloud(pts), LidarParams())
        b = detect_cones(cloud(pts), LidarParams())
        assert len(a) == len(b)
        for oa, ob in zip(a, b):
            assert oa.range == ob.range and oa.bearing == ob.bearing

    def test_matches_whole_cloud_linkage_when_rois_isolated(self, rng):
        # constructed scene: tight blobs centered mid-cell, so every blob
        # occupies a single dense grid cell and no point is dropped as sparse
        centers = [(4.125, 0.125), (0.125, 5.125), (-4.875, 2.125), (3.125, -5.875)]
        pts = np.vstack([cone_blob(c, n=15, spread=0.01, seed=20 + i)
                         for i, c in enumerate(centers)])
        pts[:, 2] = np.clip(pts[:, 2], 0.06, 0.45)
        p = LidarParams()
        c = cloud(pts)
        kept = remove_ground(c, p.z_min, p.z_max)
        rois = coarse_cluster(kept, p.cell, p.min_pts)
        got = refine_clusters(kept, rois, p.link_dist)
        got_sets = {frozenset(i.tolist()) for i in got}
        labels = brute_force_single_linkage(kept.points, p.link_dist)
        want = {frozenset(np.nonzero(labels == v)[0].tolist()) for v in set(labels)}
        assert got_sets == want

    def test_centroid_error_monte_carlo(self):
        # simulated cone at 8 m: detection centroid error RMS <= 0.05 m
        centerline = np.array([[1000.0, 1000.0], [1001.0, 1000.0], [1000.5, 1001.0]])
        track = Track(centerline=centerline, width=3.5,
                      cones_left=np.array([[8.0, 0.0]]),
                      cones_right=np.empty((0, 2)))
        truth = TruthState(pose=Pose2(), vx=0.0, vy=0.0, r=0.0, t=0.0)
        params = LidarSimParams()
        errs = []
        for seed in range(100):
            g = SeededRng(seed, 321).generator()
            cl = sense_lidar(truth, track, WeatherProfile(), g, params)
            obs = detect_cones(cl, LidarParams())
            assert len(obs) <= 1
            if obs:
                x = obs[0].range * math.cos(obs[0].bearing)
                y = obs[0].range * math.sin(obs[0].bearing)
                errs.append((x - 8.0) ** 2 + y ** 2)
        # a sparse 8 m return can lose the cone to the ground cut; the
        # centroid of whatever is detected must stay sharp
        assert len(errs) >= 90
        assert math.sqrt(np.mean(errs)) <= 0.05


class TestCsvRoundTrip:
    def test_round_trip_exact(self, tmp_path, rng):
        pts = rng.normal(size=(37, 3))
        path = tmp_path / "cloud.csv"
        cloud_to_csv(cloud(pts, t=1.25), path)
        back = cloud_from_csv(path, t=1.25)
        assert np.array_equal(back.points, pts)
        assert back.t == 1.25

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.csv"
        cloud_to_csv(cloud(np.empty((0, 3))), path)
        assert len(cloud_from_csv(path)) == 0
