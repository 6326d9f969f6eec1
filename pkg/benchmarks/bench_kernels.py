#!/usr/bin/env python3
"""Time the hot kernels on the numba and pure-numpy backends.

The backend is fixed at import time by the CONESLAM_NUMBA environment
variable, so the default mode re-executes this script once per backend
and prints a side-by-side table. `--worker` runs the timing loop for the
current process's backend and emits JSON (used by the re-exec).
"""

import argparse
import json
import math
import os
import subprocess
import sys
import time

import numpy as np

from coneslam import kernels
from coneslam.ekf import chi2_gate

N_PARTICLES = 200
N_LANDMARKS = 60
N_OBS = 8


def _workload_ekf():
    rng = np.random.default_rng(1)
    x = np.array([1.0, -2.0, 0.3, 8.0, 0.2, 0.4])
    P = np.diag(rng.uniform(0.01, 0.2, 6))
    q = np.array([0.0, 0.0, 0.0, 0.25, 0.25, 0.09])

    def call():
        kernels.ekf_predict(x, P, 0.5, -0.2, 0.005, q)

    return call


def _slam_arrays():
    rng = np.random.default_rng(2)
    cap = N_LANDMARKS + N_OBS + 4
    ang = np.linspace(0, 2 * math.pi, N_LANDMARKS, endpoint=False)
    base = np.column_stack([9.0 * np.cos(ang), 9.0 * np.sin(ang)])
    poses = np.zeros((N_PARTICLES, 3))
    poses[:, :2] = rng.normal(scale=0.05, size=(N_PARTICLES, 2))
    lm_xy = np.zeros((N_PARTICLES, cap, 2))
    lm_xy[:, :N_LANDMARKS] = base[None] + rng.normal(
        scale=0.02, size=(N_PARTICLES, N_LANDMARKS, 2))
    lm_cov = np.zeros((N_PARTICLES, cap, 2, 2))
    lm_cov[:, :N_LANDMARKS] = np.eye(2) * 0.01
    lm_hits = np.zeros((N_PARTICLES, cap), dtype=np.int64)
    lm_hits[:, :N_LANDMARKS] = 5
    lm_n = np.full(N_PARTICLES, N_LANDMARKS, dtype=np.int64)
    obs = np.column_stack([rng.uniform(7.5, 10.5, N_OBS),
                           np.linspace(-1.2, 1.2, N_OBS)])
    obs_r = np.tile([0.06**2, 0.0175**2], (N_OBS, 1))
    return poses, np.zeros(N_PARTICLES), lm_xy, lm_cov, lm_hits, lm_n, obs, obs_r


def _workload_slam():
    ref = _slam_arrays()
    gate = chi2_gate(2, 0.99)
    log_p0 = math.log(1e-4)

    def call():
        # the kernel mutates its arrays, so each rep works on fresh copies
        poses, log_w, lm_xy, lm_cov, lm_hits, lm_n, obs, obs_r = (
            a.copy() for a in ref)
        kernels.slam_step(poses, log_w, lm_xy, lm_cov, lm_hits, lm_n,
                          obs, obs_r, gate, log_p0)

    return call


def _workload_mcl():
    rng = np.random.default_rng(3)
    poses = rng.normal(scale=[0.3, 0.3, 0.1], size=(N_PARTICLES, 3))
    ang = np.linspace(0, 2 * math.pi, N_LANDMARKS, endpoint=False)
    map_xy = np.column_stack([8.0 * np.cos(ang), 8.0 * np.sin(ang)])
    obs = np.column_stack([rng.uniform(6.0, 10.0, N_OBS),
                           rng.uniform(-math.pi, math.pi, N_OBS)])
    obs_r = np.tile([0.06**2, 0.0175**2], (N_OBS, 1))
    gate = chi2_gate(2, 0.99)
    log_miss = math.log(1e-4)

    def call():
        kernels.mcl_scores(poses, map_xy, obs, obs_r, gate, log_miss)

    return call


def _workload_linkage():
    rng = np.random.default_rng(4)
    clusters = [rng.normal(loc=[*c, 0.15], scale=0.04, size=(30, 3))
                for c in rng.uniform(-10, 10, size=(40, 2))]
    clutter = np.column_stack([rng.uniform(-12, 12, 200),
                               rng.uniform(-12, 12, 200),
                               rng.uniform(0.0, 0.5, 200)])
    pts = np.vstack(clusters + [clutter])

    def call():
        kernels.linkage_labels(pts, 0.20)

    return call


WORKLOADS = [
    ("ekf_predict (6-state)", _workload_ekf, 2000),
    (f"slam_step ({N_PARTICLES}p, {N_OBS} obs)", _workload_slam, 20),
    (f"mcl_scores ({N_PARTICLES}p, {N_LANDMARKS} cones)", _workload_mcl, 50),
    ("linkage_labels (1400 pts)", _workload_linkage, 20),
]


def run_worker() -> dict:
    results = {}
    for name, factory, reps in WORKLOADS:
        call = factory()
        for _ in range(3):        # warmup covers JIT compilation
            call()
        best = math.inf
        for _ in range(5):
            t0 = time.perf_counter()
            for _ in range(reps):
                call()
            best = min(best, (time.perf_counter() - t0) / reps)
        results[name] = best
    return {"backend": kernels.backend_name(), "per_call_s": results}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--worker", action="store_true",
                        help="time the current backend and print JSON")
    args = parser.parse_args(argv)

    if args.worker:
        print(json.dumps(run_worker()))
        return 0

    reports = {}
    for flag in ("1", "0"):
        env = dict(os.environ, CONESLAM_NUMBA=flag)
        proc = subprocess.run([sys.executable, os.path.abspath(__file__),
                               "--worker"], env=env, capture_output=True,
                              text=True, check=True)
        rep = json.loads(proc.stdout.strip().splitlines()[-1])
        reports[rep["backend"]] = rep["per_call_s"]

    names = [name for name, _, _ in WORKLOADS]
    width = max(len(n) for n in names)
    print(f"{'kernel':<{width}}  {'numba':>12}  {'numpy':>12}  {'speedup':>8}")
    for name in names:
        nb = reports["numba"][name]
        npy = reports["numpy"][name]
        print(f"{name:<{width}}  {nb * 1e3:>9.3f} ms  {npy * 1e3:>9.3f} ms"
              f"  {npy / nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
