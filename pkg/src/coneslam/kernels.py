"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` loop implementation and a pure
numpy fallback. The backend is chosen once at import time from the
``CONESLAM_NUMBA`` environment variable ("0"/"false"/"off" disables numba;
anything else, or unset, enables it when numba imports cleanly).

Both backends are individually deterministic. They agree to ~1e-12 relative
tolerance but not bit-for-bit (different summation orders / libm builds), so
switching backends can change low-order digits of downstream logs.

benchmarks/bench_kernels.py times the two backends against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _env_wants_numba() -> bool:
    return os.environ.get("CONESLAM_NUMBA", "1").strip().lower() not in ("0", "false", "off")


NUMBA_ENABLED = False
if _env_wants_numba():
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):  # no-op decorator for the fallback path
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# EKF prediction (6-state planar kinematics, explicit Euler)
#
# State layout: [px, py, psi, vx, vy, r]. Runs at IMU rate, the hottest
# per-step call in the whole pipeline. Single source: numba compiles the
# same body the fallback interprets.

@njit(cache=True)
def ekf_predict(x, P, ax, ay, dt, q_diag):
    psi = x[2]
    vx = x[3]
    vy = x[4]
    r = x[5]
    c = math.cos(psi)
    s = math.sin(psi)

    xn = np.empty(6)
    xn[0] = x[0] + (vx * c - vy * s) * dt
    xn[1] = x[1] + (vx * s + vy * c) * dt
    psi_n = psi + r * dt
    psi_n = psi_n - 2.0 * math.pi * math.ceil((psi_n - math.pi) / (2.0 * math.pi))
    if psi_n > math.pi:
        psi_n -= 2.0 * math.pi
    elif psi_n <= -math.pi:
        psi_n += 2.0 * math.pi
    xn[2] = psi_n
    xn[3] = vx + (ax + r * vy) * dt
    xn[4] = vy + (ay - r * vx) * dt
    xn[5] = r

    F = np.eye(6)
    F[0, 2] = (-vx * s - vy * c) * dt
    F[0, 3] = c * dt
    F[0, 4] = -s * dt
    F[1, 2] = (vx * c - vy * s) * dt
    F[1, 3] = s * dt
    F[1, 4] = c * dt
    F[2, 5] = dt
    F[3, 4] = r * dt
    F[3, 5] = vy * dt
    F[4, 3] = -r * dt
    F[4, 5] = -vx * dt

    Pn = F @ P @ F.T
    for i in range(6):
        Pn[i, i] += q_diag[i] * dt
    Pn = 0.5 * (Pn + Pn.T)
    return xn, F, Pn


# ---------------------------------------------------------------------------
# FastSLAM batched measurement step
#
# SoA layout: poses (N,3), log_w (N,), lm_xy (N,cap,2), lm_cov (N,cap,2,2),
# lm_hits (N,cap) int64, lm_n (N,) int64. Observations obs (K,2) as
# (range, bearing) sorted by bearing, obs_r (K,2) the diagonal of each 2x2
# noise matrix. Caller guarantees cap >= max(lm_n) + K. Arrays are mutated
# in place; assoc_out (N,K) int64 records the chosen landmark index per
# (particle, observation), -1 for a newly created landmark.

@njit(cache=True)
def _slam_step_numba(poses, log_w, lm_xy, lm_cov, lm_hits, lm_n, obs, obs_r,
                     gate, log_p0, assoc_out):
    n_part = poses.shape[0]
    n_obs = obs.shape[0]
    for i in range(n_part):
        px = poses[i, 0]
        py = poses[i, 1]
        psi = poses[i, 2]
        for k in range(n_obs):
            zr = obs[k, 0]
            zb = obs[k, 1]
            sr2 = obs_r[k, 0]
            sb2 = obs_r[k, 1]
            best = -1
            best_ll = -np.inf
            for j in range(lm_n[i]):
                dx = lm_xy[i, j, 0] - px
                dy = lm_xy[i, j, 1] - py
                q = dx * dx + dy * dy
                r = math.sqrt(q)
                if r < 1e-6:
                    continue
                h00 = dx / r
                h01 = dy / r
                h10 = -dy / q
                h11 = dx / q
                p00 = lm_cov[i, j, 0, 0]
                p01 = lm_cov[i, j, 0, 1]
                p11 = lm_cov[i, j, 1, 1]
                a00 = h00 * p00 + h01 * p01
                a01 = h00 * p01 + h01 * p11
                a10 = h10 * p00 + h11 * p01
                a11 = h10 * p01 + h11 * p11
                s00 = a00 * h00 + a01 * h01 + sr2
                s01 = a00 * h10 + a01 * h11
                s11 = a10 * h10 + a11 * h11 + sb2
                det = s00 * s11 - s01 * s01
                if det <= 0.0:
                    continue
                nur = zr - r
                nub = zb - (math.atan2(dy, dx) - psi)
                nub = nub - 2.0 * math.pi * math.ceil((nub - math.pi) / (2.0 * math.pi))
                d2 = (s11 * nur * nur - 2.0 * s01 * nur * nub + s00 * nub * nub) / det
                if d2 <= gate:
                    ll = -0.5 * d2 - LOG_2PI - 0.5 * math.log(det)
                    if ll > best_ll:
                        best_ll = ll
                        best = j
            if best >= 0:
                log_w[i] += best_ll
                _landmark_ekf_update(poses[i], lm_xy[i], lm_cov[i], best, zr, zb, sr2, sb2)
                lm_hits[i, best] += 1
                assoc_out[i, k] = best
            else:
                log_w[i] += log_p0
                j = lm_n[i]
                _landmark_ekf_init(poses[i], lm_xy[i], lm_cov[i], j, zr, zb, sr2, sb2)
                lm_hits[i, j] = 1
                lm_n[i] = j + 1
                assoc_out[i, k] = -1


@njit(cache=True)
def _landmark_ekf_update(pose, xy, cov, j, zr, zb, sr2, sb2):
    px = pose[0]
    py = pose[1]
    psi = pose[2]
    dx = xy[j, 0] - px
    dy = xy[j, 1] - py
    q = dx * dx + dy * dy
    r = math.sqrt(q)
    h00 = dx / r
    h01 = dy / r
    h10 = -dy / q
    h11 = dx / q
    p00 = cov[j, 0, 0]
    p01 = cov[j, 0, 1]
    p11 = cov[j, 1, 1]
    a00 = h00 * p00 + h01 * p01
    a01 = h00 * p01 + h01 * p11
    a10 = h10 * p00 + h11 * p01
    a11 = h10 * p01 + h11 * p11
    s00 = a00 * h00 + a01 * h01 + sr2
    s01 = a00 * h10 + a01 * h11
    s11 = a10 * h10 + a11 * h11 + sb2
    det = s00 * s11 - s01 * s01
    i00 = s11 / det
    i01 = -s01 / det
    i11 = s00 / det
    # K = Sigma H^T S^-1
    b00 = p00 * h00 + p01 * h01
    b01 = p00 * h10 + p01 * h11
    b10 = p01 * h00 + p11 * h01
    b11 = p01 * h10 + p11 * h11
    k00 = b00 * i00 + b01 * i01
    k01 = b00 * i01 + b01 * i11
    k10 = b10 * i00 + b11 * i01
    k11 = b10 * i01 + b11 * i11
    nur = zr - r
    nub = zb - (math.atan2(dy, dx) - psi)
    nub = nub - 2.0 * math.pi * math.ceil((nub - math.pi) / (2.0 * math.pi))
    xy[j, 0] += k00 * nur + k01 * nub
    xy[j, 1] += k10 * nur + k11 * nub
    # Joseph form keeps the 2x2 covariance PSD
    m00 = 1.0 - (k00 * h00 + k01 * h10)
    m01 = -(k00 * h01 + k01 * h11)
    m10 = -(k10 * h00 + k11 * h10)
    m11 = 1.0 - (k10 * h01 + k11 * h11)
    c00 = (m00 * p00 + m01 * p01) * m00 + (m00 * p01 + m01 * p11) * m01 \
        + k00 * k00 * sr2 + k01 * k01 * sb2
    c01 = (m00 * p00 + m01 * p01) * m10 + (m00 * p01 + m01 * p11) * m11 \
        + k00 * k10 * sr2 + k01 * k11 * sb2
    c11 = (m10 * p00 + m11 * p01) * m10 + (m10 * p01 + m11 * p11) * m11 \
        + k10 * k10 * sr2 + k11 * k11 * sb2
    cov[j, 0, 0] = c00
    cov[j, 0, 1] = c01
    cov[j, 1, 0] = c01
    cov[j, 1, 1] = c11


@njit(cache=True)
def _landmark_ekf_init(pose, xy, cov, j, zr, zb, sr2, sb2):
    b = pose[2] + zb
    cb = math.cos(b)
    sb = math.sin(b)
    xy[j, 0] = pose[0] + zr * cb
    xy[j, 1] = pose[1] + zr * sb
    # Sigma = G R G^T with G the back-projection Jacobian wrt (range, bearing)
    g00 = cb
    g01 = -zr * sb
    g10 = sb
    g11 = zr * cb
    cov[j, 0, 0] = g00 * g00 * sr2 + g01 * g01 * sb2
    cov[j, 0, 1] = g00 * g10 * sr2 + g01 * g11 * sb2
    cov[j, 1, 0] = cov[j, 0, 1]
    cov[j, 1, 1] = g10 * g10 * sr2 + g11 * g11 * sb2


def _slam_step_numpy(poses, log_w, lm_xy, lm_cov, lm_hits, lm_n, obs, obs_r,
                     gate, log_p0, assoc_out):
    n_part, cap = lm_xy.shape[0], lm_xy.shape[1]
    cols = np.arange(cap)
    px = poses[:, 0:1]
    py = poses[:, 1:2]
    psi = poses[:, 2:3]
    for k in range(obs.shape[0]):
        zr, zb = obs[k]
        sr2, sb2 = obs_r[k]
        valid = cols[None, :] < lm_n[:, None]
        dx = lm_xy[:, :, 0] - px
        dy = lm_xy[:, :, 1] - py
        q = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.sqrt(q)
            h00 = dx / r
            h01 = dy / r
            h10 = -dy / q
            h11 = dx / q
            p00 = lm_cov[:, :, 0, 0]
            p01 = lm_cov[:, :, 0, 1]
            p11 = lm_cov[:, :, 1, 1]
            a00 = h00 * p00 + h01 * p01
            a01 = h00 * p01 + h01 * p11
            a10 = h10 * p00 + h11 * p01
            a11 = h10 * p01 + h11 * p11
            s00 = a00 * h00 + a01 * h01 + sr2
            s01 = a00 * h10 + a01 * h11
            s11 = a10 * h10 + a11 * h11 + sb2
            det = s00 * s11 - s01 * s01
            nur = zr - r
            nub = _wrap_np(zb - (np.arctan2(dy, dx) - psi))
            d2 = (s11 * nur * nur - 2.0 * s01 * nur * nub + s00 * nub * nub) / det
            ll = -0.5 * d2 - LOG_2PI - 0.5 * np.log(det)
        ok = valid & (r > 1e-6) & (det > 0.0) & (d2 <= gate)
        ll = np.where(ok, ll, -np.inf)
        best = np.argmax(ll, axis=1)
        has = ok[np.arange(n_part), best]

        hit = np.nonzero(has)[0]
        if hit.size:
            j = best[hit]
            log_w[hit] += ll[hit, j]
            _lm_update_rows(poses, lm_xy, lm_cov, hit, j, zr, zb, sr2, sb2)
            lm_hits[hit, j] += 1
            assoc_out[hit, k] = j
        new = np.nonzero(~has)[0]
        if new.size:
            j = lm_n[new]
            log_w[new] += log_p0
            b = poses[new, 2] + zb
            cb = np.cos(b)
            sb = np.sin(b)
            lm_xy[new, j, 0] = poses[new, 0] + zr * cb
            lm_xy[new, j, 1] = poses[new, 1] + zr * sb
            g01 = -zr * sb
            g11 = zr * cb
            lm_cov[new, j, 0, 0] = cb * cb * sr2 + g01 * g01 * sb2
            lm_cov[new, j, 0, 1] = cb * sb * sr2 + g01 * g11 * sb2
            lm_cov[new, j, 1, 0] = lm_cov[new, j, 0, 1]
            lm_cov[new, j, 1, 1] = sb * sb * sr2 + g11 * g11 * sb2
            lm_hits[new, j] = 1
            lm_n[new] = j + 1
            assoc_out[new, k] = -1


def _lm_update_rows(poses, lm_xy, lm_cov, rows, j, zr, zb, sr2, sb2):
    dx = lm_xy[rows, j, 0] - poses[rows, 0]
    dy = lm_xy[rows, j, 1] - poses[rows, 1]
    q = dx * dx + dy * dy
    r = np.sqrt(q)
    h00 = dx / r
    h01 = dy / r
    h10 = -dy / q
    h11 = dx / q
    p00 = lm_cov[rows, j, 0, 0]
    p01 = lm_cov[rows, j, 0, 1]
    p11 = lm_cov[rows, j, 1, 1]
    a00 = h00 * p00 + h01 * p01
    a01 = h00 * p01 + h01 * p11
    a10 = h10 * p00 + h11 * p01
    a11 = h10 * p01 + h11 * p11
    s00 = a00 * h00 + a01 * h01 + sr2
    s01 = a00 * h10 + a01 * h11
    s11 = a10 * h10 + a11 * h11 + sb2
    det = s00 * s11 - s01 * s01
    i00 = s11 / det
    i01 = -s01 / det
    i11 = s00 / det
    b00 = p00 * h00 + p01 * h01
    b01 = p00 * h10 + p01 * h11
    b10 = p01 * h00 + p11 * h01
    b11 = p01 * h10 + p11 * h11
    k00 = b00 * i00 + b01 * i01
    k01 = b00 * i01 + b01 * i11
    k10 = b10 * i00 + b11 * i01
    k11 = b10 * i01 + b11 * i11
    nur = zr - r
    nub = _wrap_np(zb - (np.arctan2(dy, dx) - poses[rows, 2]))
    lm_xy[rows, j, 0] += k00 * nur + k01 * nub
    lm_xy[rows, j, 1] += k10 * nur + k11 * nub
    m00 = 1.0 - (k00 * h00 + k01 * h10)
    m01 = -(k00 * h01 + k01 * h11)
    m10 = -(k10 * h00 + k11 * h10)
    m11 = 1.0 - (k10 * h01 + k11 * h11)
    c00 = (m00 * p00 + m01 * p01) * m00 + (m00 * p01 + m01 * p11) * m01 \
        + k00 * k00 * sr2 + k01 * k01 * sb2
    c01 = (m00 * p00 + m01 * p01) * m10 + (m00 * p01 + m01 * p11) * m11 \
        + k00 * k10 * sr2 + k01 * k11 * sb2
    c11 = (m10 * p00 + m11 * p01) * m10 + (m10 * p01 + m11 * p11) * m11 \
        + k10 * k10 * sr2 + k11 * k11 * sb2
    lm_cov[rows, j, 0, 0] = c00
    lm_cov[rows, j, 0, 1] = c01
    lm_cov[rows, j, 1, 0] = c01
    lm_cov[rows, j, 1, 1] = c11


def _wrap_np(a):
    w = a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))
    w = np.where(w > np.pi, w - 2.0 * np.pi, w)
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def slam_step(poses, log_w, lm_xy, lm_cov, lm_hits, lm_n, obs, obs_r, gate, log_p0):
    """Run one FastSLAM weigh-and-update epoch over all particles in place.

    Returns the (N, K) association matrix (landmark index, -1 for new).
    """
    assoc = np.empty((poses.shape[0], obs.shape[0]), dtype=np.int64)
    if NUMBA_ENABLED:
        _slam_step_numba(poses, log_w, lm_xy, lm_cov, lm_hits, lm_n,
                         obs, obs_r, gate, log_p0, assoc)
    else:
        _slam_step_numpy(poses, log_w, lm_xy, lm_cov, lm_hits, lm_n,
                         obs, obs_r, gate, log_p0, assoc)
    return assoc


# ---------------------------------------------------------------------------
# Monte-Carlo localization scoring against a frozen map

@njit(cache=True)
def _mcl_scores_numba(poses, map_xy, obs, obs_r, gate, log_miss, out):
    n_part = poses.shape[0]
    n_map = map_xy.shape[0]
    for i in range(n_part):
        px = poses[i, 0]
        py = poses[i, 1]
        psi = poses[i, 2]
        total = 0.0
        for k in range(obs.shape[0]):
            zr = obs[k, 0]
            zb = obs[k, 1]
            sr2 = obs_r[k, 0]
            sb2 = obs_r[k, 1]
            det = sr2 * sb2
            best_ll = -np.inf
            for j in range(n_map):
                dx = map_xy[j, 0] - px
                dy = map_xy[j, 1] - py
                r = math.sqrt(dx * dx + dy * dy)
                if r < 1e-6:
                    continue
                nur = zr - r
                nub = zb - (math.atan2(dy, dx) - psi)
                nub = nub - 2.0 * math.pi * math.ceil((nub - math.pi) / (2.0 * math.pi))
                d2 = nur * nur / sr2 + nub * nub / sb2
                if d2 <= gate:
                    ll = -0.5 * d2 - LOG_2PI - 0.5 * math.log(det)
                    if ll > best_ll:
                        best_ll = ll
            total += best_ll if best_ll > -np.inf else log_miss
        out[i] = total


def _mcl_scores_numpy(poses, map_xy, obs, obs_r, gate, log_miss, out):
    px = poses[:, 0:1]
    py = poses[:, 1:2]
    psi = poses[:, 2:3]
    dx = map_xy[None, :, 0] - px
    dy = map_xy[None, :, 1] - py
    r = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan2(dy, dx) - psi
    out[:] = 0.0
    for k in range(obs.shape[0]):
        zr, zb = obs[k]
        sr2, sb2 = obs_r[k]
        nur = zr - r
        nub = _wrap_np(zb - theta)
        d2 = nur * nur / sr2 + nub * nub / sb2
        ok = (r > 1e-6) & (d2 <= gate)
        ll = np.where(ok, -0.5 * d2 - LOG_2PI - 0.5 * math.log(sr2 * sb2), -np.inf)
        best = ll.max(axis=1)
        out += np.where(np.isfinite(best), best, log_miss)


def mcl_scores(poses, map_xy, obs, obs_r, gate, log_miss):
    """Per-particle total log-likelihood of observations against a fixed map."""
    out = np.empty(poses.shape[0])
    if NUMBA_ENABLED:
        _mcl_scores_numba(poses, map_xy, obs, obs_r, gate, log_miss, out)
    else:
        _mcl_scores_numpy(poses, map_xy, obs, obs_r, gate, log_miss, out)
    return out


# ---------------------------------------------------------------------------
# single-linkage clustering (connected components at a distance threshold)

@njit(cache=True)
def _linkage_numba(pts, link2, labels):
    n = pts.shape[0]
    stack = np.empty(n, dtype=np.int64)
    label = 0
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        top = 0
        stack[top] = seed
        top += 1
        labels[seed] = label
        while top > 0:
            top -= 1
            i = stack[top]
            xi = pts[i, 0]
            yi = pts[i, 1]
            zi = pts[i, 2]
            for j in range(n):
                if labels[j] >= 0:
                    continue
                dx = pts[j, 0] - xi
                dy = pts[j, 1] - yi
                dz = pts[j, 2] - zi
                if dx * dx + dy * dy + dz * dz <= link2:
                    labels[j] = label
                    stack[top] = j
                    top += 1
        label += 1
    return label


def _linkage_numpy(pts, link2, labels):
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import connected_components

    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    n_comp, raw = connected_components(csr_matrix(d2 <= link2), directed=False)
    # canonicalize labels to first-occurrence order to match the loop backend
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty(n_comp, dtype=np.int64)
    remap[raw[np.sort(first)]] = np.arange(n_comp)
    labels[:] = remap[raw]
    return n_comp


def linkage_labels(pts: np.ndarray, link_dist: float) -> np.ndarray:
    """Label points by single-linkage clusters at threshold `link_dist`.

    Labels are consecutive integers in order of first point occurrence, so
    the result is a deterministic function of the input point order.
    """
    n = pts.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    link2 = float(link_dist) * float(link_dist)
    if NUMBA_ENABLED:
        _linkage_numba(np.ascontiguousarray(pts, dtype=np.float64), link2, labels)
    else:
        _linkage_numpy(np.asarray(pts, dtype=np.float64), link2, labels)
    return labels
