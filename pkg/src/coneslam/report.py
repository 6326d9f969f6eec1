"""Post-run evaluation: trajectory/map metrics and plot artifacts.

`evaluate` joins truth and estimate channels on their timestamps, scores
the final map against the surveyed cones, and collects filter-consistency
and sensor-health statistics into a flat Metrics record. `emit_plots`
renders the log to CSV series plus a standalone SVG overview.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import wrap_angle
from .harness import RunLog
from .sim import Track

MATCH_RADIUS = 1.0          # map cone counts as found within this of a true cone


@dataclass(frozen=True)
class Metrics:
    ate_rmse: float
    ate_rmse_final_lap: float
    heading_rmse: float
    landmark_rmse: float
    landmark_precision: float
    landmark_recall: float
    n_map_cones: int
    mean_nees: float
    laps_completed: int
    loop_closure_time: Optional[float]
    duration: float
    diverged: bool
    end_reason: str
    rejection_rates: dict       # sensor kind -> rejected / evaluated

    def to_dict(self) -> dict:
        out = {
            "ate_rmse": self.ate_rmse,
            "ate_rmse_final_lap": self.ate_rmse_final_lap,
            "heading_rmse": self.heading_rmse,
            "landmark_rmse": self.landmark_rmse,
            "landmark_precision": self.landmark_precision,
            "landmark_recall": self.landmark_recall,
            "n_map_cones": self.n_map_cones,
            "mean_nees": self.mean_nees,
            "laps_completed": self.laps_completed,
            "loop_closure_time": self.loop_closure_time,
            "duration": self.duration,
            "diverged": self.diverged,
            "end_reason": self.end_reason,
        }
        for kind, rate in sorted(self.rejection_rates.items()):
            out[f"rejection_rate_{kind}"] = rate
        return out

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")


def match_cones(map_xy: np.ndarray, true_xy: np.ndarray,
                radius: float = MATCH_RADIUS):
    """Greedy one-to-one nearest matching within a radius.

    Returns (pairs, rmse) where pairs is a list of (map index, true index).
    Candidate pairs are taken closest-first; ties break on indices.
    """
    if len(map_xy) == 0 or len(true_xy) == 0:
        return [], float("nan")
    d = np.hypot(map_xy[:, 0, None] - true_xy[None, :, 0],
                 map_xy[:, 1, None] - true_xy[None, :, 1])
    cand = np.argwhere(d <= radius)
    order = sorted(range(len(cand)), key=lambda k: (d[tuple(cand[k])],
                                                    cand[k][0], cand[k][1]))
    used_m, used_t, pairs = set(), set(), []
    for k in order:
        i, j = map(int, cand[k])
        if i in used_m or j in used_t:
            continue
        used_m.add(i)
        used_t.add(j)
        pairs.append((i, j))
    if not pairs:
        return [], float("nan")
    err2 = [d[i, j] ** 2 for i, j in pairs]
    return pairs, math.sqrt(sum(err2) / len(pairs))


def _channel_series(log: RunLog, ch: str):
    return [(e["t"], e["data"]) for e in log.events if e["ch"] == ch]


def evaluate(log: RunLog, track: Track) -> Metrics:
    """Score one run log against the surveyed track."""
    truth = _channel_series(log, "truth")
    est = _channel_series(log, "estimate")
    if not truth:
        raise ValueError("log has no truth channel")
    if not est:
        raise ValueError("log has no estimate channel")
    truth_by_t = {t: d for t, d in truth}

    rows = []
    for t, d in est:
        g = truth_by_t.get(t)
        if g is None:
            continue
        x = d["x"]
        rows.append((t,
                     (x[0] - g["x"]) ** 2 + (x[1] - g["y"]) ** 2,
                     wrap_angle(x[2] - g["psi"]) ** 2,
                     d["nees"]))
    if not rows:
        raise ValueError("no timestamp-aligned truth/estimate pairs in log")
    times = np.array([r[0] for r in rows])
    pos2 = np.array([r[1] for r in rows])
    head2 = np.array([r[2] for r in rows])
    nees = np.array([r[3] for r in rows])

    laps = _channel_series(log, "lap")
    laps_completed = len(laps)
    if laps_completed >= 1:
        t_hi = laps[-1][0]
        t_lo = laps[-2][0] if laps_completed >= 2 else 0.0
        sel = (times > t_lo) & (times <= t_hi)
    else:
        sel = np.ones(len(times), dtype=bool)
    ate_final = float(np.sqrt(pos2[sel].mean())) if sel.any() else float("nan")

    maps = _channel_series(log, "map")
    if not maps:
        raise ValueError("log has no map channel")
    map_xy = np.array(maps[-1][1]["cones"], dtype=np.float64).reshape(-1, 2)
    pairs, lm_rmse = match_cones(map_xy, track.cones)
    precision = len(pairs) / len(map_xy) if len(map_xy) else 0.0
    recall = len(pairs) / len(track.cones) if len(track.cones) else 0.0

    closures = _channel_series(log, "loop_closure")
    ends = _channel_series(log, "end")
    end_reason = ends[-1][1]["reason"] if ends else "missing"
    healths = _channel_series(log, "health")
    diverged = bool(healths and healths[-1][1]["divergent"]) or end_reason == "diverged"
    rejection = {}
    if healths:
        for kind, s in healths[-1][1]["sensors"].items():
            rejection[kind] = (s["rejected"] / s["evaluated"]) if s["evaluated"] else 0.0

    ok = np.isfinite(nees)
    return Metrics(
        ate_rmse=float(np.sqrt(pos2.mean())),
        ate_rmse_final_lap=ate_final,
        heading_rmse=float(np.sqrt(head2.mean())),
        landmark_rmse=lm_rmse,
        landmark_precision=precision,
        landmark_recall=recall,
        n_map_cones=int(len(map_xy)),
        mean_nees=float(nees[ok].mean()) if ok.any() else float("nan"),
        laps_completed=laps_completed,
        loop_closure_time=closures[0][0] if closures else None,
        duration=float(times[-1]),
        diverged=diverged,
        end_reason=end_reason,
        rejection_rates=rejection,
    )


# ---------------------------------------------------------------------------
# plots

def _svg_polyline(pts, color: str, width: float) -> str:
    if len(pts) < 2:
        return ""
    coords = " ".join(f"{x:.3f},{-y:.3f}" for x, y in pts)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'points="{coords}"/>')


def _svg_circles(pts, color: str, r: float) -> str:
    return "".join(f'<circle cx="{x:.3f}" cy="{-y:.3f}" r="{r}" fill="{color}"/>'
                   for x, y in pts)


def emit_plots(log: RunLog, out_dir) -> list:
    """Write CSV series and a trajectory SVG; returns the created paths.

    SVG geometry is in data coordinates with y negated so north is up; the
    viewBox covers every plotted point with a margin.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    created = []

    truth = _channel_series(log, "truth")
    est = _channel_series(log, "estimate")
    truth_by_t = {t: d for t, d in truth}
    p = out / "trajectory.csv"
    with open(p, "w", encoding="utf-8") as f:
        f.write("t,est_x,est_y,est_psi,true_x,true_y,true_psi\n")
        for t, d in est:
            g = truth_by_t.get(t)
            if g is None:
                continue
            x = d["x"]
            # float() guards: in-memory logs may hold numpy scalars whose
            # repr is not plain digits
            f.write(f"{float(t)!r},{float(x[0])!r},{float(x[1])!r},"
                    f"{float(x[2])!r},{float(g['x'])!r},{float(g['y'])!r},"
                    f"{float(g['psi'])!r}\n")
    created.append(p)

    p = out / "nees.csv"
    with open(p, "w", encoding="utf-8") as f:
        f.write("t,nees\n")
        for t, d in est:
            f.write(f"{float(t)!r},{float(d['nees'])!r}\n")
    created.append(p)

    p = out / "health.csv"
    with open(p, "w", encoding="utf-8") as f:
        f.write("t,kind,status,evaluated,rejected\n")
        for t, d in _channel_series(log, "health"):
            for kind, s in sorted(d["sensors"].items()):
                f.write(f"{t!r},{kind},{s['status']},{s['evaluated']},"
                        f"{s['rejected']}\n")
    created.append(p)

    maps = _channel_series(log, "map")
    map_xy = (np.array(maps[-1][1]["cones"], dtype=np.float64).reshape(-1, 2)
              if maps else np.empty((0, 2)))
    tracks = _channel_series(log, "track")
    left = (np.array(tracks[0][1]["cones_left"], dtype=np.float64).reshape(-1, 2)
            if tracks else np.empty((0, 2)))
    right = (np.array(tracks[0][1]["cones_right"], dtype=np.float64).reshape(-1, 2)
             if tracks else np.empty((0, 2)))
    p = out / "map.csv"
    with open(p, "w", encoding="utf-8") as f:
        f.write("kind,x,y\n")
        for x, y in left:
            f.write(f"true_left,{float(x)!r},{float(y)!r}\n")
        for x, y in right:
            f.write(f"true_right,{float(x)!r},{float(y)!r}\n")
        for x, y in map_xy:
            f.write(f"map,{float(x)!r},{float(y)!r}\n")
    created.append(p)

    true_path = [(d["x"], d["y"]) for _, d in truth]
    est_path = [(d["x"][0], d["x"][1]) for _, d in est]
    clouds = [np.array(true_path).reshape(-1, 2), np.array(est_path).reshape(-1, 2),
              left, right, map_xy]
    pts = np.vstack([c for c in clouds if len(c)]) if any(len(c) for c in clouds) \
        else np.zeros((1, 2))
    flipped = np.column_stack([pts[:, 0], -pts[:, 1]])
    lo = flipped.min(axis=0) - 5.0
    hi = flipped.max(axis=0) + 5.0
    view = f"{lo[0]:.3f} {lo[1]:.3f} {hi[0] - lo[0]:.3f} {hi[1] - lo[1]:.3f}"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{view}" '
        f'width="900" height="900">',
        _svg_circles(left, "#2b6cb0", 0.35),
        _svg_circles(right, "#b7791f", 0.35),
        _svg_circles(map_xy, "#1a202c", 0.2),
        _svg_polyline(true_path, "#718096", 0.25),
        _svg_polyline(est_path, "#c53030", 0.25),
        "</svg>",
    ]
    p = out / "trajectory_map.svg"
    with open(p, "w", encoding="utf-8") as f:
        f.write("\n".join(s for s in parts if s))
        f.write("\n")
    created.append(p)
    return created
