"""Command line entry points: gen-track, run, eval, plot.

Exit codes: 0 on success, 1 for configuration/validation errors, 2 when a
run fails at runtime (divergence or timeout).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .harness import RunLog, ScenarioError, load_scenario, run_scenario
from .report import emit_plots, evaluate
from .sim import Track, TrackGenerationError, generate_track

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coneslam",
        description="Cone-delimited circuit mapping and localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-track", help="generate a random closed track CSV")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--length", type=float, required=True, help="target length, m")
    p.add_argument("--width", type=float, default=3.5)
    p.add_argument("--cone-spacing", type=float, default=5.0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="run one scenario and write its log")
    p.add_argument("--config", type=Path, required=True, help="scenario TOML")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--mode", choices=("slam", "localization", "full"), default=None)
    p.add_argument("--laps", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", help="score a run log against its track")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--track", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="metrics JSON path")

    p = sub.add_parser("plot", help="render CSV/SVG artifacts from a run log")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _cmd_gen_track(args) -> int:
    try:
        track = generate_track(args.seed, args.length, args.width,
                               args.cone_spacing)
    except (ValueError, TrackGenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    track.save_csv(args.out)
    print(f"track: length {track.length:.1f} m, "
          f"{len(track.cones_left)} left + {len(track.cones_right)} right cones "
          f"-> {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        sc = load_scenario(args.config)
        run_kw = {}
        if args.seed is not None:
            run_kw["seed"] = args.seed
        if args.mode is not None:
            run_kw["mode"] = args.mode
        if args.laps is not None:
            if args.laps < 1:
                raise ScenarioError("--laps must be >= 1")
            run_kw["laps"] = args.laps
        if run_kw:
            sc = dataclasses.replace(sc, run=dataclasses.replace(sc.run, **run_kw))
    except (OSError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    args.out.mkdir(parents=True, exist_ok=True)
    log = run_scenario(sc)
    track_seed = sc.run.seed if sc.track.seed is None else sc.track.seed
    track = generate_track(track_seed, sc.track.length, sc.track.width,
                           sc.track.cone_spacing)
    track.save_csv(args.out / "track.csv")
    log.save(args.out / "runlog.jsonl")

    end = log.channel("end")[-1]["data"]
    print(f"run: mode {sc.run.mode}, seed {sc.run.seed}, "
          f"{end['laps']}/{sc.run.laps} laps, ended {end['reason']} "
          f"at t={end['t']:.1f} s -> {args.out}")
    if end["reason"] != "laps_completed":
        print(f"error: run ended with {end['reason']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_eval(args) -> int:
    try:
        log = RunLog.load(args.log)
        track = Track.load_csv(args.track)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        metrics = evaluate(log, track)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    metrics.save_json(args.out)
    print(f"eval: ate_rmse {metrics.ate_rmse:.3f} m, "
          f"landmark p/r {metrics.landmark_precision:.2f}/"
          f"{metrics.landmark_recall:.2f}, laps {metrics.laps_completed} "
          f"-> {args.out}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    try:
        log = RunLog.load(args.log)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    created = emit_plots(log, args.out)
    print(f"plot: wrote {len(created)} files -> {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; map onto the config error code
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    handlers = {
        "gen-track": _cmd_gen_track,
        "run": _cmd_run,
        "eval": _cmd_eval,
        "plot": _cmd_plot,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
