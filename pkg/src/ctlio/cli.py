"""Command-line interface: run, simulate, eval, export-map, inspect.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    CtlioError,
    InsufficientOverlapError,
    ParseError,
    PipelineError,
    RejectedSampleError,
    StreamOrderError,
)
from .geometry import StampedPointCloud, UnitQuaternion
from .imu import StateVector
from .io import (
    TrajectoryRecord,
    evaluate_ate,
    export_map,
    export_trajectory,
    merged_stream,
    read_imu_log,
    read_scan_log,
    read_tum,
    write_imu_log,
    write_scan_log,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PIPELINE = 0, 1, 2, 3
METRICS_SCHEMA_VERSION = 1

log = logging.getLogger("ctlio")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}", EXIT_DATA)
    return p


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


# ---------------------------------------------------------------------------
# state files


def state_to_dict(st: StateVector) -> dict:
    return {"t": st.t, "p": st.p.tolist(), "q_wxyz": st.q.array.tolist(), "v": st.v.tolist(),
            "b_a": st.b_a.tolist(), "b_w": st.b_w.tolist()}


def state_from_dict(d: dict) -> StateVector:
    try:
        return StateVector(np.asarray(d["p"], float), UnitQuaternion.from_array(d["q_wxyz"]),
                           np.asarray(d.get("v", [0, 0, 0]), float), np.asarray(d.get("b_a", [0, 0, 0]), float),
                           np.asarray(d.get("b_w", [0, 0, 0]), float), float(d["t"]))
    except (KeyError, TypeError, ValueError) as err:
        raise CliError(f"invalid initial state: {err}", EXIT_DATA) from err


# ---------------------------------------------------------------------------
# run


def _metrics(pipe, config: PipelineConfig, n_scans: int) -> dict:
    scans = []
    for r in pipe.records:
        scans.append({
            "index": r.index,
            "t": r.t,
            "duration_s": r.duration,
            "keyframe": r.keyframe,
            "reasons": list(r.reasons),
            "degeneracy": _finite(r.degeneracy),
            "sparsity": _finite(r.sparsity),
            "spaciousness": _finite(r.spaciousness),
            "correspondences": r.correspondences,
            "fitness": _finite(r.fitness),
            "submap": list(r.submap),
            "skipped": r.skipped,
        })
    durations = [r.duration for r in pipe.records]
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "tool_version": __version__,
        "summary": {
            "scans_read": n_scans,
            "scans_processed": len(pipe.records),
            "scans_skipped": sum(r.skipped is not None for r in pipe.records),
            "keyframes": len(pipe.loop.keyframes),
            "map_updates": len(pipe.map_updates),
            "mean_scan_time_s": float(np.mean(durations)) if durations else None,
            "max_scan_time_s": float(np.max(durations)) if durations else None,
        },
        "keyframes": [{"id": r.keyframe, "scan": r.index, "reasons": list(r.reasons)}
                      for r in pipe.records if r.keyframe is not None],
        "degeneracy": [_finite(r.degeneracy) for r in pipe.records],
        "scans": scans,
        "config": config.to_dict(),
    }


def cmd_run(args) -> int:
    from .pipeline import Pipeline

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.no_loop_closure:
        cfg = cfg.replace(mapping={"loop_closure": False})
    scan_path, imu_path = _need_file(args.scans), _need_file(args.imu)
    init = None
    if args.initial_state:
        init = state_from_dict(json.loads(_need_file(args.initial_state).read_text()))
    scans = list(read_scan_log(scan_path))
    imu = list(read_imu_log(imu_path))
    if not scans:
        raise CliError(f"{scan_path}: no scans", EXIT_DATA)
    if not imu:
        raise CliError(f"{imu_path}: no IMU samples", EXIT_DATA)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with Pipeline(cfg, initial_state=init, single_thread=args.single_thread or None) as pipe:
        for kind, obj in merged_stream(scans, imu):
            if kind == "imu":
                pipe.on_imu(obj)
            else:
                pipe.on_scan(obj)
        pipe.finish()

    times, poses = pipe.trajectory("map")
    export_trajectory(TrajectoryRecord.from_poses(times, poses), out / "trajectory.tum")
    ids, kposes, body = pipe.keyframe_clouds("map")
    kf_times = {r.keyframe: r.t for r in pipe.records if r.keyframe is not None}
    export_trajectory(TrajectoryRecord.from_poses([kf_times[k] for k in ids], kposes), out / "keyframes.tum")
    clouds = [StampedPointCloud(T.apply(b), frame="world") for T, b in zip(kposes, body)]
    export_map(clouds, out / "map.xyz", leaf=args.map_leaf)
    np.savez_compressed(out / "keyframe_clouds.npz", ids=np.asarray(ids),
                        **{f"kf_{k}": b.astype(np.float32) for k, b in zip(ids, body)})
    (out / "metrics.json").write_text(json.dumps(_metrics(pipe, cfg, len(scans)), indent=1))
    print(f"processed {len(pipe.records)} scans, {len(ids)} keyframes -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    from .sim.scenarios import generate, scenario_names

    if args.scenario not in scenario_names():
        raise CliError(f"unknown scenario {args.scenario!r}; presets: {', '.join(scenario_names())}", EXIT_CONFIG)
    data = generate(args.scenario, args.seed, duration=args.duration, scan_limit=args.scans)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scan_log(out / "scans.bin", [s.cloud for s in data.scans])
    write_imu_log(out / "imu.csv", data.imu)
    export_trajectory(data.truth, out / "truth.tum")
    (out / "initial_state.json").write_text(json.dumps(state_to_dict(data.initial_state), indent=1))
    lid, imu = data.spec.lidar, data.spec.imu
    meta = {
        "scenario": args.scenario,
        "seed": args.seed,
        "scans": len(data.scans),
        "imu_samples": len(data.imu),
        "world": data.world.name,
        "lidar": {"channels": lid.channels, "columns": lid.columns, "spin_rate": lid.spin_rate,
                  "vertical_fov": list(lid.vertical_fov), "max_range": lid.max_range, "range_noise": lid.range_noise},
        "imu": {"rate": imu.rate, "accel_noise": imu.accel_noise, "gyro_noise": imu.gyro_noise},
    }
    (out / "scenario.json").write_text(json.dumps(meta, indent=1))
    print(f"{args.scenario}: {len(data.scans)} scans, {len(data.imu)} IMU samples -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval, export-map, inspect


def cmd_eval(args) -> int:
    est = read_tum(_need_file(args.estimate))
    ref = read_tum(_need_file(args.truth))
    try:
        res = evaluate_ate(est, ref, args.max_dt)
    except InsufficientOverlapError as err:
        raise CliError(f"association failed: {err}", EXIT_DATA) from err
    print(json.dumps(res))
    return EXIT_OK


def cmd_export_map(args) -> int:
    run = Path(args.run)
    kfs = read_tum(_need_file(run / "keyframes.tum"))
    store = np.load(_need_file(run / "keyframe_clouds.npz"))
    ids = store["ids"].tolist()
    if len(ids) != len(kfs):
        raise CliError(f"{run}: {len(ids)} keyframe clouds but {len(kfs)} keyframe poses", EXIT_DATA)
    clouds = [StampedPointCloud(T.apply(store[f"kf_{k}"].astype(float)), frame="world")
              for k, T in zip(ids, kfs.poses())]
    pts = export_map(clouds, args.out, leaf=args.leaf)
    print(f"{len(pts)} points -> {args.out}")
    return EXIT_OK


def _inspect(path: Path) -> dict:
    head = path.read_bytes()[:64]
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return {"kind": "json", "keys": sorted(d), "schema_version": d.get("schema_version"),
                "summary": d.get("summary")}
    if path.suffix == ".bin" or b"\0" in head:
        scans = list(read_scan_log(path))
        n = [len(s) for s in scans]
        return {"kind": "scan-log", "scans": len(scans), "points_min": min(n, default=0),
                "points_max": max(n, default=0), "t_first": scans[0].t_start if scans else None,
                "t_last": scans[-1].t_end if scans else None}
    text = path.read_text()
    if text.lstrip().startswith("t,") or path.suffix == ".csv":
        imu = list(read_imu_log(path))
        t = np.array([s.t for s in imu])
        rate = float(1.0 / np.median(np.diff(t))) if len(t) > 1 else None
        return {"kind": "imu-log", "samples": len(imu), "t_first": _first(t), "t_last": _last(t), "rate_hz": rate}
    tr = read_tum(path)
    steps = np.linalg.norm(np.diff(tr.p, axis=0), axis=1) if len(tr) > 1 else np.zeros(0)
    return {"kind": "tum", "poses": len(tr), "t_first": _first(tr.t), "t_last": _last(tr.t),
            "path_length": float(steps.sum())}


def _first(a):
    return float(a[0]) if len(a) else None


def _last(a):
    return float(a[-1]) if len(a) else None


def cmd_inspect(args) -> int:
    print(json.dumps(_inspect(_need_file(args.path)), indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctlio", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline on scan and IMU logs")
    p.add_argument("--scans", required=True, help="binary scan log")
    p.add_argument("--imu", required=True, help="IMU CSV log")
    p.add_argument("--config", help="YAML configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--single-thread", action="store_true", help="run submap building and mapping inline")
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--initial-state", help="JSON state at the first scan start (default: at rest, gravity-aligned)")
    p.add_argument("--map-leaf", type=float, default=0.1, help="voxel leaf for map.xyz (m)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="generate logs and ground truth from a scenario preset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int, help="stop after this many scans")
    p.add_argument("--duration", type=float, help="simulated seconds (default: the whole preset)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="absolute trajectory error after rigid alignment")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--max-dt", type=float, default=0.02, help="timestamp association window (s)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-map", help="re-export a run's map from its keyframes")
    p.add_argument("--run", required=True, help="output directory of a previous run")
    p.add_argument("--out", required=True)
    p.add_argument("--leaf", type=float, default=0.1)
    p.set_defaults(func=cmd_export_map)

    p = sub.add_parser("inspect", help="summarise a scan log, IMU log, TUM file or metrics.json")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as err:
        where = f"scan {err.scan_index}" if err.scan_index is not None else "pipeline"
        print(f"pipeline failure at {where} ({err.stage}): {err}", file=sys.stderr)
        return EXIT_PIPELINE
    except (ParseError, StreamOrderError, RejectedSampleError, OSError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except CtlioError as err:
        print(f"pipeline failure: {err}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
