"""Command line: ``delayvio simulate | run | evaluate``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path


from .evaluation import (
    evaluate_trajectory,
    failed_result,
    median_row,
    read_tum,
    write_cumulative_csv,
    write_json,
    write_results_csv,
    write_tum,
)
from .harness import pgba_accuracy
from .pipeline import PipelineConfig, run_frontend
from .simulation import ConfigError, SimConfig, SyntheticFrontend, read_imu_csv, simulate, write_simulation

log = logging.getLogger("delayvio")


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def cmd_simulate(args) -> int:
    data = _load_json(args.config)
    cfg = SimConfig.from_dict(data.get("simulation", data))
    if args.seed is not None:
        cfg.seed = args.seed
    sim = simulate(cfg)
    write_simulation(sim, args.out)
    print(f"wrote {len(sim.imu)} IMU samples and {len(sim.keyframe_times)} keyframes to {args.out}")
    return 0


def _write_timeline(path: Path, rows) -> None:
    fields = [f.name for f in dataclasses.fields(rows[0])] if rows else ["frame"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(dataclasses.asdict(r))


def cmd_run(args) -> int:
    inp = Path(args.input)
    sim_path = inp / "simulation.json"
    if not sim_path.exists():
        raise ConfigError(f"{sim_path} not found (create it with 'delayvio simulate')")
    sim_cfg = SimConfig.from_dict(json.loads(sim_path.read_text()))
    data = _load_json(args.config)
    pcfg = PipelineConfig.from_dict(data.get("pipeline", data))
    if args.threaded:
        pcfg.threaded = True
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summaries = [], []
    for i in range(args.runs):
        seed = sim_cfg.seed + i
        cfg_i = dataclasses.replace(sim_cfg, seed=seed)
        sim = simulate(cfg_i)
        imu = sim.imu
        if i == 0 and (inp / "imu.csv").exists():
            imu = read_imu_csv(inp / "imu.csv")
        frontend = SyntheticFrontend(sim, lam=pcfg.photometric_lambda)
        res = run_frontend(frontend, pcfg, imu, sim.T_ci, sim.camera, args.max_frames)
        pipe = res.pipeline
        run_dir = out / f"run_{i:03d}"
        run_dir.mkdir(exist_ok=True)
        _write_timeline(run_dir / "timeline.csv", pipe.timeline)
        n = res.frames_processed
        if res.lost or n < 3:
            ev = failed_result(seed)
        else:
            if pipe.initialized:
                t, poses = pipe.metric_trajectory()
                gt = sim.T_wi
            else:
                t, poses = pipe.visual_trajectory()
                gt = sim.T_wc
            write_tum(run_dir / "trajectory.txt", t, poses)
            write_tum(run_dir / "groundtruth.txt", sim.keyframe_times[:n], gt[:n])
            ev = evaluate_trajectory(t, poses, sim.keyframe_times[:n], gt[:n], seed)
        rows.append(ev)
        summary = {
            "seed": seed,
            "frames": n,
            "lost": res.lost,
            "phase": pipe.phase.value,
            "scale": pipe.scale,
            "metrics": ev.row(),
            "initializer": [dataclasses.asdict(pgba_accuracy(sim, r)) for r in pipe.pgba_results],
            "timing": pipe.timing,
            "seconds": res.seconds,
        }
        summaries.append(summary)
        write_json(run_dir / "metrics.json", summary)
        print(f"run {i} seed {seed}: phase={pipe.phase.value} rmse={ev.rmse_ate:.4f} m "
              f"scale_error={ev.scale_error:.3f}% drift={ev.drift:.3f}%")
    write_results_csv(out / "results.csv", rows)
    write_cumulative_csv(out / "cumulative.csv", rows)
    write_json(out / "summary.json", {"runs": summaries, "median": median_row(rows)})
    med = median_row(rows)
    print(f"median: rmse={med['rmse_ate']:.4f} m scale_error={med['scale_error']:.3f}% "
          f"drift={med['drift']:.3f}%")
    return 1 if all(r.lost for r in rows) else 0


def cmd_evaluate(args) -> int:
    t_est, p_est = read_tum(args.est)
    t_gt, p_gt = read_tum(args.gt)
    ev = evaluate_trajectory(t_est, p_est, t_gt, p_gt, max_dt=args.max_dt)
    result = ev.row()
    if args.json:
        write_json(args.json, result)
    print(json.dumps({k: v for k, v in result.items() if k not in ("seed", "lost")}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delayvio", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate IMU data and ground truth")
    p.add_argument("--config", help="simulation config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the estimator on a simulated sequence")
    p.add_argument("--input", required=True, help="directory written by 'simulate'")
    p.add_argument("--config", help="pipeline config (JSON)")
    p.add_argument("--runs", type=int, default=1, help="number of seeds (seed, seed+1, ...)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-frames", type=int, help="stop after this many keyframes")
    p.add_argument("--threaded", action="store_true", help="run the initializer in a thread")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score a TUM trajectory against ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--max-dt", type=float, default=1e-3, help="timestamp matching tolerance (s)")
    p.add_argument("--json", help="also write metrics to this file")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
