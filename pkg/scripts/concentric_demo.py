"""Train score and tangent on two concentric rings, then run agents and report path metrics.

Usage: python3 scripts/concentric_demo.py --out runs/concentric [--quick] [--seed 2]
"""
import argparse
import logging
from pathlib import Path

from sgvf.config import RunConfig, dump_config
from sgvf.experiments import (default_starts, held_out, lyapunov_window_check, run_agents, run_pipeline,
                              score_oracle_agreement, tangent_geometry)
from sgvf.field import export_field_grid
from sgvf.sim import path_metrics, write_key_values, write_trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/concentric")
    ap.add_argument("--seed", type=int, default=2)
    ap.add_argument("--quick", action="store_true", help="short training for a smoke run")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = RunConfig(seed=args.seed, out=args.out)
    cfg.data.scenario = "concentric"
    if args.quick:
        cfg.score.iterations = cfg.tangent.iterations = 300
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    pipe = run_pipeline(cfg)
    mf, cloud = pipe.field, pipe.cloud
    summary = {"score_oracle_cos": score_oracle_agreement(pipe.score, cloud, cfg.field.t_eval)[0]}
    summary.update(tangent_geometry(mf, held_out(cfg).points))

    starts = default_starts("concentric")
    for i, traj in enumerate(run_agents(mf, starts, cfg)):
        write_trajectory(traj, out / f"trajectory_{i}.csv")
        pm = path_metrics(traj, cloud, center=(0.0, 0.0), branches=cloud.branches())
        summary.update(pm.as_dict(prefix=f"agent{i}."))
        summary[f"agent{i}.lyapunov_worst_excess"] = lyapunov_window_check(traj, mf, cloud).worst_excess

    lo, hi = cloud.points.min(0) - 1.0, cloud.points.max(0) + 1.0
    export_field_grid(mf, (lo[0], hi[0], lo[1], hi[1]), (41, 41), out / "mixed_field.csv")
    write_key_values(summary, out / "summary.txt")
    for k, v in summary.items():
        print(f"{k}={v}")


if __name__ == "__main__":
    main()
