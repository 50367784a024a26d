"""Compare shallow and deep tangent networks on a square path with sharp corners.

Usage: python3 scripts/corner_study.py --out runs/corners [--quick] [--scenario square]
"""
import argparse
import logging
from pathlib import Path

from sgvf.config import RunConfig, dump_config
from sgvf.experiments import default_starts, fit_score, fit_tangent, run_agents, scenario_data
from sgvf.sim import path_metrics, write_key_values, write_trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/corners")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenario", default="square", choices=["square", "hexagon"])
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = RunConfig(seed=args.seed, out=args.out)
    cfg.data.scenario = args.scenario
    if args.quick:
        cfg.score.iterations = cfg.tangent.iterations = 300
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    cloud, corners = scenario_data(cfg)
    score, _ = fit_score(cfg, cloud)
    starts = default_starts(cfg.data.scenario, cfg.data.circumradius)
    summary = {}
    for depth in ("shallow", "deep"):
        cfg.tangent.depth = depth
        mf = fit_tangent(cfg, score, cloud)[2]
        for i, traj in enumerate(run_agents(mf, starts, cfg)):
            write_trajectory(traj, out / f"{depth}_trajectory_{i}.csv")
            pm = path_metrics(traj, cloud, corners=corners)
            summary.update(pm.as_dict(prefix=f"{depth}.agent{i}."))
            print(f"{depth} agent{i}: swept={pm.angle_swept:.3f} stalls={len(pm.stall_events)} "
                  f"band={pm.mean_band_distance:.4f}")
    write_key_values(summary, out / "corner_summary.txt")


if __name__ == "__main__":
    main()
