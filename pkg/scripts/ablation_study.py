"""Retrain the tangent with each loss term removed and compare failure-mode proxies.

Usage: python3 scripts/ablation_study.py --out runs/ablation [--quick] [--scenario concentric]
"""
import argparse
import logging
from pathlib import Path

from sgvf.config import RunConfig, dump_config
from sgvf.experiments import ablation_configs, ablation_proxies, fit_score, fit_tangent, held_out, scenario_data
from sgvf.sim import write_key_values

PROXIES = ("std_m_norm", "mean_abs_cos", "n_conflicting_pairs")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=2)
    ap.add_argument("--scenario", default="concentric")
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

    cloud, _ = scenario_data(cfg)
    held = held_out(cfg).points
    score, _ = fit_score(cfg, cloud)
    rows = {"baseline": ablation_proxies(fit_tangent(cfg, score, cloud)[2], held)}
    for name, variant in ablation_configs(cfg).items():
        rows[name] = ablation_proxies(fit_tangent(variant, score, cloud)[2], held)

    base = rows["baseline"]
    summary = {}
    print(f"{'variant':<10}" + "".join(f"{p:>22}" for p in PROXIES))
    for name, r in rows.items():
        print(f"{name:<10}" + "".join(f"{r[p]:>22.5g}" for p in PROXIES))
        summary.update({f"{name}.{k}": v for k, v in r.items()})
    summary["ratio.no_unit.std_m_norm"] = rows["no_unit"]["std_m_norm"] / max(base["std_m_norm"], 1e-12)
    summary["ratio.no_orth.mean_abs_cos"] = rows["no_orth"]["mean_abs_cos"] / max(base["mean_abs_cos"], 1e-12)
    write_key_values(summary, out / "ablation_summary.txt")


if __name__ == "__main__":
    main()
