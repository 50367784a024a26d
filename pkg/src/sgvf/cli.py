"""Command-line entry point: ``sgvf <command> [--config PATH] [--out DIR] [--seed N] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import RunConfig, dump_config, load_config
from .datasets import PointCloud, load_csv, save_csv
from .errors import ConfigError, FormatError, ShapeError, SGVFError, TrainingError
from .field import MixedField, diagnose, export_field_grid, write_diagnostics
from .nn import Checkpoint, load_checkpoint, save_checkpoint
from .score import NoiseSchedule, ScoreModel, oracle_mixture_score, sample_mixture, stein_residual
from .sim import path_metrics, write_key_values, write_trajectory
from .tangent import TangentModel, write_loss_csv

log = logging.getLogger("sgvf")

EXIT_CODES = {
    "error": 1,
    "config": 2,
    "missing_file": 3,
    "dimension": 4,
    "format": 5,
    "training": 6,
}


# ---------------------------------------------------------------- helpers

def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.set or ())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"seed={cfg.seed}")
    return out


def _require(path, what):
    if path is None:
        raise FileNotFoundError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _meta(cfg: RunConfig, kind, iterations):
    return {"kind": kind, "seed": cfg.seed, "iterations": iterations, "config_digest": cfg.digest()}


def _save_score(score: ScoreModel, cfg, path):
    sched = (score.schedule.sigma_min, score.schedule.sigma_max)
    save_checkpoint(Checkpoint(score.model, sched, _meta(cfg, "score", cfg.score.iterations)), path)


def _save_tangent(tangent: TangentModel, cfg, path):
    save_checkpoint(Checkpoint(tangent.model, None, _meta(cfg, "tangent", cfg.tangent.iterations)), path)


def _load_score(path) -> ScoreModel:
    ck = load_checkpoint(_require(path, "score-ckpt"))
    if ck.schedule is None:
        raise FormatError(f"{path} is not a score checkpoint (no schedule)")
    return ScoreModel(ck.model, NoiseSchedule(*ck.schedule))


def _load_tangent(path) -> TangentModel:
    return TangentModel(load_checkpoint(_require(path, "tangent-ckpt")).model)


def _load_waypoints(args, cfg) -> tuple[PointCloud, np.ndarray | None]:
    if getattr(args, "waypoints", None):
        cloud = load_csv(_require(args.waypoints, "waypoints"))
        corners = None
        cpath = Path(args.waypoints).with_name("corners.csv")
        if cpath.exists():
            corners = load_csv(cpath).points
        return cloud, corners
    return ex.scenario_data(cfg)


def _mixed(args, cfg, score=None, tangent=None) -> MixedField:
    score = score or _load_score(args.score_ckpt)
    tangent = tangent or _load_tangent(args.tangent_ckpt)
    if score.dim != tangent.model.out_dim:
        raise ShapeError("score and tangent checkpoints have different dimensions")
    return MixedField(score, tangent, cfg.tangent.k_s, cfg.field.t_eval)


def _bounds(cloud: PointCloud, margin):
    lo, hi = cloud.points.min(0) - margin, cloud.points.max(0) + margin
    return (lo[0], hi[0], lo[1], hi[1])


def _write_score_loss(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg):
    out = _prepare_out(cfg)
    cloud, corners = ex.scenario_data(cfg)
    save_csv(cloud, out / "waypoints.csv")
    if corners is not None:
        save_csv(PointCloud(corners, name="corners"), out / "corners.csv")
    print(f"wrote {len(cloud)} waypoints to {out / 'waypoints.csv'}")


def cmd_train_score(args, cfg):
    out = _prepare_out(cfg)
    cloud, _ = _load_waypoints(args, cfg)
    score, hist = ex.fit_score(cfg, cloud)
    _save_score(score, cfg, out / "score.ckpt")
    _write_score_loss(hist, out / "score_loss.csv")
    print(f"final loss (mean of last 100)={hist[-100:].mean():.6g}")


def cmd_train_tangent(args, cfg):
    out = _prepare_out(cfg)
    cloud, _ = _load_waypoints(args, cfg)
    score = _load_score(args.score_ckpt)
    if score.dim != cloud.dim:
        raise ShapeError(f"score model is {score.dim}-D but waypoints are {cloud.dim}-D")
    tangent, hist, _ = ex.fit_tangent(cfg, score, cloud)
    _save_tangent(tangent, cfg, out / "tangent.ckpt")
    write_loss_csv(hist, out / "tangent_loss.csv")
    print("final losses unit={:.4g} orth={:.4g} dir={:.4g}".format(*hist[-100:, :3].mean(0)))


def _simulate(mf, cloud, corners, cfg, out, starts):
    metrics = {}
    center = cloud.points.mean(axis=0)
    branches = cloud.branches() if cloud.n_branches > 1 else None
    for i, (x0, traj) in enumerate(zip(starts, ex.run_agents(mf, starts, cfg))):
        write_trajectory(traj, out / f"trajectory_{i}.csv")
        pm = path_metrics(traj, cloud, center, branches, corners, speed_threshold=cfg.sim.speed_threshold,
                          window=cfg.sim.window, corner_radius=cfg.sim.corner_radius)
        metrics.update(pm.as_dict(prefix=f"agent{i}."))
        metrics[f"agent{i}.start"] = f"{float(x0[0])!r},{float(x0[1])!r}"
        metrics[f"agent{i}.error"] = traj.error or "none"
    write_key_values(metrics, out / "metrics.txt")
    return metrics


def cmd_simulate(args, cfg):
    out = _prepare_out(cfg)
    cloud, corners = _load_waypoints(args, cfg)
    mf = _mixed(args, cfg)
    starts = ex.parse_points(cfg.sim.starts) if cfg.sim.starts else ex.default_starts(
        cfg.data.scenario, cfg.data.circumradius)
    metrics = _simulate(mf, cloud, corners, cfg, out, starts)
    for i in range(len(starts)):
        print(f"agent{i}: band_distance={metrics[f'agent{i}.mean_band_distance']:.4f} "
              f"angle_swept={metrics[f'agent{i}.angle_swept']:.3f}")


def cmd_export_field(args, cfg):
    out = _prepare_out(cfg)
    cloud, _ = _load_waypoints(args, cfg)
    mf = _mixed(args, cfg)
    bounds = _bounds(cloud, cfg.export.margin)
    res = (cfg.export.resolution, cfg.export.resolution)
    export_field_grid(mf.score, bounds, res, out / "score_field.csv")
    export_field_grid(mf.tangent, bounds, res, out / "tangent_field.csv")
    export_field_grid(mf, bounds, res, out / "mixed_field.csv")
    print(f"wrote 3 field grids of {res[0]}x{res[1]}")


def cmd_diagnose(args, cfg):
    out = _prepare_out(cfg)
    cloud, _ = _load_waypoints(args, cfg)
    mf = _mixed(args, cfg)
    rng = np.random.default_rng(cfg.module_seed("diagnostics"))
    sig = mf.sigma
    samples = sample_mixture(cloud, sig, cfg.diagnostics.n_samples, rng)
    res = cfg.diagnostics.scan_resolution
    report = diagnose(mf, cloud, samples, sig, scan_bounds=_bounds(cloud, cfg.export.margin),
                      scan_resolution=(res, res))
    write_diagnostics(report, out / "diagnostics.csv")

    summary = dict(report.summary)
    for k, sing in enumerate(report.singularities):
        summary[f"singularity{k}.centroid"] = f"{float(sing.centroid[0])!r},{float(sing.centroid[1])!r}"
        summary[f"singularity{k}.cells"] = sing.size
    stein_x = sample_mixture(cloud, sig, cfg.diagnostics.stein_samples, rng)
    bump_c = cloud.points[0]
    for name, fn in (("oracle", lambda X: oracle_mixture_score(cloud, sig, X)),
                     ("learned", lambda X: mf.score_model(X, mf.t_eval))):
        st = stein_residual(fn, stein_x, bump_c, cfg.diagnostics.bump_radius)
        summary[f"stein_{name}.norm"] = st.norm
        summary[f"stein_{name}.stderr"] = st.stderr
    write_key_values(summary, out / "diagnostics_summary.txt")
    print(f"mean |cos(s,v)|={summary['mean_abs_cos_sv']:.4f} singularities={len(report.singularities)}")


def cmd_ablate(args, cfg):
    out = _prepare_out(cfg)
    cloud, _ = _load_waypoints(args, cfg)
    if args.score_ckpt:
        score = _load_score(args.score_ckpt)
    else:
        score, hist = ex.fit_score(cfg, cloud)
        _save_score(score, cfg, out / "score.ckpt")
        _write_score_loss(hist, out / "score_loss.csv")
    held = ex.held_out(cfg).points

    tangent, hist, mf = ex.fit_tangent(cfg, score, cloud)
    _save_tangent(tangent, cfg, out / "baseline_tangent.ckpt")
    write_loss_csv(hist, out / "baseline_tangent_loss.csv")
    summary = {f"baseline.{k}": v for k, v in ex.ablation_proxies(mf, held).items()}

    for name, variant in ex.ablation_configs(cfg).items():
        vdir = out / name
        vdir.mkdir(exist_ok=True)
        (vdir / "config.txt").write_text(dump_config(variant))
        tangent, hist, mf = ex.fit_tangent(variant, score, cloud)
        _save_tangent(tangent, variant, vdir / "tangent.ckpt")
        write_loss_csv(hist, vdir / "tangent_loss.csv")
        proxies = ex.ablation_proxies(mf, held)
        write_key_values(proxies, vdir / "proxies.txt")
        summary.update({f"{name}.{k}": v for k, v in proxies.items()})
    write_key_values(summary, out / "ablation_summary.txt")
    for k in ("baseline", "no_unit", "no_orth", "no_dir"):
        print(f"{k}: std|m|={summary[f'{k}.std_m_norm']:.4f} mean|cos|={summary[f'{k}.mean_abs_cos']:.4f} "
              f"conflicting_pairs={summary[f'{k}.n_conflicting_pairs']}")


COMMANDS = {
    "gen": cmd_gen,
    "train-score": cmd_train_score,
    "train-tangent": cmd_train_tangent,
    "simulate": cmd_simulate,
    "export-field": cmd_export_field,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sgvf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name != "gen":
            p.add_argument("--waypoints", default=None, help="waypoint CSV (default: regenerate scenario)")
        if name in ("train-tangent", "simulate", "export-field", "diagnose", "ablate"):
            p.add_argument("--score-ckpt", default=None)
        if name in ("simulate", "export-field", "diagnose"):
            p.add_argument("--tangent-ckpt", default=None)
    return parser


def _fail(kind, exc):
    msg = str(exc).replace('"', "'").replace("\n", " ")
    print(f'error kind={kind} code={EXIT_CODES[kind]} message="{msg}"', file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("config", exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc)
    except ShapeError as exc:
        return _fail("dimension", exc)
    except FormatError as exc:
        return _fail("format", exc)
    except TrainingError as exc:
        return _fail("training", exc)
    except SGVFError as exc:
        return _fail("error", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
