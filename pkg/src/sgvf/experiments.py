"""End-to-end runs shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .config import RunConfig
from .datasets import PointCloud, make_scenario
from .errors import ConfigError
from .field import MixedField, cosine_error, lyapunov_value
from .score import ScoreModel, oracle_mixture_score, train_score
from .sim import Trajectory, integrate
from .tangent import TangentModel, train_tangent

log = logging.getLogger(__name__)


@dataclass
class Pipeline:
    cloud: PointCloud
    corners: np.ndarray | None
    score: ScoreModel
    score_history: np.ndarray
    tangent: TangentModel
    tangent_history: np.ndarray
    field: MixedField


def scenario_data(cfg: RunConfig, seed_offset=0):
    d = cfg.data
    return make_scenario(d.scenario, d.n_per_branch, d.jitter_sigma, cfg.module_seed("data") + seed_offset,
                         d.circumradius)


def held_out(cfg: RunConfig) -> PointCloud:
    """Fresh on-path samples from the same scenario generator under another seed."""
    return scenario_data(cfg, seed_offset=10_000)[0]


def fit_score(cfg: RunConfig, cloud):
    return train_score(cloud, cfg.score_config(), cfg.noise_schedule())


def fit_tangent(cfg: RunConfig, score: ScoreModel, cloud):
    tangent, hist = train_tangent(score, cloud, cfg.tangent_config())
    mf = MixedField(score, tangent, cfg.tangent.k_s, cfg.field.t_eval)
    return tangent, hist, mf


def run_pipeline(cfg: RunConfig, score=None) -> Pipeline:
    cloud, corners = scenario_data(cfg)
    score_hist = np.empty(0)
    if score is None:
        log.info("training score on %s (%d points)", cloud.name, len(cloud))
        score, score_hist = fit_score(cfg, cloud)
    log.info("training tangent (%s)", cfg.tangent.depth)
    tangent, tan_hist, mf = fit_tangent(cfg, score, cloud)
    return Pipeline(cloud, corners, score, score_hist, tangent, tan_hist, mf)


# ---------------------------------------------------------------- agents

def _polar(center, r, angle):
    return np.asarray(center, float) + r * np.array([np.cos(angle), np.sin(angle)])


def default_starts(scenario, circumradius=1.5):
    """Start points: one inside and one outside each path band."""
    if scenario == "concentric":
        return [_polar((0, 0), 0.6, 0.3), _polar((0, 0), 1.3, 2.0), _polar((0, 0), 1.7, 3.5), _polar((0, 0), 2.4, 5.0)]
    if scenario == "separated":
        return [_polar((-1.75, 0), 0.5, 0.5), _polar((-1.75, 0), 1.4, 2.5),
                _polar((1.75, 0), 0.5, 3.6), _polar((1.75, 0), 1.4, 0.5)]
    if scenario == "circle":
        return [_polar((0, 0), 0.5, 0.3), _polar((0, 0), 1.5, 3.5)]
    if scenario in ("square", "hexagon"):
        return [_polar((0, 0), 0.4 * circumradius, 0.2), _polar((0, 0), 1.4 * circumradius, 3.3)]
    raise ConfigError(f"no default starts for {scenario!r}")


def parse_points(text):
    """``"x,y;x,y"`` -> list of arrays."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            try:
                x, y = (float(c) for c in chunk.split(","))
            except ValueError:
                raise ConfigError(f"expected x,y but got {chunk!r}") from None
            out.append(np.array([x, y]))
    return out


def parse_teleports(text):
    out = {}
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            step, _, xy = chunk.partition(":")
            pts = parse_points(xy)
            if not step.strip().isdigit() or len(pts) != 1:
                raise ConfigError(f"expected step:x,y but got {chunk!r}")
            out[int(step)] = pts[0]
    return out


def run_agents(mf: MixedField, starts, cfg: RunConfig) -> list[Trajectory]:
    teleports = parse_teleports(cfg.sim.teleport)
    return [integrate(mf, x0, cfg.sim.dt, cfg.sim.steps, cfg.sim.method, teleports=teleports) for x0 in starts]


# ---------------------------------------------------------------- ablation proxies

def ablation_proxies(mf: MixedField, points, pair_radius=0.1) -> dict:
    """Failure-mode proxies on on-path samples.

    ``std_m_norm`` (magnitude control), ``mean_abs_cos`` (score/tangent
    orthogonality) and ``n_conflicting_pairs``: pairs closer than
    ``pair_radius`` whose tangent vectors point in opposing directions.
    """
    X = np.asarray(points, float)
    s, v, m = mf.components(X)
    pairs = np.array(sorted(cKDTree(X).query_pairs(pair_radius)), dtype=int).reshape(-1, 2)
    n_conf, worst = 0, 1.0
    if len(pairs):
        a, b = v[pairs[:, 0]], v[pairs[:, 1]]
        cos = (a * b).sum(1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
        n_conf, worst = int((cos < 0).sum()), float(cos.min())
    return {
        "std_m_norm": float(np.linalg.norm(m, axis=1).std()),
        "mean_m_norm": float(np.linalg.norm(m, axis=1).mean()),
        "mean_abs_cos": float(cosine_error(s, v).mean()),
        "n_conflicting_pairs": n_conf,
        "min_pair_cos": worst,
        "n_pairs": int(len(pairs)),
    }


def tangent_geometry(mf: MixedField, points) -> dict:
    """Held-out orthogonality and unit-length errors."""
    s, v, m = mf.components(np.asarray(points, float))
    cos = cosine_error(s, v)
    return {"mean_loss_orth": float((cos ** 2).mean()),
            "mean_unit_error": float(np.abs(np.linalg.norm(m, axis=1) - 1.0).mean())}


def ablation_configs(cfg: RunConfig) -> dict:
    """The three single-term-removed variants of ``cfg``."""
    out = {}
    for name, flag in (("no_unit", "disable_unit"), ("no_orth", "disable_orth"), ("no_dir", "disable_dir")):
        variant = replace(cfg, ablation=replace(cfg.ablation, **{flag: True}))
        out[name] = variant
    return out


# ---------------------------------------------------------------- Lyapunov along trajectories

@dataclass
class LyapunovWindowCheck:
    V: np.ndarray
    increase: np.ndarray  # V[i + w] - V[i]
    slack: np.ndarray  # 3 x integrated residual over the window
    residual: np.ndarray  # per-state eps |v| |grad log p|^2

    @property
    def worst_excess(self) -> float:
        return float((self.increase - self.slack).max()) if len(self.increase) else -np.inf

    @property
    def ok(self) -> bool:
        return self.worst_excess <= 0.0


def lyapunov_window_check(traj: Trajectory, mf: MixedField, waypoints, window=100, factor=3.0,
                          sigma_value=None) -> LyapunovWindowCheck:
    """V along the trajectory vs the soft-orthogonality residual.

    V uses the analytic mixture density; the residual per state is
    ``eps |v| |g|^2`` with ``g`` the analytic score and ``eps`` its cosine
    with the learned tangent. A window passes when the rise of V over it is
    at most ``factor`` times the time-integrated residual.
    """
    sig = mf.sigma if sigma_value is None else sigma_value
    X = traj.x
    V = lyapunov_value(waypoints, sig, X)
    g = oracle_mixture_score(waypoints, sig, X)
    v = mf.tangent(X)
    res = cosine_error(g, v) * np.linalg.norm(v, axis=1) * (g * g).sum(1)
    n = len(X) - window
    if n <= 0:
        return LyapunovWindowCheck(V, np.empty(0), np.empty(0), res)
    csum = np.concatenate([[0.0], np.cumsum(res)])
    integ = traj.dt * (csum[window:window + n] - csum[:n])
    return LyapunovWindowCheck(V, V[window:] - V[:n], factor * integ, res)


def score_oracle_agreement(score: ScoreModel, cloud, t_eval=1.0, resolution=41, margin=1.0):
    """Mean cosine between learned and analytic scores on the inflated bounding-box grid."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    lo, hi = pts.min(0) - margin, pts.max(0) + margin
    X, Y = np.meshgrid(np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution))
    G = np.column_stack([X.ravel(), Y.ravel()])
    S = score(G, t_eval)
    O = oracle_mixture_score(pts, float(score.schedule(t_eval)), G)
    on = np.linalg.norm(O, axis=1)
    mask = on > 0.1 * np.median(on)
    cos = (S * O).sum(1) / np.maximum(np.linalg.norm(S, axis=1) * on, 1e-300)
    return float(cos[mask].mean()), int(mask.sum())

