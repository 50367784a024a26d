"""Kinematic agents integrating ``x' = m(x)`` and path-following metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datasets import as_points
from .errors import ConfigError, DegenerateGeometryError


@dataclass
class Trajectory:
    t: np.ndarray  # (n,)
    x: np.ndarray  # (n, 2)
    m: np.ndarray  # (n, 2) field value at each state
    s_norm: np.ndarray  # (n,) score-component norm at each state (nan if unknown)
    dt: float
    method: str
    error: str | None = None

    def __len__(self):
        return len(self.t)

    @property
    def speed(self):
        return np.linalg.norm(self.m, axis=1)

    def tail(self, fraction):
        """Slice covering the final ``fraction`` of states."""
        n = len(self)
        return slice(n - max(1, int(round(fraction * n))), n)


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(field_fn, x0, dt=0.01, steps=5000, method="rk4", score_fn=None, teleports=None):
    """Integrate one agent. Returns a :class:`Trajectory` with ``steps + 1`` states.

    ``score_fn`` supplies the score component for the ``s_norm`` record; when
    omitted, ``field_fn.score`` is used if present. ``teleports`` maps a step
    index to a position the agent is moved to before that step (scripted
    branch switching). A non-finite state ends integration early with
    ``error`` set.
    """
    if dt <= 0 or steps < 1:
        raise ConfigError("need dt > 0 and steps >= 1")
    if method not in ("euler", "rk4"):
        raise ConfigError(f"unknown integrator {method!r}")
    if score_fn is None:
        score_fn = getattr(field_fn, "score", None)
    teleports = dict(teleports or {})

    def f(p):
        return np.asarray(field_fn(p[None, :]), dtype=np.float64)[0]

    x = np.asarray(x0, dtype=np.float64).copy()
    xs, ms = [x], [f(x)]
    error = None
    for n in range(steps):
        if n in teleports:
            x = np.asarray(teleports[n], dtype=np.float64).copy()
            xs[-1], ms[-1] = x, f(x)
        x = x + dt * ms[-1] if method == "euler" else _rk4(f, x, dt)
        if not np.all(np.isfinite(x)):
            error = f"non-finite state at step {n + 1}"
            break
        m = f(x)
        if not np.all(np.isfinite(m)):
            error = f"non-finite field value at step {n + 1}"
            break
        xs.append(x)
        ms.append(m)
    X, M = np.array(xs), np.array(ms)
    if score_fn is not None:
        s_norm = np.linalg.norm(np.asarray(score_fn(X), dtype=np.float64), axis=1)
    else:
        s_norm = np.full(len(X), np.nan)
    return Trajectory(dt * np.arange(len(X)), X, M, s_norm, dt, method, error)


def distance_to_waypoints(x, waypoints):
    """Minimum Euclidean distance from each point of ``x`` to the waypoint set."""
    pts = as_points(waypoints)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    out = np.empty(len(X))
    step = max(1, 2 ** 20 // len(pts))
    for a in range(0, len(X), step):
        diff = X[a:a + step, None, :] - pts[None, :, :]
        out[a:a + step] = np.sqrt((diff * diff).sum(-1).min(axis=1))
    return out[0] if single else out


def angle_swept(traj, center=(0.0, 0.0)):
    """Signed total angle (radians) traced around ``center``."""
    X = traj.x if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if len(X) < 2:
        raise ConfigError("need at least two states")
    d = X - np.asarray(center, dtype=np.float64)
    if np.any(np.all(d == 0.0, axis=1)):
        raise DegenerateGeometryError("a state coincides with the centre")
    ang = np.arctan2(d[:, 1], d[:, 0])
    inc = np.diff(ang)
    # wrap each increment into (-pi, pi]
    inc = np.pi - np.mod(np.pi - inc, 2.0 * np.pi)
    return float(inc.sum())


class BranchAssignment(NamedTuple):
    branch_id: int | None
    adherence: float
    ambiguous: bool


def assign_branch(traj, branch_waypoint_sets, ambiguous_below=0.8) -> BranchAssignment:
    X = traj.x if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if len(branch_waypoint_sets) < 1:
        raise ConfigError("need at least one branch")
    late = X[len(X) // 2:]
    if len(late) == 0:
        return BranchAssignment(None, 0.0, True)
    dists = np.column_stack([distance_to_waypoints(late, b) for b in branch_waypoint_sets])
    nearest = dists.argmin(axis=1)
    counts = np.bincount(nearest, minlength=len(branch_waypoint_sets))
    bid = int(counts.argmax())
    adherence = float(counts[bid] / len(late))
    return BranchAssignment(bid, adherence, adherence < ambiguous_below)


class StallEvent(NamedTuple):
    start: int
    length: int


def detect_stalls(traj, corners, speed_threshold=0.1, window=100, corner_radius=0.15):
    """Maximal runs of ``>= window`` states that are slow and near a corner."""
    if window < 2:
        raise ConfigError("window must be >= 2")
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if len(corners) == 0:
        return []
    near = distance_to_waypoints(traj.x, corners) < corner_radius
    flag = (traj.speed < speed_threshold) & near
    events = []
    start = None
    for i, f in enumerate(np.append(flag, False)):
        if f and start is None:
            start = i
        elif not f and start is not None:
            if i - start >= window:
                events.append(StallEvent(start, i - start))
            start = None
    return events


@dataclass
class PathMetrics:
    final_distance: float
    mean_band_distance: float
    angle_swept: float
    stall_events: list = field(default_factory=list)
    branch_id: int | None = None
    adherence: float | None = None

    def as_dict(self, prefix=""):
        out = {
            "final_distance": self.final_distance,
            "mean_band_distance": self.mean_band_distance,
            "angle_swept": self.angle_swept,
            "n_stalls": len(self.stall_events),
            "stall_events": ";".join(f"{e.start}:{e.length}" for e in self.stall_events),
            "branch_id": "none" if self.branch_id is None else self.branch_id,
            "adherence": "none" if self.adherence is None else self.adherence,
        }
        return {prefix + k: v for k, v in out.items()}


def path_metrics(traj, waypoints, center=None, branches=None, corners=None, band_fraction=0.2,
                 speed_threshold=0.1, window=100, corner_radius=0.15) -> PathMetrics:
    """Summary metrics; ``mean_band_distance`` averages over the final ``band_fraction``."""
    d = distance_to_waypoints(traj.x, waypoints)
    if center is None:
        center = as_points(waypoints).mean(axis=0)
    swept = angle_swept(traj, center)
    stalls = detect_stalls(traj, corners, speed_threshold, window, corner_radius) if corners is not None else []
    bid = adh = None
    if branches is not None:
        bid, adh, _ = assign_branch(traj, branches)
    return PathMetrics(float(d[-1]), float(d[traj.tail(band_fraction)].mean()), swept, stalls, bid, adh)


TRAJ_HEADER = ["t", "x", "y", "ux", "uy", "s_norm"]


def write_trajectory(traj: Trajectory, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_HEADER)
        for i in range(len(traj)):
            w.writerow([repr(float(traj.t[i])), repr(float(traj.x[i, 0])), repr(float(traj.x[i, 1])),
                        repr(float(traj.m[i, 0])), repr(float(traj.m[i, 1])), repr(float(traj.s_norm[i]))])


def write_key_values(values: dict, path):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v}\n")


def read_key_values(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out
