"""Mixed guiding field, Lyapunov diagnostics, singularity scan and grid export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datasets import as_points
from .errors import ConfigError, FormatError, ShapeError
from .score import NORM_FLOOR, ScoreModel, mixture_log_density, normalize_score, oracle_mixture_score
from .tangent import TangentModel


@dataclass
class MixedField:
    score_model: ScoreModel
    tangent_model: TangentModel
    k_s: float = 0.2
    t_eval: float = 1.0

    def __post_init__(self):
        if self.score_model.dim != self.tangent_model.model.out_dim:
            raise ShapeError("score and tangent models disagree on the data dimension")
        if not 0.0 <= self.t_eval <= 1.0:
            raise ConfigError("t_eval must lie in [0, 1]")

    @property
    def sigma(self) -> float:
        return float(self.score_model.schedule(self.t_eval))

    def score(self, x):
        """Normalised score component."""
        return normalize_score(self.score_model(x, self.t_eval), self.k_s)

    def tangent(self, x):
        return self.tangent_model(x)

    def components(self, x):
        s = self.score(x)
        v = self.tangent(x)
        return s, v, s + v

    def __call__(self, x):
        return self.score(x) + self.tangent(x)


def mixed_field(mf: MixedField, x):
    return mf(x)


# ---------------------------------------------------------------- Lyapunov

def log_peak_density(waypoints, sigma_value):
    """log P*, approximated by the largest mixture density over the waypoints themselves."""
    pts = as_points(waypoints)
    return float(np.max(mixture_log_density(pts, sigma_value, pts)))


def lyapunov_value(waypoints, sigma_value, x, log_peak=None):
    """``max(0, log P* - log p(x))`` for the waypoint mixture at bandwidth ``sigma_value``."""
    if log_peak is None:
        log_peak = log_peak_density(waypoints, sigma_value)
    V = log_peak - mixture_log_density(waypoints, sigma_value, x)
    return np.maximum(V, 0.0)


def lyapunov_rate(s, m):
    """``-<s, m>``, the rate of change of V along ``x' = m`` when grad V = -s."""
    return -(np.asarray(s, float) * np.asarray(m, float)).sum(-1)


def cosine_error(s, v):
    """``|s.v| / (|s||v|)``, zero when either norm is below the floor."""
    s, v = np.asarray(s, float), np.asarray(v, float)
    ns, nv = np.linalg.norm(s, axis=-1), np.linalg.norm(v, axis=-1)
    ok = (ns >= NORM_FLOOR) & (nv >= NORM_FLOOR)
    return np.where(ok, np.abs((s * v).sum(-1)) / np.where(ok, ns * nv, 1.0), 0.0)


def robustness_margin(s, v):
    """Cosine error ``eps`` and the soft-orthogonality bound ``-(1 - eps|v|)|s|^2``.

    The bound only dominates ``lyapunov_rate(s, s + v)`` when ``|s| >= 1`` or
    ``s.v >= 0``; see :func:`cross_term_bound` for the bound that always holds.
    """
    s, v = np.asarray(s, float), np.asarray(v, float)
    eps = cosine_error(s, v)
    ns2 = (s * s).sum(-1)
    return eps, -(1.0 - eps * np.linalg.norm(v, axis=-1)) * ns2


def cross_term_bound(s, v):
    """``-|s|^2 + eps |s| |v|``: Cauchy-Schwarz bound on ``-|s|^2 - s.v``."""
    s, v = np.asarray(s, float), np.asarray(v, float)
    eps = cosine_error(s, v)
    ns = np.linalg.norm(s, axis=-1)
    return -ns * ns + eps * ns * np.linalg.norm(v, axis=-1)


# ---------------------------------------------------------------- grids

@dataclass
class FieldGrid:
    bounds: tuple  # (x_min, x_max, y_min, y_max)
    resolution: tuple  # (nx, ny)
    vectors: np.ndarray  # (nx, ny, 2); [i, j] is the value at (xs[i], ys[j])
    norms: np.ndarray  # (nx, ny)

    @property
    def xs(self):
        return np.linspace(self.bounds[0], self.bounds[1], self.resolution[0])

    @property
    def ys(self):
        return np.linspace(self.bounds[2], self.bounds[3], self.resolution[1])

    @property
    def spacing(self):
        nx, ny = self.resolution
        return ((self.bounds[1] - self.bounds[0]) / (nx - 1), (self.bounds[3] - self.bounds[2]) / (ny - 1))

    def points(self):
        """Grid points in row-major y-then-x order, shape ``(nx*ny, 2)``."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.column_stack([X.ravel(), Y.ravel()])


def _grid_points(bounds, resolution):
    x_min, x_max, y_min, y_max = map(float, bounds)
    nx, ny = map(int, resolution)
    if nx < 2 or ny < 2:
        raise ConfigError("grid resolution must be at least 2 per axis")
    if not (x_max > x_min and y_max > y_min):
        raise ConfigError(f"empty grid bounds {bounds}")
    X, Y = np.meshgrid(np.linspace(x_min, x_max, nx), np.linspace(y_min, y_max, ny))
    return np.column_stack([X.ravel(), Y.ravel()]), (x_min, x_max, y_min, y_max), (nx, ny)


def evaluate_grid(field_fn, bounds, resolution) -> FieldGrid:
    pts, bounds, (nx, ny) = _grid_points(bounds, resolution)
    vals = np.asarray(field_fn(pts), dtype=np.float64).reshape(ny, nx, -1)
    vectors = np.ascontiguousarray(vals.transpose(1, 0, 2))
    return FieldGrid(bounds, (nx, ny), vectors, np.linalg.norm(vectors, axis=-1))


FIELD_HEADER = ["x", "y", "ux", "uy", "norm"]


def write_field_grid(grid: FieldGrid, path):
    nx, ny = grid.resolution
    xs, ys = grid.xs, grid.ys
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_HEADER)
        for j in range(ny):
            for i in range(nx):
                u = grid.vectors[i, j]
                w.writerow([repr(float(xs[i])), repr(float(ys[j])), repr(float(u[0])), repr(float(u[1])),
                            repr(float(grid.norms[i, j]))])


def export_field_grid(field_fn, bounds, resolution, path) -> FieldGrid:
    grid = evaluate_grid(field_fn, bounds, resolution)
    write_field_grid(grid, path)
    return grid


def read_field_grid(path) -> FieldGrid:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != FIELD_HEADER:
        raise FormatError("expected header x,y,ux,uy,norm", line=1)
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r])
    except ValueError as exc:
        raise FormatError(f"unparseable value: {exc}") from None
    if data.ndim != 2 or data.shape[1] != 5:
        raise FormatError("every row needs 5 columns")
    xs, ys = np.unique(data[:, 0]), np.unique(data[:, 1])
    nx, ny = len(xs), len(ys)
    if nx * ny != len(data):
        raise FormatError(f"{len(data)} rows do not form a {nx}x{ny} grid")
    block = data.reshape(ny, nx, 5).transpose(1, 0, 2)
    return FieldGrid((xs[0], xs[-1], ys[0], ys[-1]), (nx, ny), np.ascontiguousarray(block[:, :, 2:4]),
                     np.ascontiguousarray(block[:, :, 4]))


# ---------------------------------------------------------------- singularities

@dataclass
class Singularity:
    centroid: np.ndarray
    cells: np.ndarray  # (n, 2) integer (i, j) grid indices
    points: np.ndarray  # (n, 2) coordinates
    min_norm: float

    @property
    def size(self) -> int:
        return len(self.cells)


def scan_singularities(field_fn, bounds, resolution, norm_threshold=None, relative=0.05):
    """Connected (4-neighbour) regions where the field norm drops below a threshold.

    With ``norm_threshold=None`` the threshold is ``relative`` times the grid
    median norm. Components are returned largest first.
    """
    grid = field_fn if isinstance(field_fn, FieldGrid) else evaluate_grid(field_fn, bounds, resolution)
    if norm_threshold is None:
        norm_threshold = relative * float(np.median(grid.norms))
    if norm_threshold <= 0:
        return []
    labels, n = ndimage.label(grid.norms < norm_threshold)
    xs, ys = grid.xs, grid.ys
    found = []
    for k in range(1, n + 1):
        cells = np.argwhere(labels == k)
        pts = np.column_stack([xs[cells[:, 0]], ys[cells[:, 1]]])
        found.append(Singularity(pts.mean(axis=0), cells, pts, float(grid.norms[labels == k].min())))
    found.sort(key=lambda c: -c.size)
    return found


# ---------------------------------------------------------------- classical baseline

def classical_gvf_circle(x, center=(0.0, 0.0), R=1.0, k_n=1.0, orientation=1):
    """Level-set GVF ``T(x) - k_n grad(phi) phi`` for ``phi = |x-c|^2 - R^2``.

    ``T`` is ``grad(phi)`` rotated by +90 degrees (``orientation=1``,
    counter-clockwise) and normalised; zero where ``grad(phi)`` vanishes.
    """
    if R <= 0:
        raise ConfigError("R must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x - np.asarray(center, dtype=np.float64)
    phi = (d * d).sum(-1) - R * R
    grad = 2.0 * d
    gn = np.linalg.norm(grad, axis=-1)
    rot = np.stack([-grad[..., 1], grad[..., 0]], axis=-1) * orientation
    T = np.where((gn >= NORM_FLOOR)[..., None], rot / np.where(gn >= NORM_FLOOR, gn, 1.0)[..., None], 0.0)
    return T - k_n * grad * phi[..., None]


# ---------------------------------------------------------------- diagnostics

DIAG_HEADER = ["x", "y", "s_norm", "v_norm", "m_norm", "cos_sv", "V", "V_dot"]


@dataclass
class DiagnosticsReport:
    records: np.ndarray  # columns as DIAG_HEADER
    summary: dict = field(default_factory=dict)
    singularities: list = field(default_factory=list)

    def column(self, name):
        return self.records[:, DIAG_HEADER.index(name)]


def diagnose(mf: MixedField, waypoints, samples, sigma_value=None, scan_bounds=None, scan_resolution=(81, 81)):
    """Per-sample field and Lyapunov records.

    ``V_dot`` uses the analytic mixture score as ``-grad V`` and the learned
    mixed field as the velocity.
    """
    pts = as_points(waypoints)
    X = np.asarray(samples, dtype=np.float64)
    sig = mf.sigma if sigma_value is None else sigma_value
    s, v, m = mf.components(X)
    g = oracle_mixture_score(pts, sig, X)
    V = lyapunov_value(pts, sig, X)
    vdot = lyapunov_rate(g, m)
    sn, vn = np.linalg.norm(s, axis=1), np.linalg.norm(v, axis=1)
    cos = np.where((sn >= NORM_FLOOR) & (vn >= NORM_FLOOR), (s * v).sum(1) / np.maximum(sn * vn, NORM_FLOOR), 0.0)
    records = np.column_stack([X, sn, vn, np.linalg.norm(m, axis=1), cos, V, vdot])
    eps = cosine_error(g, v)
    summary = {
        "n_samples": len(X),
        "sigma": sig,
        "mean_abs_cos_sv": float(np.abs(cos).mean()),
        "mean_m_norm": float(records[:, 4].mean()),
        "std_m_norm": float(records[:, 4].std()),
        "max_V_dot": float(vdot.max()),
        "frac_V_dot_nonpositive": float((vdot <= 0).mean()),
        "mean_cos_error_oracle": float(eps.mean()),
    }
    sings = []
    if scan_bounds is not None:
        sings = scan_singularities(mf.score, scan_bounds, scan_resolution)
        summary["n_score_singularities"] = len(sings)
    return DiagnosticsReport(records, summary, sings)


def write_diagnostics(report: DiagnosticsReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_HEADER)
        for row in report.records:
            w.writerow([repr(float(c)) for c in row])
