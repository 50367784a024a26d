"""Waypoint scenarios and point-cloud CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    name: str = "cloud"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise InputError("a point cloud needs at least one point, shape (N, d)")
        if not np.all(np.isfinite(self.points)):
            raise InputError("point cloud contains non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise InputError("need exactly one branch label per point")
            present = np.unique(self.labels)
            if present[0] != 0 or not np.array_equal(present, np.arange(len(present))):
                raise InputError(f"branch labels must cover 0..B-1, got {present.tolist()}")

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_branches(self) -> int:
        return 1 if self.labels is None else int(self.labels.max()) + 1

    def branch(self, i) -> np.ndarray:
        if self.labels is None:
            return self.points
        return self.points[self.labels == i]

    def branches(self) -> list[np.ndarray]:
        return [self.branch(i) for i in range(self.n_branches)]


def as_points(waypoints) -> np.ndarray:
    if isinstance(waypoints, PointCloud):
        return waypoints.points
    pts = np.asarray(waypoints, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or len(pts) == 0:
        raise InputError("waypoints must be a non-empty (N, d) array")
    return pts


def _circle_points(center, R, N, jitter_sigma, rng):
    theta = 2.0 * np.pi * np.arange(N) / N
    pts = np.asarray(center, dtype=np.float64) + R * np.column_stack([np.cos(theta), np.sin(theta)])
    if jitter_sigma > 0:
        pts = pts + jitter_sigma * rng.standard_normal(pts.shape)
    return pts


def gen_circle(center=(0.0, 0.0), R=1.0, N=512, jitter_sigma=0.01, seed=0) -> PointCloud:
    if R <= 0 or N < 3:
        raise ConfigError("circle needs R > 0 and N >= 3")
    rng = np.random.default_rng(seed)
    return PointCloud(_circle_points(center, R, N, jitter_sigma, rng), name="circle")


def gen_concentric(center=(0.0, 0.0), R1=1.0, R2=2.0, N_each=512, jitter_sigma=0.01, seed=0) -> PointCloud:
    if not 0 < R1 < R2:
        raise ConfigError(f"concentric circles need 0 < R1 < R2, got {R1}, {R2}")
    if N_each < 3:
        raise ConfigError("N_each must be >= 3")
    rng = np.random.default_rng(seed)
    inner = _circle_points(center, R1, N_each, jitter_sigma, rng)
    outer = _circle_points(center, R2, N_each, jitter_sigma, rng)
    labels = np.repeat([0, 1], N_each)
    return PointCloud(np.vstack([inner, outer]), labels, name="concentric")


def gen_separated(c1=(-1.75, 0.0), c2=(1.75, 0.0), R=1.0, N_each=512, jitter_sigma=0.01, seed=0) -> PointCloud:
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    if R <= 0 or N_each < 3:
        raise ConfigError("separated circles need R > 0 and N_each >= 3")
    if np.linalg.norm(c1 - c2) <= 2 * R:
        raise ConfigError(f"circles overlap: |c1-c2| = {np.linalg.norm(c1 - c2):.4g} <= 2R = {2 * R}")
    rng = np.random.default_rng(seed)
    a = _circle_points(c1, R, N_each, jitter_sigma, rng)
    b = _circle_points(c2, R, N_each, jitter_sigma, rng)
    return PointCloud(np.vstack([a, b]), np.repeat([0, 1], N_each), name="separated")


def polygon_corners(n_sides, circumradius, center=(0.0, 0.0), rotation=0.0) -> np.ndarray:
    ang = rotation + 2.0 * np.pi * np.arange(n_sides) / n_sides
    return np.asarray(center, float) + circumradius * np.column_stack([np.cos(ang), np.sin(ang)])


def gen_polygon(n_sides=4, circumradius=1.5, N=512, seed=0, jitter_sigma=0.0,
                center=(0.0, 0.0), rotation=0.0):
    """Equal arc-length samples along a regular polygon, starting at a vertex.

    Returns ``(cloud, corners)``. When ``N`` is a multiple of ``n_sides`` every
    vertex is one of the samples (before jitter).
    """
    if not 3 <= n_sides <= 12:
        raise ConfigError("n_sides must be in 3..12")
    if N < n_sides or circumradius <= 0:
        raise ConfigError("need N >= n_sides and circumradius > 0")
    corners = polygon_corners(n_sides, circumradius, center, rotation)
    side = 2.0 * circumradius * np.sin(np.pi / n_sides)
    s = side * n_sides * np.arange(N) / N
    k = np.minimum((s // side).astype(int), n_sides - 1)
    frac = (s - k * side) / side
    a, b = corners[k], corners[(k + 1) % n_sides]
    pts = a + frac[:, None] * (b - a)
    if jitter_sigma > 0:
        pts = pts + jitter_sigma * np.random.default_rng(seed).standard_normal(pts.shape)
    name = {3: "triangle", 4: "square", 6: "hexagon"}.get(n_sides, f"polygon{n_sides}")
    return PointCloud(pts, name=name), corners


def shuffle(cloud: PointCloud, seed=0) -> PointCloud:
    perm = np.random.default_rng(seed).permutation(len(cloud))
    labels = None if cloud.labels is None else cloud.labels[perm]
    return PointCloud(cloud.points[perm], labels, cloud.name)


def save_csv(cloud: PointCloud, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_labels = cloud.labels is not None
        w.writerow(["x", "y", "branch"] if has_labels else ["x", "y"])
        for i, p in enumerate(cloud.points):
            row = [repr(float(p[0])), repr(float(p[1]))]
            if has_labels:
                row.append(str(int(cloud.labels[i])))
            w.writerow(row)


def load_csv(path, name=None) -> PointCloud:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty waypoint file", line=1)
    header = [h.strip() for h in rows[0]]
    if header not in (["x", "y"], ["x", "y", "branch"]):
        raise FormatError(f"expected header x,y[,branch], got {','.join(header)}", line=1)
    ncol = len(header)
    pts, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != ncol:
            raise FormatError(f"expected {ncol} columns, got {len(row)}", line=lineno)
        try:
            pts.append((float(row[0]), float(row[1])))
            if ncol == 3:
                labels.append(int(row[2]))
        except ValueError:
            raise FormatError(f"unparseable row {row!r}", line=lineno) from None
    if not pts:
        raise FormatError("no waypoints after header", line=len(rows) + 1)
    try:
        return PointCloud(np.array(pts), np.array(labels) if labels else None, name or path.stem)
    except InputError as exc:
        raise FormatError(str(exc), line=None) from None


def make_scenario(name, n_per_branch=512, jitter_sigma=0.01, seed=0, circumradius=1.5):
    """Named benchmark scenarios. Returns ``(cloud, corners_or_None)``."""
    if name == "circle":
        return gen_circle(R=1.0, N=n_per_branch, jitter_sigma=jitter_sigma, seed=seed), None
    if name == "concentric":
        return gen_concentric(N_each=n_per_branch, jitter_sigma=jitter_sigma, seed=seed), None
    if name == "separated":
        return gen_separated(N_each=n_per_branch, jitter_sigma=jitter_sigma, seed=seed), None
    if name in ("square", "hexagon"):
        n = 4 if name == "square" else 6
        return gen_polygon(n, circumradius, n_per_branch, seed=seed, jitter_sigma=jitter_sigma)
    raise ConfigError(f"unknown scenario {name!r}")


SCENARIOS = ("circle", "concentric", "separated", "square", "hexagon")
