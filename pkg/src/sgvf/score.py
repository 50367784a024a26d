"""Noise schedule, denoising score matching and the analytic mixture-score oracle."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import as_points
from .errors import ConfigError, DomainError, NumericError, ShapeError, StatisticsError, TrainingError
from .nn import MLP, AdamState, adam_step, mlp_backward, mlp_forward, mlp_init

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
# tanh rounds to exactly 1.0 in float64 once its argument passes ~19; cap just below
_TANH_CAP = 1.0 - 1e-15


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric schedule ``sigma(t) = sigma_min**(1-t) * sigma_max**t``."""

    sigma_min: float = 0.1
    sigma_max: float = 0.3
    form: str = "geometric"

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.form != "geometric":
            raise ConfigError(f"unsupported schedule form {self.form!r}")

    def __call__(self, t):
        return sigma(self, t)


def sigma(schedule: NoiseSchedule, t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0) or np.any(t_arr > 1):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    out = schedule.sigma_min ** (1.0 - t_arr) * schedule.sigma_max ** t_arr
    return float(out) if out.ndim == 0 else out


def perturb(z, t, eps, schedule: NoiseSchedule):
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match data shape {z.shape}")
    sig = np.asarray(sigma(schedule, t))
    if z.ndim == 2 and sig.ndim == 1:
        sig = sig[:, None]
    return z + sig * eps


def dsm_target(eps, t, schedule: NoiseSchedule):
    """Conditional score of the Gaussian perturbation kernel, ``-eps / sigma(t)``."""
    eps = np.asarray(eps, dtype=np.float64)
    sig = np.asarray(sigma(schedule, t))
    if np.any(sig < 1e-12):
        raise NumericError("sigma(t) below 1e-12")
    if eps.ndim == 2 and sig.ndim == 1:
        sig = sig[:, None]
    return -eps / sig


# ---------------------------------------------------------------- oracle

def _log_kernel(x, pts, sig):
    diff = x[:, None, :] - pts[None, :, :]
    return -(diff * diff).sum(-1) / (2.0 * sig * sig)


def _chunks(n, size=1024):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def oracle_mixture_score(waypoints, sigma_value, x):
    """Exact score of ``(1/N) sum_i Normal(x; x_i, sigma^2 I)``.

    Accepts a single point ``(d,)`` or a batch ``(M, d)``.
    """
    pts = as_points(waypoints)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    out = np.empty_like(X)
    s2 = sigma_value * sigma_value
    for sl in _chunks(len(X), max(1, 2 ** 20 // len(pts))):
        logk = _log_kernel(X[sl], pts, sigma_value)
        logk -= logk.max(axis=1, keepdims=True)
        w = np.exp(logk)
        w /= w.sum(axis=1, keepdims=True)
        out[sl] = (w @ pts - X[sl]) / s2
    return out[0] if single else out


def mixture_log_density(waypoints, sigma_value, x):
    """log of the equal-weight isotropic Gaussian mixture centred on the waypoints."""
    pts = as_points(waypoints)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d = pts.shape[1]
    out = np.empty(len(X))
    for sl in _chunks(len(X), max(1, 2 ** 20 // len(pts))):
        logk = _log_kernel(X[sl], pts, sigma_value)
        mx = logk.max(axis=1)
        out[sl] = mx + np.log(np.exp(logk - mx[:, None]).sum(axis=1))
    out += -np.log(len(pts)) - 0.5 * d * np.log(2.0 * np.pi * sigma_value ** 2)
    return out[0] if single else out


def sample_mixture(waypoints, sigma_value, n, rng):
    pts = as_points(waypoints)
    idx = rng.integers(len(pts), size=n)
    return pts[idx] + sigma_value * rng.standard_normal((n, pts.shape[1]))


# ---------------------------------------------------------------- normalisation

def normalize_score(S, k_s=0.2):
    """``tanh(k_s |S|) S/|S|``; zero below the 1e-12 norm floor. Row-wise on batches.

    The magnitude is capped at ``1 - 1e-15`` so it stays strictly below one
    after float64 rounding.
    """
    if k_s <= 0:
        raise ConfigError("k_s must be positive")
    S = np.asarray(S, dtype=np.float64)
    norm = np.linalg.norm(S, axis=-1, keepdims=True)
    safe = np.where(norm < NORM_FLOOR, 1.0, norm)
    scale = np.where(norm < NORM_FLOOR, 0.0, np.minimum(np.tanh(k_s * norm), _TANH_CAP) / safe)
    return S * scale


# ---------------------------------------------------------------- learned score

@dataclass
class ScoreTrainConfig:
    iterations: int = 10000
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0
    layer_sizes: list = field(default_factory=lambda: [3, 64, 64, 64, 64, 2])
    ema_decay: float = 0.999  # 0 returns the raw final weights

    def validate(self, data_dim=2):
        if self.iterations < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("iterations, batch_size and lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.layer_sizes[0] != data_dim + 1 or self.layer_sizes[-1] != data_dim:
            raise ConfigError(f"score network must map {data_dim + 1} -> {data_dim}, got {self.layer_sizes}")


@dataclass
class ScoreModel:
    model: MLP
    schedule: NoiseSchedule

    @property
    def dim(self) -> int:
        return self.model.out_dim

    def __call__(self, x, t=1.0):
        """Raw learned score ``S(x, t)``; ``t`` may be scalar or per-row."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(X),))
        out = mlp_forward(self.model, np.column_stack([X, tt]))
        return out[0] if single else out


def canonical_order(points):
    """Lexicographic row order; makes index-based sampling independent of input order."""
    return points[np.lexsort(points.T[::-1])]


def train_score(waypoints, config: ScoreTrainConfig | None = None, schedule: NoiseSchedule | None = None,
                log_every=0):
    """Denoising score matching. Returns ``(ScoreModel, per-iteration loss array)``.

    The returned network holds an exponential moving average of the Adam
    iterates (``config.ema_decay``); the optimisation itself is plain Adam.
    """
    config = config or ScoreTrainConfig()
    schedule = schedule or NoiseSchedule()
    pts = canonical_order(as_points(waypoints))
    d = pts.shape[1]
    config.validate(d)

    rng = np.random.default_rng(config.seed)
    model = mlp_init(config.layer_sizes, seed=config.seed)
    state = AdamState.for_model(model, lr=config.lr)
    ema = model.copy() if config.ema_decay > 0 else None
    B = config.batch_size
    history = np.empty(config.iterations)
    for it in range(config.iterations):
        z = pts[rng.integers(len(pts), size=B)]
        t = rng.random(B)
        eps = rng.standard_normal((B, d))
        x = perturb(z, t, eps, schedule)
        target = dsm_target(eps, t, schedule)
        pred, cache = mlp_forward(model, np.column_stack([x, t]), return_cache=True)
        resid = pred - target
        loss = float((resid * resid).sum() / B)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite score loss at iteration {it}", iteration=it)
        history[it] = loss
        adam_step(model, mlp_backward(model, cache, 2.0 * resid / B), state)
        if ema is not None:
            for avg, p in zip(ema.parameters(), model.parameters()):
                avg *= config.ema_decay
                avg += (1.0 - config.ema_decay) * p
        if log_every and (it + 1) % log_every == 0:
            log.info("score it=%d loss=%.5g", it + 1, history[max(0, it + 1 - log_every):it + 1].mean())
    return ScoreModel(ema if ema is not None else model, schedule), history


# ---------------------------------------------------------------- Stein diagnostic

@dataclass
class SteinResult:
    residual: np.ndarray  # Monte-Carlo mean of S f^T + grad f
    norm: float  # Frobenius norm of ``residual``
    stderr: float  # RMS Monte-Carlo standard error of ``residual``, Frobenius-combined
    n_samples: int


def bump_field(x, center, radius):
    """Smooth compact bump ``exp(-1/(1-r^2)) (x-c)``, ``r = |x-c|/radius``.

    Returns ``(f, jac)`` with ``jac[n, a, b] = d f_b / d x_a``.
    """
    x = np.asarray(x, dtype=np.float64)
    dx = x - np.asarray(center, dtype=np.float64)
    r2 = (dx * dx).sum(1) / radius ** 2
    inside = r2 < 1.0
    one_minus = np.where(inside, 1.0 - r2, 1.0)
    phi = np.where(inside, np.exp(-1.0 / one_minus), 0.0)
    f = phi[:, None] * dx
    # d phi / d x_a = -phi * 2 dx_a / (radius^2 (1-r^2)^2)
    dphi = -(phi * 2.0 / (radius ** 2 * one_minus ** 2))[:, None] * dx
    d = x.shape[1]
    jac = phi[:, None, None] * np.eye(d)[None] + dphi[:, :, None] * dx[:, None, :]
    return f, jac


def stein_residual(score_fn, samples, bump_center, bump_radius) -> SteinResult:
    if bump_radius <= 0:
        raise ConfigError("bump_radius must be positive")
    X = np.asarray(samples, dtype=np.float64)
    n = len(X)
    if n < 100:
        raise StatisticsError(f"need at least 100 samples, got {n}")
    S = np.asarray(score_fn(X), dtype=np.float64)
    f, jac = bump_field(X, bump_center, bump_radius)
    per_sample = S[:, :, None] * f[:, None, :] + jac
    mean = per_sample.mean(axis=0)
    se = per_sample.std(axis=0, ddof=1) / np.sqrt(n)
    return SteinResult(mean, float(np.linalg.norm(mean)), float(np.sqrt((se ** 2).sum())), n)
