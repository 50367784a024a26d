"""Tangent field training: unit-length, orthogonality and directional-consistency losses."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import as_points
from .errors import ConfigError, ShapeError, TrainingError
from .nn import MLP, AdamState, adam_step, mlp_backward, mlp_forward, mlp_init
from .score import NORM_FLOOR, ScoreModel, canonical_order, normalize_score, perturb

log = logging.getLogger(__name__)

SHALLOW = [2, 128, 2]
DEEP = [2, 64, 64, 64, 64, 2]


@dataclass
class TangentTrainConfig:
    iterations: int = 10000
    batch_size: int = 512
    lr: float = 1e-3
    k_neighbors: int = 5
    neighbor_sigma: float = 0.05
    lambda_unit: float = 1.0
    lambda_orth: float = 1.0
    lambda_dir: float = 1.0
    k_s: float = 0.2
    t_eval: float = 1.0
    layer_sizes: list = field(default_factory=lambda: list(SHALLOW))
    seed: int = 0

    def validate(self, data_dim=2):
        if self.iterations < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("iterations, batch_size and lr must be positive")
        if self.k_neighbors < 1 or self.neighbor_sigma <= 0 or self.k_s <= 0:
            raise ConfigError("k_neighbors >= 1, neighbor_sigma > 0 and k_s > 0 required")
        lams = (self.lambda_unit, self.lambda_orth, self.lambda_dir)
        if min(lams) < 0 or max(lams) <= 0:
            raise ConfigError("loss weights must be non-negative with at least one positive")
        if self.layer_sizes[0] != data_dim or self.layer_sizes[-1] != data_dim:
            raise ConfigError(f"tangent network must map {data_dim} -> {data_dim}, got {self.layer_sizes}")


@dataclass
class TangentModel:
    model: MLP

    def __call__(self, x):
        return mlp_forward(self.model, x)


def _norm(a):
    return np.linalg.norm(a, axis=-1)


def _cosine(a, b):
    """Row-wise cosine with zero for rows where either norm is below the floor."""
    na, nb = _norm(a), _norm(b)
    ok = (na >= NORM_FLOOR) & (nb >= NORM_FLOOR)
    denom = np.where(ok, na * nb, 1.0)
    return np.where(ok, (a * b).sum(-1) / denom, 0.0)


def loss_unit(s, v):
    return (_norm(np.asarray(s, float) + np.asarray(v, float)) - 1.0) ** 2


def loss_orth(s, v):
    return _cosine(np.asarray(s, float), np.asarray(v, float)) ** 2


def loss_dir(v_x, neighbor_vs):
    """``1 - mean_j cos(v_x, v_j)``. ``neighbor_vs`` is ``(k, d)`` or batched ``(B, k, d)``."""
    v_x = np.asarray(v_x, float)
    nb = np.asarray(neighbor_vs, float)
    if nb.ndim == v_x.ndim:
        nb = nb[None] if v_x.ndim == 1 else nb[:, None]
    cos = _cosine(np.expand_dims(v_x, -2), nb)
    return 1.0 - cos.mean(axis=-1)


def sample_neighbors(x, k, neighbor_sigma, rng):
    """``k`` Gaussian neighbours of each point; ``(k, d)`` for one point, ``(B, k, d)`` for a batch."""
    x = np.asarray(x, float)
    eps = rng.standard_normal(x.shape[:-1] + (k, x.shape[-1]))
    return np.expand_dims(x, -2) + neighbor_sigma * eps


def _cos_grad(a, b):
    """(cos(a,b), d cos/da) row-wise, zero where a norm is below the floor."""
    na, nb = _norm(a)[..., None], _norm(b)[..., None]
    ok = (na >= NORM_FLOOR) & (nb >= NORM_FLOOR)
    na_s, nb_s = np.where(ok, na, 1.0), np.where(ok, nb, 1.0)
    ah, bh = a / na_s, b / nb_s
    cos = (ah * bh).sum(-1, keepdims=True)
    grad = np.where(ok, (bh - cos * ah) / na_s, 0.0)
    return np.where(ok, cos, 0.0)[..., 0], grad


def composite_loss_grad(s, v, v_nb, config: TangentTrainConfig):
    """Per-term batch means and dLoss/dv, dLoss/dv_nb of the weighted total.

    ``s`` normalised score (B, d); ``v`` tangent at x (B, d); ``v_nb`` tangent at
    the neighbours (B, k, d). The total is averaged over the batch.
    """
    B, k = v_nb.shape[0], v_nb.shape[1]
    m = s + v
    nm = _norm(m)[:, None]
    unit = (nm[:, 0] - 1.0) ** 2
    g_unit = np.where(nm >= NORM_FLOOR, 2.0 * (nm - 1.0) * m / np.where(nm >= NORM_FLOOR, nm, 1.0), 0.0)

    c, dc_dv = _cos_grad(v, s)
    orth = c * c
    g_orth = 2.0 * c[:, None] * dc_dv

    vx = np.broadcast_to(v[:, None, :], v_nb.shape)
    cos_nb, dcos_dvx = _cos_grad(vx, v_nb)
    _, dcos_dnb = _cos_grad(v_nb, vx)
    dirl = 1.0 - cos_nb.mean(axis=1)
    g_dir_v = -dcos_dvx.mean(axis=1)
    g_dir_nb = -dcos_dnb / k

    lu, lo, ld = config.lambda_unit, config.lambda_orth, config.lambda_dir
    total = lu * unit + lo * orth + ld * dirl
    terms = {
        "loss_unit": unit, "loss_orth": orth, "loss_dir": dirl, "loss_total": total,
    }
    grad_v = (lu * g_unit + lo * g_orth + ld * g_dir_v) / B
    grad_nb = ld * g_dir_nb / B
    return terms, grad_v, grad_nb


def tangent_objective(tangent: MLP, s, x, x_nb, config: TangentTrainConfig):
    """Batch-mean losses and parameter gradients for one batch (points and neighbours given)."""
    B, k, d = x_nb.shape
    inputs = np.vstack([x, x_nb.reshape(B * k, d)])
    out, cache = mlp_forward(tangent, inputs, return_cache=True)
    v, v_nb = out[:B], out[B:].reshape(B, k, d)
    terms, gv, gnb = composite_loss_grad(s, v, v_nb, config)
    grads = mlp_backward(tangent, cache, np.vstack([gv, gnb.reshape(B * k, d)]))
    return terms, grads


def _check_ranges(terms, it):
    tol = 1e-12
    bad = (terms["loss_unit"].min() < -tol or terms["loss_orth"].min() < -tol
           or terms["loss_orth"].max() > 1 + tol or terms["loss_dir"].min() < -tol
           or terms["loss_dir"].max() > 2 + tol)
    if bad:
        raise TrainingError(f"loss term out of range at iteration {it}", iteration=it,
                            terms={k: float(v.mean()) for k, v in terms.items()})


def train_tangent(score_model: ScoreModel, waypoints, config: TangentTrainConfig | None = None,
                  log_every=0):
    """Fit ``v(x)`` on a frozen score model.

    Returns ``(TangentModel, history)`` where ``history`` has shape
    ``(iterations, 4)``: unit, orth, dir, total (batch means).
    """
    config = config or TangentTrainConfig()
    pts = canonical_order(as_points(waypoints))
    d = pts.shape[1]
    if score_model.dim != d:
        raise ShapeError(f"score model dimension {score_model.dim} != data dimension {d}")
    config.validate(d)

    rng = np.random.default_rng(config.seed)
    tangent = mlp_init(config.layer_sizes, seed=config.seed)
    state = AdamState.for_model(tangent, lr=config.lr)
    schedule = score_model.schedule
    B, k = config.batch_size, config.k_neighbors
    history = np.empty((config.iterations, 4))
    for it in range(config.iterations):
        z = pts[rng.integers(len(pts), size=B)]
        t = rng.random(B)
        x = perturb(z, t, rng.standard_normal((B, d)), schedule)
        x_nb = sample_neighbors(x, k, config.neighbor_sigma, rng)
        s = normalize_score(score_model(x, config.t_eval), config.k_s)

        terms, grads = tangent_objective(tangent, s, x, x_nb, config)
        means = [float(terms[key].mean()) for key in ("loss_unit", "loss_orth", "loss_dir", "loss_total")]
        if not np.all(np.isfinite(means)):
            raise TrainingError(f"non-finite tangent loss at iteration {it}: unit={means[0]} "
                                f"orth={means[1]} dir={means[2]}", iteration=it,
                                terms=dict(zip(("unit", "orth", "dir", "total"), means)))
        _check_ranges(terms, it)
        history[it] = means
        adam_step(tangent, grads, state)
        if log_every and (it + 1) % log_every == 0:
            log.info("tangent it=%d unit=%.4f orth=%.4f dir=%.4f", it + 1, *means[:3])
    return TangentModel(tangent), history


LOSS_HEADER = ["iteration", "loss_unit", "loss_orth", "loss_dir", "loss_total"]


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for i, row in enumerate(history):
            w.writerow([i] + [repr(float(x)) for x in row])
