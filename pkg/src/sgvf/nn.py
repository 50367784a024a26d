"""Dense SiLU multilayer perceptron with hand-written backprop, Adam and checkpoints.

Everything is float64. Weight matrices are stored ``(out, in)`` so a layer maps
``h -> h @ W.T + b`` on row-batched inputs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, ShapeError, StateError, TrainingError

MAGIC = b"SGVF1"


def sigmoid(u):
    # tanh form: overflow-free and faster than exp-based expit on large batches
    return 0.5 + 0.5 * np.tanh(0.5 * u)


def silu(u):
    return u * sigmoid(u)


@dataclass
class MLP:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "silu"

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        _check_sizes(self.layer_sizes)
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError(f"expected {n_layers} weight/bias pairs")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if W.shape != shape or b.shape != (shape[0],):
                raise ShapeError(f"layer {i}: got W{W.shape}, b{b.shape}, expected W{shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {i} has non-finite parameters")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live arrays (not copies)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        return MLP(list(self.layer_sizes), [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.activation)

    def __call__(self, x):
        return mlp_forward(self, x)


@dataclass
class ForwardCache:
    layer_sizes: tuple
    inputs: np.ndarray
    pre: list  # pre-activation of every layer
    post: list  # input to every layer (post[0] = inputs)
    gates: list  # sigmoid(pre) of hidden layers


def _check_sizes(layer_sizes):
    if len(layer_sizes) < 2:
        raise ConfigError("layer_sizes needs at least an input and an output width")
    if any(int(n) < 1 for n in layer_sizes):
        raise ConfigError(f"layer sizes must be positive, got {list(layer_sizes)}")


def mlp_init(layer_sizes, seed=0) -> MLP:
    """Glorot-uniform weights, zero biases; deterministic in ``(layer_sizes, seed)``."""
    layer_sizes = list(layer_sizes)
    _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(layer_sizes, weights, biases)


def mlp_forward(model: MLP, inputs, return_cache=False):
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} does not match model input {model.in_dim}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite network input")

    pre, post, gates = [], [x], []
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        u = h @ W.T + b
        pre.append(u)
        if i == last:
            h = u
        else:
            gate = sigmoid(u)
            h = u * gate
            gates.append(gate)
            post.append(h)
    out = h[0] if squeeze else h
    if return_cache:
        return out, ForwardCache(tuple(model.layer_sizes), x, pre, post, gates)
    return out


def mlp_backward(model: MLP, cache: ForwardCache, output_gradients, return_input_grad=False):
    """Gradients of a scalar loss w.r.t. ``[W0, b0, W1, b1, ...]``.

    ``output_gradients`` is dLoss/dOutput for every row of the cached batch.
    """
    if tuple(model.layer_sizes) != cache.layer_sizes or len(cache.pre) != len(model.weights):
        raise StateError("forward cache was produced by a different model")
    g = np.asarray(output_gradients, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise StateError(f"output gradient shape {g.shape} does not match cached output {cache.pre[-1].shape}")

    n = len(model.weights)
    grads = [None] * (2 * n)
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            sig = cache.gates[i]
            g = g * (sig * (1.0 + cache.pre[i] * (1.0 - sig)))
        grads[2 * i] = g.T @ cache.post[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ model.weights[i]
    if return_input_grad:
        return grads, g
    return grads


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def for_model(cls, model: MLP, lr=1e-3, **kw) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(model: MLP, gradients, state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(model, state)``."""
    params = model.parameters()
    if len(gradients) != len(params):
        raise ShapeError("gradient list does not match model parameters")
    if state.lr <= 0:
        raise ConfigError("learning rate must be positive")
    for i, (p, g) in enumerate(zip(params, gradients)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {i} at Adam step {state.step_count}")

    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, gradients, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
    return model, state


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: MLP
    schedule: tuple | None = None  # (sigma_min, sigma_max) for score models
    metadata: dict = field(default_factory=dict)


def _u32(n):
    return struct.pack("<I", n)


def save_checkpoint(checkpoint: Checkpoint, path):
    """Binary layout (all little-endian)::

        "SGVF1" | u32 meta_len | meta JSON | f64 sigma_min | f64 sigma_max
        | u32 n_sizes | u32 * n_sizes
        | per layer: u32 rows | u32 cols | f64 W (row-major) | f64 b
        | u64 total file length
    """
    model = checkpoint.model
    meta = json.dumps(checkpoint.metadata, sort_keys=True).encode()
    sched = checkpoint.schedule if checkpoint.schedule is not None else (np.nan, np.nan)
    buf = bytearray(MAGIC)
    buf += _u32(len(meta)) + meta
    buf += struct.pack("<dd", float(sched[0]), float(sched[1]))
    buf += _u32(len(model.layer_sizes))
    for n in model.layer_sizes:
        buf += _u32(n)
    for W, b in zip(model.weights, model.biases):
        buf += _u32(W.shape[0]) + _u32(W.shape[1])
        buf += np.ascontiguousarray(W, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    buf += struct.pack("<Q", len(buf) + 8)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f64s(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not an SGVF1 checkpoint", offset=0)
    if len(data) < len(MAGIC) + 8:
        raise FormatError("file too short", offset=len(data))
    trailer = struct.unpack("<Q", data[-8:])[0]
    if trailer != len(data):
        raise FormatError(f"length trailer says {trailer} bytes, file has {len(data)}", offset=len(data) - 8)
    body_end = len(data) - 8
    r.data = data[:body_end]

    meta_len = r.u32("metadata length")
    meta_at = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", offset=meta_at) from None
    sched = tuple(r.f64s(2, "schedule"))
    schedule = None if np.isnan(sched[0]) else (float(sched[0]), float(sched[1]))

    n_sizes = r.u32("layer count")
    sizes = [r.u32("layer size") for _ in range(n_sizes)]
    if n_sizes < 2 or min(sizes) < 1:
        raise FormatError(f"invalid layer sizes {sizes}", offset=r.pos)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        at = r.pos
        rows, cols = r.u32("shape header"), r.u32("shape header")
        if (rows, cols) != (fan_out, fan_in):
            raise FormatError(f"layer {i} shape header {rows}x{cols} disagrees with layer sizes "
                              f"({fan_out}x{fan_in})", offset=at)
        weights.append(r.f64s(rows * cols, f"layer {i} weights").reshape(rows, cols))
        biases.append(r.f64s(rows, f"layer {i} biases"))
    if r.pos != body_end:
        raise FormatError(f"{body_end - r.pos} unexpected trailing bytes", offset=r.pos)
    try:
        model = MLP(sizes, weights, biases)
    except (ShapeError, InputError) as exc:
        raise FormatError(str(exc), offset=r.pos) from None
    return Checkpoint(model, schedule, metadata)
