"""Dense feed-forward network with exact backpropagation.

Parameters live in one flat float64 vector, laid out layer-major: for each
layer ``W`` (shape ``(fan_in, fan_out)``, row-major) followed by ``b``
(length ``fan_out``).  A layer computes ``h @ W + b``; hidden layers apply
the architecture's activation, the output layer emits raw logits.

Softmax is evaluated with max-subtraction: ``log_softmax(z) = z - m -
log(sum(exp(z - m)))`` with ``m = max(z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {list(sizes)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    arch: Architecture

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.arch.n_params:
            raise ShapeError(
                f"parameter vector has {values.size} entries, architecture needs {self.arch.n_params}"
            )
        object.__setattr__(self, "values", values)

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(W, b)`` views into the flat vector."""
        yield from _unpack(self.values, self.arch)

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(W.copy(), b.copy()) for W, b in self.layers()]

    @classmethod
    def pack(cls, layers: list[tuple[np.ndarray, np.ndarray]], arch: Architecture) -> ParamVector:
        parts = []
        for (W, b), (i, o) in zip(layers, arch.shapes, strict=True):
            if np.shape(W) != (i, o) or np.shape(b) != (o,):
                raise ShapeError(f"layer shapes {np.shape(W)}, {np.shape(b)} do not match ({i}, {o})")
            parts.append(np.asarray(W, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64))
        return cls(np.concatenate(parts), arch)

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.arch)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.arch)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"batch inputs {x.shape} and labels {y.shape} are inconsistent")
        if x.shape[0] < 1:
            raise ShapeError("batch must contain at least one example")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _unpack(values: np.ndarray, arch: Architecture) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    offset = 0
    for i, o in arch.shapes:
        W = values[offset:offset + i * o].reshape(i, o)
        offset += i * o
        b = values[offset:offset + o]
        offset += o
        yield W, b


def init_params(arch: Architecture, seed: int) -> ParamVector:
    """Glorot-uniform weights on ``±sqrt(6 / (fan_in + fan_out))``, zero biases.

    Weights are drawn layer by layer, row-major, from
    ``np.random.default_rng(seed)``.
    """
    if not isinstance(arch, Architecture):
        raise ConfigError("init_params needs an Architecture")
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    parts = []
    for i, o in arch.shapes:
        limit = np.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-limit, limit, size=i * o))
        parts.append(np.zeros(o))
    return ParamVector(np.concatenate(parts), arch)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _check_inputs(p: ParamVector, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.arch.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match input dim {p.arch.input_dim}")
    return x


def _forward_cache(p: ParamVector, x: np.ndarray):
    layers = list(p.layers())
    pre, post = [], [x]
    h = x
    for idx, (W, b) in enumerate(layers):
        z = h @ W + b
        if idx < len(layers) - 1:
            h = _activate(z, p.arch.activation)
        else:
            h = z
        pre.append(z)
        post.append(h)
    return layers, pre, post


def forward(p: ParamVector, batch: Batch | np.ndarray) -> np.ndarray:
    """Logits, shape ``(n, C)``."""
    x = batch.inputs if isinstance(batch, Batch) else batch
    x = _check_inputs(p, x)
    layers = list(p.layers())
    h = x
    for idx, (W, b) in enumerate(layers):
        h = h @ W + b
        if idx < len(layers) - 1:
            h = _activate(h, p.arch.activation)
    return h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_logit_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example cross-entropy and ``d loss_i / d logits_i``."""
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError(f"labels outside [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    rows = np.arange(labels.shape[0])
    losses = -logp[rows, labels]
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite cross-entropy")
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def _backward(layers, pre, post, dz: np.ndarray, activation: str, out: np.ndarray | None, want_input: bool):
    """Backpropagate ``dz`` (gradient wrt the final logits) through the net.

    Parameter gradients are written into ``out`` when given; the gradient wrt
    the network input is returned when ``want_input``.
    """
    offsets = []
    offset = 0
    for W, b in layers:
        offsets.append(offset)
        offset += W.size + b.size
    for idx in range(len(layers) - 1, -1, -1):
        W, b = layers[idx]
        if out is not None:
            start = offsets[idx]
            np.matmul(post[idx].T, dz, out=out[start:start + W.size].reshape(W.shape))
            np.sum(dz, axis=0, out=out[start + W.size:start + W.size + b.size])
        if idx == 0:
            return dz @ W.T if want_input else None
        dz = dz @ W.T
        dz *= _activation_grad(pre[idx - 1], post[idx], activation)
    return None


def _param_grads_into(p: ParamVector, x: np.ndarray, y: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Per-example losses; writes the mean-loss gradient into ``out``."""
    layers, pre, post = _forward_cache(p, x)
    losses, dlogits = _loss_and_logit_grad(post[-1], y)
    dlogits /= x.shape[0]
    _backward(layers, pre, post, dlogits, p.arch.activation, out, False)
    return losses


def loss_and_param_grads(p: ParamVector, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    x = _check_inputs(p, batch.inputs)
    layers, pre, post = _forward_cache(p, x)
    losses, dlogits = _loss_and_logit_grad(post[-1], batch.labels)
    grads = np.empty_like(p.values)
    _backward(layers, pre, post, dlogits / x.shape[0], p.arch.activation, grads, False)
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    return float(losses.mean()), grads


def loss(p: ParamVector, batch: Batch) -> float:
    logits = forward(p, batch)
    losses, _ = _loss_and_logit_grad(logits, batch.labels)
    return float(losses.mean())


def input_grads(p: ParamVector, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row ``i`` is the gradient of ``CE(model(x_i), t_i)`` with respect to ``x_i``."""
    x = _check_inputs(p, inputs)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (x.shape[0],))
    layers, pre, post = _forward_cache(p, x)
    _, dlogits = _loss_and_logit_grad(post[-1], targets)
    return _backward(layers, pre, post, dlogits, p.arch.activation, None, True)


def input_grad(p: ParamVector, x: np.ndarray, target: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("input_grad takes a single input vector")
    return input_grads(p, x[None, :], np.array([target]))[0]


def sgd_step(p: ParamVector, grads: np.ndarray, lr: float) -> ParamVector:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != p.values.shape:
        raise ShapeError(f"gradient shape {grads.shape} does not match parameters {p.values.shape}")
    return ParamVector(p.values - lr * grads, p.arch)


def predict(p: ParamVector, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    inputs = np.asarray(inputs, dtype=np.float64)
    out = np.empty(inputs.shape[0], dtype=np.int64)
    for start in range(0, inputs.shape[0], chunk):
        out[start:start + chunk] = forward(p, inputs[start:start + chunk]).argmax(axis=1)
    return out
