"""Minimal feed-forward classifier with hand-written backpropagation.

Dense layers with ReLU hidden activations and a softmax output, trained by
plain mini-batch SGD with L2 weight decay. Two initialisation schemes are
provided: the bias-capturing constant last layer (``init_bacsa``) and the
Glorot/Xavier uniform baseline (``init_glorot``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12


class InvalidSpecError(ValueError):
    """Raised when a layer chain is malformed."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"  # "relu" or "softmax"


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 5
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class NetworkParams:
    """Weights (``output_dim x input_dim``) and biases for each dense layer.

    Gradient bundles reuse this type with ``seed=None``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def last_layer(self) -> np.ndarray:
        return self.weights[-1]

    def copy(self) -> NetworkParams:
        return NetworkParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed
        )

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(w.shape, b.shape) for w, b in zip(self.weights, self.biases)]

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )

    def allclose(self, other: NetworkParams, **kw) -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(np.allclose(a, b, **kw) for a, b in zip(self.weights, other.weights)) and all(
            np.allclose(a, b, **kw) for a, b in zip(self.biases, other.biases)
        )

    def equals(self, other: NetworkParams) -> bool:
        """Bit-level equality of every array."""
        if self.shapes() != other.shapes():
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights)) and all(
            np.array_equal(a, b) for a, b in zip(self.biases, other.biases)
        )


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        return self.activations[-1]


def mlp_spec(input_dim: int, hidden: Sequence[int], n_classes: int) -> list[LayerSpec]:
    """Layer chain ``input_dim -> hidden... -> n_classes`` with a softmax head."""
    dims = [input_dim, *hidden, n_classes]
    return [
        LayerSpec(dims[i], dims[i + 1], "softmax" if i == len(dims) - 2 else "relu")
        for i in range(len(dims) - 1)
    ]


def validate_spec(spec: Sequence[LayerSpec]) -> None:
    if not spec:
        raise InvalidSpecError("empty layer spec")
    for i, layer in enumerate(spec):
        if layer.input_dim < 1 or layer.output_dim < 1:
            raise InvalidSpecError(f"layer {i} has non-positive dimension")
        if i > 0 and layer.input_dim != spec[i - 1].output_dim:
            raise InvalidSpecError(f"layer {i} input_dim does not match previous output_dim")
        last = i == len(spec) - 1
        if last != (layer.activation == "softmax"):
            raise InvalidSpecError("exactly the last layer must use the softmax activation")
        if not last and layer.activation != "relu":
            raise InvalidSpecError(f"unsupported hidden activation {layer.activation!r}")


def bacsa_scale(input_dim: int, penultimate: int, n_classes: int) -> float:
    """Constant last-layer weight ``sqrt(1 / (I_f * L * M))``."""
    return math.sqrt(1.0 / (input_dim * penultimate * n_classes))


def _zero_biases(spec):
    return [np.zeros(layer.output_dim) for layer in spec]


def init_bacsa(spec: Sequence[LayerSpec], seed: int, hidden: str = "glorot") -> NetworkParams:
    """Every last-layer weight equals ``omega0 = sqrt(1 / (I_f * L * M))``.

    Hidden layers are Glorot-uniform by default (drawn exactly as
    ``init_glorot`` draws them for the same seed, so the two schemes differ
    only in the last layer). ``hidden="small"`` draws them from
    ``U(-omega0, omega0)`` instead; activations then stay so small that
    absent-class weights rarely cross zero within a few epochs.
    """
    validate_spec(spec)
    if hidden not in ("glorot", "small"):
        raise InvalidSpecError(f"unknown hidden init {hidden!r}")
    omega0 = bacsa_scale(spec[0].input_dim, spec[-1].input_dim, spec[-1].output_dim)
    rng = np.random.default_rng(seed)
    weights = []
    for layer in spec[:-1]:
        b = glorot_bound(layer.input_dim, layer.output_dim) if hidden == "glorot" else omega0
        weights.append(rng.uniform(-b, b, size=(layer.output_dim, layer.input_dim)))
    weights.append(np.full((spec[-1].output_dim, spec[-1].input_dim), omega0))
    return NetworkParams(weights, _zero_biases(spec), seed)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_glorot(spec: Sequence[LayerSpec], seed: int) -> NetworkParams:
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    weights = []
    for layer in spec:
        b = glorot_bound(layer.input_dim, layer.output_dim)
        weights.append(rng.uniform(-b, b, size=(layer.output_dim, layer.input_dim)))
    return NetworkParams(weights, _zero_biases(spec), seed)


INITIALIZERS = {"bacsa": init_bacsa, "glorot": init_glorot}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: NetworkParams, batch: np.ndarray) -> ForwardTrace:
    x = np.asarray(batch, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ValueError(f"feature dim {x.shape[1]} != network input dim {params.input_dim}")
    trace = ForwardTrace(inputs=x)
    a = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = softmax(z) if i == last else np.maximum(z, 0.0)
        trace.pre_activations.append(z)
        trace.activations.append(a)
    return trace


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def loss_nll(trace: ForwardTrace, labels) -> float:
    probs = trace.probs
    y = _check_labels(labels, probs.shape[1])
    if y.shape[0] != probs.shape[0]:
        raise ValueError("label count does not match batch size")
    picked = np.maximum(probs[np.arange(y.shape[0]), y], PROB_FLOOR)
    return float(-np.log(picked).mean())


def backward(params: NetworkParams, trace: ForwardTrace, labels) -> NetworkParams:
    """Gradient of the batch-mean NLL with respect to every weight and bias."""
    probs = trace.probs
    y = _check_labels(labels, probs.shape[1])
    n = probs.shape[0]
    if y.shape[0] != n or len(trace.activations) != params.n_layers:
        raise ValueError("trace/labels do not match the parameters")
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for i in range(params.n_layers - 1, -1, -1):
        a_prev = trace.inputs if i == 0 else trace.activations[i - 1]
        gw[i] = delta.T @ a_prev
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * (trace.pre_activations[i - 1] > 0)
    return NetworkParams(gw, gb, None)


def sgd_step(params: NetworkParams, grads: NetworkParams, cfg: TrainConfig) -> NetworkParams:
    """``W <- W - lr * (grad + weight_decay * W)`` on every weight and bias."""
    if params.shapes() != grads.shapes():
        raise ValueError("gradient shapes do not match parameters")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    weights = [w - lr * (g + wd * w) for w, g in zip(params.weights, grads.weights)]
    biases = [b - lr * (g + wd * b) for b, g in zip(params.biases, grads.biases)]
    return NetworkParams(weights, biases, params.seed)


def train_local(
    params: NetworkParams,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    seed: int | Sequence[int] = 0,
) -> NetworkParams:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD; returns a new model.

    Each epoch draws its permutation from a generator seeded by
    ``(seed, epoch)`` so results do not depend on call order. The trailing
    partial batch is kept.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    base = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    out = params.copy()
    n, bs = x.shape[0], cfg.batch_size
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([*base, epoch]).permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            trace = forward(out, x[idx])
            out = sgd_step(out, backward(out, trace, y[idx]), cfg)
    return out


def predict(params: NetworkParams, features: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, features).probs, axis=1)


def evaluate(params: NetworkParams, features: np.ndarray, labels: np.ndarray) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(params, features) == y))


def dataset_loss(params: NetworkParams, features: np.ndarray, labels: np.ndarray) -> float:
    return loss_nll(forward(params, features), labels)
