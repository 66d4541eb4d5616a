"""Fully connected ReLU classifier with hand-written reverse-mode gradients.

The network outputs raw logits. Inputs may be a single feature vector of
shape ``(d,)`` or a batch of shape ``(n, d)``; parameter gradients are summed
over the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"GRMLP"
FORMAT_VERSION = b"1"


class ShapeError(ValueError):
    pass


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed."""


class UnsupportedVersionError(ModelFormatError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


class Mlp:
    """Multilayer perceptron; ReLU on hidden layers, identity on the output.

    ``weights[l]`` has shape ``(dims[l+1], dims[l])`` and ``biases[l]`` has
    length ``dims[l+1]``.
    """

    def __init__(self, layer_dims: Sequence[int], weights=None, biases=None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ShapeError(f"layer_dims must list >= 2 positive sizes, got {dims}")
        self.layer_dims = dims
        if weights is None:
            weights = [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
        if biases is None:
            biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("need one weight matrix and bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]):
                raise ShapeError(f"layer {i}: weight shape {w.shape}, expected {(dims[i + 1], dims[i])}")
            if b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape}, expected {(dims[i + 1],)}")

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], seed: int = 0) -> "Mlp":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = list(layer_dims)
        weights = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        return cls(dims, weights=weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        return x

    def _forward(self, x: np.ndarray):
        # pre-activations per layer, needed by both VJPs
        acts = [x]
        pres = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pres.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts, pres

    def logits(self, x) -> np.ndarray:
        x = self._check_input(x)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = logits

    def predict(self, x) -> np.ndarray | int:
        z = self.logits(x)
        if z.ndim == 1:
            return int(np.argmax(z))
        return np.argmax(z, axis=1)

    def _backward(self, x, dz, want_params: bool):
        x = self._check_input(x)
        dz = np.asarray(dz, dtype=np.float64)
        if dz.shape != x.shape[:-1] + (self.class_count,):
            raise ShapeError(f"dZ shape {dz.shape} does not match logits shape {x.shape[:-1] + (self.class_count,)}")
        acts, pres = self._forward(x)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = dz
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                # subgradient of ReLU at 0 is 0
                g = g * (pres[i] > 0.0)
            if want_params:
                a = acts[i]
                if g.ndim == 1:
                    grads_w[i] = np.outer(g, a)
                    grads_b[i] = g.copy()
                else:
                    grads_w[i] = g.T @ a
                    grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return g, grads_w, grads_b

    def vjp_input(self, x, dz) -> np.ndarray:
        """Gradient with respect to the input of any scalar whose gradient
        with respect to the logits is ``dz``."""
        g, _, _ = self._backward(x, dz, want_params=False)
        return g

    def vjp_params(self, x, dz) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-layer ``(weight_grads, bias_grads)``, summed over a batch."""
        _, gw, gb = self._backward(x, dz, want_params=True)
        return gw, gb

    def sgd_update(self, grads_w, grads_b, learning_rate: float) -> None:
        for w, b, gw, gb in zip(self.weights, self.biases, grads_w, grads_b):
            w -= learning_rate * gw
            b -= learning_rate * gb

    def __eq__(self, other):
        if not isinstance(other, Mlp):
            return NotImplemented
        return self.layer_dims == other.layer_dims and all(
            np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters())
        )

    def __repr__(self):
        return f"Mlp(layer_dims={self.layer_dims})"


def batch_loss_grad(model: Mlp, X: np.ndarray, labels, loss: Callable) -> tuple[float, np.ndarray]:
    """Mean loss over a batch and the matching (already averaged) logit gradients."""
    Z = model.logits(X)
    n = len(Z)
    dZ = np.empty_like(Z)
    total = 0.0
    for i in range(n):
        res = loss(Z[i], int(labels[i]))
        total += res.value
        dZ[i] = res.grad
    return total / n, dZ / n


def sgd_batch_step(model: Mlp, X: np.ndarray, labels, loss: Callable, learning_rate: float) -> float:
    value, dZ = batch_loss_grad(model, X, labels, loss)
    gw, gb = model.vjp_params(X, dZ)
    model.sgd_update(gw, gb, learning_rate)
    return value


def train_epoch(model: Mlp, data, cfg: TrainConfig, loss: Callable | None = None, epoch: int = 0) -> float:
    """One seeded shuffled pass of minibatch SGD; updates ``model`` in place.

    Returns the mean per-batch loss (measured before each update).
    """
    if loss is None:
        from grouprobust.losses import cross_entropy as loss
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any(np.asarray(data.labels) >= model.class_count):
        raise ValueError("dataset labels exceed the model's class count")
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        losses.append(sgd_batch_step(model, data.instances[idx], data.labels[idx], loss, cfg.learning_rate))
    return float(np.mean(losses))


def train(model: Mlp, data, cfg: TrainConfig, loss: Callable | None = None) -> list[float]:
    return [train_epoch(model, data, cfg, loss, epoch=e) for e in range(cfg.epochs)]


def accuracy(model: Mlp, data) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(model.predict(data.instances) == data.labels))


def save(model: Mlp, path) -> None:
    out = bytearray(MAGIC + FORMAT_VERSION)
    out += struct.pack("<I", len(model.layer_dims))
    out += struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims)
    for w, b in zip(model.weights, model.biases):
        out += np.ascontiguousarray(w, dtype="<f8").tobytes()
        out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load(path) -> Mlp:
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 1
    if len(raw) < head or raw[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    version = raw[len(MAGIC):head]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported model format version {version!r}")
    pos = head
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = list(struct.unpack_from(f"<{count}I", raw, pos))
        pos += 4 * count
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated header") from exc
    if count < 2 or any(d < 1 for d in dims):
        raise ModelFormatError(f"{path}: invalid layer dims {dims}")
    expected = pos + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=pos).reshape(fan_out, fan_in)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return Mlp(dims, weights, biases)
