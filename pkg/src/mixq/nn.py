"""Dense MLP plumbing shared by the pruner and the workbench.

Rows are samples.  Layer ``i`` computes ``z = a @ W_i.T + b_i`` with
``W_i`` of shape ``(width[i+1], width[i])``; hidden layers apply the
activation, the last layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class ToyModel:
    weights: list
    biases: list
    activation: str = "relu"
    widths: tuple = field(init=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        widths = [self.weights[0].shape[1]]
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != widths[-1] or b.shape != (W.shape[0],):
                raise ValueError("inconsistent layer shapes")
            widths.append(W.shape[0])
        self.widths = tuple(widths)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [W.shape for W in self.weights]

    def copy(self) -> "ToyModel":
        return ToyModel([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def forward(self, X) -> np.ndarray:
        return mlp_forward(self.weights, self.biases, self.activation, X)[0]


def build_model(widths, activation: str = "relu", seed: int = 0) -> ToyModel:
    """He-initialized MLP (Xavier for tanh) with zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 3 or min(widths) < 1:
        raise ValueError("need at least two layers with positive widths")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        gain = 2.0 if activation == "relu" else 1.0
        weights.append(rng.normal(0.0, np.sqrt(gain / d_in), size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return ToyModel(weights, biases, activation)


def mlp_forward(weights, biases, activation, X):
    """Return the output and a cache of (input, pre-activation, output) per layer."""
    a = np.asarray(X, dtype=np.float64)
    cache = []
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W.T + b
        out = z if i == last else activate(z, activation)
        cache.append((a, z, out))
        a = out
    return a, cache


def mlp_backward(weights, activation, cache, grad_out):
    """Per-layer upstream gradients ``dL/dz_i`` given ``dL/d(output)``."""
    deltas = [None] * len(weights)
    g = grad_out
    for i in range(len(weights) - 1, -1, -1):
        _, z, out = cache[i]
        if i != len(weights) - 1:
            g = g * activate_grad(z, out, activation)
        deltas[i] = g
        if i:
            g = g @ weights[i]
    return deltas


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def per_sample_loss(out: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    if loss == "xent":
        z = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=1))
        return logz - z[np.arange(len(y)), y]
    if loss == "mse":
        return np.mean((out - y) ** 2, axis=1)
    raise ValueError(f"unknown loss {loss!r}")


def loss_grad(out: np.ndarray, y: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to ``out``."""
    n = out.shape[0]
    if loss == "xent":
        p = softmax(out)
        value = float(np.mean(per_sample_loss(out, y, loss)))
        p[np.arange(n), y] -= 1.0
        return value, p / n
    if loss == "mse":
        diff = out - y
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    raise ValueError(f"unknown loss {loss!r}")


def weight_gradients(model: ToyModel, X, y, loss: str):
    """Gradients of the mean loss with respect to every weight and bias."""
    out, cache = mlp_forward(model.weights, model.biases, model.activation, X)
    value, g = loss_grad(out, y, loss)
    deltas = mlp_backward(model.weights, model.activation, cache, g)
    gW = [d.T @ c[0] for d, c in zip(deltas, cache)]
    gb = [d.sum(axis=0) for d in deltas]
    return value, gW, gb, deltas, cache
