"""Desk-scale fine-tuning workbench: synthetic tasks, Adam training, evaluation.

A seeded MLP stands in for the pretrained network.  After pruning, every
linear layer gets a frozen quantized base plus a trainable low-rank adapter;
only the adapter factors are updated during recovery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .adapters import LoraAdapter, loftq_init
from .nn import (
    ToyModel,
    build_model,
    loss_grad,
    mlp_backward,
    mlp_forward,
    per_sample_loss,
)
from .quantizer import CodebookKind, QuantizedMatrix, build_codebook, dequantize, quantize

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (16, 32, 32, 32, 16)
DEFAULT_KINDS = {4: CodebookKind.NORMAL_FLOAT, 8: CodebookKind.UNIFORM}


class TaskKind(str, Enum):
    BLOBS = "blobs"
    TEACHER = "teacher"


class AdapterInit(str, Enum):
    LOFTQ = "loftq"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class Task:
    kind: TaskKind
    seed: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_features: int
    n_outputs: int
    teacher: ToyModel | None = None

    @property
    def loss(self) -> str:
        return "xent" if self.kind == TaskKind.BLOBS else "mse"

    def split(self, name: str):
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, f"X_{name}"), getattr(self, f"y_{name}")


def make_task(
    kind="blobs",
    seed: int = 0,
    sizes=(512, 256, 256),
    n_features: int = 16,
    n_outputs: int = 16,
    separation: float = 4.0,
    noise: float = 0.05,
) -> Task:
    """Build a seeded synthetic task.

    ``blobs``: ``n_outputs`` unit-variance Gaussian clusters whose centers sit
    ``separation`` apart (exactly, when ``n_outputs <= n_features``).
    ``teacher``: targets from a fixed random tanh MLP plus Gaussian noise.
    """
    kind = TaskKind(kind)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError("sizes must be three positive split sizes")
    rng = np.random.default_rng(seed)
    n = sum(sizes)
    teacher = None
    if kind == TaskKind.BLOBS:
        k = n_outputs
        if k <= n_features:
            basis, _ = np.linalg.qr(rng.normal(size=(n_features, k)))
            centers = basis.T * (separation / np.sqrt(2.0))
        else:
            centers = rng.normal(size=(k, n_features)) * separation / np.sqrt(2.0 * n_features)
        y = rng.permutation(np.arange(n) % k)
        X = centers[y] + rng.normal(size=(n, n_features))
    else:
        teacher = build_model((n_features, 32, n_outputs), activation="tanh", seed=int(rng.integers(2**31)))
        X = rng.normal(size=(n, n_features))
        y = teacher.forward(X) + noise * rng.normal(size=(n, n_outputs))
    a, b = sizes[0], sizes[0] + sizes[1]
    return Task(kind, seed, X[:a], y[:a], X[a:b], y[a:b], X[b:], y[b:], n_features, n_outputs, teacher)


def evaluate(model, task: Task, split: str = "val") -> float:
    """Accuracy for classification, ``1 / (1 + MSE)`` for regression."""
    X, y = task.split(split)
    if len(X) == 0:
        raise ValueError("empty split")
    out = model.forward(X)
    if task.kind == TaskKind.BLOBS:
        return float(np.mean(np.argmax(out, axis=1) == y))
    return float(1.0 / (1.0 + np.mean((out - y) ** 2)))


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 50
    lr: float = 3e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_biases: bool = False


@dataclass
class TrainReport:
    P: float
    loss_curve: list
    val_curve: list
    epochs: int
    seed: int
    best_epoch: int

    def to_dict(self) -> dict:
        return {
            "P": self.P,
            "loss_curve": list(self.loss_curve),
            "val_curve": list(self.val_curve),
            "epochs": self.epochs,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
        }


class Adam:
    def __init__(self, params, hyper: TrainHyper):
        self.params = params
        self.h = hyper
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        h = self.h
        self.t += 1
        c1 = 1.0 - h.beta1**self.t
        c2 = 1.0 - h.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * g * g
            p -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(value: float, epoch: int):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite training loss at epoch {epoch}")


def train_full(model: ToyModel, task: Task, hyper: TrainHyper = TrainHyper()) -> tuple[ToyModel, TrainReport]:
    """Full-precision training of every weight; used to build the base model."""
    model = model.copy()
    params = model.weights + model.biases
    opt = Adam(params, hyper)
    rng = np.random.default_rng(hyper.seed)
    best = (evaluate(model, task, "val"), 0, [p.copy() for p in params])
    curve, val_curve = [], [best[0]]
    with np.errstate(over="raise", invalid="raise"):
        for epoch in range(1, hyper.epochs + 1):
            total = 0.0
            for idx in _batches(len(task.X_train), hyper.batch_size, rng):
                out, cache = mlp_forward(model.weights, model.biases, model.activation, task.X_train[idx])
                value, g = loss_grad(out, task.y_train[idx], task.loss)
                _check_finite(value, epoch)
                deltas = mlp_backward(model.weights, model.activation, cache, g)
                gW = [d.T @ c[0] for d, c in zip(deltas, cache)]
                gb = [d.sum(axis=0) for d in deltas]
                opt.step(gW + gb)
                total += value * len(idx)
            curve.append(total / len(task.X_train))
            metric = evaluate(model, task, "val")
            val_curve.append(metric)
            if metric > best[0]:
                best = (metric, epoch, [p.copy() for p in params])
    for p, saved in zip(params, best[2]):
        p[...] = saved
    return model, TrainReport(best[0], curve, val_curve, hyper.epochs, hyper.seed, best[1])


@dataclass
class AssembledLayer:
    base: QuantizedMatrix
    adapter: LoraAdapter
    bias: np.ndarray
    frozen: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.frozen = dequantize(self.base)
        # adapter factors are trained in place
        self.A = self.adapter.A.copy()
        self.B = self.adapter.B.copy()
        self.bias = np.array(self.bias, dtype=np.float64)

    def effective_weight(self) -> np.ndarray:
        return self.frozen + self.A @ self.B


@dataclass
class AssembledModel:
    layers: list
    activation: str
    config: tuple

    @property
    def n_trainable(self) -> int:
        return sum(layer.A.size + layer.B.size for layer in self.layers)

    def weights(self):
        return [layer.effective_weight() for layer in self.layers]

    def forward(self, X) -> np.ndarray:
        biases = [layer.bias for layer in self.layers]
        return mlp_forward(self.weights(), biases, self.activation, X)[0]

    def copy(self) -> "AssembledModel":
        layers = []
        for layer in self.layers:
            clone = AssembledLayer(layer.base, LoraAdapter(layer.A, layer.B), layer.bias)
            layers.append(clone)
        return AssembledModel(layers, self.activation, self.config)


def assemble(
    pruned,
    q,
    rank: int = 4,
    init="loftq",
    T: int = 1,
    kinds=None,
    block_size: int = 64,
    seed: int = 0,
) -> AssembledModel:
    """Quantize each layer at its configured bit-width and attach an adapter."""
    init = AdapterInit(init)
    kinds = {**DEFAULT_KINDS, **(kinds or {})}
    q = tuple(int(b) for b in q)
    if len(q) != len(pruned.weights):
        raise ValueError(f"config has {len(q)} entries but the model has {len(pruned.weights)} layers")
    if any(b not in (4, 8) for b in q):
        raise ValueError("bit-widths must be 4 or 8")
    rng = np.random.default_rng(seed)
    layers = []
    for W, b, bits in zip(pruned.weights, pruned.biases, q):
        codebook = build_codebook(bits, kinds[bits])
        r = min(rank, *W.shape)
        if init == AdapterInit.LOFTQ:
            res = loftq_init(W, codebook, block_size, r, T)
            base, adapter = res.Q, res.adapter
        else:
            base = quantize(W, codebook, block_size)
            adapter = LoraAdapter.gaussian(W.shape[0], W.shape[1], r, rng)
        layers.append(AssembledLayer(base, adapter, b))
    return AssembledModel(layers, pruned.activation, q)


def adapter_gradients(model: AssembledModel, X, y, loss: str):
    """Mean loss and its gradients with respect to every A, B and bias."""
    weights = model.weights()
    biases = [layer.bias for layer in model.layers]
    out, cache = mlp_forward(weights, biases, model.activation, X)
    value, g = loss_grad(out, y, loss)
    deltas = mlp_backward(weights, model.activation, cache, g)
    gA, gB, gb = [], [], []
    for layer, d, c in zip(model.layers, deltas, cache):
        gW = d.T @ c[0]
        gA.append(gW @ layer.B.T)
        gB.append(layer.A.T @ gW)
        gb.append(d.sum(axis=0))
    return value, gA, gB, gb


def mean_loss(model, X, y, loss: str) -> float:
    return float(np.mean(per_sample_loss(model.forward(X), y, loss)))


def train_adapters(model: AssembledModel, task: Task, hyper: TrainHyper = TrainHyper()) -> TrainReport:
    """Adam on the adapter factors only; the model ends at its best-val epoch.

    The quantized bases are never touched.  The reported ``P`` is the best
    validation metric over epochs, including the untrained start.
    """
    if hyper.epochs < 1:
        raise ValueError("epochs must be >= 1")
    params = [l.A for l in model.layers] + [l.B for l in model.layers]
    if hyper.train_biases:
        params += [l.bias for l in model.layers]
    opt = Adam(params, hyper)
    rng = np.random.default_rng(hyper.seed)

    def snapshot():
        return [p.copy() for p in params]

    best_metric = evaluate(model, task, "val")
    best_epoch, best_params = 0, snapshot()
    curve, val_curve = [], [best_metric]
    with np.errstate(over="raise", invalid="raise"):
        for epoch in range(1, hyper.epochs + 1):
            total = 0.0
            for idx in _batches(len(task.X_train), hyper.batch_size, rng):
                value, gA, gB, gb = adapter_gradients(model, task.X_train[idx], task.y_train[idx], task.loss)
                _check_finite(value, epoch)
                grads = gA + gB + (gb if hyper.train_biases else [])
                opt.step(grads)
                total += value * len(idx)
            curve.append(total / len(task.X_train))
            _check_finite(curve[-1], epoch)
            metric = evaluate(model, task, "val")
            val_curve.append(metric)
            if metric > best_metric:
                best_metric, best_epoch, best_params = metric, epoch, snapshot()
    for p, saved in zip(params, best_params):
        p[...] = saved
    return TrainReport(best_metric, curve, val_curve, hyper.epochs, hyper.seed, best_epoch)


def pretrain(widths=DEFAULT_WIDTHS, activation: str = "relu", task: Task | None = None, seed: int = 0, hyper=None):
    """Seeded base model trained in full precision on ``task``."""
    model = build_model(widths, activation, seed)
    if task is None:
        return model
    hyper = hyper or TrainHyper(seed=seed)
    trained, _ = train_full(model, task, hyper)
    return trained
