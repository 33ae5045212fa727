"""Structural pruning of a dense MLP: dependency groups, Taylor importance, removal."""

from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .nn import ToyModel, weight_gradients

log = logging.getLogger(__name__)


class ImportanceOrder(str, Enum):
    ELEMENT1 = "element1"
    ELEMENT2 = "element2"


class NeuronGraph:
    """Directed neuron graph; node ids are ``(layer, unit)`` pairs."""

    def __init__(self, nodes, edges, prunable=None, n_layers=None):
        self.nodes = sorted(set(nodes))
        self.out_edges = defaultdict(set)
        self.in_edges = defaultdict(set)
        for i, j in edges:
            self.out_edges[i].add(j)
            self.in_edges[j].add(i)
        self.prunable = set(self.nodes if prunable is None else prunable)
        self.n_layers = n_layers if n_layers is not None else max(k for k, _ in self.nodes)

    def in_degree(self, node) -> int:
        return len(self.in_edges.get(node, ()))

    def out_degree(self, node) -> int:
        return len(self.out_edges.get(node, ()))

    @property
    def edges(self):
        return [(i, j) for i in self.nodes for j in sorted(self.out_edges.get(i, ()))]

    @classmethod
    def from_model(cls, model: ToyModel) -> "NeuronGraph":
        widths = model.widths
        last = len(widths) - 1
        nodes = [(k, u) for k, w in enumerate(widths) for u in range(w)]
        edges = []
        for k, W in enumerate(model.weights):
            # structural connections, independent of the stored values
            for v in range(W.shape[0]):
                for u in range(W.shape[1]):
                    edges.append(((k, u), (k + 1, v)))
        prunable = [(k, u) for k, u in nodes if 0 < k < last]
        return cls(nodes, edges, prunable, n_layers=last)


@dataclass
class PruneGroup:
    neurons: frozenset
    weight_slices: tuple
    importance: float = 0.0

    @property
    def key(self):
        return min(self.neurons)

    def n_params(self, widths) -> int:
        total = 0
        for layer, kind, _ in self.weight_slices:
            if kind == "row":
                total += widths[layer]
            elif kind == "col":
                total += widths[layer + 1]
            else:
                total += 1
        return total


def neuron_slices(node, n_layers: int):
    """Weights incident to one neuron: incoming row and bias, outgoing column."""
    k, u = node
    out = []
    if k > 0:
        out.append((k - 1, "row", u))
        out.append((k - 1, "bias", u))
    if k < n_layers:
        out.append((k, "col", u))
    return out


def discover_groups(graph: NeuronGraph) -> list[PruneGroup]:
    """Connected closures of the dependency rule over prunable neurons.

    ``j`` joins ``i``'s group when ``j`` is in ``Out(i)`` and has in-degree
    one, and symmetrically when ``j`` is ``i``'s only consumer.
    """
    link = defaultdict(set)
    for i in graph.nodes:
        for j in graph.out_edges.get(i, ()):
            if i not in graph.prunable or j not in graph.prunable:
                continue
            if graph.in_degree(j) == 1 or graph.out_degree(i) == 1:
                link[i].add(j)
                link[j].add(i)

    seen = set()
    groups = []
    for seed in sorted(graph.prunable):
        if seed in seen:
            continue
        members = {seed}
        stack = [seed]
        while stack:
            node = stack.pop()
            for other in link[node]:
                if other not in members:
                    members.add(other)
                    stack.append(other)
        seen |= members
        slices = []
        for node in sorted(members):
            slices.extend(neuron_slices(node, graph.n_layers))
        groups.append(PruneGroup(frozenset(members), tuple(slices)))
    return groups


def parameter_scores(model: ToyModel, X, y, loss: str, order=ImportanceOrder.ELEMENT1):
    """Per-parameter Taylor importance, as (weight scores, bias scores).

    Element1 is ``|g * w|``.  Element2 subtracts half the diagonal empirical
    Fisher term ``mean_j (g_j * w)^2`` inside the absolute value, where
    ``g_j`` is the gradient of sample ``j``'s own loss.
    """
    order = ImportanceOrder(order)
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("importance needs a nonempty dataset")
    n = len(X)
    _, gW, gb, deltas, cache = weight_gradients(model, X, y, loss)
    for i, (g, h) in enumerate(zip(gW, gb)):
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise FloatingPointError(f"non-finite gradient in layer {i}")
    sW, sb = [], []
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        first_w = gW[i] * W
        first_b = gb[i] * b
        if order == ImportanceOrder.ELEMENT1:
            sW.append(np.abs(first_w))
            sb.append(np.abs(first_b))
            continue
        # per-sample deltas of the mean loss are 1/n of the sample's own
        d = deltas[i] * n
        a = cache[i][0]
        fisher_w = (d**2).T @ (a**2) / n
        fisher_b = np.sum(d**2, axis=0) / n
        sW.append(np.abs(first_w - 0.5 * fisher_w * W**2))
        sb.append(np.abs(first_b - 0.5 * fisher_b * b**2))
    return sW, sb


def _sum_slices(group: PruneGroup, sW, sb) -> float:
    total = 0.0
    for layer, kind, idx in group.weight_slices:
        if kind == "row":
            total += float(sW[layer][idx, :].sum())
        elif kind == "col":
            total += float(sW[layer][:, idx].sum())
        else:
            total += float(sb[layer][idx])
    return total


def group_importance(group: PruneGroup, model: ToyModel, dataset, order=ImportanceOrder.ELEMENT1) -> float:
    X, y, loss = dataset
    sW, sb = parameter_scores(model, X, y, loss, order)
    return _sum_slices(group, sW, sb)


def rank_groups(groups, model: ToyModel, dataset, order=ImportanceOrder.ELEMENT1) -> list[PruneGroup]:
    """Score every group once and return them sorted least important first."""
    X, y, loss = dataset
    sW, sb = parameter_scores(model, X, y, loss, order)
    scored = [PruneGroup(g.neurons, g.weight_slices, _sum_slices(g, sW, sb)) for g in groups]
    return sorted(scored, key=lambda g: (g.importance, g.key))


@dataclass
class PrunedModel:
    model: ToyModel
    retained: list
    original_widths: tuple
    target_rate: float = 0.0
    achieved_rate: float = 0.0
    rate_reached: bool = True
    removed: list = field(default_factory=list)

    @property
    def weights(self):
        return self.model.weights

    @property
    def biases(self):
        return self.model.biases

    @property
    def activation(self) -> str:
        return self.model.activation

    @property
    def widths(self):
        return self.model.widths

    @property
    def layer_shapes(self):
        return self.model.layer_shapes

    @property
    def n_layers(self) -> int:
        return self.model.n_layers

    def forward(self, X):
        return self.model.forward(X)

    def manifest(self) -> dict:
        return {
            "widths": list(self.widths),
            "original_widths": list(self.original_widths),
            "activation": self.activation,
            "retained": [[int(i) for i in r] for r in self.retained],
            "target_rate": self.target_rate,
            "achieved_rate": self.achieved_rate,
            "rate_reached": self.rate_reached,
            "removed": [sorted([list(n) for n in neurons]) for neurons in self.removed],
        }

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        arrays = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
        with open(os.path.join(directory, "arrays.npz"), "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, directory) -> "PrunedModel":
        with open(os.path.join(directory, "manifest.json")) as fh:
            meta = json.load(fh)
        n = len(meta["widths"]) - 1
        with np.load(os.path.join(directory, "arrays.npz")) as data:
            weights = [data[f"W{i}"] for i in range(n)]
            biases = [data[f"b{i}"] for i in range(n)]
        model = ToyModel(weights, biases, meta["activation"])
        if list(model.widths) != meta["widths"]:
            raise ValueError("manifest widths disagree with stored arrays")
        return cls(
            model=model,
            retained=[np.asarray(r, dtype=np.int64) for r in meta["retained"]],
            original_widths=tuple(meta["original_widths"]),
            target_rate=meta["target_rate"],
            achieved_rate=meta["achieved_rate"],
            rate_reached=meta["rate_reached"],
            removed=[frozenset(tuple(n) for n in g) for g in meta["removed"]],
        )


def prunable_param_count(model: ToyModel) -> int:
    """Parameters incident to at least one hidden neuron."""
    return sum(W.size for W in model.weights) + sum(b.size for b in model.biases[:-1])


def compact(model: ToyModel, retained) -> ToyModel:
    weights, biases = [], []
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        rows, cols = retained[k + 1], retained[k]
        weights.append(W[np.ix_(rows, cols)].copy())
        biases.append(b[rows].copy())
    return ToyModel(weights, biases, model.activation)


def mask(model: ToyModel, retained) -> ToyModel:
    """Original-shaped copy with every dropped unit's incident weights zeroed."""
    masked = model.copy()
    for k in range(1, len(model.widths) - 1):
        drop = np.setdiff1d(np.arange(model.widths[k]), retained[k])
        masked.weights[k - 1][drop, :] = 0.0
        masked.biases[k - 1][drop] = 0.0
        masked.weights[k][:, drop] = 0.0
    return masked


def _param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def prune(model: ToyModel, groups, rate: float) -> PrunedModel:
    """Remove the least important groups until ``rate`` of prunable params is gone.

    Groups are visited in ascending importance across all layers.  A group is
    skipped if removing it would empty a layer.  If the rate cannot be met the
    result carries ``rate_reached=False``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    widths = list(model.widths)
    original = _param_count(widths)
    pool = prunable_param_count(model)
    alive = [set(range(w)) for w in widths]
    removed = []
    achieved = 0.0
    ranked = sorted(groups, key=lambda g: (g.importance, g.key))
    for group in ranked:
        if achieved >= rate:
            break
        per_layer = defaultdict(int)
        for k, u in group.neurons:
            per_layer[k] += 1
        if any(len(alive[k]) - c < 1 for k, c in per_layer.items()):
            continue
        for k, u in group.neurons:
            alive[k].discard(u)
        removed.append(group.neurons)
        current = _param_count([len(a) for a in alive])
        achieved = (original - current) / pool
    retained = [np.array(sorted(a), dtype=np.int64) for a in alive]
    reached = achieved >= rate
    if not reached:
        log.warning("prune rate %.3f unreachable; stopped at %.3f", rate, achieved)
    return PrunedModel(
        model=compact(model, retained),
        retained=retained,
        original_widths=tuple(widths),
        target_rate=rate,
        achieved_rate=achieved,
        rate_reached=reached,
        removed=removed,
    )
