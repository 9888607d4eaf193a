"""Weight-sharing supernet over a :class:`CellSpace`.

Topology: linear stem -> cell (each intermediate node sums its incoming
edges) -> mean over intermediate nodes -> linear head.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .space import AVG, DENSE_RELU, DENSE_TANH, PARAMETRIC, SKIP, ZERO, CellSpace, validate_arch


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ad.ShapeError("batch", x.shape, y.shape)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    def check_labels(self, num_classes):
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")


def block_name(edge, kind):
    return f"e{edge}.{kind}"


class Supernet:
    def __init__(self, space: CellSpace, input_dim=2, hidden_dim=16, num_classes=3, seed=0):
        self.space = space
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.seed = seed
        self.weights = ad.ParamSet()
        self.velocity: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)

        def dense(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.add(name + ".W", rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.weights.add(name + ".b", rng.uniform(-bound, bound, fan_out))

        dense("stem", input_dim, hidden_dim)
        for e in range(space.num_edges):
            for kind in space.ops:
                if kind in PARAMETRIC:
                    dense(block_name(e, kind), hidden_dim, hidden_dim)
        dense("head", hidden_dim, num_classes)
        self._avg = np.full((hidden_dim, hidden_dim), 1.0 / hidden_dim)

    # -- structure -----------------------------------------------------------

    def clone(self) -> "Supernet":
        other = object.__new__(Supernet)
        other.__dict__.update(self.__dict__)
        other.weights = self.weights.copy()
        other.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return other

    def arch_param_names(self, arch):
        """Names of the weights an architecture actually uses."""
        arch = validate_arch(self.space, arch)
        names = ["stem.W", "stem.b"]
        for e, k in enumerate(arch):
            kind = self.space.ops[k]
            if kind in PARAMETRIC:
                names += [block_name(e, kind) + ".W", block_name(e, kind) + ".b"]
        return names + ["head.W", "head.b"]

    def zero_weights(self):
        self.weights.assign(np.zeros(self.weights.size))

    # -- forward -------------------------------------------------------------

    def _op(self, e, kind, x, w):
        if kind == SKIP:
            return x
        if kind == AVG:
            return ad.matmul(x, self._avg)
        name = block_name(e, kind)
        h = ad.add(ad.matmul(x, w[name + ".W"]), w[name + ".b"])
        return ad.relu(h) if kind == DENSE_RELU else ad.tanh(h)

    def _cell_logits(self, x, edge_fn, w):
        n = self.space.num_intermediate_nodes
        nodes = [ad.add(ad.matmul(ad.constant(x), w["stem.W"]), w["stem.b"])]
        incoming = {j: [] for j in range(1, n + 1)}
        for e, (i, j) in enumerate(self.space.edges):
            incoming[j].append((e, i))
        zeros = ad.constant(np.zeros((x.shape[0], self.hidden_dim)))
        for j in range(1, n + 1):
            acc = None
            for e, i in incoming[j]:
                out = edge_fn(e, nodes[i])
                if out is None:
                    continue
                acc = out if acc is None else ad.add(acc, out)
            nodes.append(zeros if acc is None else acc)
        cell = nodes[1]
        for node in nodes[2:]:
            cell = ad.add(cell, node)
        cell = ad.mul(cell, 1.0 / n)
        return ad.add(ad.matmul(cell, w["head.W"]), w["head.b"])

    def logits_mixed(self, logits, inputs, weights=None):
        w = self.weights if weights is None else weights
        alpha = ad.as_node(logits)
        if alpha.value.shape != (self.space.num_edges, self.space.num_ops):
            raise ad.ShapeError("arch logits", alpha.value.shape, (self.space.num_edges, self.space.num_ops))
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError("inputs", x.shape, (x.shape[0] if x.ndim else 0, self.input_dim))
        return self.logits_mixture(ad.softmax(alpha), x, w)

    def logits_mixture(self, mix, inputs, weights=None):
        """Forward with the per-edge mixture weights given directly (no softmax)."""
        w = self.weights if weights is None else weights
        mix = ad.as_node(mix)
        if mix.value.shape != (self.space.num_edges, self.space.num_ops):
            raise ad.ShapeError("mixture", mix.value.shape, (self.space.num_edges, self.space.num_ops))
        x = np.asarray(inputs, dtype=np.float64)

        def edge_fn(e, h):
            acc = None
            for k, kind in enumerate(self.space.ops):
                if kind == ZERO:
                    continue
                term = ad.mul(self._op(e, kind, h, w), ad.take(mix, (e, k)))
                acc = term if acc is None else ad.add(acc, term)
            return acc

        return self._cell_logits(x, edge_fn, w)

    def logits_discrete(self, arch, inputs, weights=None):
        w = self.weights if weights is None else weights
        arch = validate_arch(self.space, arch)
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError("inputs", x.shape, (x.shape[0] if x.ndim else 0, self.input_dim))

        def edge_fn(e, h):
            kind = self.space.ops[arch[e]]
            return None if kind == ZERO else self._op(e, kind, h, w)

        return self._cell_logits(x, edge_fn, w)

    def forward_mixed(self, logits, batch: Batch, weights=None) -> ad.Node:
        batch.check_labels(self.num_classes)
        return ad.cross_entropy(self.logits_mixed(logits, batch.inputs, weights), batch.labels)

    def forward_mixture(self, mix, batch: Batch, weights=None) -> ad.Node:
        batch.check_labels(self.num_classes)
        return ad.cross_entropy(self.logits_mixture(mix, batch.inputs, weights), batch.labels)

    def forward_discrete(self, arch, batch: Batch, weights=None) -> ad.Node:
        batch.check_labels(self.num_classes)
        return ad.cross_entropy(self.logits_discrete(arch, batch.inputs, weights), batch.labels)

    def forward(self, logits_or_arch, batch, weights=None):
        if _is_arch(logits_or_arch):
            return self.forward_discrete(logits_or_arch, batch, weights)
        return self.forward_mixed(logits_or_arch, batch, weights)

    # -- evaluation / training ----------------------------------------------

    def accuracy(self, arch, batches) -> float:
        correct = total = 0
        for b in _as_batches(batches):
            pred = np.argmax(self.logits_discrete(arch, b.inputs).value, axis=1)
            correct += int(np.sum(pred == b.labels))
            total += len(b)
        if total == 0:
            raise ValueError("accuracy over an empty dataset")
        return correct / total

    def loss_and_grad(self, logits_or_arch, batch):
        self.weights.zero_grad()
        root = self.forward(logits_or_arch, batch)
        loss = ad.forward(root)
        if not np.isfinite(loss):
            raise ad.NonFiniteError(f"non-finite training loss {loss}")
        root.backward()
        return loss

    def sgd_weight_step(self, logits_or_arch, batch, lr, momentum=0.0) -> float:
        """One momentum-SGD step on the training loss; returns the pre-step loss."""
        if lr < 0:
            raise ValueError("lr must be nonnegative")
        loss = self.loss_and_grad(logits_or_arch, batch)
        for name, node in zip(self.weights.names, self.weights.nodes):
            if node.grad is None:
                continue
            v = self.velocity.get(name)
            v = node.grad.copy() if v is None else momentum * v + node.grad
            self.velocity[name] = v
            node.value = node.value - lr * v
        return loss

    # -- persistence ---------------------------------------------------------

    def save_weights(self, path):
        path = Path(path)
        self.weights.flatten().astype("<f8").tofile(path.with_suffix(".bin"))
        manifest = {
            "format": "distnas-weights/1",
            "dtype": "float64-le",
            "space": self.space.to_dict(),
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "params": self.weights.manifest(),
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load_weights(cls, path) -> "Supernet":
        path = Path(path)
        m = json.loads(path.with_suffix(".json").read_text())
        net = cls(CellSpace.from_dict(m["space"]), m["input_dim"], m["hidden_dim"], m["num_classes"], m["seed"])
        if net.weights.manifest() != m["params"]:
            raise ValueError("weight manifest does not match the network layout")
        net.weights.assign(np.fromfile(path.with_suffix(".bin"), dtype="<f8"))
        return net


def _is_arch(x):
    if isinstance(x, ad.Node):
        return False
    a = np.asarray(x)
    return a.ndim == 1 and np.issubdtype(a.dtype, np.integer)


def _as_batches(batches):
    if isinstance(batches, Batch):
        return [batches]
    return list(batches)
