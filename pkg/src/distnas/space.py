"""Cell-structured operation-selection search space."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

SKIP = "skip"
ZERO = "zero"
DENSE_RELU = "dense_relu"
DENSE_TANH = "dense_tanh"
AVG = "avg"

OP_KINDS = (SKIP, ZERO, DENSE_RELU, DENSE_TANH, AVG)
PARAMETRIC = frozenset({DENSE_RELU, DENSE_TANH})

DEFAULT_ENUM_CAP = 20_000


class SpaceError(ValueError):
    pass


class EnumerationCapError(SpaceError):
    def __init__(self, required, cap):
        super().__init__(f"space has {required} architectures, enumeration cap is {cap}")
        self.required = required
        self.cap = cap


def dense_edges(num_intermediate_nodes):
    """Edges from every earlier node (node 0 is the cell input) to each intermediate node."""
    return tuple((i, j) for j in range(1, num_intermediate_nodes + 1) for i in range(j))


@dataclass(frozen=True)
class CellSpace:
    num_intermediate_nodes: int = 3
    ops: tuple = (SKIP, DENSE_RELU, ZERO)
    edges: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.edges is None:
            object.__setattr__(self, "edges", dense_edges(self.num_intermediate_nodes))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        self.validate()

    def validate(self):
        n = self.num_intermediate_nodes
        if n < 1:
            raise SpaceError("need at least one intermediate node")
        if len(self.ops) < 2:
            raise SpaceError("need at least two candidate operations")
        unknown = [o for o in self.ops if o not in OP_KINDS]
        if unknown:
            raise SpaceError(f"unknown op kinds {unknown}; choose from {OP_KINDS}")
        if self.ops.count(SKIP) > 1 or self.ops.count(ZERO) > 1:
            raise SpaceError("at most one skip and one zero op allowed")
        if len(set(self.ops)) != len(self.ops):
            raise SpaceError("duplicate op kinds")
        incoming = {j: 0 for j in range(1, n + 1)}
        for i, j in self.edges:
            # i < j keeps the graph acyclic
            if not (0 <= i < j <= n):
                raise SpaceError(f"edge ({i}, {j}) is not a forward edge of a {n}-node cell")
            incoming[j] += 1
        missing = [j for j, c in incoming.items() if c == 0]
        if missing:
            raise SpaceError(f"intermediate nodes {missing} have no incoming edge")

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def num_ops(self):
        return len(self.ops)

    @property
    def num_archs(self):
        return self.num_ops ** self.num_edges

    @property
    def dim(self):
        return self.num_edges * self.num_ops

    def op_index(self, kind):
        if kind not in self.ops:
            raise SpaceError(f"op kind {kind!r} not in space {self.ops}")
        return self.ops.index(kind)

    def to_dict(self):
        return {
            "num_intermediate_nodes": self.num_intermediate_nodes,
            "ops": list(self.ops),
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            num_intermediate_nodes=int(d.get("num_intermediate_nodes", 3)),
            ops=tuple(d.get("ops", (SKIP, DENSE_RELU, ZERO))),
            edges=None if d.get("edges") is None else tuple(tuple(e) for e in d["edges"]),
        )


def relax(logits):
    """Row-wise softmax of architecture logits."""
    a = np.asarray(logits, dtype=np.float64)
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def discretize_argmax(x) -> tuple:
    """Per-edge argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return tuple(int(i) for i in np.argmax(x, axis=1))


def enumerate_all(space: CellSpace, cap=DEFAULT_ENUM_CAP):
    """Yield every discrete architecture in lexicographic order."""
    if space.num_archs > cap:
        raise EnumerationCapError(space.num_archs, cap)
    return itertools.product(range(space.num_ops), repeat=space.num_edges)


def arch_id(space: CellSpace, arch) -> int:
    """Position of ``arch`` in the lexicographic enumeration."""
    idx = 0
    for k in arch:
        idx = idx * space.num_ops + int(k)
    return idx


def arch_from_id(space: CellSpace, idx: int) -> tuple:
    out = []
    for _ in range(space.num_edges):
        idx, k = divmod(idx, space.num_ops)
        out.append(k)
    return tuple(reversed(out))


def validate_arch(space: CellSpace, arch):
    arch = tuple(int(k) for k in arch)
    if len(arch) != space.num_edges or any(not 0 <= k < space.num_ops for k in arch):
        raise SpaceError(f"{arch} is not a valid architecture for {space.num_edges} edges x {space.num_ops} ops")
    return arch


def op_ratio(space: CellSpace, arch, kind) -> float:
    k = space.op_index(kind)
    arch = validate_arch(space, arch)
    return sum(1 for a in arch if a == k) / len(arch)


def onehot(space: CellSpace, arch) -> np.ndarray:
    m = np.zeros((space.num_edges, space.num_ops))
    m[np.arange(space.num_edges), list(arch)] = 1.0
    return m


def format_arch(arch) -> str:
    return "-".join(str(int(k)) for k in arch)


def parse_arch(text) -> tuple:
    return tuple(int(k) for k in str(text).split("-"))
