"""Model-space trees and the input-dependent tail-free weight measure.

Base models sit at the leaves of a rooted tree; internal nodes are named
groups (for instance model families).  Each sibling set competes through a
temperature-scaled softmax of per-node latent function values, and a leaf's
ensemble weight is the product of the conditional probabilities along its
ancestry.  Small temperatures sharpen selection toward one leaf, large ones
flatten it toward uniform.

Nodes that own a latent function are exactly the non-root nodes whose parent
has two or more children; a single child inherits its parent's probability
mass directly and carries no latent function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import TreeMismatch

__all__ = [
    "ModelTree",
    "TemperatureSet",
    "NodeGPValues",
    "WeightMeasure",
    "softmax_conditional",
    "leaf_weights",
    "weight_matrix",
    "weight_entropy",
]

ROOT = "root"


def softmax_conditional(sibling_g, lam) -> np.ndarray:
    """Temperature-scaled softmax over one sibling set.

    p_j = exp(g_j / lam) / sum_j' exp(g_j' / lam), computed with
    max-subtraction so small temperatures do not overflow.  ``sibling_g`` may
    carry leading batch dimensions; the softmax runs over the last axis.
    ``lam`` is a positive scalar or an array broadcastable against the
    leading dimensions.
    """
    g = np.asarray(sibling_g, dtype=float)
    if g.shape[-1] < 1:
        raise ValueError("sibling_g must be non-empty")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("temperature must be positive")
    z = g / lam[..., None] if lam.ndim else g / lam
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weight_entropy(w) -> float:
    """Shannon entropy of a weight vector in nats; 0 iff one-hot."""
    w = np.asarray(w, dtype=float)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


class ModelTree:
    """A rooted partition of the base-model space.

    Construct from a nested spec where mappings are internal nodes and
    strings are leaves referencing base-model names::

        ModelTree.from_spec({"smooth": ["m1", "m2"], "complex": ["m3", "m4"]})
        ModelTree.flat(["m1", "m2", "m3"])

    Node names must be unique across the whole tree.
    """

    def __init__(self, children: Mapping[str, tuple[str, ...]], leaf_names: Sequence[str]):
        self._children = {k: tuple(v) for k, v in children.items()}
        self.leaf_names = tuple(leaf_names)
        self._parent = {}
        for parent, kids in self._children.items():
            for c in kids:
                self._parent[c] = parent
        self._validate()
        # nodes owning a latent function / internal nodes owning a temperature
        self.gp_nodes = tuple(
            node for node, parent in self._parent.items()
            if len(self._children[parent]) >= 2
        )
        self.temp_nodes = tuple(
            node for node, kids in self._children.items() if len(kids) >= 2
        )

    # -- construction ------------------------------------------------------

    @classmethod
    def flat(cls, leaf_names: Sequence[str]) -> "ModelTree":
        return cls.from_spec(list(leaf_names))

    @classmethod
    def from_spec(cls, spec) -> "ModelTree":
        children: dict[str, tuple[str, ...]] = {}
        leaves: list[str] = []

        def build(name: str, node) -> None:
            if isinstance(node, str):
                raise ValueError("leaf names must appear inside a list")
            if isinstance(node, Mapping):
                kid_names = []
                for kid_name, kid_node in node.items():
                    kid_names.append(str(kid_name))
                    build(str(kid_name), kid_node)
                children[name] = tuple(kid_names)
            elif isinstance(node, Sequence):
                kid_names = []
                for kid in node:
                    if isinstance(kid, str):
                        kid_names.append(kid)
                        leaves.append(kid)
                    elif isinstance(kid, Mapping):
                        if len(kid) != 1:
                            raise ValueError("nested group entries must be single-key mappings")
                        (kname, knode), = kid.items()
                        kid_names.append(str(kname))
                        build(str(kname), knode)
                    else:
                        raise ValueError(f"unsupported tree entry: {kid!r}")
                children[name] = tuple(kid_names)
            else:
                raise ValueError(f"unsupported tree node: {node!r}")

        build(ROOT, spec)
        return cls(children, leaves)

    # -- structure ---------------------------------------------------------

    def _validate(self) -> None:
        names = [ROOT]
        for kids in self._children.values():
            names.extend(kids)
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique (root name is reserved)")
        if not self.leaf_names:
            raise ValueError("tree needs at least one leaf")
        for node, kids in self._children.items():
            if len(kids) < 1:
                raise ValueError(f"internal node {node!r} has no children")
        # connectivity: every leaf must reach the root
        for leaf in self.leaf_names:
            seen = set()
            node = leaf
            while node != ROOT:
                if node in seen or node not in self._parent:
                    raise ValueError(f"node {leaf!r} is not connected to the root")
                seen.add(node)
                node = self._parent[node]

    def children(self, node: str) -> tuple[str, ...]:
        return self._children.get(node, ())

    def parent(self, node: str) -> str:
        return self._parent[node]

    def is_leaf(self, node: str) -> bool:
        return node not in self._children

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_names)

    def leaf_index(self, name: str) -> int:
        return self.leaf_names.index(name)

    def ancestry(self, leaf: str) -> tuple[str, ...]:
        """Nodes from the leaf (inclusive) up to, excluding, the root."""
        out = []
        node = leaf
        while node != ROOT:
            out.append(node)
            node = self._parent[node]
        return tuple(out)

    def to_spec(self):
        """Nested plain-python structure inverse to :meth:`from_spec`."""
        def node_spec(name):
            kids = self._children.get(name)
            if kids is None:
                return name
            out = []
            for k in kids:
                if self.is_leaf(k):
                    out.append(k)
                else:
                    out.append({k: node_spec(k)})
            return out
        return node_spec(ROOT)

    def __eq__(self, other):
        return (isinstance(other, ModelTree)
                and self._children == other._children
                and self.leaf_names == other.leaf_names)

    def __repr__(self):
        return f"ModelTree({self.to_spec()!r})"


@dataclass(frozen=True)
class TemperatureSet:
    """Positive softmax temperatures, one per internal node with >= 2 children."""

    values: Mapping[str, float]

    def __post_init__(self):
        for node, lam in self.values.items():
            if not (np.all(np.isfinite(lam)) and np.all(np.asarray(lam) > 0)):
                raise ValueError(f"temperature for {node!r} must be positive")

    @classmethod
    def tied(cls, tree: ModelTree, lam: float) -> "TemperatureSet":
        return cls({node: lam for node in tree.temp_nodes})

    def value(self, node: str):
        try:
            return self.values[node]
        except KeyError:
            raise TreeMismatch(f"no temperature for internal node {node!r}")


@dataclass(frozen=True)
class NodeGPValues:
    """Latent function values per competing tree node, aligned over points.

    ``values[node]`` has shape (..., n_points); all nodes must agree on the
    shape.
    """

    values: Mapping[str, np.ndarray]

    def __post_init__(self):
        shapes = {np.asarray(v).shape for v in self.values.values()}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent value shapes: {sorted(shapes)}")

    def value(self, node: str) -> np.ndarray:
        try:
            return np.asarray(self.values[node], dtype=float)
        except KeyError:
            raise TreeMismatch(f"no GP values for tree node {node!r}")


def weight_matrix(tree: ModelTree, g: NodeGPValues, temps: TemperatureSet) -> np.ndarray:
    """Leaf weights at every point, shape (..., n_points, K).

    Descends the tree once, multiplying each sibling softmax into the
    ancestry product.  Single children pass probability one through.  Rows
    sum to one by construction.
    """
    out: dict[str, np.ndarray] = {}

    def descend(node: str, prob) -> None:
        kids = tree.children(node)
        if not kids:
            out[node] = prob
            return
        if len(kids) == 1:
            descend(kids[0], prob)
            return
        lam = np.asarray(temps.value(node), dtype=float)
        G = np.stack([g.value(k) for k in kids], axis=-1)   # (..., n, C)
        P = softmax_conditional(G, lam)
        for j, k in enumerate(kids):
            descend(k, prob * P[..., j])

    if not tree.gp_nodes:
        raise ValueError(
            "tree has no competing sibling sets; every weight is identically 1 "
            "(handle the single-leaf case without calling weight_matrix)")
    base_shape = np.asarray(g.value(tree.gp_nodes[0])).shape
    descend(ROOT, np.ones(base_shape))
    return np.stack([out[leaf] for leaf in tree.leaf_names], axis=-1)


def leaf_weights(tree: ModelTree, g: NodeGPValues, temps: TemperatureSet,
                 point_index: int) -> np.ndarray:
    """Ensemble weights over the K leaves at one evaluation point."""
    if not tree.gp_nodes:  # a single leaf (possibly via pass-through chains)
        return np.ones(tree.n_leaves)
    for node in tree.gp_nodes:
        g.value(node)  # raises TreeMismatch on missing coverage
    W = weight_matrix(tree, g, temps)
    return W[..., point_index, :]


@dataclass(frozen=True)
class WeightMeasure:
    """Realized leaf weights at a set of points: rows sum to one."""

    tree: ModelTree
    leaf_weights: np.ndarray  # (n_points, K)

    def __post_init__(self):
        W = np.asarray(self.leaf_weights, dtype=float)
        if W.ndim != 2 or W.shape[1] != self.tree.n_leaves:
            raise ValueError(f"leaf_weights must be (n, {self.tree.n_leaves})")
        if np.any(W < -1e-12) or np.any(W > 1 + 1e-12):
            raise ValueError("weights must lie in [0, 1]")
        if np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("weight rows must sum to 1 within 1e-12")
        object.__setattr__(self, "leaf_weights", W)
