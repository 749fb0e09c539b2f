"""Decision-tree representation shared by every builder.

Nodes live in a heap-indexed mapping: the root is 1 and the children of
node ``i`` are ``2i`` (left, ``x[feature] <= threshold``) and ``2i + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import FORMAT_VERSION
from .errors import ContractViolation, ParseError

PROVENANCES = (
    "greedy-gini",
    "greedy-entropy",
    "greedy-gainratio",
    "optimal-d2",
    "learned",
    "ground-truth",
)

# Why a node stopped splitting.
LEAF_REASONS = (
    "pure",
    "too-few",
    "constant-features",
    "depth",
    "degenerate",
    "no-gain",
    "collapsed",
)


@dataclass(frozen=True)
class Split:
    """Axis-aligned test: rows with ``x[feature] <= threshold`` go left."""

    feature: int
    threshold: float

    def goes_left(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X)[:, self.feature] <= self.threshold


@dataclass(frozen=True)
class Internal:
    split: Split


@dataclass(frozen=True)
class Leaf:
    label: int
    reason: str = "depth"


Node = Union[Internal, Leaf]


def majority_label(Y: np.ndarray, n_classes: int) -> int:
    """Most frequent class; ties go to the lowest class id."""
    counts = np.bincount(np.asarray(Y, dtype=np.int64), minlength=n_classes)
    return int(np.argmax(counts))


def vote(predictions: np.ndarray, n_classes: int) -> np.ndarray:
    """Column-wise majority over a ``(trees, rows)`` prediction matrix, ties to the lowest class."""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.int64))
    counts = np.zeros((n_classes, predictions.shape[1]), dtype=np.int64)
    for row in predictions:
        counts[row, np.arange(predictions.shape[1])] += 1
    return np.argmax(counts, axis=0)


def node_depth(index: int) -> int:
    return index.bit_length() - 1


@dataclass
class DecisionTree:
    depth: int
    nodes: Dict[int, Node]
    provenance: str
    n_classes: int
    info: Dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.depth < 0:
            raise ContractViolation(f"Tree depth must be >= 0, got {self.depth}")
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"Unknown tree provenance {self.provenance!r}")
        if 1 not in self.nodes:
            raise ContractViolation("Tree has no root node")
        for index, node in self.nodes.items():
            if index > 1 and not isinstance(self.nodes.get(index // 2), Internal):
                raise ContractViolation(f"Node {index} has no internal parent")
            if node_depth(index) > self.depth:
                raise ContractViolation(f"Node {index} lies below max depth {self.depth}")
            if isinstance(node, Internal):
                if node_depth(index) >= self.depth:
                    raise ContractViolation(f"Internal node {index} sits at max depth {self.depth}")
                if 2 * index not in self.nodes or 2 * index + 1 not in self.nodes:
                    raise ContractViolation(f"Internal node {index} is missing a child")
            elif not 0 <= node.label < self.n_classes:
                raise ContractViolation(
                    f"Leaf {index} label {node.label} outside 0..{self.n_classes - 1}"
                )

    # ------------------------------------------------------------------ shape

    @property
    def root(self) -> Node:
        return self.nodes[1]

    def internal_nodes(self) -> Iterator[Tuple[int, Internal]]:
        for index in sorted(self.nodes):
            node = self.nodes[index]
            if isinstance(node, Internal):
                yield index, node

    def leaves(self) -> Iterator[Tuple[int, Leaf]]:
        for index in sorted(self.nodes):
            node = self.nodes[index]
            if isinstance(node, Leaf):
                yield index, node

    @property
    def n_leaves(self) -> int:
        return sum(1 for _ in self.leaves())

    @property
    def n_splits(self) -> int:
        return sum(1 for _ in self.internal_nodes())

    @property
    def realized_depth(self) -> int:
        return max(node_depth(i) for i in self.nodes)

    def split_at(self, index: int = 1) -> Optional[Split]:
        node = self.nodes.get(index)
        return node.split if isinstance(node, Internal) else None

    @property
    def max_feature(self) -> int:
        features = [node.split.feature for _, node in self.internal_nodes()]
        return max(features) if features else -1

    # -------------------------------------------------------------- inference

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X)
        if X.ndim != 2:
            raise ContractViolation(f"predict expects a 2-D matrix, got shape {X.shape}")
        if self.max_feature >= X.shape[1]:
            raise ContractViolation(
                f"Tree uses feature {self.max_feature} but X has only {X.shape[1]} columns"
            )
        index = np.ones(X.shape[0], dtype=np.int64)
        for _ in range(self.depth):
            for node_id in np.unique(index):
                node = self.nodes[int(node_id)]
                if isinstance(node, Internal):
                    rows = index == node_id
                    left = X[rows, node.split.feature] <= node.split.threshold
                    index[rows] = np.where(left, 2 * node_id, 2 * node_id + 1)
        return index

    def predict(self, X: np.ndarray) -> np.ndarray:
        index = self.apply(X)
        labels = np.empty(index.shape[0], dtype=np.int64)
        for node_id in np.unique(index):
            labels[index == node_id] = self.nodes[int(node_id)].label
        return labels

    # -------------------------------------------------------------- rewriting

    def remap_features(self, mapping: Sequence[int]) -> "DecisionTree":
        """Rename feature ``j`` to ``mapping[j]`` (block columns to dataset columns)."""
        return self.map_splits(lambda s: Split(int(mapping[s.feature]), s.threshold))

    def map_splits(self, fn: Callable[[Split], Split]) -> "DecisionTree":
        nodes: Dict[int, Node] = {}
        for index, node in self.nodes.items():
            nodes[index] = Internal(fn(node.split)) if isinstance(node, Internal) else node
        return DecisionTree(self.depth, nodes, self.provenance, self.n_classes, dict(self.info))

    # ---------------------------------------------------------- serialization

    def to_text(self, comments: Sequence[str] = ()) -> str:
        lines = [f"# treekit tree format {FORMAT_VERSION}"]
        lines.extend(f"# {c}" for c in comments)
        lines.append(f"depth {self.depth}")
        lines.append(f"provenance {self.provenance}")
        lines.append(f"classes {self.n_classes}")
        for index in sorted(self.nodes):
            node = self.nodes[index]
            if isinstance(node, Internal):
                lines.append(f"{index} I {node.split.feature} {float(node.split.threshold)!r}")
            else:
                lines.append(f"{index} L {node.label} {node.reason}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DecisionTree":
        header: Dict[str, str] = {}
        nodes: Dict[int, Node] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] in ("depth", "provenance", "classes"):
                    header[parts[0]] = parts[1]
                elif parts[1] == "I":
                    nodes[int(parts[0])] = Internal(Split(int(parts[2]), float(parts[3])))
                elif parts[1] == "L":
                    reason = parts[3] if len(parts) > 3 else "depth"
                    nodes[int(parts[0])] = Leaf(int(parts[2]), reason)
                else:
                    raise ParseError(f"Unknown node kind {parts[1]!r} on line {number}")
            except (IndexError, ValueError) as exc:
                raise ParseError(f"Malformed tree line {number}: {raw!r}") from exc
        missing = {"depth", "provenance", "classes"} - header.keys()
        if missing:
            raise ParseError(f"Tree text is missing header fields: {sorted(missing)}")
        return cls(int(header["depth"]), nodes, header["provenance"], int(header["classes"]))

    def to_dot(self, feature_names: Optional[Sequence[str]] = None,
               class_names: Optional[Sequence[str]] = None) -> str:
        """Graphviz DOT rendering; edges are labelled with the ``<=`` outcome."""
        lines = ["digraph tree {", "  node [shape=box, fontname=\"Helvetica\"];"]
        for index in sorted(self.nodes):
            node = self.nodes[index]
            if isinstance(node, Internal):
                name = feature_names[node.split.feature] if feature_names else f"x{node.split.feature}"
                label = f"{name} <= {node.split.threshold:.6g}"
                lines.append(f"  n{index} [label=\"{label}\"];")
            else:
                name = class_names[node.label] if class_names else f"class {node.label}"
                lines.append(f"  n{index} [label=\"{name}\", style=rounded];")
        for index, _ in self.internal_nodes():
            lines.append(f"  n{index} -> n{2 * index} [label=\"yes\"];")
            lines.append(f"  n{index} -> n{2 * index + 1} [label=\"no\"];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def accuracy(tree: DecisionTree, X: np.ndarray, Y: np.ndarray) -> float:
    Y = np.asarray(Y)
    if Y.shape[0] == 0:
        raise ContractViolation("accuracy needs at least one row")
    return float(np.mean(tree.predict(X) == Y))


def leaf_tree(label: int, n_classes: int, provenance: str, reason: str = "pure") -> DecisionTree:
    return DecisionTree(0, {1: Leaf(label, reason)}, provenance, n_classes)


def load_tree(path) -> DecisionTree:
    with open(path, "r", encoding="utf-8") as handle:
        return DecisionTree.from_text(handle.read())


def save_tree(tree: DecisionTree, path, comments: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(tree.to_text(comments))


def stack_predictions(trees: List[DecisionTree], X: np.ndarray) -> np.ndarray:
    return np.stack([t.predict(X) for t in trees]) if trees else np.zeros((0, len(X)), dtype=np.int64)
