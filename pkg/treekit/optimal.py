"""Exact regularised depth-2 trees.

Maximises ``accuracy - lam * leaves`` over every tree of depth at most two
whose thresholds are midpoints of the data. Once the root partition is fixed
the two subtrees are independent, so each child is solved on its own with one
linear scan over per-feature sorted class-count prefix sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data import Block
from .errors import ContractViolation
from .greedy import midpoint
from .trees import DecisionTree, Internal, Leaf, Node, Split, majority_label

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-3
OBJECTIVE_TOL = 1e-12


def objective(correct: int, leaves: int, n: int, lam: float) -> float:
    return correct / n - lam * leaves


@dataclass(frozen=True)
class _Subtree:
    correct: int
    leaves: int
    split: Optional[Split]
    left_label: int
    right_label: int
    label: int
    reason: str


class _PresortedTable:
    """Rows sorted once per feature; subsets keep that order under a mask."""

    def __init__(self, X: np.ndarray, Y: np.ndarray, n_classes: int):
        self.X = X
        self.Y = Y
        self.n_classes = n_classes
        self.order = np.argsort(X, axis=0, kind="stable")
        self.sorted_X = np.take_along_axis(X, self.order, axis=0)
        self.sorted_Y = Y[self.order]

    def subset(self, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        size = int(mask.sum())
        keep = mask[self.order].T
        m = self.X.shape[1]
        xs = self.sorted_X.T[keep].reshape(m, size).T
        ys = self.sorted_Y.T[keep].reshape(m, size).T
        return xs, ys

    def best_child(self, mask: np.ndarray, n_total: int, lam: float, allow_split: bool = True) -> _Subtree:
        """Best leaf-or-stump for the rows in ``mask``; stumps must win strictly."""
        Y = self.Y[mask]
        counts = np.bincount(Y, minlength=self.n_classes)
        label = int(np.argmax(counts))
        leaf = _Subtree(int(counts[label]), 1, None, label, label, label,
                        "pure" if np.count_nonzero(counts) <= 1 else "collapsed")
        if Y.size < 2:
            return _Subtree(leaf.correct, 1, None, label, label, label, "too-few")
        if leaf.reason == "pure" or not allow_split:
            return leaf
        xs, ys = self.subset(mask)
        size, m = xs.shape
        onehot = ys[..., None] == np.arange(self.n_classes)
        left = np.cumsum(onehot, axis=0, dtype=np.int64)[:-1]
        right = counts - left
        correct = left.max(axis=-1) + right.max(axis=-1)
        correct = np.where(xs[:-1] < xs[1:], correct, -1)
        best = int(correct.max())
        if best < 0:
            return leaf
        if objective(best, 2, n_total, lam) <= objective(leaf.correct, 1, n_total, lam) + OBJECTIVE_TOL:
            return leaf
        # argwhere is row-major over (position, feature); prefer lowest feature, then position.
        hits = np.argwhere(correct.T == best)
        feature, position = int(hits[0, 0]), int(hits[0, 1])
        threshold = midpoint(xs[position, feature], xs[position + 1, feature])
        left_label = int(np.argmax(left[position, feature]))
        right_label = int(np.argmax(right[position, feature]))
        return _Subtree(best, 2, Split(feature, threshold), left_label, right_label, label, "depth")


def solve_depth2(X: np.ndarray, Y: np.ndarray, n_classes: int, lam: float = DEFAULT_LAMBDA,
                 feature_ids: Optional[Sequence[int]] = None, depth: int = 2) -> DecisionTree:
    """Exact search on plain arrays. ``tree.info["objective"]`` holds the optimum.

    ``depth=1`` restricts the search to stumps.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    n, m = X.shape
    if n < 2:
        raise ContractViolation(f"optimal depth-2 search needs >= 2 rows, got {n}")
    if depth not in (1, 2):
        raise ContractViolation(f"exact search supports depth 1 or 2, got {depth}")
    if lam < 0:
        raise ContractViolation(f"lambda must be >= 0, got {lam}")
    ids = np.arange(m) if feature_ids is None else np.asarray(feature_ids)
    table = _PresortedTable(X, Y, n_classes)

    root_label = majority_label(Y, n_classes)
    root_correct = int(np.sum(Y == root_label))
    best_obj = objective(root_correct, 1, n, lam)
    best: Tuple[int, Optional[Split], Optional[_Subtree], Optional[_Subtree]] = (1, None, None, None)

    for j in range(m):
        xs = table.sorted_X[:, j]
        order = table.order[:, j]
        for position in np.flatnonzero(xs[:-1] < xs[1:]):
            left_mask = np.zeros(n, dtype=bool)
            left_mask[order[: position + 1]] = True
            left = table.best_child(left_mask, n, lam, depth == 2)
            right = table.best_child(~left_mask, n, lam, depth == 2)
            leaves = left.leaves + right.leaves
            value = objective(left.correct + right.correct, leaves, n, lam)
            if value > best_obj + OBJECTIVE_TOL or (
                value >= best_obj - OBJECTIVE_TOL and leaves < best[0]
            ):
                best_obj = value
                best = (leaves, Split(j, midpoint(xs[position], xs[position + 1])), left, right)

    nodes: Dict[int, Node] = {}
    _, root_split, left, right = best
    if root_split is None:
        reason = "pure" if np.unique(Y).size <= 1 else "collapsed"
        nodes[1] = Leaf(root_label, reason)
    else:
        nodes[1] = Internal(Split(int(ids[root_split.feature]), root_split.threshold))
        for index, child in ((2, left), (3, right)):
            if child.split is None:
                nodes[index] = Leaf(child.label, child.reason if depth == 2 else "depth")
            else:
                nodes[index] = Internal(Split(int(ids[child.split.feature]), child.split.threshold))
                nodes[2 * index] = Leaf(child.left_label, "depth")
                nodes[2 * index + 1] = Leaf(child.right_label, "depth")
    tree = DecisionTree(depth, nodes, "optimal-d2", n_classes)
    tree.info["objective"] = best_obj
    tree.info["lambda"] = lam
    logger.debug("optimal-d2: objective %.6f with %d leaves", best_obj, tree.n_leaves)
    return tree


def build_optimal_depth2(block: Block, lam: float = DEFAULT_LAMBDA, depth: int = 2) -> DecisionTree:
    rows = np.flatnonzero(block.row_valid)
    cols = np.flatnonzero(block.col_valid)
    if rows.size < 2:
        raise ContractViolation(f"build_optimal_depth2 needs >= 2 valid rows, got {rows.size}")
    X = block.raw_X[np.ix_(rows, cols)]
    return solve_depth2(X, block.Y[rows], block.n_classes, lam, feature_ids=cols, depth=depth)
