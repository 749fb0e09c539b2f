"""Top-down greedy tree induction (CART / ID3 / C4.5-style criteria)."""

from __future__ import annotations

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data import Block
from .errors import ContractViolation
from .trees import DecisionTree, Internal, Leaf, Node, Split, majority_label

logger = logging.getLogger(__name__)

CRITERIA = ("gini", "entropy", "gain_ratio")
PROVENANCE = {"gini": "greedy-gini", "entropy": "greedy-entropy", "gain_ratio": "greedy-gainratio"}

MIN_GAIN = 1e-12
GAIN_TIE_TOL = 1e-12


def midpoint(low: float, high: float) -> float:
    """Midpoint of two consecutive distinct values that still separates them."""
    mid = (low + high) / 2.0
    return low if mid >= high else mid


def gini(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    return 1.0 - np.sum(p * p, axis=-1)


def entropy(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    logs = np.log2(p, out=np.zeros_like(p), where=p > 0)
    return -np.sum(p * logs, axis=-1)


def _split_information(n_left: np.ndarray, n: int) -> np.ndarray:
    sizes = np.stack([n_left, n - n_left], axis=-1)
    return entropy(sizes)


def candidate_gains(X: np.ndarray, Y: np.ndarray, criterion: str, n_classes: int):
    """Every midpoint candidate as ``(features, thresholds, scores, info_gains)`` arrays.

    For gini/entropy the score is the impurity reduction; for gain_ratio it
    is information gain over split information.
    """
    n, m = X.shape
    impurity = gini if criterion == "gini" else entropy
    total = np.bincount(Y, minlength=n_classes)
    parent = impurity(total)
    features, thresholds, scores, gains = [], [], [], []
    for j in range(m):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        onehot = np.zeros((n, n_classes), dtype=np.int64)
        onehot[np.arange(n), Y[order]] = 1
        left = np.cumsum(onehot, axis=0)[:-1]
        positions = np.flatnonzero(xs[:-1] < xs[1:])
        if positions.size == 0:
            continue
        left = left[positions]
        right = total - left
        n_left = positions + 1
        gain = parent - (n_left / n) * impurity(left) - ((n - n_left) / n) * impurity(right)
        if criterion == "gain_ratio":
            info = _split_information(n_left, n)
            keep = info > 0
            score = np.divide(gain, info, out=np.zeros_like(gain), where=keep)
            positions, gain, score = positions[keep], gain[keep], score[keep]
        else:
            score = gain
        features.append(np.full(positions.size, j, dtype=np.int64))
        thresholds.append(np.array([midpoint(xs[p], xs[p + 1]) for p in positions]))
        scores.append(score)
        gains.append(gain)
    if not features:
        empty = np.zeros(0)
        return np.zeros(0, dtype=np.int64), empty, empty, empty
    return (np.concatenate(features), np.concatenate(thresholds),
            np.concatenate(scores), np.concatenate(gains))


def pick_best(features: np.ndarray, thresholds: np.ndarray, scores: np.ndarray,
              gains: np.ndarray) -> Optional[Tuple[int, float, float]]:
    """Highest score among candidates with positive gain; near-ties go to (feature, threshold)."""
    usable = gains > MIN_GAIN
    if not usable.any():
        return None
    features, thresholds, scores = features[usable], thresholds[usable], scores[usable]
    best = scores.max()
    tied = np.flatnonzero(scores >= best - GAIN_TIE_TOL)
    order = np.lexsort((thresholds[tied], features[tied]))
    winner = tied[order[0]]
    return int(features[winner]), float(thresholds[winner]), float(scores[winner])


def best_split(X: np.ndarray, Y: np.ndarray, criterion: str = "gini",
               n_classes: Optional[int] = None) -> Optional[Tuple[Split, float]]:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    if criterion not in CRITERIA:
        raise ContractViolation(f"Unknown criterion {criterion!r}; choose from {CRITERIA}")
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractViolation(f"best_split needs a non-empty 2-D matrix, got shape {X.shape}")
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    if np.unique(Y).size < 2:
        return None
    n_classes = int(Y.max()) + 1 if n_classes is None else n_classes
    picked = pick_best(*candidate_gains(X, Y, criterion, n_classes))
    if picked is None:
        return None
    feature, threshold, score = picked
    return Split(feature, threshold), score


def grow_greedy(X: np.ndarray, Y: np.ndarray, depth: int, criterion: str, n_classes: int,
                feature_ids: Optional[Sequence[int]] = None) -> DecisionTree:
    """Greedy tree on plain arrays; ``feature_ids`` renames columns of ``X``."""
    if depth < 1:
        raise ContractViolation(f"depth must be >= 1, got {depth}")
    if X.shape[0] == 0:
        raise ContractViolation("greedy tree needs at least one row")
    ids = np.arange(X.shape[1]) if feature_ids is None else np.asarray(feature_ids)
    nodes: Dict[int, Node] = {}

    def grow(index: int, rows: np.ndarray, level: int) -> None:
        labels = Y[rows]
        label = majority_label(labels, n_classes)
        if np.unique(labels).size <= 1:
            nodes[index] = Leaf(label, "pure")
            return
        if rows.size < 2:
            nodes[index] = Leaf(label, "too-few")
            return
        if level == depth:
            nodes[index] = Leaf(label, "depth")
            return
        found = best_split(X[rows], labels, criterion, n_classes)
        if found is None:
            nodes[index] = Leaf(label, "no-gain")
            return
        split, score = found
        logger.debug("node %d: feature %d <= %r (%s %.6f)", index, split.feature, split.threshold,
                     criterion, score)
        nodes[index] = Internal(Split(int(ids[split.feature]), split.threshold))
        left = X[rows, split.feature] <= split.threshold
        grow(2 * index, rows[left], level + 1)
        grow(2 * index + 1, rows[~left], level + 1)

    grow(1, np.arange(X.shape[0]), 0)
    return DecisionTree(depth, nodes, PROVENANCE[criterion], n_classes)


def build_greedy(block: Block, depth: int = 2, criterion: str = "gini") -> DecisionTree:
    """Greedy tree over a block's valid cells, thresholds in raw units."""
    if criterion not in CRITERIA:
        raise ContractViolation(f"Unknown criterion {criterion!r}; choose from {CRITERIA}")
    rows = np.flatnonzero(block.row_valid)
    cols = np.flatnonzero(block.col_valid)
    if rows.size == 0:
        raise ContractViolation("build_greedy needs a block with at least one valid row")
    X = block.raw_X[np.ix_(rows, cols)]
    return grow_greedy(X, block.Y[rows], depth, criterion, block.n_classes, feature_ids=cols)
