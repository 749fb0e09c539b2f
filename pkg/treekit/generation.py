"""Grow decision trees by querying the split model node by node."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (
    DEFAULT_BLOCK_COLS,
    DEFAULT_BLOCK_ROWS,
    Block,
    Dataset,
    inject_categorical_noise,
    sample_block,
)
from .errors import ContractViolation
from .model import SplitTransformer, score_to_split
from .trees import DecisionTree, Internal, Leaf, Node, majority_label, stack_predictions, vote

logger = logging.getLogger(__name__)


def _stop_reason(block: Block, rows: np.ndarray) -> Optional[str]:
    labels = block.Y[rows]
    if np.unique(labels).size <= 1:
        return "pure"
    if rows.sum() < 2:
        return "too-few"
    values = block.raw_X[np.ix_(rows, block.col_valid)]
    if np.all(values.max(axis=0) == values.min(axis=0)):
        return "constant-features"
    return None


def generate_tree(model: SplitTransformer, block: Block, max_depth: int, seed: int = 0,
                  sigma_c: float = 0.05, bound: float = 0.1, exit_layer: Optional[int] = None) -> DecisionTree:
    """Recursive split generation over sibling-masked views of one block.

    Every node at a given depth that still needs a split is scored in a
    single batched forward pass. Thresholds are raw data values, so the
    tree applies directly to unnormalised rows in block column order.
    ``exit_layer`` reads splits from that layer's probe instead of the output.
    """
    if max_depth < 1:
        raise ContractViolation(f"max_depth must be >= 1, got {max_depth}")
    if block.n_valid_rows == 0 or block.n_valid_cols == 0:
        raise ContractViolation("generate_tree needs a block with valid rows and columns")
    if block.categorical_cols.any():
        block = inject_categorical_noise(block, sigma_c, bound, seed)

    K = block.n_classes
    nodes: Dict[int, Node] = {}
    frontier: List[Tuple[int, np.ndarray]] = [(1, block.row_valid.copy())]
    calls = 0
    for depth in range(max_depth + 1):
        pending: List[Tuple[int, np.ndarray]] = []
        for index, rows in frontier:
            label = majority_label(block.Y[rows], K)
            reason = _stop_reason(block, rows)
            if reason is None and depth == max_depth:
                reason = "depth"
            if reason is not None:
                nodes[index] = Leaf(label, reason)
            else:
                pending.append((index, rows))
        if not pending:
            break
        scores = model.score_blocks([block] * len(pending), [rows for _, rows in pending], layer=exit_layer)
        calls += len(pending)
        frontier = []
        for (index, rows), S in zip(pending, scores):
            split = score_to_split(S, block, rows)
            left = rows & (block.raw_X[:, split.feature] <= split.threshold)
            right = rows & ~left
            if not left.any() or not right.any():
                nodes[index] = Leaf(majority_label(block.Y[rows], K), "degenerate")
                continue
            logger.debug("node %d: feature %d <= %r", index, split.feature, split.threshold)
            nodes[index] = Internal(split)
            frontier.append((2 * index, left))
            frontier.append((2 * index + 1, right))

    tree = DecisionTree(max_depth, nodes, "learned", K)
    tree.info["model_calls"] = calls
    return tree


@dataclass
class TreeEnsemble:
    trees: List[DecisionTree]
    n_classes: int

    def __len__(self) -> int:
        return len(self.trees)

    def predict(self, X: np.ndarray, size: Optional[int] = None) -> np.ndarray:
        """Majority vote of the first ``size`` trees (all by default)."""
        members = self.trees if size is None else self.trees[:size]
        if not members:
            raise ContractViolation("An ensemble needs at least one tree to predict")
        return vote(stack_predictions(members, X), self.n_classes)

    def accuracy(self, X: np.ndarray, Y: np.ndarray, size: Optional[int] = None) -> float:
        if len(Y) == 0:
            raise ContractViolation("accuracy needs at least one row")
        return float(np.mean(self.predict(X, size) == Y))


def member_seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_ensemble(model: SplitTransformer, ds_train: Dataset, count: int, max_depth: int, seed: int = 0,
                      n: int = DEFAULT_BLOCK_ROWS, m: int = DEFAULT_BLOCK_COLS, workers: int = 1,
                      exit_layer: Optional[int] = None) -> TreeEnsemble:
    """``count`` trees on independent block draws, in dataset column coordinates."""
    if count < 1:
        raise ContractViolation(f"count must be >= 1, got {count}")
    seeds = member_seeds(seed, count)

    def member(member_seed: int) -> DecisionTree:
        block = sample_block(ds_train, min(n, model.config.n_max), min(m, model.config.m_max), member_seed)
        tree = generate_tree(model, block, max_depth, seed=member_seed, exit_layer=exit_layer)
        return tree.remap_features(block.source_cols)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(member, seeds))
    else:
        trees = [member(s) for s in seeds]
    return TreeEnsemble(trees, ds_train.n_classes)
