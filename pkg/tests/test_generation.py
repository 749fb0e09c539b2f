import numpy as np
import pytest

from treekit.data import CATEGORICAL, NUMERIC, Dataset, block_from_dataset
from treekit.errors import ContractViolation
from treekit.generation import TreeEnsemble, generate_ensemble, generate_tree, member_seeds
from treekit.trees import DecisionTree, Internal, Leaf, Split

from conftest import balanced_dataset, make_dataset


class ScriptedModel:
    """Returns a fixed score grid per call (the last grid repeats) for every queried view."""

    def __init__(self, *grids):
        self.grids = [np.asarray(g, dtype=np.float64) for g in grids]
        self.calls = []

    def score_blocks(self, blocks, row_masks=None, layer=None):
        grid = self.grids[min(len(self.calls), len(self.grids) - 1)]
        self.calls.append(len(blocks))
        return np.stack([grid] * len(blocks))


class TestGenerateTree:
    def test_learned_tree_uses_data_thresholds(self, tiny_model, tiny_block):
        tree = generate_tree(tiny_model, tiny_block, 2)
        assert tree.provenance == "learned" and tree.depth == 2
        for _, node in tree.internal_nodes():
            column = tiny_block.raw_X[tiny_block.row_valid, node.split.feature]
            assert node.split.threshold in column
        assert 1 <= tree.info["model_calls"] <= 3
        assert tree.predict(tiny_block.raw_X).shape == (8,)

    def test_deterministic(self, tiny_model, tiny_block):
        assert generate_tree(tiny_model, tiny_block, 2) == generate_tree(tiny_model, tiny_block, 2)

    def test_scripted_split(self):
        block = block_from_dataset(make_dataset([[1.0, 9.0], [2.0, 8.0], [3.0, 7.0], [4.0, 6.0]], [0, 0, 1, 1], 2))
        scores = np.zeros((4, 2))
        scores[1, 0] = 1.0
        model = ScriptedModel(scores)
        tree = generate_tree(model, block, 3)
        assert tree.nodes[1] == Internal(Split(0, 2.0))
        assert tree.nodes[2] == Leaf(0, "pure") and tree.nodes[3] == Leaf(1, "pure")
        assert model.calls == [1]

    def test_degenerate_split_becomes_leaf(self):
        block = block_from_dataset(make_dataset([[1.0], [2.0], [3.0]], [0, 1, 1], 2))
        model = ScriptedModel(np.array([[0.0], [0.0], [1.0]]))
        tree = generate_tree(model, block, 2)
        assert tree.root == Leaf(1, "degenerate")

    def test_siblings_share_one_batched_call(self):
        X = [[1.0, 1.0], [1.0, 2.0], [2.0, 1.0], [2.0, 2.0]]
        block = block_from_dataset(make_dataset(X, [0, 1, 1, 0], 2))
        root = np.zeros((4, 2))
        root[0, 0] = 1.0
        children = np.zeros((4, 2))
        children[[0, 2], 1] = 1.0
        model = ScriptedModel(root, children)
        tree = generate_tree(model, block, 2)
        assert model.calls == [1, 2]
        assert tree.split_at(2) == tree.split_at(3) == Split(1, 1.0)
        assert tree.n_leaves == 4
        np.testing.assert_array_equal(tree.predict(block.raw_X), [0, 1, 1, 0])

    def test_stopping_reasons(self, tiny_model):
        pure = block_from_dataset(make_dataset([[0.0], [1.0]], [1, 1], 2))
        tree = generate_tree(tiny_model, pure, 2)
        assert tree.root == Leaf(1, "pure")
        assert tree.info["model_calls"] == 0
        constant = block_from_dataset(make_dataset([[3.0], [3.0]], [0, 1], 2))
        assert generate_tree(tiny_model, constant, 2).root.reason == "constant-features"

    def test_exit_layer(self, tiny_model, tiny_block):
        tree = generate_tree(tiny_model, tiny_block, 1, exit_layer=1)
        assert tree.depth == 1

    def test_categorical_block(self, tiny_model):
        X = np.column_stack([np.arange(8) % 3, np.linspace(0, 1, 8)])
        ds = Dataset("cat", X, np.arange(8) % 2, (CATEGORICAL, NUMERIC), 2)
        block = block_from_dataset(ds)
        assert generate_tree(tiny_model, block, 2, seed=1) == generate_tree(tiny_model, block, 2, seed=1)

    def test_contracts(self, tiny_model, tiny_block):
        with pytest.raises(ContractViolation):
            generate_tree(tiny_model, tiny_block, 0)


class TestEnsemble:
    def test_members_use_dataset_columns(self, tiny_model):
        ds = balanced_dataset(3, 40, 6)
        ensemble = generate_ensemble(tiny_model, ds, 4, 2, seed=2, n=8, m=3)
        assert len(ensemble) == 4
        assert all(tree.max_feature < 6 for tree in ensemble.trees)
        np.testing.assert_array_equal(ensemble.predict(ds.X, size=1), ensemble.trees[0].predict(ds.X))
        assert 0.0 <= ensemble.accuracy(ds.X, ds.Y) <= 1.0

    def test_workers_do_not_change_members(self, tiny_model):
        ds = balanced_dataset(4, 40, 5)
        serial = generate_ensemble(tiny_model, ds, 3, 2, seed=9, n=8, m=3)
        pooled = generate_ensemble(tiny_model, ds, 3, 2, seed=9, n=8, m=3, workers=3)
        assert serial.trees == pooled.trees

    def test_vote(self):
        trees = [
            DecisionTree(0, {1: Leaf(label)}, "learned", 3) for label in (2, 1, 2)
        ]
        ensemble = TreeEnsemble(trees, 3)
        np.testing.assert_array_equal(ensemble.predict(np.zeros((2, 1))), [2, 2])
        np.testing.assert_array_equal(ensemble.predict(np.zeros((2, 1)), size=2), [1, 1])
        with pytest.raises(ContractViolation):
            TreeEnsemble([], 3).predict(np.zeros((1, 1)))

    def test_member_seeds(self):
        assert member_seeds(1, 3) == member_seeds(1, 3)
        assert len(set(member_seeds(1, 5))) == 5
