import numpy as np
import pytest

from treekit.errors import ContractViolation, ParseError
from treekit.trees import (
    DecisionTree,
    Internal,
    Leaf,
    Split,
    accuracy,
    leaf_tree,
    load_tree,
    majority_label,
    save_tree,
    stack_predictions,
    vote,
)


def stump_tree():
    # x0 <= 0.5 ? (x1 <= 2 ? 0 : 1) : 2
    return DecisionTree(2, {
        1: Internal(Split(0, 0.5)),
        2: Internal(Split(1, 2.0)),
        3: Leaf(2, "pure"),
        4: Leaf(0),
        5: Leaf(1),
    }, "greedy-gini", 3)


class TestStructure:
    def test_counts(self):
        tree = stump_tree()
        assert tree.n_leaves == 3
        assert tree.n_splits == 2
        assert tree.realized_depth == 2
        assert tree.split_at(2) == Split(1, 2.0)
        assert tree.split_at(3) is None

    def test_invalid_trees(self):
        with pytest.raises(ContractViolation):
            DecisionTree(1, {2: Leaf(0)}, "greedy-gini", 2)
        with pytest.raises(ContractViolation):
            DecisionTree(1, {1: Internal(Split(0, 1.0)), 2: Leaf(0)}, "greedy-gini", 2)
        with pytest.raises(ContractViolation):
            DecisionTree(1, {1: Leaf(3)}, "greedy-gini", 2)
        with pytest.raises(ContractViolation):
            DecisionTree(1, {1: Leaf(0)}, "random-forest", 2)

    def test_majority_and_vote_ties(self):
        assert majority_label(np.array([1, 0, 1, 0]), 2) == 0
        preds = np.array([[0, 1, 2], [1, 1, 0], [1, 2, 2], [0, 2, 1]])
        np.testing.assert_array_equal(vote(preds, 3), [0, 1, 2])


class TestPredict:
    def test_predict(self):
        X = np.array([[0.5, 2.0], [0.5, 2.5], [0.6, 0.0], [-1.0, -1.0]])
        np.testing.assert_array_equal(stump_tree().predict(X), [0, 1, 2, 0])
        np.testing.assert_array_equal(stump_tree().apply(X), [4, 5, 3, 4])

    def test_accuracy(self):
        X = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert accuracy(stump_tree(), X, np.array([0, 0])) == 0.5
        with pytest.raises(ContractViolation):
            accuracy(stump_tree(), X[:0], np.array([], dtype=int))

    def test_feature_out_of_range(self):
        with pytest.raises(ContractViolation):
            stump_tree().predict(np.zeros((3, 1)))

    def test_leaf_tree(self):
        tree = leaf_tree(1, 2, "optimal-d2")
        np.testing.assert_array_equal(tree.predict(np.zeros((4, 0))), [1, 1, 1, 1])

    def test_stack_predictions(self):
        X = np.array([[0.5, 2.0], [0.5, 2.5], [0.6, 0.0], [-1.0, -1.0]])
        stacked = stack_predictions([stump_tree(), leaf_tree(1, 3, "greedy-gini")], X)
        np.testing.assert_array_equal(stacked, [[0, 1, 2, 0], [1, 1, 1, 1]])
        assert stack_predictions([], X).shape == (0, 4)

    def test_remap_features(self):
        tree = stump_tree().remap_features([4, 7])
        assert tree.split_at(1).feature == 4
        assert tree.split_at(2).feature == 7


class TestSerialization:
    def test_text_round_trip_is_exact(self, tmp_path):
        tree = DecisionTree(1, {1: Internal(Split(0, 0.1 + 0.2)), 2: Leaf(0, "pure"), 3: Leaf(1, "too-few")},
                            "optimal-d2", 2)
        save_tree(tree, tmp_path / "t.tree", ["unit test"])
        back = load_tree(tmp_path / "t.tree")
        assert back == tree
        assert back.split_at(1).threshold == 0.1 + 0.2
        assert back.nodes[3].reason == "too-few"

    def test_header_lines(self):
        text = stump_tree().to_text(["command: treekit gen-tree"])
        assert text.startswith("# treekit tree format 1\n# command: treekit gen-tree\n")

    def test_malformed(self):
        with pytest.raises(ParseError):
            DecisionTree.from_text("depth 1\nprovenance learned\nclasses 2\n1 X 0\n")
        with pytest.raises(ParseError):
            DecisionTree.from_text("depth 1\n1 L 0\n")

    def test_dot(self):
        dot = stump_tree().to_dot(["age", "income"], ["a", "b", "c"])
        assert dot.startswith("digraph tree {")
        assert 'n1 [label="age <= 0.5"]' in dot
        assert "n1 -> n2" in dot and "n2 -> n5" in dot
