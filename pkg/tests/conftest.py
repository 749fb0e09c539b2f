"""Shared fixtures: seeded generators, small datasets and a tiny 64-bit model."""

import numpy as np
import pytest

from treekit.config import ModelConfig
from treekit.data import NUMERIC, Dataset, block_from_dataset
from treekit.model import SplitTransformer


def make_dataset(X, Y, n_classes=None, name="toy"):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    return Dataset(name, X, Y, (NUMERIC,) * X.shape[1], int(n_classes or Y.max() + 1))


def random_dataset(rng, n, m, k, name="random"):
    X = rng.integers(0, 6, size=(n, m)).astype(np.float64) + rng.normal(0, 0.01, size=(n, m)).round(2)
    Y = rng.integers(0, k, size=n)
    Y[:k] = np.arange(k)
    return make_dataset(X, Y, k, name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def xor_like():
    """Quadrant labelling on two features plus one noise feature."""
    gen = np.random.default_rng(7)
    X = gen.uniform(-1, 1, size=(80, 3))
    Y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(np.int64)
    return make_dataset(X, Y, 2, "quadrants")


@pytest.fixture
def tiny_config():
    return ModelConfig.preset("desk-tiny")


@pytest.fixture
def tiny_model(tiny_config):
    return SplitTransformer.initialize(tiny_config, seed=3)


@pytest.fixture
def tiny_block():
    gen = np.random.default_rng(11)
    X = gen.normal(size=(8, 3))
    Y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    return block_from_dataset(make_dataset(X, Y, 3, "tiny"))


def balanced_dataset(seed, n, m, name="balanced"):
    """Two interleaved classes with integer-ish features, safe to split 70:30."""
    gen = np.random.default_rng(seed)
    X = gen.integers(0, 6, size=(n, m)).astype(np.float64)
    Y = gen.permutation(np.arange(n) % 2)
    return make_dataset(X, Y, 2, name)
