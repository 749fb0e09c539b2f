import numpy as np
import pytest
from scipy import stats

from treekit.data import (
    CATEGORICAL,
    NUMERIC,
    Dataset,
    block_from_dataset,
    block_hash,
    export_csv,
    inject_categorical_noise,
    load_block,
    load_csv,
    load_dataset_dir,
    normalize_block,
    permute_block,
    sample_block,
    save_block,
    to_normalized,
    to_raw,
    train_test_split,
    truncated_normal,
)
from treekit.errors import ContractViolation, IngestionError, ParseError, ValidationError

from conftest import make_dataset, random_dataset


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_numeric_and_categorical(self, tmp_path):
        path = write(tmp_path, "mixed.csv", "a,color,label\n1.5,red,yes\n2.0,blue,no\n-3,red,yes\n")
        ds = load_csv(path)
        assert ds.feature_kinds == (NUMERIC, CATEGORICAL)
        np.testing.assert_array_equal(ds.X[:, 0], [1.5, 2.0, -3.0])
        np.testing.assert_array_equal(ds.X[:, 1], [0, 1, 0])
        assert ds.categories[1] == ("red", "blue")
        np.testing.assert_array_equal(ds.Y, [0, 1, 0])
        assert ds.class_names == ("yes", "no")
        assert ds.name == "mixed"

    def test_missing_cell_names_row_and_column(self, tmp_path):
        path = write(tmp_path, "gap.csv", "a,b,label\n1,2,0\n3,,1\n")
        with pytest.raises(IngestionError, match="row 1.*'b'"):
            load_csv(path)

    def test_mixed_column_is_parse_error(self, tmp_path):
        path = write(tmp_path, "bad.csv", "a,label\n1,0\nx,1\n2,0\n")
        with pytest.raises(ParseError):
            load_csv(path)

    def test_single_class(self, tmp_path):
        path = write(tmp_path, "one.csv", "a,label\n1,0\n2,0\n")
        with pytest.raises(ValidationError):
            load_csv(path)

    def test_too_many_classes(self, tmp_path):
        rows = "\n".join(f"{i},{i}" for i in range(11))
        path = write(tmp_path, "many.csv", "a,label\n" + rows + "\n")
        with pytest.raises(ValidationError):
            load_csv(path)

    def test_missing_file_and_label(self, tmp_path):
        with pytest.raises(IngestionError):
            load_csv(tmp_path / "nope.csv")
        path = write(tmp_path, "nolabel.csv", "a,b\n1,0\n2,1\n")
        with pytest.raises(IngestionError):
            load_csv(path)
        assert load_csv(path, label_column="b").n_features == 1

    def test_export_round_trip_is_bit_exact(self, tmp_path, rng):
        X = rng.normal(size=(20, 3)) * 1e3
        Y = np.arange(20) % 3
        ds = make_dataset(X, Y, 3)
        path = export_csv(ds, tmp_path / "out.csv", comment="treekit test\ncommand: none")
        back = load_csv(path)
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.Y, ds.Y)

    def test_dataset_dir(self, tmp_path):
        write(tmp_path, "b.csv", "a,label\n1,0\n2,1\n")
        write(tmp_path, "a.csv", "a,label\n1,0\n2,1\n")
        names = [d.name for d in load_dataset_dir(tmp_path)]
        assert names == ["a", "b"]
        with pytest.raises(IngestionError):
            load_dataset_dir(tmp_path / "empty")


class TestSplitsAndBlocks:
    def test_train_test_split_is_deterministic(self, rng):
        ds = random_dataset(rng, 50, 4, 2)
        a_train, a_test = train_test_split(ds, 0.7, seed=3)
        b_train, b_test = train_test_split(ds, 0.7, seed=3)
        np.testing.assert_array_equal(a_train.row_ids, b_train.row_ids)
        assert a_train.n_rows == 35 and a_test.n_rows == 15
        assert set(a_train.row_ids).isdisjoint(a_test.row_ids)

    def test_split_rejects_single_class_side(self):
        ds = make_dataset(np.arange(6)[:, None], [0, 0, 0, 0, 0, 1], 2)
        with pytest.raises(ValidationError):
            train_test_split(ds, 0.5, seed=0)

    def test_sample_block_pads_small_datasets(self):
        ds = make_dataset([[1.0, 2.0], [3.0, 5.0], [5.0, 8.0]], [0, 1, 0], 2)
        block = sample_block(ds, n=5, m=4, seed=0)
        assert block.shape == (5, 4)
        np.testing.assert_array_equal(block.row_valid, [True, True, True, False, False])
        np.testing.assert_array_equal(block.col_valid, [True, True, False, False])
        np.testing.assert_array_equal(block.source_cols, [0, 1, -1, -1])
        assert np.all(block.Xn[~block.cell_mask] == 0)
        assert np.all(block.raw_X[~block.cell_mask] == 0)

    def test_sample_block_is_seeded(self, rng):
        ds = random_dataset(rng, 300, 12, 3)
        a = sample_block(ds, seed=9)
        b = sample_block(ds, seed=9)
        c = sample_block(ds, seed=10)
        assert a.shape == (256, 10)
        assert block_hash(a) == block_hash(b)
        assert block_hash(a) != block_hash(c)
        np.testing.assert_array_equal(a.raw_X, ds.X[np.ix_(a.source_rows, a.source_cols)])

    def test_normalization(self, rng):
        X = np.column_stack([rng.normal(5, 3, 40), np.full(40, 2.0)])
        block = block_from_dataset(make_dataset(X, np.arange(40) % 2, 2))
        np.testing.assert_allclose(block.Xn[:, 0].mean(), 0, atol=1e-12)
        np.testing.assert_allclose(block.Xn[:, 0].std(), 1, atol=1e-12)
        assert np.all(block.Xn[:, 1] == 0)
        assert block.col_stds[1] == 1.0
        v = to_normalized(block, 0, 4.0)
        np.testing.assert_allclose(to_raw(block, 0, v), 4.0)
        again = normalize_block(block)
        np.testing.assert_array_equal(again.Xn, block.Xn)

    def test_block_too_large(self, rng):
        with pytest.raises(ContractViolation):
            block_from_dataset(random_dataset(rng, 10, 3, 2), n=5)

    def test_permute_block(self, tiny_block):
        rows = np.array([7, 6, 5, 4, 3, 2, 1, 0])
        cols = np.array([2, 0, 1])
        p = permute_block(tiny_block, rows, cols)
        np.testing.assert_array_equal(p.raw_X, tiny_block.raw_X[np.ix_(rows, cols)])
        np.testing.assert_array_equal(p.Y, tiny_block.Y[rows])
        np.testing.assert_array_equal(p.col_stds, tiny_block.col_stds[cols])

    def test_block_persistence(self, tmp_path, tiny_block):
        save_block(tiny_block, tmp_path / "b.tkc")
        back = load_block(tmp_path / "b.tkc")
        assert block_hash(back) == block_hash(tiny_block)
        np.testing.assert_array_equal(back.col_means, tiny_block.col_means)
        assert back.n_classes == 3


class TestCategoricalNoise:
    def categorical_block(self):
        X = np.column_stack([np.arange(10) % 3, np.linspace(0, 1, 10)])
        ds = Dataset("cat", X, np.arange(10) % 2, (CATEGORICAL, NUMERIC), 2)
        return block_from_dataset(ds)

    def test_truncated_normal_bounds(self, rng):
        draws = truncated_normal(rng, 1.0, 0.5, 5000)
        assert np.all(np.abs(draws) <= 0.5)

    def test_truncated_normal_spread(self, rng):
        draws = truncated_normal(rng, 0.05, 0.1, 10_000)
        expected = stats.truncnorm.std(-2.0, 2.0, scale=0.05)
        assert abs(draws.std() - expected) < 0.2 * expected
        assert abs(draws.mean()) < 0.01

    def test_only_categorical_cells_move(self):
        block = self.categorical_block()
        noisy = inject_categorical_noise(block, 0.05, 0.1, seed=1)
        delta = noisy.Xn - block.Xn
        assert np.all(delta[:, 1] == 0)
        assert np.any(delta[:, 0] != 0)
        assert np.all(np.abs(delta) <= 0.1)
        np.testing.assert_allclose(noisy.raw_X[:, 0], noisy.Xn[:, 0] * block.col_stds[0] + block.col_means[0])

    def test_bound_must_be_positive(self):
        with pytest.raises(ValidationError):
            inject_categorical_noise(self.categorical_block(), 0.05, 0.0)

    def test_numeric_block_unchanged(self, tiny_block):
        assert inject_categorical_noise(tiny_block, 0.05, 0.1) is tiny_block
