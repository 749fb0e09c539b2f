import numpy as np
import pytest

from treekit.autodiff import no_grad
from treekit.config import ModelConfig
from treekit.data import block_from_dataset, permute_block, save_block
from treekit.errors import ContractViolation, IngestionError
from treekit.model import SplitTransformer, layer_flops, parameter_shapes, score_to_split
from treekit.trees import Split

from conftest import make_dataset


class TestParameters:
    def test_initialization_is_seeded(self, tiny_config):
        a = SplitTransformer.initialize(tiny_config, seed=1)
        b = SplitTransformer.initialize(tiny_config, seed=1)
        for name in a.params:
            np.testing.assert_array_equal(a.p(name).data, b.p(name).data)
        assert a.p("layers.0.norm_attn").data.tolist() == [1.0] * tiny_config.hidden
        assert not a.p("head.b").data.any()
        assert np.abs(a.p("head.w").data).max() <= 2 * tiny_config.init_std

    def test_positional_bias_is_optional(self, tiny_config):
        names = parameter_shapes(tiny_config.replace(positional_bias=False))
        assert "embed.b_col" not in names and "embed.b_row" not in names

    def test_mismatched_parameters(self, tiny_model, tiny_config):
        params = dict(tiny_model.params)
        params.pop("head.b")
        with pytest.raises(ContractViolation):
            SplitTransformer(tiny_config, params)

    def test_save_load(self, tmp_path, tiny_model):
        tiny_model.save(tmp_path / "m.tkm")
        back = SplitTransformer.load(tmp_path / "m.tkm")
        assert back.config == tiny_model.config
        for name, p in tiny_model.params.items():
            np.testing.assert_array_equal(back.p(name).data, p.data)

    def test_load_wrong_kind(self, tmp_path, tiny_block):
        save_block(tiny_block, tmp_path / "b.tkc")
        with pytest.raises(IngestionError):
            SplitTransformer.load(tmp_path / "b.tkc")


class TestForward:
    def test_scores_are_probabilities_on_valid_cells(self, tiny_model):
        ds = make_dataset(np.arange(12.0).reshape(6, 2), [0, 1, 0, 1, 2, 2], 3)
        block = block_from_dataset(ds, n=8, m=3)
        scores = tiny_model.score_blocks([block])[0]
        assert scores.shape == (8, 3)
        assert np.all(scores[block.cell_mask] > 0) and np.all(scores[block.cell_mask] < 1)
        assert np.all(scores[~block.cell_mask] == 0)

    def test_padding_is_opaque(self, tiny_model):
        ds = make_dataset(np.random.default_rng(2).normal(size=(6, 2)), [0, 1, 0, 1, 2, 2], 3)
        padded = tiny_model.score_blocks([block_from_dataset(ds, n=8, m=3)])[0]
        exact = tiny_model.score_blocks([block_from_dataset(ds)])[0]
        np.testing.assert_allclose(padded[:6, :2], exact, rtol=0, atol=1e-12)

    def test_masked_rows_do_not_leak(self, tiny_model, tiny_block):
        mask = np.array([True, False, True, True, False, True, False, True])
        scrambled = tiny_block.Xn.copy()
        scrambled[~mask] = scrambled[~mask] * 100.0 + 7.0
        base = tiny_model.score_blocks([tiny_block], [mask])[0]
        moved = tiny_model.score_blocks([tiny_block.replace(Xn=scrambled)], [mask])[0]
        assert np.array_equal(moved[mask], base[mask])

    def test_permutation_equivariance_without_positional_bias(self, tiny_config, tiny_block):
        model = SplitTransformer.initialize(tiny_config.replace(positional_bias=False), seed=5)
        base = model.score_blocks([tiny_block])[0]
        for trial in range(100):
            gen = np.random.default_rng(trial)
            rows, cols = gen.permutation(8), gen.permutation(3)
            moved = model.score_blocks([permute_block(tiny_block, rows, cols)])[0]
            np.testing.assert_allclose(moved, base[np.ix_(rows, cols)], rtol=0, atol=1e-9)

    def test_batch_rows_are_independent(self, tiny_model, tiny_block):
        other = permute_block(tiny_block, np.arange(8)[::-1], np.arange(3))
        together = tiny_model.score_blocks([tiny_block, other])
        alone = tiny_model.score_blocks([tiny_block])
        np.testing.assert_allclose(together[0], alone[0], rtol=0, atol=1e-12)

    def test_final_layer_probe_equals_output(self, tiny_model, tiny_block):
        with no_grad():
            inputs = tiny_model.inputs([tiny_block])
            result = tiny_model.forward(inputs, keep_hiddens=True)
            probe = tiny_model.probe_layer(tiny_model.config.layers, result.hiddens, inputs)
        np.testing.assert_array_equal(probe.data, result.scores.data)
        assert len(result.hiddens) == tiny_model.config.layers + 1
        np.testing.assert_array_equal(tiny_model.score_blocks([tiny_block], layer=2), result.scores.data)

    def test_probe_contracts(self, tiny_model, tiny_block):
        inputs = tiny_model.inputs([tiny_block])
        with pytest.raises(ContractViolation):
            tiny_model.probe_layer(1, [], inputs)
        result = tiny_model.forward(inputs, keep_hiddens=True)
        with pytest.raises(ContractViolation):
            tiny_model.probe_layer(0, result.hiddens, inputs)

    def test_capacity(self, tiny_model, rng):
        big = block_from_dataset(make_dataset(rng.normal(size=(9, 2)), [0, 1] * 4 + [0], 2))
        with pytest.raises(ContractViolation):
            tiny_model.score_blocks([big])
        many = block_from_dataset(make_dataset(rng.normal(size=(4, 2)), [0, 1, 2, 3], 4))
        with pytest.raises(ContractViolation):
            tiny_model.score_blocks([many])


class TestSplitDecoding:
    def test_argmax_cell_becomes_split(self, tiny_block):
        scores = np.zeros((8, 3))
        scores[5, 2] = 0.9
        scores[1, 0] = 0.9
        split, cell = score_to_split(scores, tiny_block, return_cell=True)
        assert cell == (1, 0)
        assert split == Split(0, float(tiny_block.raw_X[1, 0]))

    def test_row_mask_excludes_rows(self, tiny_block):
        scores = np.zeros((8, 3))
        scores[1, 0] = 0.9
        scores[5, 2] = 0.8
        mask = np.ones(8, dtype=bool)
        mask[1] = False
        assert score_to_split(scores, tiny_block, mask).feature == 2
        with pytest.raises(ContractViolation):
            score_to_split(scores, tiny_block, np.zeros(8, dtype=bool))


class TestLayerFlops:
    def test_desk_counts(self):
        flops = layer_flops(256, 10, ModelConfig.preset("desk"))
        assert flops["col_attention"] == 4 * 256 * 256 * 10 * 64
        assert flops["row_attention"] == 4 * 10 * 10 * 256 * 64
        assert flops["mlp"] == 6 * 256 * 10 * 64 * 256

    def test_column_attention_dominates_tall_blocks(self):
        config = ModelConfig.preset("desk")
        ratio = layer_flops(512, 10, config)["col_attention"] / layer_flops(256, 10, config)["col_attention"]
        assert ratio == 4
