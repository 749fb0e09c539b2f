import pandas as pd
import pytest

from treekit import __version__
from treekit.cli import generate_help_text, main
from treekit.xor import spec_from_text


@pytest.fixture
def xor_dir(tmp_path):
    out = tmp_path / "xor"
    assert main(["gen-xor", "--level", "1", "--n", "40", "--noise-dims", "1", "--count", "3",
                 "--out", str(out), "--seed", "2"]) == 0
    return out


def error_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


class TestGenXor:
    def test_writes_data_and_specs(self, xor_dir):
        assert sorted(p.name for p in xor_dir.iterdir()) == [
            "xor-000.csv", "xor-000.spec", "xor-001.csv", "xor-001.spec", "xor-002.csv", "xor-002.spec",
        ]
        text = (xor_dir / "xor-001.spec").read_text()
        assert text.startswith("# treekit xor spec format")
        spec = spec_from_text(text)
        assert spec.level == 1 and spec.extra_noise_dims == 1
        frame = pd.read_csv(xor_dir / "xor-000.csv", comment="#")
        assert len(frame) == 40 and "label" in frame.columns


class TestErrors:
    def test_deep_optimal_is_a_usage_error(self, xor_dir, capsys):
        code = main(["eval", "--algos", "optimal-d2", "--datasets", str(xor_dir), "--depth", "3"])
        assert code == 2
        assert error_line(capsys).startswith("treekit-error[2]: UnsupportedError")

    def test_missing_datasets_is_a_data_error(self, tmp_path, capsys):
        code = main(["eval", "--datasets", str(tmp_path / "nowhere")])
        assert code == 3
        assert "IngestionError" in error_line(capsys)

    def test_bad_list_argument(self, xor_dir):
        assert main(["eval", "--datasets", str(xor_dir), "--sizes", "1,x"]) == 2

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_help_lists_exit_codes(self):
        assert "4 numeric abort" in generate_help_text()


class TestConfigFile:
    def test_file_values_become_defaults(self, tmp_path, xor_dir):
        config = tmp_path / "eval.conf"
        config.write_text("# quick\nruns = 1\nsizes = 1,2\n")
        out = tmp_path / "eval.csv"
        assert main(["eval", "--config", str(config), "--datasets", str(xor_dir), "--out", str(out),
                     "--workers", "1"]) == 0
        records = pd.read_csv(out, comment="#")
        assert set(records["run"]) == {0}
        assert set(records["size"]) == {1, 2}

    def test_unknown_key(self, tmp_path, xor_dir, capsys):
        config = tmp_path / "eval.conf"
        config.write_text("runs = 1\nbogus = 3\n")
        assert main(["eval", "--config", str(config), "--datasets", str(xor_dir)]) == 2
        assert "ContractViolation" in error_line(capsys)


class TestPipeline:
    def test_corpus_train_generate_evaluate(self, tmp_path, xor_dir, capsys):
        corpus = tmp_path / "corpus"
        run = tmp_path / "run"
        assert main(["build-corpus", "--datasets", str(xor_dir), "--per-dataset", "2", "--block-rows", "8",
                     "--block-cols", "3", "--workers", "1", "--out", str(corpus)]) == 0
        assert main(["train", "--corpus", str(corpus), "--preset", "desk-tiny", "--phase1-steps", "1",
                     "--phase2-steps", "1", "--batch", "2", "--warmup", "1", "--checkpoint-every", "0",
                     "--log-every", "0", "--workers", "1", "--out", str(run)]) == 0
        model = run / "model.tkc"
        assert model.exists()

        tree = tmp_path / "one.tree"
        assert main(["gen-tree", "--model", str(model), "--data", str(xor_dir / "xor-000.csv"),
                     "--out", str(tree), "--emit-dot"]) == 0
        assert tree.exists()
        assert tree.with_suffix(".dot").read_text().startswith("// treekit tree dot format")

        report = tmp_path / "eval.csv"
        assert main(["eval", "--algos", "greedy-gini,learned", "--model", str(model), "--datasets", str(xor_dir),
                     "--sizes", "1,2", "--runs", "1", "--workers", "1", "--out", str(report)]) == 0
        assert main(["rank", "--report", str(report)]) == 0
        ranks = pd.read_csv(tmp_path / "rank.csv", comment="#")
        assert set(ranks["algorithm"]) == {"greedy-gini", "learned"}
        assert "Champions" in capsys.readouterr().out


class TestGradCheck:
    def test_tiny_model_passes(self, capsys):
        assert main(["grad-check", "--preset", "desk-tiny", "--max-coords", "40"]) == 0
        assert "max relative error" in capsys.readouterr().out


class TestCorruptInputs:
    def test_corpus_without_examples_table(self, tmp_path, xor_dir, capsys):
        corpus = tmp_path / "corpus"
        assert main(["build-corpus", "--datasets", str(xor_dir), "--per-dataset", "1", "--block-rows", "8",
                     "--block-cols", "3", "--workers", "1", "--out", str(corpus)]) == 0
        (corpus / "examples.tsv").unlink()
        code = main(["train", "--corpus", str(corpus), "--preset", "desk-tiny", "--phase1-steps", "1",
                     "--phase2-steps", "0", "--workers", "1", "--out", str(tmp_path / "run")])
        assert code == 3
        assert error_line(capsys).startswith("treekit-error[3]: IngestionError")
