import io

import numpy as np
import pytest

from treekit import FORMAT_VERSION
from treekit.config import (
    ModelConfig,
    Settings,
    TrainSchedule,
    parse_bool,
    read_config_file,
    split_config_values,
)
from treekit.container import parse_header, read_container, write_container
from treekit.errors import (
    ContractViolation,
    DataError,
    IngestionError,
    NumericAbort,
    ParseError,
    UnsupportedError,
    ValidationError,
    format_error_line,
)


class TestErrors:
    def test_exit_codes(self):
        assert ContractViolation("x").exit_code == 2
        assert UnsupportedError("x").exit_code == 2
        assert IngestionError("x").exit_code == 3
        assert ParseError("x").exit_code == 3
        assert ValidationError("x").exit_code == 3
        assert NumericAbort("x").exit_code == 4

    def test_hierarchy(self):
        assert issubclass(ParseError, DataError)
        assert isinstance(ContractViolation("x"), ValueError)

    def test_error_line_is_single_line(self):
        line = format_error_line(ParseError("bad cell\nin row 3"))
        assert line == "treekit-error[3]: ParseError: bad cell in row 3"

    def test_numeric_abort_details(self):
        exc = NumericAbort("Non-finite gradient", parameter="head.w", step=12, last_checkpoint="ckpt.tkc")
        assert exc.reason == "Non-finite gradient"
        assert "parameter=head.w" in str(exc)
        assert "step=12" in str(exc)
        assert exc.last_checkpoint == "ckpt.tkc"


class TestConfig:
    def test_parse_bool(self):
        assert parse_bool("on") is True
        assert parse_bool("OFF") is False
        assert parse_bool(True) is True
        with pytest.raises(ContractViolation):
            parse_bool("maybe")

    def test_presets(self):
        tiny = ModelConfig.preset("desk-tiny")
        assert (tiny.layers, tiny.heads, tiny.hidden, tiny.n_max, tiny.m_max) == (2, 2, 16, 8, 3)
        assert tiny.dtype == "float64"
        full = ModelConfig.preset("full-scale")
        assert (full.layers, full.heads, full.hidden, full.mlp_hidden) == (12, 12, 768, 3072)
        with pytest.raises(ContractViolation):
            ModelConfig.preset("huge")

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ContractViolation):
            ModelConfig(hidden=10, heads=4)

    def test_text_round_trip(self):
        config = ModelConfig.preset("desk", positional_bias=False, sigma=0.1)
        assert ModelConfig.from_text(config.to_text()) == config
        schedule = TrainSchedule.preset("desk", single_phase=True, seed=5)
        assert TrainSchedule.from_text(schedule.to_text()) == schedule

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractViolation):
            ModelConfig.from_mapping({"depthwise": "3"})

    def test_schedule_phases(self):
        schedule = TrainSchedule(phase1_steps=3, phase2_steps=5)
        assert schedule.total_steps == 8
        assert [schedule.phase_at(s) for s in range(8)] == [1, 1, 1, 2, 2, 2, 2, 2]
        assert schedule.replace(single_phase=True).phase_at(0) == 2

    def test_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# desk run\nlayers = 3\nphase1-steps = 10\npreset = desk\n")
        values = read_config_file(path)
        model, schedule, rest = split_config_values(values)
        assert model == {"layers": "3"}
        assert schedule == {"phase1_steps": "10"}
        assert rest == {"preset": "desk"}
        with pytest.raises(IngestionError):
            read_config_file(tmp_path / "missing.cfg")

    def test_settings_from_env(self, tmp_path, monkeypatch):
        for key in ("TREEKIT_WORKERS", "TREEKIT_LOG_LEVEL", "TREEKIT_DEBUG_NUMERICS", "TREEKIT_DTYPE"):
            monkeypatch.setenv(key, "")
            monkeypatch.delenv(key)
        env = tmp_path / ".env"
        env.write_text("TREEKIT_WORKERS=3\nTREEKIT_LOG_LEVEL=debug\nTREEKIT_DEBUG_NUMERICS=on\n")
        settings = Settings.from_env(env)
        assert settings.workers == 3
        assert settings.log_level == "DEBUG"
        assert settings.debug_numerics is True
        assert settings.dtype is None


class TestContainer:
    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(0)
        tensors = {
            "a": rng.normal(size=(3, 4)),
            "b": rng.normal(size=5).astype(np.float32),
            "c": np.arange(6, dtype=np.int32).reshape(2, 3),
            "d": np.array([True, False]),
            "e": np.array(2.5),
        }
        buffer = io.BytesIO()
        write_container(buffer, tensors, {"kind": "test", "step": 7})
        loaded, header = read_container(buffer.getvalue())
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            np.testing.assert_array_equal(loaded[name], value)
        assert loaded["c"].dtype == np.int64
        assert loaded["b"].dtype == np.float32
        assert parse_header(header) == {"kind": "test", "step": "7"}

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            read_container(b"NOPE" + b"\x00" * 16)

    def test_truncated(self):
        buffer = io.BytesIO()
        write_container(buffer, {"a": np.zeros(10)})
        with pytest.raises(ParseError):
            read_container(buffer.getvalue()[:-8])

    def test_newer_version_rejected(self):
        buffer = io.BytesIO()
        write_container(buffer, {"a": np.zeros(1)})
        data = bytearray(buffer.getvalue())
        data[4:8] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        with pytest.raises(ParseError):
            read_container(bytes(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            read_container(tmp_path / "none.tkc")
