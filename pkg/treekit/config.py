"""Model, schedule and runtime configuration.

Configuration comes from three layers, later ones winning: preset defaults,
a line-oriented ``key = value`` file, then explicit overrides (command-line
flags). Runtime knobs that are not part of an experiment (worker count, log
level, numeric debug checks) come from the environment, optionally loaded
from a ``.env`` file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

from dotenv import dotenv_values, load_dotenv

from .errors import ContractViolation, IngestionError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: Union[str, bool]) -> bool:
    if isinstance(text, bool):
        return text
    key = str(text).strip().lower()
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    raise ContractViolation(f"Expected a boolean (on/off, true/false), got {text!r}")


def _coerce(value: Any, target: Any) -> Any:
    if isinstance(value, str):
        if target in (bool, "bool"):
            return parse_bool(value)
        if target in (int, "int"):
            return int(value)
        if target in (float, "float"):
            return float(value)
    return value


def _from_mapping(cls: Type[T], values: Mapping[str, Any]) -> T:
    known = {f.name: f for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for raw_key, value in values.items():
        key = raw_key.strip().replace("-", "_")
        if key not in known:
            raise ContractViolation(f"Unknown {cls.__name__} key: {raw_key!r}")
        kwargs[key] = _coerce(value, known[key].type)
    return cls(**kwargs)


def _to_text(obj: Any) -> str:
    lines = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a ``key = value`` file. Keys are normalised to underscores."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {
        key.strip().replace("-", "_"): value
        for key, value in values.items()
        if value is not None
    }


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and capacity of the split model."""

    layers: int = 4
    heads: int = 4
    hidden: int = 64
    mlp_hidden: int = 256
    n_max: int = 256
    m_max: int = 10
    k_max: int = 4
    sigma: float = 0.05
    positional_bias: bool = True
    dtype: str = "float32"
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ContractViolation(
                f"hidden size {self.hidden} is not divisible by heads {self.heads}"
            )
        if self.sigma <= 0:
            raise ContractViolation(f"sigma must be > 0, got {self.sigma}")
        if self.layers < 1:
            raise ContractViolation(f"layers must be >= 1, got {self.layers}")
        if self.dtype not in ("float32", "float64"):
            raise ContractViolation(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return _to_text(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ModelConfig":
        return _from_mapping(cls, values)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(_parse_text_pairs(text))

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ContractViolation(
                f"Unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}"
            )
        return dataclasses.replace(MODEL_PRESETS[name], **overrides)


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "full-scale": ModelConfig(
        layers=12, heads=12, hidden=768, mlp_hidden=3072,
        n_max=256, m_max=10, k_max=10, sigma=0.05,
    ),
    "desk": ModelConfig(
        layers=4, heads=4, hidden=64, mlp_hidden=256,
        n_max=256, m_max=10, k_max=4, sigma=0.05,
    ),
    # Gradient gate size; always verified in 64-bit.
    "desk-tiny": ModelConfig(
        layers=2, heads=2, hidden=16, mlp_hidden=32,
        n_max=8, m_max=3, k_max=3, sigma=0.05, dtype="float64",
    ),
}


@dataclass(frozen=True)
class TrainSchedule:
    """Curriculum, optimizer and bookkeeping settings for one training run."""

    phase1_steps: int = 15_000
    phase2_steps: int = 45_000
    batch: int = 32
    seed: int = 0
    lr: float = 3e-4
    warmup: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    checkpoint_every: int = 1000
    log_every: int = 100
    workers: int = 1
    single_phase: bool = False
    relabel: bool = False

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ContractViolation("phase step counts must be >= 0")
        if self.total_steps < 1:
            raise ContractViolation("a schedule needs at least one step")
        if self.batch < 1:
            raise ContractViolation(f"batch must be >= 1, got {self.batch}")

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps

    def phase_at(self, step: int) -> int:
        """Curriculum phase (1 or 2) that governs 0-based ``step``."""
        if self.single_phase:
            return 2
        return 1 if step < self.phase1_steps else 2

    def replace(self, **changes: Any) -> "TrainSchedule":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return _to_text(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainSchedule":
        return _from_mapping(cls, values)

    @classmethod
    def from_text(cls, text: str) -> "TrainSchedule":
        return cls.from_mapping(_parse_text_pairs(text))

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "TrainSchedule":
        if name not in SCHEDULE_PRESETS:
            raise ContractViolation(
                f"Unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}"
            )
        return dataclasses.replace(SCHEDULE_PRESETS[name], **overrides)


def _parse_text_pairs(text: str) -> Dict[str, str]:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


SCHEDULE_PRESETS: Dict[str, TrainSchedule] = {
    "full-scale": TrainSchedule(
        phase1_steps=1_000_000, phase2_steps=3_000_000, batch=128, lr=5e-5, warmup=1000,
    ),
    "desk": TrainSchedule(
        phase1_steps=15_000, phase2_steps=45_000, batch=32, lr=3e-4, warmup=1000,
    ),
}


def split_config_values(values: Mapping[str, str]) -> Tuple[Dict[str, str], Dict[str, str], Dict[str, str]]:
    """Partition a flat ``key = value`` mapping into model, schedule and other keys."""
    model_keys = {f.name for f in fields(ModelConfig)}
    schedule_keys = {f.name for f in fields(TrainSchedule)}
    model, schedule, rest = {}, {}, {}
    for key, value in values.items():
        key = key.replace("-", "_")
        if key in model_keys:
            model[key] = value
        elif key in schedule_keys:
            schedule[key] = value
        else:
            rest[key] = value
    return model, schedule, rest


@dataclass
class Settings:
    """Process-level knobs read from the environment."""

    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    log_level: str = "INFO"
    debug_numerics: bool = False
    dtype: Optional[str] = None

    @classmethod
    def from_env(cls, env_file: Optional[Union[str, Path]] = None) -> "Settings":
        if env_file is not None:
            load_dotenv(dotenv_path=env_file)
        else:
            load_dotenv()
        settings = cls()
        workers = os.getenv("TREEKIT_WORKERS")
        if workers:
            settings.workers = max(1, int(workers))
        settings.log_level = os.getenv("TREEKIT_LOG_LEVEL", settings.log_level).upper()
        settings.debug_numerics = parse_bool(os.getenv("TREEKIT_DEBUG_NUMERICS", "0"))
        settings.dtype = os.getenv("TREEKIT_DTYPE") or None
        return settings
