"""Synthetic XOR datasets with a known generating tree.

A level-``L`` XOR problem is a full binary tree of depth ``2L`` over two
signal features, whose axes alternate by depth. Every threshold is drawn
uniformly inside the box its ancestors carve out of ``[-1, 1]^2``, and a
point's label is the parity of the right turns on its path.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import NUMERIC, Block, Dataset, block_from_dataset
from .errors import ContractViolation
from .trees import DecisionTree, Internal, Leaf, Split

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Boundary:
    node: int
    axis: int
    value: float
    low: float
    high: float


@dataclass(frozen=True)
class XorSpec:
    level: int = 1
    noise_rate: float = 0.0
    extra_noise_dims: int = 0
    seed: int = 0
    boundaries: Tuple[Boundary, ...] = ()
    signal_columns: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.level not in (1, 2):
            raise ContractViolation(f"XOR level must be 1 or 2, got {self.level}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ContractViolation(f"XOR noise rate must be in [0, 0.5), got {self.noise_rate}")
        if self.extra_noise_dims < 0:
            raise ContractViolation("extra_noise_dims must be >= 0")

    @property
    def depth(self) -> int:
        return 2 * self.level

    @property
    def n_splits(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_features(self) -> int:
        return 2 + self.extra_noise_dims

    @property
    def materialized(self) -> bool:
        return bool(self.boundaries)

    @property
    def bayes_accuracy(self) -> float:
        return 1.0 - self.noise_rate

    def materialize(self) -> "XorSpec":
        """Draw the boundaries and signal placement (no-op when already drawn)."""
        if self.materialized:
            return self
        rng = np.random.default_rng([self.seed, 0])
        root_axis = int(rng.integers(2))
        boundaries: List[Boundary] = []
        boxes = {1: np.array([[-1.0, 1.0], [-1.0, 1.0]])}
        for index in range(1, 2 ** self.depth):
            box = boxes.pop(index)
            axis = (root_axis + index.bit_length() - 1) % 2
            low, high = box[axis]
            value = float(rng.uniform(low, high))
            boundaries.append(Boundary(index, axis, value, float(low), float(high)))
            left, right = box.copy(), box.copy()
            left[axis, 1] = value
            right[axis, 0] = value
            boxes[2 * index] = left
            boxes[2 * index + 1] = right
        placement = rng.permutation(self.n_features)
        return dataclasses.replace(
            self,
            boundaries=tuple(boundaries),
            signal_columns=(int(placement[0]), int(placement[1])),
        )

    def boundary_map(self) -> Dict[int, Boundary]:
        return {b.node: b for b in self.materialize().boundaries}

    def clean_labels(self, signal: np.ndarray) -> np.ndarray:
        """Noise-free labels for ``(n, 2)`` signal coordinates."""
        bounds = self.boundary_map()
        n = signal.shape[0]
        index = np.ones(n, dtype=np.int64)
        parity = np.zeros(n, dtype=np.int64)
        for _ in range(self.depth):
            axis = np.array([bounds[int(i)].axis for i in index])
            value = np.array([bounds[int(i)].value for i in index])
            right = (signal[np.arange(n), axis] > value).astype(np.int64)
            parity ^= right
            index = 2 * index + right
        return parity

    def ground_truth_tree(self) -> DecisionTree:
        """The generating tree over block columns (depth ``2 * level``)."""
        spec = self.materialize()
        nodes = {}
        for b in spec.boundaries:
            nodes[b.node] = Internal(Split(spec.signal_columns[b.axis], b.value))
        for leaf in range(2 ** spec.depth, 2 ** (spec.depth + 1)):
            parity = bin(leaf - 2 ** spec.depth).count("1") % 2
            nodes[leaf] = Leaf(parity, "depth")
        return DecisionTree(spec.depth, nodes, "ground-truth", 2)


def xor_dataset(spec: XorSpec, n: int, data_seed: Optional[int] = None,
                name: Optional[str] = None) -> Tuple[Dataset, XorSpec]:
    """Sample ``n`` labelled points from ``spec`` (materialising it first)."""
    if n < 4:
        raise ContractViolation(f"XOR datasets need n >= 4, got {n}")
    spec = spec.materialize()
    rng = np.random.default_rng([spec.seed, 1] if data_seed is None else [spec.seed, 2, data_seed])
    signal = rng.uniform(-1.0, 1.0, size=(n, 2))
    labels = spec.clean_labels(signal)
    if spec.noise_rate > 0:
        flips = rng.random(n) < spec.noise_rate
        labels = np.where(flips, 1 - labels, labels)
    noise = rng.uniform(-1.0, 1.0, size=(n, spec.extra_noise_dims))

    X = np.empty((n, spec.n_features), dtype=np.float64)
    X[:, spec.signal_columns[0]] = signal[:, 0]
    X[:, spec.signal_columns[1]] = signal[:, 1]
    noise_cols = [j for j in range(spec.n_features) if j not in spec.signal_columns]
    X[:, noise_cols] = noise
    dataset = Dataset(
        name=name or f"xor-l{spec.level}-s{spec.seed}",
        X=X,
        Y=labels,
        feature_kinds=(NUMERIC,) * spec.n_features,
        n_classes=2,
    )
    return dataset, spec


def gen_xor(spec: XorSpec, n: int = 256) -> Tuple[Block, XorSpec]:
    dataset, spec = xor_dataset(spec, n)
    return block_from_dataset(dataset), spec


def relative_error(accuracy: float, noise_rate: float) -> float:
    """Shortfall of ``accuracy`` from the noise-limited ceiling ``1 - noise_rate``."""
    return (1.0 - noise_rate) - accuracy


def spec_to_text(spec: XorSpec) -> str:
    spec = spec.materialize()
    lines = [
        f"level = {spec.level}",
        f"noise_rate = {spec.noise_rate!r}",
        f"extra_noise_dims = {spec.extra_noise_dims}",
        f"seed = {spec.seed}",
        f"signal_columns = {spec.signal_columns[0]},{spec.signal_columns[1]}",
    ]
    for b in spec.boundaries:
        lines.append(f"boundary.{b.node} = {b.axis} {b.value!r} {b.low!r} {b.high!r}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> XorSpec:
    values: Dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    boundaries = []
    for key in sorted((k for k in values if k.startswith("boundary.")), key=lambda k: int(k.split(".")[1])):
        axis, value, low, high = values[key].split()
        boundaries.append(Boundary(int(key.split(".")[1]), int(axis), float(value), float(low), float(high)))
    columns = tuple(int(c) for c in values["signal_columns"].split(","))
    return XorSpec(
        level=int(values["level"]),
        noise_rate=float(values["noise_rate"]),
        extra_noise_dims=int(values["extra_noise_dims"]),
        seed=int(values["seed"]),
        boundaries=tuple(boundaries),
        signal_columns=columns,
    )
