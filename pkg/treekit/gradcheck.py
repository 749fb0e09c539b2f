"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .config import ModelConfig
from .data import NUMERIC, Dataset, block_from_dataset
from .errors import ContractViolation
from .greedy import build_greedy
from .model import SplitTransformer
from .training import example_loss

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
MAX_COORDINATES = 200


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: int
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    coordinates: int


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = DEFAULT_EPSILON,
                      max_coords: int = MAX_COORDINATES, seed: int = 0) -> GradCheckReport:
    """Compare ``gradients(f(), params)`` against central differences.

    ``f`` must rebuild the graph from the current parameter values on every
    call. At most ``max_coords`` coordinates are probed, chosen with ``seed``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractViolation(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or p}")
    analytic = ad.gradients(f(), params)

    coords: List[Tuple[int, int]] = [(i, k) for i, p in enumerate(params) for k in range(p.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[c] for c in picked]

    worst = GradCheckReport(0.0, -1, (), 0.0, 0.0, len(coords))
    for i, k in coords:
        data = params[i].data
        index = np.unravel_index(k, data.shape)
        original = data[index]
        with no_grad():
            data[index] = original + epsilon
            plus = f().item()
            data[index] = original - epsilon
            minus = f().item()
        data[index] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        value = float(analytic[i].reshape(-1)[k])
        error = relative_error(value, numeric)
        if error > worst.max_relative_error or worst.worst_parameter < 0:
            worst = GradCheckReport(error, i, tuple(int(x) for x in index), value, numeric, len(coords))
    logger.debug("grad_check: %d coordinates, max relative error %.3e", len(coords), worst.max_relative_error)
    return worst


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = DEFAULT_EPSILON,
               max_coords: int = MAX_COORDINATES, seed: int = 0) -> float:
    return grad_check_report(f, params, epsilon, max_coords, seed).max_relative_error


def primitive_checks(seed: int = 0) -> Dict[str, float]:
    """Max relative error of each differentiable primitive on random 64-bit inputs."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b, c = leaf(2, 3, 4), leaf(4, 5), leaf(5,)
    gain = leaf(4)
    index = np.array([2, 0, 2, 1])
    mask = rng.random((2, 3, 4)) > 0.3
    mask[..., 0] = True
    weights = rng.normal(size=(2, 3, 4))
    cases: Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]] = {
        "add": (lambda: ad.sum_(ad.mul(ad.add(a, gain), weights)), [a, gain]),
        "sub": (lambda: ad.sum_(ad.mul(ad.sub(a, gain), weights)), [a, gain]),
        "mul": (lambda: ad.sum_(ad.mul(a, a)), [a]),
        "matmul": (lambda: ad.sum_(ad.sigmoid(ad.matmul(a, b))), [a, b]),
        "reshape": (lambda: ad.sum_(ad.mul(ad.reshape(a, (6, 4)), weights.reshape(6, 4))), [a]),
        "transpose": (lambda: ad.sum_(ad.mul(ad.transpose(a, (2, 0, 1)), weights.transpose(2, 0, 1))), [a]),
        "mean": (lambda: ad.mean(ad.mul(a, a), axis=(0, 2)).sum(), [a]),
        "gather": (lambda: ad.sum_(ad.sigmoid(ad.gather(b, index, axis=0))), [b]),
        "scatter": (lambda: ad.sum_(ad.sigmoid(ad.scatter(b, np.array([1, 1, 0, 2]), 3, axis=0))), [b]),
        "sigmoid": (lambda: ad.sum_(ad.mul(ad.sigmoid(a), weights)), [a]),
        "silu": (lambda: ad.sum_(ad.mul(ad.silu(a), weights)), [a]),
        "rms_norm": (lambda: ad.sum_(ad.mul(ad.rms_norm(a, gain), weights)), [a, gain]),
        "masked_softmax": (lambda: ad.sum_(ad.mul(ad.masked_softmax(a, mask, axis=-1), weights)), [a]),
        "composite": (
            lambda: ad.sum_(ad.mul(ad.sigmoid(ad.matmul(ad.matmul(ad.softmax(ad.matmul(a, b)), ad.transpose(b)), b)), c)),
            [a, b, c],
        ),
    }
    return {name: grad_check(f, params, seed=seed) for name, (f, params) in cases.items()}


def model_loss_check(config: Optional[ModelConfig] = None, seed: int = 0, max_coords: int = MAX_COORDINATES,
                     init_std: float = 0.3) -> GradCheckReport:
    """Gradient check of the full training loss on one random block at the config's capacity.

    The config is forced to 64-bit and drawn with ``init_std`` in place of its
    own value. At the presets' 0.02 many attention and MLP gradients are small
    enough that central-difference rounding dominates their relative error. At
    0.3 the sampled gradients sit well above that noise. The teacher is a greedy
    depth-2 tree on an XOR-style labelling, so the loss has root and child views.
    """
    config = (config or ModelConfig.preset("desk-tiny")).replace(dtype="float64", init_std=init_std)
    n, m = config.n_max, config.m_max
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, m))
    Y = ((X[:, 0] > 0) ^ (X[:, min(1, m - 1)] > 0)).astype(np.int64)
    Y[:2] = [0, 1]
    dataset = Dataset("grad-check", X, Y, (NUMERIC,) * m, 2)
    block = block_from_dataset(dataset, n, m)
    teacher = build_greedy(block, 2, "gini")
    model = SplitTransformer.initialize(config, seed=seed)
    params = list(model.params.values())

    def loss() -> Tensor:
        value = example_loss(model, block, teacher, config.sigma)
        if value is None:
            raise ContractViolation("grad-check block produced a teacher without splits")
        return value

    report = grad_check_report(loss, params, max_coords=max_coords, seed=seed)
    logger.info("model loss grad check: %d coordinates, max relative error %.3e",
                report.coordinates, report.max_relative_error)
    return report
