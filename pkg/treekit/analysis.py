"""Experiments over tree algorithms: ensemble evaluation, rank tables,
bias/variance, split preference, layer probing and the XOR sweep."""

from __future__ import annotations

import logging
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from .autodiff import no_grad
from .corpus import heldout_view
from .data import (
    DEFAULT_BLOCK_COLS,
    DEFAULT_BLOCK_ROWS,
    Block,
    Dataset,
    block_from_dataset,
    block_hash,
    sample_block,
    train_test_split,
)
from .errors import ContractViolation, UnsupportedError
from .generation import generate_tree
from .greedy import PROVENANCE, build_greedy
from .model import SplitTransformer, score_to_split
from .optimal import DEFAULT_LAMBDA, build_optimal_depth2
from .trees import DecisionTree, Internal, Split, accuracy, vote
from .xor import XorSpec, relative_error, xor_dataset

try:
    import resource
except ImportError:  # pragma: no cover - not available on Windows
    resource = None

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (1, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
DEFAULT_NOISE_RATES = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
ALGORITHM_NAMES = ("greedy-gini", "greedy-entropy", "greedy-gainratio", "optimal-d2", "learned")


def peak_rss_kb() -> Optional[int]:
    if resource is None:
        return None
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


# ----------------------------------------------------------------------------
# Algorithms


class Algorithm(ABC):
    """Fits one tree on one block; trees come back in block column coordinates."""

    name: str = ""
    max_depth: Optional[int] = None

    @abstractmethod
    def fit(self, block: Block, depth: int, seed: int = 0) -> DecisionTree:
        ...

    def check_depth(self, depth: int) -> None:
        if self.max_depth is not None and depth > self.max_depth:
            raise UnsupportedError(f"{self.name} is only available up to depth {self.max_depth}, got {depth}")


class GreedyAlgorithm(Algorithm):
    def __init__(self, criterion: str = "gini"):
        self.criterion = criterion
        self.name = PROVENANCE[criterion]

    def fit(self, block: Block, depth: int, seed: int = 0) -> DecisionTree:
        return build_greedy(block, depth, self.criterion)


class OptimalAlgorithm(Algorithm):
    name = "optimal-d2"
    max_depth = 2

    def __init__(self, lam: float = DEFAULT_LAMBDA):
        self.lam = lam

    def fit(self, block: Block, depth: int, seed: int = 0) -> DecisionTree:
        self.check_depth(depth)
        return build_optimal_depth2(block, self.lam, depth=depth)


class LearnedAlgorithm(Algorithm):
    name = "learned"

    def __init__(self, model: SplitTransformer, exit_layer: Optional[int] = None):
        self.model = model
        self.exit_layer = exit_layer

    def fit(self, block: Block, depth: int, seed: int = 0) -> DecisionTree:
        return generate_tree(self.model, block, depth, seed=seed, exit_layer=self.exit_layer)


def make_algorithm(name: str, model: Optional[SplitTransformer] = None, lam: float = DEFAULT_LAMBDA) -> Algorithm:
    if name == "learned":
        if model is None:
            raise ContractViolation("The learned algorithm needs a model checkpoint")
        return LearnedAlgorithm(model)
    if name == "optimal-d2":
        return OptimalAlgorithm(lam)
    for criterion, provenance in PROVENANCE.items():
        if name == provenance:
            return GreedyAlgorithm(criterion)
    raise ContractViolation(f"Unknown algorithm {name!r}; choose from {ALGORITHM_NAMES}")


def _block_size(algorithms: Sequence[Algorithm], n: int, m: int) -> Tuple[int, int]:
    for algo in algorithms:
        if isinstance(algo, LearnedAlgorithm):
            n = min(n, algo.model.config.n_max)
            m = min(m, algo.model.config.m_max)
    return n, m


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# Ensemble evaluation


@dataclass
class EvalReport:
    """One row per (algorithm, dataset, size, run) with the ensemble's test accuracy."""

    records: pd.DataFrame
    block_hashes: Dict[Tuple[str, str, int], List[str]] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)

    COLUMNS = ("algorithm", "dataset", "size", "run", "accuracy", "fit_seconds", "peak_rss_kb", "depth", "seed")

    def summary(self) -> pd.DataFrame:
        grouped = self.records.groupby(["algorithm", "dataset", "size"], sort=False)["accuracy"]
        out = grouped.agg(["mean", "std", "count"]).reset_index()
        return out.rename(columns={"mean": "mean_accuracy", "std": "std_accuracy", "count": "runs"})

    def to_csv(self, path: Union[str, Path], comments: Sequence[str] = ()) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            for line in comments:
                handle.write(f"# {line}\n")
            self.records.to_csv(handle, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EvalReport":
        return cls(pd.read_csv(path, comment="#"))


def _evaluate_run(algorithms: Sequence[Algorithm], dataset: Dataset, d: int, run: int, sizes: Sequence[int],
                  depth: int, seed: int, n: int, m: int, train_fraction: float):
    train, test = train_test_split(dataset, train_fraction, _seed(seed, d, run, 0))
    count = max(sizes)
    blocks = [sample_block(train, n, m, _seed(seed, d, run, 1, t)) for t in range(count)]
    hashes = [block_hash(b) for b in blocks]
    rows, seen = [], {}
    for algo in algorithms:
        predictions = []
        started = time.perf_counter()
        for t, block in enumerate(blocks):
            tree = algo.fit(block, depth, seed=_seed(seed, d, run, 2, t))
            predictions.append(tree.predict(heldout_view(test, block)))
        fit_seconds = (time.perf_counter() - started) / count
        seen[(algo.name, dataset.name, run)] = hashes
        predictions = np.stack(predictions)
        for size in sizes:
            voted = vote(predictions[:size], dataset.n_classes)
            rows.append({
                "algorithm": algo.name,
                "dataset": dataset.name,
                "size": int(size),
                "run": run,
                "accuracy": float(np.mean(voted == test.Y)),
                "fit_seconds": fit_seconds,
                "peak_rss_kb": peak_rss_kb(),
                "depth": depth,
                "seed": seed,
            })
    return rows, seen, hashes


def evaluate(algorithms: Sequence[Algorithm], datasets: Sequence[Dataset], sizes: Sequence[int] = DEFAULT_SIZES,
             depth: int = 2, runs: int = 5, seed: int = 0, n: int = DEFAULT_BLOCK_ROWS, m: int = DEFAULT_BLOCK_COLS,
             workers: int = 1, train_fraction: float = 0.7) -> EvalReport:
    """Paired evaluation: every algorithm sees the same blocks within a run."""
    if not algorithms:
        raise ContractViolation("evaluate needs at least one algorithm")
    if not sizes or min(sizes) < 1:
        raise ContractViolation(f"ensemble sizes must be >= 1, got {list(sizes)}")
    for algo in algorithms:
        algo.check_depth(depth)
    n, m = _block_size(algorithms, n, m)
    jobs = [(d, dataset, run) for d, dataset in enumerate(datasets) for run in range(runs)]

    def job(item):
        d, dataset, run = item
        logger.info("eval %s run %d", dataset.name, run)
        return _evaluate_run(algorithms, dataset, d, run, sizes, depth, seed, n, m, train_fraction)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(job, jobs))

    records, hashes = [], {}
    for rows, seen, _ in results:
        records.extend(rows)
        hashes.update(seen)
    frame = pd.DataFrame(records, columns=list(EvalReport.COLUMNS))
    return EvalReport(frame, hashes, {"depth": depth, "runs": runs, "seed": seed, "sizes": list(sizes)})


# ----------------------------------------------------------------------------
# Rank table


def rank_table(report: Union[EvalReport, pd.DataFrame]) -> pd.DataFrame:
    """Average rank (1 = best, ties share the mean rank) and champion counts per ensemble size."""
    records = report.records if isinstance(report, EvalReport) else report
    means = records.groupby(["size", "dataset", "algorithm"], sort=True)["accuracy"].mean().reset_index()
    algorithms = sorted(means["algorithm"].unique())
    if len(algorithms) < 2:
        raise ContractViolation("rank_table needs at least two algorithms")
    out = []
    for size, group in means.groupby("size", sort=True):
        table = group.pivot(index="dataset", columns="algorithm", values="accuracy")[algorithms]
        table = table.dropna()
        values = table.to_numpy()
        ranks = np.vstack([stats.rankdata(-row, method="average") for row in values])
        champions = values == values.max(axis=1, keepdims=True)
        for k, algo in enumerate(algorithms):
            out.append({
                "size": int(size),
                "algorithm": algo,
                "mean_rank": float(ranks[:, k].mean()),
                "std_rank": float(ranks[:, k].std()),
                "champions": int(champions[:, k].sum()),
                "datasets": int(values.shape[0]),
            })
    return pd.DataFrame(out)


# ----------------------------------------------------------------------------
# Bias / variance


@dataclass
class BiasVariance:
    bias: float
    variance: float
    predictions: np.ndarray


def bias_variance_from_predictions(predictions: np.ndarray, y_true: np.ndarray, n_classes: int) -> Tuple[float, float]:
    """L2 bias and variance of one-hot predictions ``(models, points)`` against ``y_true``."""
    predictions = np.asarray(predictions, dtype=np.int64)
    eye = np.eye(n_classes)
    onehot = eye[predictions]
    mean = onehot.mean(axis=0)
    bias = float(np.mean(np.linalg.norm(mean - eye[np.asarray(y_true, dtype=np.int64)], axis=-1)))
    variance = float(np.mean(np.linalg.norm(mean[None] - onehot, axis=-1)))
    return bias, variance


def bias_variance(algorithm: Algorithm, dataset: Dataset, repetitions: int = 100, seed: int = 0, depth: int = 2,
                  n: int = DEFAULT_BLOCK_ROWS, m: int = DEFAULT_BLOCK_COLS, train_fraction: float = 0.7,
                  workers: int = 1) -> BiasVariance:
    """Fit ``repetitions`` trees on fresh block samples and score them on one shared test split."""
    if repetitions < 2:
        raise ContractViolation(f"bias_variance needs >= 2 repetitions, got {repetitions}")
    algorithm.check_depth(depth)
    n, m = _block_size([algorithm], n, m)
    train, test = train_test_split(dataset, train_fraction, _seed(seed, 0))

    def fit(rep: int) -> np.ndarray:
        block = sample_block(train, n, m, _seed(seed, 1, rep))
        tree = algorithm.fit(block, depth, seed=_seed(seed, 2, rep))
        return tree.predict(heldout_view(test, block))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        predictions = np.stack(list(pool.map(fit, range(repetitions))))
    bias, variance = bias_variance_from_predictions(predictions, test.Y, dataset.n_classes)
    return BiasVariance(bias, variance, predictions)


# ----------------------------------------------------------------------------
# Split similarity and preference


def partition_correlation(left_a: np.ndarray, left_b: np.ndarray) -> float:
    """Pearson correlation of two go-left indicators.

    Constant indicators: 1.0 when both send every row the same way, else 0.0.
    """
    a = np.asarray(left_a, dtype=np.float64)
    b = np.asarray(left_b, dtype=np.float64)
    const_a = np.all(a == a[0])
    const_b = np.all(b == b[0])
    if const_a or const_b:
        return 1.0 if (const_a and const_b and a[0] == b[0]) else 0.0
    da = a - a.mean()
    db = b - b.mean()
    value = np.sum(da * db) / np.sqrt(np.sum(da * da) * np.sum(db * db))
    return float(np.clip(value, -1.0, 1.0))


def split_correlation(a: Split, b: Split, X: np.ndarray) -> float:
    X = np.asarray(X)
    if X.shape[0] < 2:
        raise ContractViolation("split_correlation needs at least 2 rows")
    return partition_correlation(a.goes_left(X), b.goes_left(X))


def preference_filters(teacher_corr: float, accuracy_gap: float, corr_threshold: float = 0.7,
                       gap_threshold: float = 0.08) -> Tuple[bool, bool]:
    """``(keep_in_study, keep_in_regression)`` for one block.

    Blocks whose teachers' partitions correlate above ``corr_threshold`` (in
    absolute value) are dropped; the regression additionally drops blocks
    whose teachers' held-out accuracies differ by at most ``gap_threshold``.
    """
    keep = abs(teacher_corr) <= corr_threshold
    return keep, keep and abs(accuracy_gap) > gap_threshold


def correlation_bucket(value: float, edges: Tuple[float, float] = (1 / 3, 2 / 3)) -> str:
    magnitude = abs(value)
    if magnitude < edges[0]:
        return "low"
    if magnitude < edges[1]:
        return "medium"
    return "high"


@dataclass
class PreferenceStudy:
    records: pd.DataFrame
    buckets: pd.DataFrame
    pearson: float
    retained: int
    edges: Tuple[float, float]


def _bucket_table(kept: pd.DataFrame, edges: Tuple[float, float]) -> pd.DataFrame:
    rows = []
    for winner in ("optimal-d2", "greedy-gini"):
        subset = kept[kept["better"] == winner]
        for teacher, column in (("optimal-d2", "corr_optimal"), ("greedy-gini", "corr_greedy")):
            labels = [correlation_bucket(v, edges) for v in subset[column]]
            for bucket in ("low", "medium", "high"):
                count = labels.count(bucket)
                rows.append({
                    "better": winner,
                    "teacher": teacher,
                    "bucket": bucket,
                    "count": count,
                    "fraction": count / len(labels) if labels else 0.0,
                })
    return pd.DataFrame(rows)


def preference_study(model: SplitTransformer, datasets: Sequence[Dataset], blocks_per: int = 100, seed: int = 0,
                     lam: float = DEFAULT_LAMBDA, n: int = DEFAULT_BLOCK_ROWS, m: int = DEFAULT_BLOCK_COLS,
                     edges: Tuple[float, float] = (1 / 3, 2 / 3), corr_threshold: float = 0.7,
                     gap_threshold: float = 0.08, train_fraction: float = 0.7) -> PreferenceStudy:
    """Which teacher does the model's root split resemble, and does it pick the better one?"""
    n, m = min(n, model.config.n_max), min(m, model.config.m_max)
    rows = []
    for d, dataset in enumerate(datasets):
        train, test = train_test_split(dataset, train_fraction, _seed(seed, d, 0))
        for k in range(blocks_per):
            block = sample_block(train, n, m, _seed(seed, d, 1, k))
            greedy = build_greedy(block, 2, "gini")
            optimal = build_optimal_depth2(block, lam)
            if not isinstance(greedy.root, Internal) or not isinstance(optimal.root, Internal):
                continue
            scores = model.score_blocks([block])[0]
            learned = score_to_split(scores, block)
            X = block.raw_X[block.row_valid]
            heldout = heldout_view(test, block)
            acc_greedy = accuracy(greedy, heldout, test.Y)
            acc_optimal = accuracy(optimal, heldout, test.Y)
            teacher_corr = split_correlation(greedy.root.split, optimal.root.split, X)
            keep, regress = preference_filters(teacher_corr, acc_optimal - acc_greedy, corr_threshold, gap_threshold)
            if acc_optimal > acc_greedy:
                better = "optimal-d2"
            elif acc_greedy > acc_optimal:
                better = "greedy-gini"
            else:
                better = "tie"
            rows.append({
                "dataset": dataset.name,
                "block": k,
                "corr_optimal": split_correlation(learned, optimal.root.split, X),
                "corr_greedy": split_correlation(learned, greedy.root.split, X),
                "corr_teachers": teacher_corr,
                "acc_optimal": acc_optimal,
                "acc_greedy": acc_greedy,
                "better": better,
                "kept": keep,
                "regression": regress,
            })
    records = pd.DataFrame(rows, columns=[
        "dataset", "block", "corr_optimal", "corr_greedy", "corr_teachers",
        "acc_optimal", "acc_greedy", "better", "kept", "regression",
    ])
    kept = records[records["kept"].astype(bool)] if len(records) else records
    buckets = _bucket_table(kept, edges)
    reg = records[records["regression"].astype(bool)] if len(records) else records
    pearson = float("nan")
    if len(reg) >= 2:
        x = (reg["corr_optimal"] - reg["corr_greedy"]).to_numpy()
        y = (reg["acc_optimal"] - reg["acc_greedy"]).to_numpy()
        if np.ptp(x) > 0 and np.ptp(y) > 0:
            pearson = float(stats.pearsonr(x, y)[0])
    return PreferenceStudy(records, buckets, pearson, int(len(reg)), edges)


# ----------------------------------------------------------------------------
# Layer probing


def layer_probe_study(model: SplitTransformer, blocks: Sequence[Block]) -> pd.DataFrame:
    """Mean correlation between each layer's probed root split and the final split."""
    L = model.config.layers
    values = np.zeros((len(blocks), L))
    for b, block in enumerate(blocks):
        inputs = model.inputs([block])
        with no_grad():
            result = model.forward(inputs, keep_hiddens=True)
            final = score_to_split(result.scores.data[0], block)
            X = block.raw_X[block.row_valid]
            for layer in range(1, L + 1):
                probe = model.probe_layer(layer, result.hiddens, inputs).data[0]
                values[b, layer - 1] = split_correlation(score_to_split(probe, block), final, X)
    return pd.DataFrame({
        "layer": np.arange(1, L + 1),
        "mean_corr": values.mean(axis=0) if len(blocks) else np.full(L, np.nan),
        "std_corr": values.std(axis=0) if len(blocks) else np.full(L, np.nan),
        "blocks": len(blocks),
    })


def dataset_blocks(datasets: Sequence[Dataset], per_dataset: int, seed: int = 0, n: int = DEFAULT_BLOCK_ROWS,
                   m: int = DEFAULT_BLOCK_COLS) -> List[Block]:
    return [
        sample_block(dataset, n, m, _seed(seed, d, k))
        for d, dataset in enumerate(datasets)
        for k in range(per_dataset)
    ]


# ----------------------------------------------------------------------------
# XOR sweep


def xor_sweep(algorithm: Algorithm, levels: Sequence[int] = (1, 2), noise_rates: Sequence[float] = DEFAULT_NOISE_RATES,
              datasets: int = 100, seed: int = 0, depth: int = 2, n_train: int = 256, n_test: int = 1000,
              extra_noise_dims: int = 8, workers: int = 1) -> pd.DataFrame:
    """Accuracy and relative error on fresh XOR problems for every (level, noise) cell."""
    algorithm.check_depth(depth)
    n_fit, m_fit = _block_size([algorithm], n_train, extra_noise_dims + 2)
    cells = [(level, noise) for level in levels for noise in noise_rates]

    def one(item):
        (level, noise), k = item
        spec = XorSpec(level, noise, extra_noise_dims, _seed(seed, level, int(round(noise * 1000)), k))
        train, spec = xor_dataset(spec, n_train, data_seed=0)
        test, _ = xor_dataset(spec, n_test, data_seed=1)
        if (n_fit, m_fit) == train.X.shape:
            block = block_from_dataset(train)
        else:
            block = sample_block(train, n_fit, m_fit, spec.seed)
        tree = algorithm.fit(block, depth, seed=spec.seed)
        return accuracy(tree, heldout_view(test, block), test.Y)

    jobs = [(cell, k) for cell in cells for k in range(datasets)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        accs = np.array(list(pool.map(one, jobs))).reshape(len(cells), datasets)
    rows = []
    for (level, noise), values in zip(cells, accs):
        mean = float(values.mean())
        rows.append({
            "algorithm": algorithm.name,
            "level": level,
            "noise": noise,
            "datasets": datasets,
            "mean_accuracy": mean,
            "std_accuracy": float(values.std()),
            "relative_error": relative_error(mean, noise),
        })
    return pd.DataFrame(rows)
