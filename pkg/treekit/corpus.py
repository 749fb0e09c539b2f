"""Teacher corpus: blocks paired with depth-2 teacher trees and their held-out accuracy."""

from __future__ import annotations

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import FORMAT_VERSION
from .container import parse_header, read_container, write_container
from .data import (
    DEFAULT_BLOCK_COLS,
    DEFAULT_BLOCK_ROWS,
    Block,
    Dataset,
    block_from_tensors,
    block_tensors,
    sample_block,
    train_test_split,
)
from .errors import ContractViolation, DataError, IngestionError, ParseError, TreekitError
from .greedy import build_greedy
from .optimal import DEFAULT_LAMBDA, build_optimal_depth2
from .trees import DecisionTree, accuracy

logger = logging.getLogger(__name__)

OPTIMAL_TAG = "optimal-d2"
GREEDY_TAG = "greedy-gini"
TEACHER_TAGS = (OPTIMAL_TAG, GREEDY_TAG)


@dataclass
class TrainingExample:
    block: Block
    teacher: DecisionTree
    teacher_tag: str
    test_accuracy: float
    source_dataset: str
    seed: int
    heldout_X: np.ndarray
    heldout_Y: np.ndarray
    repetition: int = 0

    def __post_init__(self):
        if self.teacher_tag not in TEACHER_TAGS:
            raise ContractViolation(f"Unknown teacher tag {self.teacher_tag!r}")
        if self.teacher.depth != 2:
            raise ContractViolation(f"Teacher trees must have depth 2, got {self.teacher.depth}")
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ContractViolation(f"test_accuracy {self.test_accuracy} outside [0, 1]")

    @property
    def pair_key(self) -> Tuple[str, int]:
        return self.source_dataset, self.seed

    def replay_accuracy(self) -> float:
        return accuracy(self.teacher, self.heldout_X, self.heldout_Y)


@dataclass
class Corpus:
    examples: List[TrainingExample] = field(default_factory=list)
    manifest: "OrderedDict[str, Dict[str, object]]" = field(default_factory=OrderedDict)
    seed: int = 0
    lam: float = DEFAULT_LAMBDA
    command: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def tags(self) -> List[str]:
        return sorted({e.teacher_tag for e in self.examples})


def heldout_view(test: Dataset, block: Block) -> np.ndarray:
    """Held-out rows restricted to the block's sampled columns, in block column order."""
    X = np.zeros((test.n_rows, block.shape[1]), dtype=np.float64)
    for j, source in enumerate(block.source_cols):
        if source >= 0:
            X[:, j] = test.X[:, source]
    return X


def _repetition(dataset: Dataset, repetition: int, seed: int, lam: float, n: int, m: int,
                train_fraction: float) -> List[TrainingExample]:
    split_seed, block_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    train, test = train_test_split(dataset, train_fraction, split_seed)
    block = sample_block(train, n, m, block_seed)
    heldout_X = heldout_view(test, block)
    teachers = (
        (OPTIMAL_TAG, build_optimal_depth2(block, lam)),
        (GREEDY_TAG, build_greedy(block, 2, "gini")),
    )
    return [
        TrainingExample(
            block=block,
            teacher=tree,
            teacher_tag=tag,
            test_accuracy=accuracy(tree, heldout_X, test.Y),
            source_dataset=dataset.name,
            seed=seed,
            heldout_X=heldout_X,
            heldout_Y=test.Y.copy(),
            repetition=repetition,
        )
        for tag, tree in teachers
    ]


def repetition_seed(master: int, dataset_index: int, repetition: int) -> int:
    return int(np.random.SeedSequence([master, dataset_index, repetition]).generate_state(1)[0])


def gen_corpus(datasets: Sequence[Dataset], per_dataset: int, seed: int = 0, lam: float = DEFAULT_LAMBDA,
               workers: int = 1, n: int = DEFAULT_BLOCK_ROWS, m: int = DEFAULT_BLOCK_COLS,
               train_fraction: float = 0.7) -> Corpus:
    """Fit both teachers on ``per_dataset`` sampled blocks of every dataset.

    Repetitions run on ``workers`` threads; examples are stored in
    (dataset, repetition) order regardless of completion order.
    """
    if per_dataset < 1:
        raise ContractViolation(f"per_dataset must be >= 1, got {per_dataset}")
    corpus = Corpus(seed=seed, lam=lam)
    jobs = []
    for d, dataset in enumerate(datasets):
        corpus.manifest[dataset.name] = {"repetitions": per_dataset, "examples": 0, "notes": []}
        if dataset.n_rows < 4:
            corpus.manifest[dataset.name]["notes"].append(f"skipped: only {dataset.n_rows} rows")
            continue
        for r in range(per_dataset):
            jobs.append((dataset, r, repetition_seed(seed, d, r)))

    def run(job):
        dataset, r, rep_seed = job
        try:
            return _repetition(dataset, r, rep_seed, lam, n, m, train_fraction), None
        except (DataError, ContractViolation) as exc:
            return [], f"repetition {r} skipped: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, jobs))

    for (dataset, r, _), (examples, note) in zip(jobs, results):
        entry = corpus.manifest[dataset.name]
        if note:
            entry["notes"].append(note)
            logger.warning("%s: %s", dataset.name, note)
        entry["examples"] += len(examples)
        corpus.examples.extend(examples)
    logger.info("Corpus: %d examples from %d datasets", len(corpus), len(datasets))
    return corpus


# ----------------------------------------------------------------------------
# Curriculum streams


def select_phase_stream(corpus: Corpus, phase: int) -> List[TrainingExample]:
    """Phase 1: optimal teachers only. Phase 2: the better-generalising teacher per pair."""
    if phase not in (1, 2):
        raise ContractViolation(f"phase must be 1 or 2, got {phase}")
    if phase == 1:
        return [e for e in corpus.examples if e.teacher_tag == OPTIMAL_TAG]
    chosen: "OrderedDict[Tuple[str, int], TrainingExample]" = OrderedDict()
    for example in corpus.examples:
        incumbent = chosen.get(example.pair_key)
        if incumbent is None:
            chosen[example.pair_key] = example
            continue
        better = example.test_accuracy > incumbent.test_accuracy or (
            example.test_accuracy == incumbent.test_accuracy and example.teacher_tag == OPTIMAL_TAG
        )
        if better:
            chosen[example.pair_key] = example
    return list(chosen.values())


def shuffled_stream(stream: Sequence[TrainingExample], seed: int, phase: int, epoch: int) -> List[TrainingExample]:
    order = np.random.default_rng([seed, phase, epoch]).permutation(len(stream))
    return [stream[i] for i in order]


# ----------------------------------------------------------------------------
# Persistence


def save_corpus(corpus: Corpus, directory: Union[str, Path]) -> Path:
    """``manifest.txt``, ``examples.tsv`` plus one block container and tree file per record."""
    root = Path(directory)
    (root / "blocks").mkdir(parents=True, exist_ok=True)
    (root / "trees").mkdir(parents=True, exist_ok=True)

    lines = [
        f"# treekit corpus format {FORMAT_VERSION}",
        f"# command: {corpus.command}",
        f"format_version = {FORMAT_VERSION}",
        f"seed = {corpus.seed}",
        f"lambda = {corpus.lam!r}",
        f"examples = {len(corpus)}",
    ]
    for name, entry in corpus.manifest.items():
        lines.append(f"dataset.{name} = {entry['examples']} examples / {entry['repetitions']} repetitions")
        for note in entry["notes"]:
            lines.append(f"# note {name}: {note}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    rows = ["id\tsource\tseed\trepetition\tteacher\ttest_accuracy\tblock\ttree"]
    written: Dict[Tuple[str, int], str] = {}
    for index, example in enumerate(corpus.examples):
        block_file = written.get(example.pair_key)
        if block_file is None:
            block_file = f"blocks/{len(written):06d}.tkc"
            tensors = block_tensors(example.block)
            tensors["heldout.X"] = example.heldout_X
            tensors["heldout.Y"] = example.heldout_Y
            write_container(root / block_file, tensors, {
                "kind": "block", "name": example.block.name, "n_classes": example.block.n_classes,
            })
            written[example.pair_key] = block_file
        tree_file = f"trees/{index:06d}.tree"
        (root / tree_file).write_text(
            example.teacher.to_text([f"teacher {example.teacher_tag} for {example.source_dataset}"]),
            encoding="utf-8",
        )
        rows.append("\t".join([
            str(index), example.source_dataset, str(example.seed), str(example.repetition),
            example.teacher_tag, repr(example.test_accuracy), block_file, tree_file,
        ]))
    (root / "examples.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return root


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise IngestionError(f"Corpus file missing: {path}") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"Cannot read corpus file {path}: {exc}") from exc


def load_corpus(directory: Union[str, Path]) -> Corpus:
    root = Path(directory)
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise IngestionError(f"Not a corpus directory (no manifest.txt): {root}")
    try:
        return _load_corpus(root, parse_header(_read_text(manifest_path)))
    except TreekitError:
        raise
    except (KeyError, ValueError) as exc:
        raise ParseError(f"Corrupt corpus under {root}: {exc!r}") from exc


def _load_corpus(root: Path, meta: Dict[str, str]) -> Corpus:
    corpus = Corpus(seed=int(meta.get("seed", 0)), lam=float(meta.get("lambda", DEFAULT_LAMBDA)))
    for key, value in meta.items():
        if key.startswith("dataset."):
            count = int(value.split()[0])
            corpus.manifest[key[len("dataset."):]] = {"repetitions": 0, "examples": count, "notes": []}

    blocks: Dict[str, Tuple[Block, np.ndarray, np.ndarray]] = {}
    lines = _read_text(root / "examples.tsv").splitlines()
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise ParseError(f"examples.tsv line {number}: expected 8 fields, got {len(parts)}")
        _, source, seed, repetition, tag, test_accuracy, block_file, tree_file = parts
        if block_file not in blocks:
            tensors, text = read_container(root / block_file)
            header = parse_header(text)
            block = block_from_tensors(tensors, int(header["n_classes"]), header.get("name", ""))
            blocks[block_file] = (block, tensors["heldout.X"], tensors["heldout.Y"])
        block, heldout_X, heldout_Y = blocks[block_file]
        teacher = DecisionTree.from_text(_read_text(root / tree_file))
        corpus.examples.append(TrainingExample(
            block=block,
            teacher=teacher,
            teacher_tag=tag,
            test_accuracy=float(test_accuracy),
            source_dataset=source,
            seed=int(seed),
            heldout_X=heldout_X,
            heldout_Y=heldout_Y,
            repetition=int(repetition),
        ))
    return corpus
