"""Tabular data: datasets, fixed-capacity blocks, sampling and normalisation."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .container import parse_header, read_container, write_container
from .errors import ContractViolation, IngestionError, ParseError, ValidationError

logger = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"

MAX_CLASSES = 10
DEFAULT_BLOCK_ROWS = 256
DEFAULT_BLOCK_COLS = 10
CONSTANT_STD = 1e-8


@dataclass
class Dataset:
    """Raw tabular data with dense 0-based class ids."""

    name: str
    X: np.ndarray
    Y: np.ndarray
    feature_kinds: Tuple[str, ...]
    n_classes: int
    feature_names: Tuple[str, ...] = ()
    class_names: Tuple[str, ...] = ()
    categories: Dict[int, Tuple[str, ...]] = field(default_factory=dict)
    row_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ContractViolation(f"Dataset X must be 2-D, got shape {self.X.shape}")
        if self.X.shape[0] != self.Y.shape[0]:
            raise ContractViolation(
                f"Dataset {self.name!r}: X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}"
            )
        if self.n_classes < 2:
            raise ValidationError(f"Dataset {self.name!r} needs at least 2 classes, got {self.n_classes}")
        if self.n_classes > MAX_CLASSES:
            raise ValidationError(
                f"Dataset {self.name!r} has {self.n_classes} classes; at most {MAX_CLASSES} are supported"
            )
        if self.Y.size and (self.Y.min() < 0 or self.Y.max() >= self.n_classes):
            raise ValidationError(f"Dataset {self.name!r} has labels outside 0..{self.n_classes - 1}")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError(f"Dataset {self.name!r} contains missing or non-finite values")
        if len(self.feature_kinds) != self.X.shape[1]:
            raise ContractViolation("feature_kinds must have one entry per column")
        if not self.feature_names:
            self.feature_names = tuple(f"x{j}" for j in range(self.X.shape[1]))
        if not self.class_names:
            self.class_names = tuple(str(k) for k in range(self.n_classes))
        if self.row_ids is None:
            self.row_ids = np.arange(self.X.shape[0], dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: np.ndarray, name: Optional[str] = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return dataclasses.replace(
            self,
            name=name or self.name,
            X=self.X[rows],
            Y=self.Y[rows],
            row_ids=self.row_ids[rows],
        )


@dataclass(frozen=True)
class Block:
    """A normalised fixed-capacity window onto a dataset.

    Rows and columns beyond the sampled data are padding: masked out by
    ``row_valid``/``col_valid`` and zero-filled in ``Xn`` and ``raw_X``.
    """

    Xn: np.ndarray
    Y: np.ndarray
    raw_X: np.ndarray
    col_means: np.ndarray
    col_stds: np.ndarray
    row_valid: np.ndarray
    col_valid: np.ndarray
    feature_kinds: Tuple[str, ...]
    n_classes: int
    source_rows: np.ndarray
    source_cols: np.ndarray
    name: str = ""

    @property
    def shape(self) -> Tuple[int, int]:
        return self.Xn.shape

    @property
    def n_valid_rows(self) -> int:
        return int(self.row_valid.sum())

    @property
    def n_valid_cols(self) -> int:
        return int(self.col_valid.sum())

    @property
    def cell_mask(self) -> np.ndarray:
        return self.row_valid[:, None] & self.col_valid[None, :]

    @property
    def categorical_cols(self) -> np.ndarray:
        kinds = np.array([k == CATEGORICAL for k in self.feature_kinds], dtype=bool)
        return kinds & self.col_valid

    def replace(self, **changes) -> "Block":
        return dataclasses.replace(self, **changes)


# ----------------------------------------------------------------------------
# CSV ingestion


def _parse_numeric(values: pd.Series, column: str) -> Optional[np.ndarray]:
    """Floats for a numeric column, None for an all-text (categorical) column."""
    coerced = pd.to_numeric(values, errors="coerce")
    parsed = coerced.notna()
    if not parsed.any():
        return None
    if not parsed.all():
        bad = int(np.flatnonzero(~parsed.to_numpy())[0])
        raise ParseError(
            f"Non-numeric cell {values.iloc[bad]!r} in numeric column {column!r} at data row {bad}"
        )
    out = np.array([float(v) for v in values], dtype=np.float64)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise ParseError(f"Non-finite cell {values.iloc[bad]!r} in column {column!r} at data row {bad}")
    return out


def load_csv(
    path: Union[str, Path],
    label_column: Union[str, int] = "label",
    categorical: Sequence[str] = (),
    name: Optional[str] = None,
) -> Dataset:
    """Read a header-row CSV into a :class:`Dataset`.

    Columns whose cells are all non-numeric (or that are listed in
    ``categorical``) are coded in first-appearance order. Labels are coded
    the same way into 0..K-1.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"CSV file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, comment="#")
    frame.columns = [str(c).strip() for c in frame.columns]

    if isinstance(label_column, int) or (isinstance(label_column, str) and label_column.lstrip("-").isdigit()
                                         and label_column not in frame.columns):
        index = int(label_column)
        if not -len(frame.columns) <= index < len(frame.columns):
            raise IngestionError(f"Label column index {index} out of range for {path}")
        label_name = frame.columns[index]
    else:
        label_name = str(label_column)
        if label_name not in frame.columns:
            raise IngestionError(f"Label column {label_name!r} not found in {path}")

    for column in frame.columns:
        cells = frame[column].str.strip()
        frame[column] = cells
        empty = (cells == "").to_numpy()
        if empty.any():
            row = int(np.flatnonzero(empty)[0])
            raise IngestionError(f"Missing value in {path.name} at data row {row}, column {column!r}")

    feature_columns = [c for c in frame.columns if c != label_name]
    forced = set(categorical)
    columns: List[np.ndarray] = []
    kinds: List[str] = []
    categories: Dict[int, Tuple[str, ...]] = {}
    for j, column in enumerate(feature_columns):
        numeric = None if column in forced else _parse_numeric(frame[column], column)
        if numeric is None:
            codes, uniques = pd.factorize(frame[column], sort=False)
            columns.append(codes.astype(np.float64))
            kinds.append(CATEGORICAL)
            categories[j] = tuple(str(u) for u in uniques)
        else:
            columns.append(numeric)
            kinds.append(NUMERIC)

    labels, classes = pd.factorize(frame[label_name], sort=False)
    if len(classes) < 2:
        raise ValidationError(f"Label column {label_name!r} in {path} has a single class")

    X = np.column_stack(columns) if columns else np.zeros((len(frame), 0))
    dataset = Dataset(
        name=name or path.stem,
        X=X,
        Y=labels.astype(np.int64),
        feature_kinds=tuple(kinds),
        n_classes=len(classes),
        feature_names=tuple(feature_columns),
        class_names=tuple(str(c) for c in classes),
        categories=categories,
    )
    logger.debug("Loaded %s: %d rows, %d features, %d classes",
                 dataset.name, dataset.n_rows, dataset.n_features, dataset.n_classes)
    return dataset


def export_csv(dataset: Dataset, path: Union[str, Path], label_column: str = "label",
               comment: Optional[str] = None) -> Path:
    """Write ``dataset`` so that :func:`load_csv` reads it back bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {}
    for j, column in enumerate(dataset.feature_names):
        values = dataset.X[:, j]
        if dataset.feature_kinds[j] == CATEGORICAL and j in dataset.categories:
            names = dataset.categories[j]
            data[column] = [names[int(v)] for v in values]
        else:
            data[column] = [repr(float(v)) for v in values]
    data[label_column] = [dataset.class_names[int(y)] for y in dataset.Y]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if comment:
            for line in comment.splitlines():
                handle.write(f"# {line}\n")
        pd.DataFrame(data).to_csv(handle, index=False)
    return path


def load_dataset_dir(path: Union[str, Path], label_column: Union[str, int] = "label") -> List[Dataset]:
    """Every ``*.csv`` under ``path`` (or a comma-separated list of files)."""
    text = str(path)
    if "," in text:
        files = [Path(p.strip()) for p in text.split(",") if p.strip()]
    else:
        root = Path(text)
        if root.is_file():
            files = [root]
        elif root.is_dir():
            files = sorted(root.glob("*.csv"))
        else:
            raise IngestionError(f"Dataset path not found: {root}")
    if not files:
        raise IngestionError(f"No CSV datasets found under {path}")
    return [load_csv(f, label_column=label_column) for f in files]


# ----------------------------------------------------------------------------
# Splitting and block sampling


def train_test_split(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0) -> Tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ContractViolation(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n_rows)
    n_train = int(round(dataset.n_rows * train_fraction))
    train_rows = np.sort(order[:n_train])
    test_rows = np.sort(order[n_train:])
    for label, rows in (("train", train_rows), ("test", test_rows)):
        if rows.size < 2:
            raise ValidationError(
                f"Split of {dataset.name!r} at fraction {train_fraction} leaves {rows.size} {label} rows"
            )
        if np.unique(dataset.Y[rows]).size < 2:
            raise ValidationError(f"Split of {dataset.name!r} leaves a single class in the {label} set")
    return (
        dataset.subset(train_rows, f"{dataset.name}:train"),
        dataset.subset(test_rows, f"{dataset.name}:test"),
    )


def _assemble_block(dataset: Dataset, rows: np.ndarray, cols: np.ndarray, n: int, m: int) -> Block:
    raw = np.zeros((n, m), dtype=np.float64)
    raw[: rows.size, : cols.size] = dataset.X[np.ix_(rows, cols)]
    Y = np.zeros(n, dtype=np.int64)
    Y[: rows.size] = dataset.Y[rows]
    row_valid = np.zeros(n, dtype=bool)
    row_valid[: rows.size] = True
    col_valid = np.zeros(m, dtype=bool)
    col_valid[: cols.size] = True
    source_rows = np.full(n, -1, dtype=np.int64)
    source_rows[: rows.size] = dataset.row_ids[rows]
    source_cols = np.full(m, -1, dtype=np.int64)
    source_cols[: cols.size] = cols
    kinds = tuple(dataset.feature_kinds[c] for c in cols) + (NUMERIC,) * (m - cols.size)
    block = Block(
        Xn=np.zeros_like(raw),
        Y=Y,
        raw_X=raw,
        col_means=np.zeros(m),
        col_stds=np.ones(m),
        row_valid=row_valid,
        col_valid=col_valid,
        feature_kinds=kinds,
        n_classes=dataset.n_classes,
        source_rows=source_rows,
        source_cols=source_cols,
        name=dataset.name,
    )
    return normalize_block(block)


def sample_block(dataset: Dataset, n: int = DEFAULT_BLOCK_ROWS, m: int = DEFAULT_BLOCK_COLS,
                 seed: int = 0) -> Block:
    """Draw ``n`` rows and ``m`` columns without replacement and normalise.

    Undersized datasets are taken whole and padded with masked zeros.
    """
    if dataset.n_rows < 2:
        raise ContractViolation(f"Dataset {dataset.name!r} needs at least 2 rows to sample a block")
    rng = np.random.default_rng(seed)
    if dataset.n_rows >= n:
        rows = rng.choice(dataset.n_rows, size=n, replace=False)
    else:
        rows = np.arange(dataset.n_rows)
    if dataset.n_features >= m:
        cols = rng.choice(dataset.n_features, size=m, replace=False)
    else:
        cols = np.arange(dataset.n_features)
    return _assemble_block(dataset, rows.astype(np.int64), cols.astype(np.int64), n, m)


def block_from_dataset(dataset: Dataset, n: Optional[int] = None, m: Optional[int] = None) -> Block:
    """All rows and columns of ``dataset`` in order, optionally padded to ``(n, m)``."""
    n = dataset.n_rows if n is None else n
    m = dataset.n_features if m is None else m
    if dataset.n_rows > n or dataset.n_features > m:
        raise ContractViolation(
            f"Dataset {dataset.name!r} of shape {dataset.X.shape} does not fit a {n}x{m} block"
        )
    return _assemble_block(dataset, np.arange(dataset.n_rows), np.arange(dataset.n_features), n, m)


def normalize_block(block: Block) -> Block:
    """Standardise valid columns over valid rows with population variance.

    Columns with spread below 1e-8 become all zeros with a recorded std of 1.
    Always recomputed from ``raw_X``, so repeated calls agree exactly.
    """
    n, m = block.raw_X.shape
    Xn = np.zeros((n, m), dtype=np.float64)
    means = np.zeros(m, dtype=np.float64)
    stds = np.ones(m, dtype=np.float64)
    rows = block.row_valid
    for j in np.flatnonzero(block.col_valid):
        values = block.raw_X[rows, j]
        if values.size == 0:
            continue
        mean = values.mean()
        std = values.std()
        means[j] = mean
        if std < CONSTANT_STD:
            continue
        stds[j] = std
        Xn[rows, j] = (values - mean) / std
    raw = np.where(block.cell_mask, block.raw_X, 0.0)
    return block.replace(Xn=Xn, raw_X=raw, col_means=means, col_stds=stds)


def to_normalized(block: Block, feature: int, value: float) -> float:
    return (value - block.col_means[feature]) / block.col_stds[feature]


def to_raw(block: Block, feature: int, value: float) -> float:
    return value * block.col_stds[feature] + block.col_means[feature]


# ----------------------------------------------------------------------------
# Noise, permutation, persistence


def truncated_normal(rng: np.random.Generator, scale: float, bound: float,
                     size: Union[int, Tuple[int, ...]]) -> np.ndarray:
    """Zero-mean Gaussian draws resampled until they fall inside [-bound, bound]."""
    out = rng.normal(0.0, scale, size=size)
    outside = np.abs(out) > bound
    while outside.any():
        out[outside] = rng.normal(0.0, scale, size=int(outside.sum()))
        outside = np.abs(out) > bound
    return out


def inject_categorical_noise(block: Block, sigma_c: float = 0.05, bound: float = 0.1,
                             seed: int = 0) -> Block:
    """Perturb categorical cells with truncated Gaussian noise (inference only)."""
    if bound <= 0:
        raise ValidationError(f"Noise bound must be > 0, got {bound}")
    if sigma_c < 0:
        raise ValidationError(f"Noise sigma must be >= 0, got {sigma_c}")
    cols = block.categorical_cols
    if sigma_c == 0 or not cols.any():
        return block
    cells = block.row_valid[:, None] & cols[None, :]
    rng = np.random.default_rng(seed)
    noise = np.zeros(block.Xn.shape)
    noise[cells] = truncated_normal(rng, sigma_c, bound, int(cells.sum()))
    Xn = block.Xn + noise
    raw = np.where(cells, Xn * block.col_stds[None, :] + block.col_means[None, :], block.raw_X)
    return block.replace(Xn=Xn, raw_X=raw)


def permute_block(block: Block, row_perm: np.ndarray, col_perm: np.ndarray) -> Block:
    """Reorder rows and columns: new row ``i`` is old row ``row_perm[i]``."""
    r = np.asarray(row_perm)
    c = np.asarray(col_perm)
    return block.replace(
        Xn=block.Xn[np.ix_(r, c)],
        raw_X=block.raw_X[np.ix_(r, c)],
        Y=block.Y[r],
        row_valid=block.row_valid[r],
        col_valid=block.col_valid[c],
        col_means=block.col_means[c],
        col_stds=block.col_stds[c],
        feature_kinds=tuple(block.feature_kinds[j] for j in c),
        source_rows=block.source_rows[r],
        source_cols=block.source_cols[c],
    )


def block_hash(block: Block) -> str:
    digest = hashlib.sha1()
    for array in (block.Xn, block.raw_X, block.Y, block.row_valid, block.col_valid):
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def block_tensors(block: Block, prefix: str = "") -> Dict[str, np.ndarray]:
    return {
        f"{prefix}Xn": block.Xn,
        f"{prefix}raw_X": block.raw_X,
        f"{prefix}Y": block.Y,
        f"{prefix}col_means": block.col_means,
        f"{prefix}col_stds": block.col_stds,
        f"{prefix}row_valid": block.row_valid,
        f"{prefix}col_valid": block.col_valid,
        f"{prefix}categorical": np.array([k == CATEGORICAL for k in block.feature_kinds], dtype=bool),
        f"{prefix}source_rows": block.source_rows,
        f"{prefix}source_cols": block.source_cols,
    }


def block_from_tensors(tensors: Dict[str, np.ndarray], n_classes: int, name: str = "",
                       prefix: str = "") -> Block:
    kinds = tuple(CATEGORICAL if c else NUMERIC for c in tensors[f"{prefix}categorical"])
    return Block(
        Xn=tensors[f"{prefix}Xn"],
        Y=tensors[f"{prefix}Y"],
        raw_X=tensors[f"{prefix}raw_X"],
        col_means=tensors[f"{prefix}col_means"],
        col_stds=tensors[f"{prefix}col_stds"],
        row_valid=tensors[f"{prefix}row_valid"],
        col_valid=tensors[f"{prefix}col_valid"],
        feature_kinds=kinds,
        n_classes=n_classes,
        source_rows=tensors[f"{prefix}source_rows"],
        source_cols=tensors[f"{prefix}source_cols"],
        name=name,
    )


def save_block(block: Block, path: Union[str, Path], header: Optional[Dict[str, object]] = None) -> None:
    meta = {"kind": "block", "name": block.name, "n_classes": block.n_classes}
    meta.update(header or {})
    write_container(path, block_tensors(block), meta)


def load_block(path: Union[str, Path]) -> Block:
    tensors, text = read_container(path)
    meta = parse_header(text)
    return block_from_tensors(tensors, int(meta["n_classes"]), meta.get("name", ""))
