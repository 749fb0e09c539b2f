"""Supervised training of the split model on teacher trees.

Each example contributes up to three views of one block: the root split on
all valid rows, and each child split with the sibling's rows masked out.
A view's target is a Gaussian bump on the teacher's feature column centred
on the teacher threshold (snapped to a data value, in normalised units);
the loss is BCE between the model's scores and that target.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainSchedule
from .container import parse_header, read_container
from .corpus import Corpus, TrainingExample, select_phase_stream, shuffled_stream
from .data import Block, permute_block
from .errors import ContractViolation, NumericAbort
from .model import SplitTransformer
from .optim import AdamWState, adamw_step
from .trees import DecisionTree, Internal, Split

logger = logging.getLogger(__name__)

CLAMP = 1e-7


# ----------------------------------------------------------------------------
# Targets and loss


def snap_split(block: Block, split: Split, row_mask: Optional[np.ndarray] = None) -> Tuple[Split, int]:
    """Teacher split (raw units) as ``Split(j, Xn[i, j])`` for a data cell ``i``.

    The chosen cell is the largest active value at or below the threshold,
    so ``x <= X[i, j]`` induces the teacher's partition. Thresholds below every
    active value fall back to the column minimum.
    """
    rows = block.row_valid if row_mask is None else block.row_valid & row_mask
    if not rows.any():
        raise ContractViolation("snap_split: no active rows")
    j = split.feature
    if not block.col_valid[j]:
        raise ContractViolation(f"snap_split: feature {j} is a padding column")
    raw = np.where(rows, block.raw_X[:, j], np.nan)
    below = rows & (block.raw_X[:, j] <= split.threshold)
    if below.any():
        candidates = np.where(below, raw, -np.inf)
        i = int(np.argmax(candidates))
    else:
        i = int(np.nanargmin(raw))
    return Split(j, float(block.Xn[i, j])), i


def gaussian_target(block: Block, split: Split, sigma: float, row_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """``exp(-(Xn[:, j] - v)^2 / (2 sigma^2))`` on column ``j``; zero elsewhere and on inactive rows.

    ``split`` is in normalised units.
    """
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    rows = block.row_valid if row_mask is None else block.row_valid & row_mask
    j = split.feature
    if not 0 <= j < block.shape[1] or not block.col_valid[j]:
        raise ContractViolation(f"gaussian_target: feature {j} is not a valid column")
    target = np.zeros(block.shape, dtype=np.float64)
    diff = block.Xn[:, j] - split.threshold
    target[:, j] = np.where(rows, np.exp(-(diff * diff) / (2.0 * sigma * sigma)), 0.0)
    return target


def bce_loss(S: Tensor, M: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean BCE over valid cells of every view, summed over views.

    Accepts a single ``(n, m)`` view or a ``(B, n, m)`` batch. Scores are
    clamped to ``[1e-7, 1 - 1e-7]``; clamped cells pass no gradient.
    """
    if S.shape != np.shape(M) or S.shape != np.shape(mask):
        raise ContractViolation(f"bce_loss: shapes differ: S {S.shape}, M {np.shape(M)}, mask {np.shape(mask)}")
    batched = S.ndim == 3
    s = S.data if batched else S.data[None]
    M3 = np.asarray(M, dtype=s.dtype) if batched else np.asarray(M, dtype=s.dtype)[None]
    w = (np.asarray(mask, dtype=bool) if batched else np.asarray(mask, dtype=bool)[None]).astype(s.dtype)
    counts = np.maximum(w.sum(axis=(1, 2), keepdims=True), 1.0)
    clipped = np.clip(s, CLAMP, 1.0 - CLAMP)
    cell = -(M3 * np.log(clipped) + (1.0 - M3) * np.log(1.0 - clipped))
    value = np.sum(cell * w / counts)
    inside = ((s >= CLAMP) & (s <= 1.0 - CLAMP)).astype(s.dtype)

    def backward_fn(g):
        grad = g * (-(M3 / clipped) + (1.0 - M3) / (1.0 - clipped)) * w / counts * inside
        return (grad if batched else grad[0],)

    return ad.custom_op(np.asarray(value, dtype=s.dtype), (S,), backward_fn, "bce")


# ----------------------------------------------------------------------------
# Views and augmentation


@dataclass
class View:
    row_mask: np.ndarray
    target: np.ndarray
    node: int


def teacher_views(block: Block, teacher: DecisionTree, sigma: float) -> List[View]:
    """Root view plus one view per internal child of the teacher's root."""
    views: List[View] = []
    root = teacher.nodes.get(1)
    if not isinstance(root, Internal):
        return views
    all_rows = block.row_valid.copy()
    snapped, _ = snap_split(block, root.split, all_rows)
    views.append(View(all_rows, gaussian_target(block, snapped, sigma, all_rows), 1))
    left = block.raw_X[:, root.split.feature] <= root.split.threshold
    for node, rows in ((2, all_rows & left), (3, all_rows & ~left)):
        child = teacher.nodes.get(node)
        if isinstance(child, Internal) and rows.any():
            snapped, _ = snap_split(block, child.split, rows)
            views.append(View(rows, gaussian_target(block, snapped, sigma, rows), node))
    return views


def augment(block: Block, teacher: DecisionTree, rng: np.random.Generator) -> Tuple[Block, DecisionTree]:
    """Independent uniform row and column permutation; teacher features follow the columns."""
    n, m = block.shape
    row_perm = rng.permutation(n)
    col_perm = rng.permutation(m)
    new_index = np.argsort(col_perm)
    return permute_block(block, row_perm, col_perm), teacher.remap_features(new_index)


def relabel_block(block: Block, teacher: DecisionTree) -> np.ndarray:
    labels = teacher.predict(block.raw_X)
    return np.where(block.row_valid, labels, 0)


def example_loss(model: SplitTransformer, block: Block, teacher: DecisionTree, sigma: float,
                 relabel: bool = False) -> Optional[Tensor]:
    """Summed BCE over the example's views, or ``None`` when the teacher has no split."""
    views = teacher_views(block, teacher, sigma)
    if not views:
        return None
    labels = [relabel_block(block, teacher)] * len(views) if relabel else None
    inputs = model.inputs([block] * len(views), [v.row_mask for v in views], labels)
    scores = model.forward(inputs).scores
    targets = np.stack([v.target for v in views]).astype(model.dtype)
    return bce_loss(scores, targets, inputs.cell_mask)


# ----------------------------------------------------------------------------
# Deterministic batch stream


class BatchStream:
    """Batch for global step ``s`` as a pure function of ``(seed, phase, s)``."""

    def __init__(self, corpus: Corpus, schedule: TrainSchedule):
        self.schedule = schedule
        self.streams = {1: select_phase_stream(corpus, 1), 2: select_phase_stream(corpus, 2)}
        if not self.streams[2]:
            raise ContractViolation("Training corpus is empty")
        if not schedule.single_phase and schedule.phase1_steps > 0 and not self.streams[1]:
            raise ContractViolation("Phase 1 needs optimal-d2 examples in the corpus")
        self._epochs: Dict[Tuple[int, int], List[TrainingExample]] = {}

    def _epoch(self, phase: int, epoch: int) -> List[TrainingExample]:
        key = (phase, epoch)
        if key not in self._epochs:
            if len(self._epochs) > 8:
                self._epochs.clear()
            self._epochs[key] = shuffled_stream(self.streams[phase], self.schedule.seed, phase, epoch)
        return self._epochs[key]

    def batch(self, step: int) -> Tuple[int, List[TrainingExample]]:
        phase = self.schedule.phase_at(step)
        offset = step if (phase == 1 or self.schedule.single_phase) else step - self.schedule.phase1_steps
        size = len(self.streams[phase])
        start = offset * self.schedule.batch
        batch = []
        for k in range(self.schedule.batch):
            position = start + k
            batch.append(self._epoch(phase, position // size)[position % size])
        return phase, batch


# ----------------------------------------------------------------------------
# Trainer


@dataclass
class TrainResult:
    model: SplitTransformer
    state: AdamWState
    losses: List[float] = field(default_factory=list)
    last_checkpoint: Optional[Path] = None


def _example_gradients(model: SplitTransformer, example: TrainingExample, schedule: TrainSchedule,
                       step: int, k: int) -> Tuple[float, Optional[List[np.ndarray]]]:
    rng = np.random.default_rng([schedule.seed, 7, step, k])
    block, teacher = augment(example.block, example.teacher, rng)
    loss = example_loss(model, block, teacher, model.config.sigma, schedule.relabel)
    if loss is None:
        return 0.0, None
    params = list(model.params.values())
    return loss.item(), ad.gradients(loss, params)


def train_step(model: SplitTransformer, state: AdamWState, batch: Sequence[TrainingExample],
               schedule: TrainSchedule, step: int, pool: Optional[ThreadPoolExecutor] = None) -> float:
    """One optimizer update on the mean loss of ``batch``; returns that loss."""
    jobs = [(example, k) for k, example in enumerate(batch)]
    run = lambda job: _example_gradients(model, job[0], schedule, step, job[1])  # noqa: E731
    results = list(pool.map(run, jobs)) if pool is not None else [run(j) for j in jobs]

    names = list(model.params)
    totals = [np.zeros_like(model.params[name].data) for name in names]
    loss = 0.0
    for value, grads in results:
        loss += value
        if grads is None:
            continue
        for total, g in zip(totals, grads):
            total += g
    loss /= len(batch)
    if not math.isfinite(loss):
        raise NumericAbort("Non-finite training loss", step=step)
    grads = {name: total / len(batch) for name, total in zip(names, totals)}
    adamw_step(model.params, grads, state)
    return loss


def optimizer_for(schedule: TrainSchedule) -> AdamWState:
    return AdamWState(
        lr=schedule.lr,
        warmup=schedule.warmup,
        total_steps=schedule.total_steps,
        beta1=schedule.beta1,
        beta2=schedule.beta2,
        eps=schedule.eps,
        weight_decay=schedule.weight_decay,
    )


def save_checkpoint(path: Union[str, Path], model: SplitTransformer, state: AdamWState,
                    schedule: TrainSchedule, command: str = "") -> Path:
    header: Dict[str, object] = {"kind": "checkpoint", "step": state.step, "command": command}
    for line in schedule.to_text().splitlines():
        key, _, value = line.partition("=")
        header[f"schedule.{key.strip()}"] = value.strip()
    path = Path(path)
    model.save(path, extra=state.tensors(), header=header)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[SplitTransformer, AdamWState, TrainSchedule]:
    tensors, text = read_container(path)
    model = SplitTransformer.from_tensors(tensors, text)
    meta = parse_header(text)
    schedule = TrainSchedule.from_mapping({
        key[len("schedule."):]: value for key, value in meta.items() if key.startswith("schedule.")
    })
    state = optimizer_for(schedule)
    state.load_tensors(tensors)
    return model, state, schedule


def train(corpus: Corpus, config: ModelConfig, schedule: TrainSchedule,
          out_dir: Optional[Union[str, Path]] = None, resume: Optional[Union[str, Path]] = None,
          model: Optional[SplitTransformer] = None, command: str = "",
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run the curriculum from step 0 (or from ``resume``) to ``schedule.total_steps``."""
    if not len(corpus):
        raise ContractViolation("Cannot train on an empty corpus")
    if resume is not None:
        model, state, _ = load_checkpoint(resume)
        logger.info("Resuming from %s at step %d", resume, state.step)
    else:
        model = model or SplitTransformer.initialize(config, seed=schedule.seed)
        state = optimizer_for(schedule)
    state.total_steps = schedule.total_steps
    stream = BatchStream(corpus, schedule)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model, state)
    if resume is not None:
        result.last_checkpoint = Path(resume)

    pool = ThreadPoolExecutor(max_workers=schedule.workers) if schedule.workers > 1 else None
    started = time.perf_counter()
    try:
        while state.step < schedule.total_steps:
            step = state.step
            phase, batch = stream.batch(step)
            try:
                loss = train_step(model, state, batch, schedule, step, pool)
            except NumericAbort as exc:
                raise NumericAbort(
                    exc.reason,
                    parameter=exc.parameter, step=step, last_checkpoint=result.last_checkpoint,
                ) from exc
            result.losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            if schedule.log_every and (step + 1) % schedule.log_every == 0:
                logger.info("step %d/%d phase %d loss %.5f lr %.2e (%.1fs)", step + 1, schedule.total_steps,
                            phase, loss, state.lr_at(step + 1), time.perf_counter() - started)
            if out is not None and schedule.checkpoint_every and state.step % schedule.checkpoint_every == 0:
                result.last_checkpoint = save_checkpoint(out / f"ckpt-{state.step:08d}.tkc", model, state,
                                                         schedule, command)
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        result.last_checkpoint = save_checkpoint(out / "model.tkc", model, state, schedule, command)
    return result
