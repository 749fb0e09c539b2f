"""The split model: tabular embedding, axial row/column attention, scoring head.

Every cell ``(i, j)`` of a block becomes a ``d``-vector. Each layer lets a
cell attend over its column (all rows, softmax over ``n``) and over its row
(all columns, softmax over ``m``); the two branches and the residual are
summed, followed by a gated MLP. The head maps every cell to a score in
``(0, 1)``; the argmax cell encodes the split ``x[:, j] <= X[i, j]``.

All tensors carry a leading batch axis ``B``.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .config import ModelConfig
from .container import parse_header, read_container, write_container
from .data import Block, truncated_normal
from .errors import ContractViolation, IngestionError
from .trees import Split

logger = logging.getLogger(__name__)

NORM_EPS = 1e-6


@dataclass
class ModelInputs:
    """A padded batch: values ``(B, n, m)``, labels ``(B, n)`` and validity masks."""

    X: np.ndarray
    Y: np.ndarray
    row_mask: np.ndarray
    col_mask: np.ndarray

    @property
    def batch(self) -> int:
        return self.X.shape[0]

    @property
    def cell_mask(self) -> np.ndarray:
        return self.row_mask[:, :, None] & self.col_mask[:, None, :]

    @classmethod
    def from_blocks(cls, blocks: Sequence[Block], row_masks: Optional[Sequence[np.ndarray]] = None,
                    dtype: Union[str, np.dtype] = "float64", labels: Optional[Sequence[np.ndarray]] = None
                    ) -> "ModelInputs":
        """Stack blocks; ``row_masks`` (one per block) narrows ``row_valid``."""
        n = max(b.shape[0] for b in blocks)
        m = max(b.shape[1] for b in blocks)
        B = len(blocks)
        X = np.zeros((B, n, m), dtype=dtype)
        Y = np.zeros((B, n), dtype=np.int64)
        rows = np.zeros((B, n), dtype=bool)
        cols = np.zeros((B, m), dtype=bool)
        for k, block in enumerate(blocks):
            bn, bm = block.shape
            X[k, :bn, :bm] = block.Xn
            Y[k, :bn] = block.Y if labels is None else labels[k]
            rows[k, :bn] = block.row_valid if row_masks is None else row_masks[k] & block.row_valid
            cols[k, :bm] = block.col_valid
        Y = np.where(rows, Y, 0)
        X = np.where(rows[:, :, None] & cols[:, None, :], X, 0.0).astype(dtype)
        return cls(X, Y, rows, cols)


@dataclass
class ForwardResult:
    scores: Tensor
    hiddens: List[Tensor]


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, f = config.hidden, config.mlp_hidden
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.w_x"] = (d,)
    shapes["embed.w_y"] = (config.k_max, d)
    if config.positional_bias:
        shapes["embed.b_col"] = (config.m_max, d)
        shapes["embed.b_row"] = (config.n_max, d)
    shapes["embed.mlp.w1"] = (d, f)
    shapes["embed.mlp.b1"] = (f,)
    shapes["embed.mlp.w2"] = (f, d)
    shapes["embed.mlp.b2"] = (d,)
    for layer in range(config.layers):
        prefix = f"layers.{layer}"
        shapes[f"{prefix}.norm_attn"] = (d,)
        for branch in ("col", "row"):
            for proj in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.{branch}.{proj}"] = (d, d)
        shapes[f"{prefix}.norm_mlp"] = (d,)
        shapes[f"{prefix}.mlp.gate"] = (d, f)
        shapes[f"{prefix}.mlp.up"] = (d, f)
        shapes[f"{prefix}.mlp.down"] = (f, d)
    shapes["head.norm"] = (d,)
    shapes["head.w"] = (d, 1)
    shapes["head.b"] = (1,)
    return shapes


def _initial_value(name: str, shape: Tuple[int, ...], config: ModelConfig,
                   rng: np.random.Generator) -> np.ndarray:
    if name.endswith(("norm_attn", "norm_mlp")) or name == "head.norm":
        return np.ones(shape)
    if name.startswith("embed.b_") or name.endswith((".b1", ".b2")) or name == "head.b":
        return np.zeros(shape)
    return truncated_normal(rng, config.init_std, 2.0 * config.init_std, shape)


class SplitTransformer:
    """Parameters plus the forward computation of the split model."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractViolation(f"Parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractViolation(f"Parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "SplitTransformer":
        rng = np.random.default_rng(seed)
        params: Dict[str, Tensor] = OrderedDict()
        for name, shape in parameter_shapes(config).items():
            value = _initial_value(name, shape, config, rng).astype(config.dtype)
            params[name] = Tensor(value, requires_grad=True, name=name)
        return cls(config, params)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # ---------------------------------------------------------------- inputs

    def inputs(self, blocks: Sequence[Block], row_masks: Optional[Sequence[np.ndarray]] = None,
               labels: Optional[Sequence[np.ndarray]] = None) -> ModelInputs:
        inputs = ModelInputs.from_blocks(blocks, row_masks, self.dtype, labels)
        self.check_capacity(inputs)
        return inputs

    def check_capacity(self, inputs: ModelInputs) -> None:
        _, n, m = inputs.X.shape
        c = self.config
        if n > c.n_max or m > c.m_max:
            raise ContractViolation(f"Block of {n}x{m} exceeds model capacity {c.n_max}x{c.m_max}")
        if inputs.Y.size and inputs.Y[inputs.row_mask].max(initial=0) >= c.k_max:
            raise ContractViolation(f"Block labels exceed model class capacity {c.k_max}")

    # ------------------------------------------------------------- embedding

    def embed(self, inputs: ModelInputs, return_parts: bool = False):
        """``MLP(X * w_x + onehot(Y) w_y + b_col[j] + b_row[i])`` with padding zeroed."""
        self.check_capacity(inputs)
        B, n, m = inputs.X.shape
        d = self.config.hidden
        emb_x = ad.mul(Tensor(inputs.X[..., None].astype(self.dtype)), self.p("embed.w_x"))
        emb_y = ad.reshape(ad.gather(self.p("embed.w_y"), inputs.Y.reshape(-1), axis=0), (B, n, 1, d))
        total = ad.add(emb_x, emb_y)
        bias = None
        if self.config.positional_bias:
            b_col = ad.reshape(ad.gather(self.p("embed.b_col"), np.arange(m), axis=0), (1, 1, m, d))
            b_row = ad.reshape(ad.gather(self.p("embed.b_row"), np.arange(n), axis=0), (1, n, 1, d))
            bias = ad.add(b_col, b_row)
            total = ad.add(total, bias)
        hidden = ad.silu(ad.add(ad.matmul(total, self.p("embed.mlp.w1")), self.p("embed.mlp.b1")))
        out = ad.add(ad.matmul(hidden, self.p("embed.mlp.w2")), self.p("embed.mlp.b2"))
        out = ad.mul(out, inputs.cell_mask[..., None].astype(self.dtype))
        if return_parts:
            return out, {"emb_x": emb_x, "emb_y": emb_y, "bias": bias, "pre_mlp": total}
        return out

    # ------------------------------------------------------------- attention

    def _attention(self, h: Tensor, layer: int, branch: str, inputs: ModelInputs):
        """Multi-head attention along rows (``branch='col'``) or columns (``'row'``)."""
        B, n, m, d = h.shape
        heads = self.config.heads
        dh = self.config.head_dim
        prefix = f"layers.{layer}.{branch}"
        # col: attend over the n axis per column -> (B, m, H, n, dh)
        # row: attend over the m axis per row    -> (B, n, H, m, dh)
        order = (0, 2, 3, 1, 4) if branch == "col" else (0, 1, 3, 2, 4)

        def project(name):
            x = ad.reshape(ad.matmul(h, self.p(f"{prefix}.{name}")), (B, n, m, heads, dh))
            return ad.transpose(x, order)

        q, k, v = project("wq"), project("wk"), project("wv")
        logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        if branch == "col":
            key_mask = inputs.row_mask[:, None, None, None, :]
        else:
            key_mask = inputs.col_mask[:, None, None, None, :]
        weights = ad.masked_softmax(logits, key_mask, axis=-1)
        mixed = ad.transpose(ad.matmul(weights, v), tuple(np.argsort(order)))
        out = ad.matmul(ad.reshape(mixed, (B, n, m, d)), self.p(f"{prefix}.wo"))
        return out, weights

    def tabular_layer(self, layer: int, H: Tensor, inputs: ModelInputs, return_attention: bool = False):
        """``H + ColAttn(norm H) + RowAttn(norm H)``, then a residual gated MLP."""
        if not 0 <= layer < self.config.layers:
            raise ContractViolation(f"Layer {layer} outside 0..{self.config.layers - 1}")
        prefix = f"layers.{layer}"
        h = ad.rms_norm(H, self.p(f"{prefix}.norm_attn"), NORM_EPS)
        col, col_weights = self._attention(h, layer, "col", inputs)
        row, row_weights = self._attention(h, layer, "row", inputs)
        H1 = ad.add(ad.add(H, col), row)
        h2 = ad.rms_norm(H1, self.p(f"{prefix}.norm_mlp"), NORM_EPS)
        gate = ad.silu(ad.matmul(h2, self.p(f"{prefix}.mlp.gate")))
        up = ad.matmul(h2, self.p(f"{prefix}.mlp.up"))
        H2 = ad.add(H1, ad.matmul(ad.mul(gate, up), self.p(f"{prefix}.mlp.down")))
        if return_attention:
            return H2, {"col": col_weights.data, "row": row_weights.data}
        return H2

    # ------------------------------------------------------------------ head

    def head(self, H: Tensor, inputs: ModelInputs) -> Tensor:
        B, n, m, _ = H.shape
        h = ad.rms_norm(H, self.p("head.norm"), NORM_EPS)
        logits = ad.add(ad.matmul(h, self.p("head.w")), self.p("head.b"))
        scores = ad.sigmoid(ad.reshape(logits, (B, n, m)))
        return ad.mul(scores, inputs.cell_mask.astype(self.dtype))

    def forward(self, inputs: ModelInputs, keep_hiddens: bool = False) -> ForwardResult:
        H = self.embed(inputs)
        hiddens = [H] if keep_hiddens else []
        for layer in range(self.config.layers):
            H = self.tabular_layer(layer, H, inputs)
            if keep_hiddens:
                hiddens.append(H)
        return ForwardResult(self.head(H, inputs), hiddens)

    def probe_layer(self, layer: int, hiddens: Sequence[Tensor], inputs: ModelInputs) -> Tensor:
        """Shared head applied to the hidden state after layer ``layer`` (1..L)."""
        if not hiddens:
            raise ContractViolation("probe_layer needs hiddens retained by forward(keep_hiddens=True)")
        if not 1 <= layer <= self.config.layers:
            raise ContractViolation(f"Probe layer {layer} outside 1..{self.config.layers}")
        return self.head(hiddens[layer], inputs)

    def score_blocks(self, blocks: Sequence[Block], row_masks: Optional[Sequence[np.ndarray]] = None,
                     layer: Optional[int] = None) -> np.ndarray:
        """Inference scores ``(B, n, m)``, optionally read from an intermediate layer."""
        with no_grad():
            inputs = self.inputs(blocks, row_masks)
            if layer is None or layer == self.config.layers:
                return self.forward(inputs).scores.data
            result = self.forward(inputs, keep_hiddens=True)
            return self.probe_layer(layer, result.hiddens, inputs).data

    # ----------------------------------------------------------- persistence

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def header(self) -> Dict[str, object]:
        meta: Dict[str, object] = {"kind": "model"}
        for f in fields(self.config):
            value = getattr(self.config, f.name)
            meta[f.name] = ("on" if value else "off") if isinstance(value, bool) else value
        return meta

    def save(self, path: Union[str, Path], extra: Optional[Dict[str, np.ndarray]] = None,
             header: Optional[Dict[str, object]] = None) -> None:
        tensors = self.tensors()
        tensors.update(extra or {})
        meta = self.header()
        meta.update(header or {})
        write_container(path, tensors, meta)

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], header_text: str) -> "SplitTransformer":
        meta = parse_header(header_text)
        if meta.get("kind") not in ("model", "checkpoint"):
            raise IngestionError(f"Container is a {meta.get('kind')!r}, not a model checkpoint")
        keys = {f.name for f in fields(ModelConfig)}
        config = ModelConfig.from_mapping({k: v for k, v in meta.items() if k in keys})
        params: Dict[str, Tensor] = OrderedDict()
        for name in parameter_shapes(config):
            if name not in tensors:
                raise IngestionError(f"Checkpoint is missing parameter {name}")
            params[name] = Tensor(tensors[name].astype(config.dtype), requires_grad=True, name=name)
        return cls(config, params)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitTransformer":
        tensors, text = read_container(path)
        return cls.from_tensors(tensors, text)


def score_to_split(scores: np.ndarray, block: Block, row_mask: Optional[np.ndarray] = None,
                   return_cell: bool = False):
    """Argmax valid cell (row-major first on ties) as ``Split(j, raw_X[i, j])``."""
    scores = np.asarray(scores)
    rows = block.row_valid if row_mask is None else block.row_valid & row_mask
    valid = rows[:, None] & block.col_valid[None, :]
    if not valid.any():
        raise ContractViolation("score_to_split: every cell is masked")
    flat = np.where(valid, scores[: valid.shape[0], : valid.shape[1]], -np.inf)
    i, j = np.unravel_index(int(np.argmax(flat)), flat.shape)
    split = Split(int(j), float(block.raw_X[i, j]))
    if return_cell:
        return split, (int(i), int(j))
    return split


def layer_flops(n: int, m: int, config: ModelConfig) -> Dict[str, int]:
    """Multiply-add FLOP counts (x2) of one tabular layer on an ``n x m`` block."""
    d, f = config.hidden, config.mlp_hidden
    return {
        "col_attention": 4 * n * n * m * d,
        "row_attention": 4 * m * m * n * d,
        "projections": 16 * n * m * d * d,
        "mlp": 6 * n * m * d * f,
    }
