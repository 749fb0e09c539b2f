"""AdamW with linear warmup and linear decay to zero."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation, NumericAbort

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    lr: float = 5e-5
    warmup: int = 1000
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Effective rate for 1-based update ``step``."""
        ramp = 1.0 if self.warmup <= 0 else min(step / self.warmup, 1.0)
        span = self.total_steps - self.warmup
        decay = 1.0 if span <= 0 else max(0.0, 1.0 - max(0, step - self.warmup) / span)
        return self.lr * ramp * decay

    def init_moments(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"adam.step": np.array([self.step], dtype=np.int64)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        if "adam.step" not in tensors:
            raise ContractViolation("Checkpoint carries no optimizer state")
        self.step = int(tensors["adam.step"][0])
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = value.copy()
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = value.copy()


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState) -> float:
    """Apply one decoupled-weight-decay update in place; returns the rate used."""
    if state.step >= state.total_steps:
        raise ContractViolation(f"Optimizer step {state.step} is past the schedule end {state.total_steps}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort("Non-finite gradient", parameter=name, step=state.step)
    state.init_moments(params)
    t = state.step + 1
    lr = state.lr_at(t)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(p.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
    state.step = t
    return lr
