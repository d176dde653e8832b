"""SGD / AdamW updates and the two learning-rate schedules used here."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # parameter names excluded from weight decay
    no_decay: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Apply one update; returns new parameter arrays and the advanced state.

    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    """
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"missing gradient for {sorted(missing)}")
    extra = set(grads) - set(params)
    if extra:
        raise KeyError(f"gradient for unknown parameter {sorted(extra)}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    out: dict[str, np.ndarray] = {}
    if state.kind == "sgd":
        for name, p in params.items():
            g = grads[name]
            if state.weight_decay and name not in state.no_decay:
                g = g + state.weight_decay * p
            out[name] = (p - lr * g).astype(p.dtype)
        return out, state

    b1, b2 = state.betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=p.dtype)
            v = np.zeros(p.shape, dtype=p.dtype)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        p64 = p.astype(np.float64)
        if state.weight_decay and name not in state.no_decay:
            p64 = p64 * (1.0 - lr * state.weight_decay)
        p64 = p64 - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = p64.astype(p.dtype)
    return out, state


def linear_decay(base_lr: float, step: int, total_steps: int, warmup: int = 0) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    frac = (step - warmup) / (total_steps - warmup)
    return base_lr * max(0.0, 1.0 - frac)


def step_lr(base_lr: float, epoch: int, step_size: int, gamma: float) -> float:
    return base_lr * gamma ** (epoch // step_size)
