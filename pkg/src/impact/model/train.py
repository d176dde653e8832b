"""Supervised training / masked fine-tuning loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from impact.model.vit import ModelConfig, VitModel, accuracy, forward, init_model
from impact.numerics import GradTape, OptimizerState, linear_decay, ops, optimizer_step
from impact.numerics.tensor import NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 5e-3
    weight_decay: float = 0.05
    warmup_steps: int = 50
    seed: int = 0


@dataclass
class TrainHistory:
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)


def _no_decay(name: str, arr: np.ndarray) -> bool:
    return arr.ndim < 2 or name in ("cls_token", "pos_embed")


def loss_and_grads(model: VitModel, images: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Cross-entropy loss, parameter gradients and logits for one batch."""
    params = model.tensors(requires_grad=True)
    with GradTape() as tape:
        logits = forward(model, images, params=params).logits
        loss = ops.cross_entropy(logits, labels)
    grads = tape.backward()
    return float(loss.data), {n: grads.get(n, np.zeros_like(a)) for n, a in model.params.items()}, logits.data


def train(
    model: VitModel | ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    settings: TrainSettings | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
) -> tuple[VitModel, TrainHistory]:
    """Train from a config (fresh init) or continue training a model.

    With ``masks`` (1 = keep) the masked gradients are zeroed and the masked
    weights re-zeroed after every step, so pruned weights stay exactly 0.0.
    """
    settings = settings or TrainSettings()
    model = init_model(model) if isinstance(model, ModelConfig) else model.copy()
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if labels.max() >= model.config.num_classes or labels.min() < 0:
        raise ValueError("dataset labels exceed the model's class count")
    history = TrainHistory()
    if settings.epochs == 0:
        return model, history

    masks = {k: np.asarray(m, dtype=bool) for k, m in (masks or {}).items()}
    for k, m in masks.items():
        model.params[k] = np.where(m, model.params[k], 0).astype(model.params[k].dtype)

    state = OptimizerState(
        kind="adamw",
        lr=settings.lr,
        weight_decay=settings.weight_decay,
        no_decay=frozenset(k for k, a in model.params.items() if _no_decay(k, a)),
    )
    steps_per_epoch = -(-n // settings.batch_size)
    total = steps_per_epoch * settings.epochs
    rng = np.random.default_rng(settings.seed)
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        correct = 0
        losses = []
        for i in range(0, n, settings.batch_size):
            idx = order[i : i + settings.batch_size]
            loss, grads, logits = loss_and_grads(model, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            for k, m in masks.items():
                grads[k] = np.where(m, grads[k], 0).astype(grads[k].dtype)
            lr = linear_decay(settings.lr, step, total, settings.warmup_steps)
            model.params, state = optimizer_step(state, model.params, grads, lr=lr)
            for k, m in masks.items():
                model.params[k] = np.where(m, model.params[k], 0).astype(model.params[k].dtype)
            correct += int((logits.argmax(1) == labels[idx]).sum())
            losses.append(loss)
            step += 1
        history.train_acc.append(correct / n)
        history.loss.append(float(np.mean(losses)))
        if val is not None:
            history.val_acc.append(accuracy(model, *val))
        log.info("epoch %d loss %.4f train %.4f val %s", epoch, history.loss[-1], history.train_acc[-1],
                 f"{history.val_acc[-1]:.4f}" if val is not None else "-")
    if masks:
        model.prune_mask = {k: m.copy() for k, m in masks.items()}
    return model, history
