"""Differentiable circuit discovery with binary node masks.

Every hook site of every block carries a mask over its nodes (features, or
heads at q/k/v). The forward pass sees only the binarized mask m̂ = 1[m > 0];
inactive nodes are replaced by their cached mean. Gradients reach the logits
through a sigmoid straight-through estimator.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from impact.data import BinaryTask
from impact.model.vit import HEAD_TAGS, SITE_TAGS, HookSite, VitModel, all_sites, forward, site_feature_shape, site_units
from impact.neurons import MeanCache
from impact.numerics import GradTape, OptimizerState, Tensor, ops, optimizer_step, step_lr
from impact.numerics.tensor import NonFiniteError

CIRCUIT_COLUMNS = ("category", "node_pct", "size_pct", "acc", "ablated_acc", "ncq", "seed")


@dataclass(frozen=True)
class CircuitSettings:
    lr: float = 1e-2
    k_pen: float = 8e-5
    epochs: int = 15
    batch_size: int = 32
    step_size: int = 5  # StepLR period, in epochs
    gamma: float = 0.2
    tau: float = 1.0
    init_mean: float = 0.5
    init_std: float = 0.01
    seed: int = 0


@dataclass
class CircuitMask:
    logits: dict[HookSite, np.ndarray]
    tau: float = 1.0
    k_pen: float = 8e-5

    def binary(self) -> dict[HookSite, np.ndarray]:
        return {s: (m > 0).astype(np.float32) for s, m in self.logits.items()}

    def clamp(self) -> None:
        for s in self.logits:
            np.clip(self.logits[s], -1.0, 1.0, out=self.logits[s])

    @property
    def n_active(self) -> int:
        return int(sum((m > 0).sum() for m in self.logits.values()))

    @property
    def n_total(self) -> int:
        return int(sum(m.size for m in self.logits.values()))


def mask_sites(model: VitModel) -> list[HookSite]:
    return all_sites(model.config)


def init_mask(model: VitModel, settings: CircuitSettings, seed: int | None = None) -> CircuitMask:
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    logits = {
        s: rng.normal(settings.init_mean, settings.init_std, site_units(model.config, s.tag)).astype(np.float32)
        for s in mask_sites(model)
    }
    m = CircuitMask(logits, settings.tau, settings.k_pen)
    m.clamp()
    return m


def full_mask(model: VitModel, value: float = 1.0) -> dict[HookSite, np.ndarray]:
    return {s: np.full(site_units(model.config, s.tag), value, np.float32) for s in mask_sites(model)}


def complement(binary: Mapping[HookSite, np.ndarray]) -> dict[HookSite, np.ndarray]:
    return {s: (1 - m).astype(np.float32) for s, m in binary.items()}


def ste_binarize(m, tau: float = 1.0) -> Tensor:
    """Heaviside forward, τσ(τm)(1−σ(τm)) backward."""
    return ops.ste_heaviside(m if isinstance(m, Tensor) else Tensor(np.asarray(m)), tau)


def _broadcast_shape(tag: str, m: Tensor) -> Tensor:
    # per-head masks cover their whole head-dim slice
    return ops.reshape(m, (m.shape[0], 1)) if tag in HEAD_TAGS else m


def mask_intervention(model: VitModel, node_masks: Mapping[HookSite, Tensor | np.ndarray], cache: MeanCache) -> dict:
    """Intervention blending each site as m̂ ⊙ a + (1 − m̂) ⊙ ā."""
    out = {}
    for s, m in node_masks.items():
        if s not in cache:
            raise KeyError(f"no cached mean for {s.key}")
        mean = cache[s]
        if mean.shape != site_feature_shape(model.config, s.tag):
            raise ValueError(f"cache shape {mean.shape} does not match site {s.key}")
        m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=mean.dtype))
        if m.shape != (site_units(model.config, s.tag),):
            raise ValueError(f"mask for {s.key} has shape {m.shape}")
        keep = _broadcast_shape(s.tag, m)
        fill = Tensor(mean)
        out[s] = lambda t, keep=keep, fill=fill: ops.blend(t, keep, fill)
    return out


def masked_forward(model: VitModel, binary: Mapping[HookSite, np.ndarray], cache: MeanCache,
                   images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits of the model with every masked site blended toward its mean."""
    out = []
    for i in range(0, len(images), batch_size):
        iv = mask_intervention(model, binary, cache)
        out.append(forward(model, images[i : i + batch_size], intervention=iv).logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)


# -- task readout --------------------------------------------------------------------


def _others(num_classes: int, category: int) -> np.ndarray:
    return np.array([j for j in range(num_classes) if j != category])


def binary_readout(logits: Tensor, category: int) -> Tensor:
    """(B, classes) -> (B, 2) holding [max other logit, target logit]."""
    other = ops.max(ops.getitem(logits, (slice(None), _others(logits.shape[1], category))), axis=1, keepdims=True)
    target = ops.getitem(logits, (slice(None), slice(category, category + 1)))
    return ops.concat([other, target], axis=1)


def binary_predictions(logits: np.ndarray, category: int) -> np.ndarray:
    """1 when the target logit beats every other logit."""
    other = logits[:, _others(logits.shape[1], category)].max(axis=1)
    return (logits[:, category] > other).astype(np.int64)


def binary_accuracy(logits: np.ndarray, targets: np.ndarray, category: int) -> float:
    return float((binary_predictions(logits, category) == targets).mean())


# -- metrics --------------------------------------------------------------------------


def ncq(acc_circuit: float, acc_full: float, n_circuit: int, n_total: int) -> float:
    if acc_full <= 0:
        raise ValueError("full-model accuracy must be positive")
    if not 0 <= n_circuit <= n_total or n_total <= 0:
        raise ValueError("node counts must satisfy 0 <= n_circuit <= n_total")
    # a circuit can beat the full model; the product is clipped back into [0, 1]
    return float(min(max(acc_circuit / acc_full * (1.0 - n_circuit / n_total), 0.0), 1.0))


def _head_rows(binary_heads: np.ndarray, head_dim: int) -> np.ndarray:
    return np.repeat(binary_heads.astype(bool), head_dim)


def edge_counts(model: VitModel, binary: Mapping[HookSite, np.ndarray]) -> tuple[int, int]:
    """(active edges, total edges) over the block weights plus one q-k edge per head.

    A weight edge is active when the weight is nonzero and both endpoint
    nodes are active. The total counts every weight position of the layer,
    so an all-ones mask on a dense model gives a fraction of exactly 1.
    """
    cfg = model.config
    dh = cfg.head_dim
    active = total = 0
    for b in range(cfg.depth):
        p = f"blocks.{b}"
        on = {t: np.asarray(binary[HookSite(b, t)]).astype(bool) for t in SITE_TAGS}
        qkv_rows = np.concatenate([_head_rows(on["q"], dh), _head_rows(on["k"], dh), _head_rows(on["v"], dh)])
        layers = (
            ("attn.qkv.weight", qkv_rows, on["norm1"]),
            # the context feeding proj is produced by the v head of the same slice
            ("attn.proj.weight", on["attn_out"], _head_rows(on["v"], dh)),
            ("mlp.fc1.weight", on["mlp_act"], on["norm2"]),
            ("mlp.fc2.weight", on["mlp_out"], on["mlp_act"]),
        )
        for name, rows, cols in layers:
            W = model.params[f"{p}.{name}"]
            active += int(((W != 0) & rows[:, None] & cols[None, :]).sum())
            total += W.size
        active += int((on["q"] & on["k"]).sum())
        total += cfg.heads
    return active, total


def edge_fraction(model: VitModel, binary: Mapping[HookSite, np.ndarray]) -> float:
    a, t = edge_counts(model, binary)
    return a / t


# -- optimization ---------------------------------------------------------------------


@dataclass
class CircuitResult:
    category: int
    mask: dict[HookSite, np.ndarray]
    acc_circuit: float
    acc_full: float
    acc_ablated: float
    n_circuit: int
    n_total: int
    edge_fraction: float
    ncq: float
    seed: int
    loss: list[float] = field(default_factory=list)

    @property
    def node_fraction(self) -> float:
        return self.n_circuit / self.n_total

    def row(self) -> dict:
        return {
            "category": self.category,
            "node_pct": 100.0 * self.node_fraction,
            "size_pct": 100.0 * self.edge_fraction,
            "acc": self.acc_circuit,
            "ablated_acc": self.acc_ablated,
            "ncq": self.ncq,
            "seed": self.seed,
        }


def circuit_csv(results: Sequence[CircuitResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CIRCUIT_COLUMNS)
    for r in results:
        row = r.row()
        w.writerow([row["category"], *(repr(float(row[c])) for c in CIRCUIT_COLUMNS[1:-1]), row["seed"]])
    return buf.getvalue()


def evaluate_circuit(model: VitModel, binary: Mapping[HookSite, np.ndarray], cache: MeanCache,
                     images: np.ndarray, targets: np.ndarray, category: int) -> tuple[float, float, float]:
    """(circuit, full model, complement-ablated) binary accuracies."""
    full = forward_logits(model, images)
    acc_full = binary_accuracy(full, targets, category)
    acc_circuit = binary_accuracy(masked_forward(model, binary, cache, images), targets, category)
    acc_abl = binary_accuracy(masked_forward(model, complement(binary), cache, images), targets, category)
    return acc_circuit, acc_full, acc_abl


def forward_logits(model: VitModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([forward(model, images[i : i + batch_size]).logits.data
                           for i in range(0, len(images), batch_size)])


def circuit_loss_and_grads(model: VitModel, mask: CircuitMask, cache: MeanCache, images: np.ndarray,
                           targets: np.ndarray, category: int) -> tuple[float, dict[HookSite, np.ndarray]]:
    """Task cross-entropy on the 2-way readout plus k_pen · Σ m̂, with STE gradients."""
    names = {s: f"mask.{s.key}" for s in mask.logits}
    with GradTape() as tape:
        leaves = {s: Tensor(m, requires_grad=True, name=names[s]) for s, m in mask.logits.items()}
        hats = {s: ste_binarize(t, mask.tau) for s, t in leaves.items()}
        logits = forward(model, images, intervention=mask_intervention(model, hats, cache)).logits
        task = ops.cross_entropy(binary_readout(logits, category), targets)
        count = ops.concat([ops.sum(h, axis=0, keepdims=True) for h in hats.values()], axis=0)
        loss = ops.add(task, ops.mul(ops.sum(count), mask.k_pen))
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError("non-finite circuit loss")
    grads = tape.backward(output=loss)
    return value, {s: grads.get(n, np.zeros_like(mask.logits[s])) for s, n in names.items()}


def optimize_circuit(model: VitModel, task_images: np.ndarray, task_targets: np.ndarray, category: int,
                     cache: MeanCache, settings: CircuitSettings | None = None,
                     eval_images: np.ndarray | None = None, eval_targets: np.ndarray | None = None) -> CircuitResult:
    """Learn a node mask for ``category`` versus rest on a balanced task.

    The mask is trained with AdamW (no weight decay) under a StepLR schedule
    and clamped to [−1, 1] after each step. Accuracies are measured on the
    evaluation split when given, else on the training task.
    """
    s = settings or CircuitSettings()
    targets = np.asarray(task_targets, dtype=np.int64)
    if min(int(targets.sum()), int((1 - targets).sum())) < 2:
        raise ValueError("task needs at least two positives and two negatives")
    mask = init_mask(model, s)
    keys = {site: site.key for site in mask.logits}
    state = OptimizerState(kind="adamw", lr=s.lr, weight_decay=0.0)
    rng = np.random.default_rng(s.seed + 1)
    history = []
    n = len(targets)
    for epoch in range(s.epochs):
        lr = step_lr(s.lr, epoch, s.step_size, s.gamma)
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, s.batch_size):
            idx = order[i : i + s.batch_size]
            loss, grads = circuit_loss_and_grads(model, mask, cache, task_images[idx], targets[idx], category)
            params = {keys[site]: m for site, m in mask.logits.items()}
            new, state = optimizer_step(state, params, {keys[site]: g for site, g in grads.items()}, lr=lr)
            mask.logits = {site: new[keys[site]] for site in mask.logits}
            mask.clamp()
            losses.append(loss)
        history.append(float(np.mean(losses)))
    ev_x = task_images if eval_images is None else eval_images
    ev_y = targets if eval_targets is None else np.asarray(eval_targets, dtype=np.int64)
    binary = mask.binary()
    acc_c, acc_f, acc_a = evaluate_circuit(model, binary, cache, ev_x, ev_y, category)
    n_c, n_t = mask.n_active, mask.n_total
    return CircuitResult(
        category=int(category),
        mask=binary,
        acc_circuit=acc_c,
        acc_full=acc_f,
        acc_ablated=acc_a,
        n_circuit=n_c,
        n_total=n_t,
        edge_fraction=edge_fraction(model, binary),
        ncq=ncq(acc_c, acc_f, n_c, n_t),
        seed=s.seed,
        loss=history,
    )


def optimize_task(model: VitModel, images: np.ndarray, task: BinaryTask, cache: MeanCache,
                  settings: CircuitSettings | None = None, eval_images: np.ndarray | None = None,
                  eval_task: BinaryTask | None = None) -> CircuitResult:
    ev_x = ev_y = None
    if eval_task is not None:
        ev_x, ev_y = eval_images[eval_task.indices], eval_task.targets
    return optimize_circuit(model, images[task.indices], task.targets, task.category, cache, settings, ev_x, ev_y)
