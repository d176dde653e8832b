"""Class-specific transformer attribution and insertion / deletion faithfulness.

Attribution is gradient-weighted attention rollout: per block the head-mean
of max(A ⊙ ∂f_c/∂A, 0) is accumulated as C ← C + Ā·C starting from the
identity, with gradients taken through the LayerScale relevance rule.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import softmax

from impact.model.vit import HookSite, VitModel, forward
from impact.numerics import GradTape

RELPROP_EPS = 1e-6
DEFAULT_STEPS = 50


@dataclass
class AttributionMap:
    scores: np.ndarray  # (grid, grid), CLS excluded
    target: int
    normalization: str = "raw"

    @property
    def flat(self) -> np.ndarray:
        return self.scores.ravel()


@dataclass
class FaithfulnessCurve:
    kind: str  # insertion | deletion
    fractions: np.ndarray
    probs: np.ndarray
    auc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("fraction", "probability"))
        for f, p in zip(self.fractions, self.probs):
            w.writerow((repr(float(f)), repr(float(p))))
        return buf.getvalue()


def rollout(attn: list[np.ndarray], grads: list[np.ndarray]) -> np.ndarray:
    """(B, T, T) relevance from per-block attention and its gradient, each (B, H, T, T)."""
    B, _, T, _ = attn[0].shape
    C = np.broadcast_to(np.eye(T), (B, T, T)).copy()
    for a, g in zip(attn, grads):
        cam = np.maximum(a.astype(np.float64) * g.astype(np.float64), 0.0).mean(axis=1)
        C = C + cam @ C
    return C


def transformer_attribution_batch(model: VitModel, images: np.ndarray, targets,
                                  relprop_eps: float | None = RELPROP_EPS) -> np.ndarray:
    """(B, grid, grid) maps for a batch, each w.r.t. its own target class."""
    cfg = model.config
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (len(images),))
    if targets.min() < 0 or targets.max() >= cfg.num_classes:
        raise ValueError("target class out of range")
    sites = [HookSite(b, "attn") for b in range(cfg.depth)]
    with GradTape() as tape:
        res = forward(model, images, hooks=sites, relprop_eps=relprop_eps)
    seed = np.zeros(res.logits.shape, res.logits.dtype)
    seed[np.arange(len(images)), targets] = 1
    grads = tape.backward(seed, output=res.logits)
    attn = [res.trace[s].data for s in sites]
    g = [grads.get(s.key, np.zeros_like(a)) for s, a in zip(sites, attn)]
    C = rollout(attn, g)
    return C[:, 0, 1:].reshape(len(images), cfg.grid, cfg.grid)


def transformer_attribution(model: VitModel, image: np.ndarray, target: int,
                            relprop_eps: float | None = RELPROP_EPS) -> AttributionMap:
    maps = transformer_attribution_batch(model, image[None], [target], relprop_eps)
    return AttributionMap(maps[0], int(target))


# -- faithfulness ---------------------------------------------------------------------


def patch_order(relevance: np.ndarray) -> np.ndarray:
    """Patch indices by decreasing relevance, ties by lower index."""
    r = np.asarray(relevance, dtype=np.float64).ravel()
    return np.lexsort((np.arange(r.size), -r))


def step_counts(num_patches: int, steps: int) -> np.ndarray:
    """Patches revealed at each step: 0 .. num_patches, strictly increasing."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    return np.unique(np.arange(steps + 1) * num_patches // steps)


def _patch_pixel_masks(model: VitModel, order: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """(len(counts), 1, H, W) masks with the first n patches of ``order`` set."""
    cfg = model.config
    g, p = cfg.grid, cfg.patch_size
    on = np.zeros((len(counts), cfg.num_patches), dtype=np.float32)
    rank = np.empty(cfg.num_patches, dtype=np.int64)
    rank[order] = np.arange(cfg.num_patches)
    on[:] = rank[None, :] < counts[:, None]
    grid = on.reshape(len(counts), g, g)
    return np.kron(grid, np.ones((p, p), np.float32))[:, None]


def _target_probs(model: VitModel, images: np.ndarray, target: int, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits = forward(model, images[i : i + batch_size]).logits.data.astype(np.float64)
        out.append(softmax(logits, axis=1)[:, target])
    return np.concatenate(out)


def _curve(model: VitModel, image: np.ndarray, relevance: np.ndarray, target: int, steps: int, kind: str):
    cfg = model.config
    counts = step_counts(cfg.num_patches, steps)
    masks = _patch_pixel_masks(model, patch_order(relevance), counts)
    if kind == "insertion":
        seq = masks * image[None]
    else:
        seq = (1.0 - masks) * image[None]
    probs = _target_probs(model, seq.astype(image.dtype), target)
    fractions = counts / cfg.num_patches
    return FaithfulnessCurve(kind, fractions, probs, float(trapezoid(probs, fractions)))


def insertion_auc(model: VitModel, image: np.ndarray, relevance, target: int, steps: int = DEFAULT_STEPS) -> FaithfulnessCurve:
    """Reveal patches of ``image`` on a zero canvas in decreasing relevance."""
    return _curve(model, image, _as_scores(relevance), target, steps, "insertion")


def deletion_auc(model: VitModel, image: np.ndarray, relevance, target: int, steps: int = DEFAULT_STEPS) -> FaithfulnessCurve:
    """Zero patches of ``image`` in decreasing relevance."""
    return _curve(model, image, _as_scores(relevance), target, steps, "deletion")


def _as_scores(relevance) -> np.ndarray:
    return relevance.scores if isinstance(relevance, AttributionMap) else np.asarray(relevance)


def random_relevance(rng: np.random.Generator, num_patches: int) -> np.ndarray:
    return rng.permutation(num_patches).astype(np.float64)


@dataclass
class FaithfulnessRow:
    index: int
    target: int
    insertion: float
    deletion: float
    random_insertion: float
    random_deletion: float


def evaluate_faithfulness(model: VitModel, images: np.ndarray, targets: np.ndarray, seed: int,
                          steps: int = DEFAULT_STEPS, random_orders: int = 3,
                          batch_size: int = 64) -> list[FaithfulnessRow]:
    """Insertion / deletion AUC of model attributions and of random patch orders per image."""
    rng = np.random.default_rng(seed)
    if len(images) == 0:
        return []
    maps = np.concatenate([
        transformer_attribution_batch(model, images[i : i + batch_size], targets[i : i + batch_size])
        for i in range(0, len(images), batch_size)
    ])
    rows = []
    P = model.config.num_patches
    for i, (img, c) in enumerate(zip(images, targets)):
        c = int(c)
        ins = insertion_auc(model, img, maps[i], c, steps).auc
        dele = deletion_auc(model, img, maps[i], c, steps).auc
        r_ins, r_del = [], []
        for _ in range(random_orders):
            r = random_relevance(rng, P)
            r_ins.append(insertion_auc(model, img, r, c, steps).auc)
            r_del.append(deletion_auc(model, img, r, c, steps).auc)
        rows.append(FaithfulnessRow(i, c, ins, dele, float(np.mean(r_ins)), float(np.mean(r_del))))
    return rows


def bootstrap_advantage(diff: np.ndarray, seed: int, resamples: int = 2000) -> float:
    """Fraction of bootstrap resamples (over images) whose mean paired difference is > 0."""
    diff = np.asarray(diff, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diff), size=(resamples, len(diff)))
    return float((diff[idx].mean(axis=1) > 0).mean())


def map_to_csv(m: AttributionMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in m.scores:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()

