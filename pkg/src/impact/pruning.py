"""Magnitude and Wanda pruning with per-output-row selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from impact.model.vit import HookSite, VitModel, capture, extract_patches

METHODS = ("magnitude", "wanda")
DEFAULT_CALIBRATION = 128


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]  # bool, True = keep
    ratio: float
    method: str

    def sparsity(self) -> dict[str, float]:
        return {k: 1.0 - float(m.mean()) for k, m in self.masks.items()}

    def overall_sparsity(self) -> float:
        total = sum(m.size for m in self.masks.values())
        kept = sum(int(m.sum()) for m in self.masks.values())
        return 1.0 - kept / total if total else 0.0


def input_feature_norms(x: np.ndarray) -> np.ndarray:
    """L2 norm of each input feature (last axis) pooled over every other axis."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x.reshape(-1, x.shape[-1])
    return np.sqrt(np.einsum("ij,ij->j", x2, x2))


def collect_activation_norms(model: VitModel, images: np.ndarray, batch_size: int = 128) -> dict[str, np.ndarray]:
    """‖X_j‖₂ for the input of every linear layer, over all tokens and images.

    Keys are weight names. The patch embedding is included even though it is
    never pruned.
    """
    if len(images) == 0:
        raise ValueError("empty calibration batch")
    cfg = model.config
    feeds = {}
    for b in range(cfg.depth):
        p = f"blocks.{b}"
        feeds[f"{p}.attn.qkv.weight"] = HookSite(b, "norm1")
        feeds[f"{p}.attn.proj.weight"] = HookSite(b, "ctx")
        feeds[f"{p}.mlp.fc1.weight"] = HookSite(b, "norm2")
        feeds[f"{p}.mlp.fc2.weight"] = HookSite(b, "mlp_act")
    sq = {k: np.zeros(model.params[k].shape[1]) for k in ["patch_embed.weight", *feeds]}
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        _, acts = capture(model, chunk, set(feeds.values()), batch_size=batch_size)
        sq["patch_embed.weight"] += input_feature_norms(extract_patches(chunk, cfg.patch_size)) ** 2
        for k, s in feeds.items():
            sq[k] += input_feature_norms(acts[s]) ** 2
    return {k: np.sqrt(v) for k, v in sq.items()}


def wanda_scores(weight: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """S_ij = |W_ij| * ‖X_j‖₂."""
    norms = np.asarray(norms, dtype=np.float64)
    if weight.ndim != 2 or norms.shape != (weight.shape[1],):
        raise ValueError(f"norms of shape {norms.shape} do not match weight columns {weight.shape}")
    return np.abs(weight.astype(np.float64)) * norms[None, :]


def prune_count(ratio: float, width: int) -> int:
    # guard so that e.g. 0.7 * 10 = 6.999... still floors to 7
    return int(math.floor(ratio * width + 1e-9))


def row_mask(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Keep-mask pruning the floor(ratio * width) lowest scores of every row.

    Ties go to the lower column index first (stable sort).
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError("scores must be 2-d (rows = outputs)")
    k = prune_count(ratio, scores.shape[1])
    mask = np.ones(scores.shape, dtype=bool)
    if k:
        order = np.argsort(scores, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, False, axis=1)
    return mask


def apply_row_prune(scores: Mapping[str, np.ndarray], ratio: float, method: str = "wanda") -> PruneMask:
    if method not in METHODS:
        raise ValueError(f"unknown prune method {method!r}")
    return PruneMask({k: row_mask(s, ratio) for k, s in scores.items()}, float(ratio), method)


def magnitude_prune(model: VitModel, ratio: float) -> PruneMask:
    return apply_row_prune({k: np.abs(model.params[k]) for k in model.prunable_names()}, ratio, "magnitude")


def wanda_prune(model: VitModel, ratio: float, norms: Mapping[str, np.ndarray] | None = None,
                calibration: np.ndarray | None = None) -> PruneMask:
    if norms is None:
        if calibration is None:
            raise ValueError("wanda needs activation norms or a calibration batch")
        norms = collect_activation_norms(model, calibration)
    return apply_row_prune({k: wanda_scores(model.params[k], norms[k]) for k in model.prunable_names()}, ratio, "wanda")


def apply_mask(model: VitModel, mask: PruneMask) -> VitModel:
    """Copy of ``model`` with masked weights set to 0.0 and the mask attached."""
    out = model.copy()
    for k, m in mask.masks.items():
        if out.params[k].shape != m.shape:
            raise ValueError(f"mask shape {m.shape} does not match {k} {out.params[k].shape}")
        out.params[k] = np.where(m, out.params[k], 0).astype(out.params[k].dtype)
    out.prune_mask = {k: m.copy() for k, m in mask.masks.items()}
    out.meta = {**out.meta, "sparsity": mask.ratio, "prune_method": mask.method}
    return out


def prune(model: VitModel, ratio: float, method: str = "wanda", calibration: np.ndarray | None = None) -> VitModel:
    if method == "magnitude":
        return apply_mask(model, magnitude_prune(model, ratio))
    return apply_mask(model, wanda_prune(model, ratio, calibration=calibration))


def weight_sparsity(model: VitModel) -> dict[str, float]:
    """Measured fraction of exact zeros in each prunable weight."""
    return {k: float((model.params[k] == 0).mean()) for k in model.prunable_names()}
