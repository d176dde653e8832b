"""Tiny pre-norm Vision Transformer with LayerScale and named hook sites."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from impact.numerics import ops
from impact.numerics.tensor import Tensor, active_tape

# The eight maskable sites per block, in forward order.
SITE_TAGS = ("norm1", "q", "k", "v", "attn_out", "norm2", "mlp_act", "mlp_out")
HEAD_TAGS = ("q", "k", "v")
# Capture-only extras: attention probabilities, the attention context fed to
# the output projection, and the residual stream leaving the block.
EXTRA_TAGS = ("attn", "ctx", "resid")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    layerscale_init: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")
        if self.embed_dim % self.heads:
            raise ValueError("embed dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


class HookSite(NamedTuple):
    block: int
    tag: str

    @property
    def key(self) -> str:
        return f"blocks.{self.block}.{self.tag}"


def all_sites(config: ModelConfig) -> list[HookSite]:
    return [HookSite(b, t) for b in range(config.depth) for t in SITE_TAGS]


def site_feature_shape(config: ModelConfig, tag: str) -> tuple[int, ...]:
    """Per-token feature shape of a site (excluding batch and token axes)."""
    if tag in HEAD_TAGS:
        return (config.heads, config.head_dim)
    if tag == "mlp_act":
        return (config.mlp_dim,)
    if tag in ("norm1", "attn_out", "norm2", "mlp_out", "ctx", "resid"):
        return (config.embed_dim,)
    if tag == "attn":
        return (config.heads, config.num_tokens, config.num_tokens)
    raise KeyError(f"unknown site tag {tag!r}")


def site_shape(config: ModelConfig, tag: str, batch: int) -> tuple[int, ...]:
    if tag == "attn":
        return (batch, *site_feature_shape(config, tag))
    return (batch, config.num_tokens, *site_feature_shape(config, tag))


def site_units(config: ModelConfig, tag: str) -> int:
    """Number of units (features, or heads for q/k/v) at a site."""
    return config.heads if tag in HEAD_TAGS else site_feature_shape(config, tag)[0]


# linear layers inside blocks, eligible for pruning
def block_linear_names(block: int) -> list[str]:
    p = f"blocks.{block}"
    return [f"{p}.attn.qkv.weight", f"{p}.attn.proj.weight", f"{p}.mlp.fc1.weight", f"{p}.mlp.fc2.weight"]


@dataclass
class VitModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    # optional prune masks (1 = keep), carried through checkpoints
    prune_mask: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def prunable_names(self) -> list[str]:
        return [n for b in range(self.config.depth) for n in block_linear_names(b)]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad=requires_grad, name=n if requires_grad else None) for n, a in self.params.items()}

    def copy(self) -> "VitModel":
        return replace(
            self,
            params={n: a.copy() for n, a in self.params.items()},
            prune_mask=None if self.prune_mask is None else {n: m.copy() for n, m in self.prune_mask.items()},
            meta=dict(self.meta),
        )

    def astype(self, dtype) -> "VitModel":
        m = self.copy()
        m.params = {n: a.astype(dtype) for n, a in m.params.items()}
        return m


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    x = np.clip(x, -2.0, 2.0)
    return (x * std).astype(np.float32)


def init_model(config: ModelConfig) -> VitModel:
    rng = np.random.default_rng(config.seed)
    D, M = config.embed_dim, config.mlp_dim
    f32 = np.float32
    p: dict[str, np.ndarray] = {
        "patch_embed.weight": _trunc_normal(rng, (D, config.patch_dim)),
        "patch_embed.bias": np.zeros(D, f32),
        "cls_token": _trunc_normal(rng, (1, 1, D)),
        "pos_embed": _trunc_normal(rng, (1, config.num_tokens, D)),
    }
    for b in range(config.depth):
        q = f"blocks.{b}"
        p[f"{q}.norm1.weight"] = np.ones(D, f32)
        p[f"{q}.norm1.bias"] = np.zeros(D, f32)
        p[f"{q}.attn.qkv.weight"] = _trunc_normal(rng, (3 * D, D))
        p[f"{q}.attn.qkv.bias"] = np.zeros(3 * D, f32)
        p[f"{q}.attn.proj.weight"] = _trunc_normal(rng, (D, D))
        p[f"{q}.attn.proj.bias"] = np.zeros(D, f32)
        p[f"{q}.ls1"] = np.full(D, config.layerscale_init, f32)
        p[f"{q}.norm2.weight"] = np.ones(D, f32)
        p[f"{q}.norm2.bias"] = np.zeros(D, f32)
        p[f"{q}.mlp.fc1.weight"] = _trunc_normal(rng, (M, D))
        p[f"{q}.mlp.fc1.bias"] = np.zeros(M, f32)
        p[f"{q}.mlp.fc2.weight"] = _trunc_normal(rng, (D, M))
        p[f"{q}.mlp.fc2.bias"] = np.zeros(D, f32)
        p[f"{q}.ls2"] = np.full(D, config.layerscale_init, f32)
    p["norm.weight"] = np.ones(D, f32)
    p["norm.bias"] = np.zeros(D, f32)
    p["head.weight"] = _trunc_normal(rng, (config.num_classes, D))
    p["head.bias"] = np.zeros(config.num_classes, f32)
    return VitModel(config=config, params=p)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, patches, C*patch*patch), patches in row-major grid order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, gh * gw, C * patch * patch))


Intervention = Mapping[HookSite, Callable[[Tensor], Tensor]]


class ForwardResult(NamedTuple):
    logits: Tensor
    trace: dict[HookSite, Tensor]


def _check_images(cfg: ModelConfig, images) -> np.ndarray:
    images = np.asarray(images)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"images must be (B, {expected[0]}, {expected[1]}, {expected[2]}), got {images.shape}")
    return images


def _run_blocks(model: VitModel, x: Tensor, start: int, P, hooks, intervention, relprop_eps) -> ForwardResult:
    cfg = model.config
    B, T, D, H, dh = x.shape[0], cfg.num_tokens, cfg.embed_dim, cfg.heads, cfg.head_dim
    hooks = frozenset(hooks)
    intervention = intervention or {}
    taping = active_tape() is not None
    trace: dict[HookSite, Tensor] = {}

    def site(block: int, tag: str, t: Tensor) -> Tensor:
        s = HookSite(block, tag)
        fn = intervention.get(s)
        if fn is not None:
            new = fn(t)
            if new.shape != t.shape:
                raise ValueError(f"intervention at {s.key} changed shape {t.shape} -> {new.shape}")
            t = new
        if s in hooks:
            if taping:
                t = ops.track(t, s.key)
            trace[s] = t
        return t

    scale = 1.0 / math.sqrt(dh)
    for b in range(start, cfg.depth):
        q_ = f"blocks.{b}"
        h = ops.layernorm(x, P[f"{q_}.norm1.weight"], P[f"{q_}.norm1.bias"])
        h = site(b, "norm1", h)
        # the fused qkv projection, sliced by output rows into q / k / v
        wqkv, bqkv = P[f"{q_}.attn.qkv.weight"], P[f"{q_}.attn.qkv.bias"]
        q, k, v = (
            site(b, tag, ops.reshape(ops.linear(h, ops.getitem(wqkv, rows), ops.getitem(bqkv, rows)), (B, T, H, dh)))
            for tag, rows in (("q", slice(0, D)), ("k", slice(D, 2 * D)), ("v", slice(2 * D, 3 * D)))
        )
        qh = ops.mul(ops.transpose(q, (0, 2, 1, 3)), scale)
        kh = ops.transpose(k, (0, 2, 3, 1))
        vh = ops.transpose(v, (0, 2, 1, 3))
        attn = ops.softmax(ops.matmul(qh, kh))
        attn = site(b, "attn", attn)
        ctx = ops.reshape(ops.transpose(ops.matmul(attn, vh), (0, 2, 1, 3)), (B, T, D))
        ctx = site(b, "ctx", ctx)
        o = ops.linear(ctx, P[f"{q_}.attn.proj.weight"], P[f"{q_}.attn.proj.bias"])
        o = site(b, "attn_out", o)
        x = ops.add(x, ops.layerscale(o, P[f"{q_}.ls1"], relprop_eps))
        h2 = ops.layernorm(x, P[f"{q_}.norm2.weight"], P[f"{q_}.norm2.bias"])
        h2 = site(b, "norm2", h2)
        a = ops.gelu(ops.linear(h2, P[f"{q_}.mlp.fc1.weight"], P[f"{q_}.mlp.fc1.bias"]))
        a = site(b, "mlp_act", a)
        o2 = ops.linear(a, P[f"{q_}.mlp.fc2.weight"], P[f"{q_}.mlp.fc2.bias"])
        o2 = site(b, "mlp_out", o2)
        x = ops.add(x, ops.layerscale(o2, P[f"{q_}.ls2"], relprop_eps))
        x = site(b, "resid", x)
    xf = ops.layernorm(x, P["norm.weight"], P["norm.bias"])
    cls_out = ops.getitem(xf, (slice(None), 0))
    logits = ops.linear(cls_out, P["head.weight"], P["head.bias"])
    return ForwardResult(logits, trace)


def forward(
    model: VitModel,
    images,
    hooks: Iterable[HookSite] = (),
    intervention: Intervention | None = None,
    params: Mapping[str, Tensor] | None = None,
    relprop_eps: float | None = None,
) -> ForwardResult:
    """Run the model, capturing ``hooks`` and applying ``intervention`` per site.

    Interventions replace a site's activation before anything downstream
    reads it; the trace records the replaced value. Under an active tape each
    captured site is tracked under ``site.key`` so its gradient is reported.
    ``relprop_eps`` switches LayerScale to the relevance rule in backward.
    """
    cfg = model.config
    images = _check_images(cfg, images)
    P = model.tensors() if params is None else params
    dtype = P["patch_embed.weight"].dtype
    B = images.shape[0]
    patches = Tensor(extract_patches(images.astype(dtype, copy=False), cfg.patch_size))
    x = ops.linear(patches, P["patch_embed.weight"], P["patch_embed.bias"])
    cls = ops.mul(P["cls_token"], np.ones((B, 1, 1), dtype=dtype))
    x = ops.concat([cls, x], axis=1)
    x = ops.add(x, P["pos_embed"])
    return _run_blocks(model, x, 0, P, hooks, intervention, relprop_eps)


def forward_from(model: VitModel, resid, start_block: int, hooks: Iterable[HookSite] = (),
                 intervention: Intervention | None = None) -> Tensor:
    """Logits from a residual stream entering block ``start_block`` (== depth: head only)."""
    cfg = model.config
    if not 0 <= start_block <= cfg.depth:
        raise ValueError(f"start block {start_block} outside [0, {cfg.depth}]")
    x = resid if isinstance(resid, Tensor) else Tensor(np.asarray(resid))
    if x.shape[1:] != (cfg.num_tokens, cfg.embed_dim):
        raise ValueError(f"residual stream must be (B, {cfg.num_tokens}, {cfg.embed_dim}), got {x.shape}")
    return _run_blocks(model, x, start_block, model.tensors(), hooks, intervention, None).logits


def predict_logits(model: VitModel, images: np.ndarray, batch_size: int = 256, intervention: Intervention | None = None) -> np.ndarray:
    out = [
        forward(model, images[i : i + batch_size], intervention=intervention).logits.data
        for i in range(0, len(images), batch_size)
    ]
    if not out:
        return np.zeros((0, model.config.num_classes), dtype=np.float32)
    return np.concatenate(out, axis=0)


def accuracy(model: VitModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    logits = predict_logits(model, images, batch_size)
    return float((logits.argmax(axis=1) == labels).mean())


def capture(model: VitModel, images: np.ndarray, sites: Iterable[HookSite], batch_size: int = 256,
            intervention: Intervention | None = None) -> tuple[np.ndarray, dict[HookSite, np.ndarray]]:
    """Batched no-grad forward returning logits and the captured site arrays."""
    sites = list(sites)
    logits, acts = [], {s: [] for s in sites}
    for i in range(0, len(images), batch_size):
        res = forward(model, images[i : i + batch_size], hooks=sites, intervention=intervention)
        logits.append(res.logits.data)
        for s in sites:
            acts[s].append(res.trace[s].data)
    return np.concatenate(logits), {s: np.concatenate(v) for s, v in acts.items()}
