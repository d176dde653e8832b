"""Differentiable primitives.

Each primitive computes its forward value eagerly with numpy (or a numba
kernel) and, when a :class:`GradTape` is active and some input requires a
gradient, records a closure producing the input gradients.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from scipy.special import expit

from impact.numerics import kernels
from impact.numerics.tensor import NonFiniteError, Tensor, active_tape

LAYERNORM_EPS = 1e-6


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and builtins.any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _sum64(g: np.ndarray, axis, keepdims=False) -> np.ndarray:
    return g.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(g.dtype)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _need(t: Tensor) -> bool:
    return t.requires_grad


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bwd(g):
        return (unbroadcast(g, a.shape) if _need(a) else None,
                unbroadcast(g, b.shape) if _need(b) else None)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bwd(g):
        return (unbroadcast(g, a.shape) if _need(a) else None,
                unbroadcast(-g, b.shape) if _need(b) else None)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bwd(g):
        return (unbroadcast(g * b.data, a.shape) if _need(a) else None,
                unbroadcast(g * a.data, b.shape) if _need(b) else None)

    return _emit("mul", a.data * b.data, (a, b), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""

    def bwd(g):
        return (kernels.gelu_bwd(x.data, g),)

    return _emit("gelu", kernels.gelu_fwd(x.data), (x,), bwd)


def ste_heaviside(m: Tensor, tau: float = 1.0) -> Tensor:
    """Forward 1[m > 0]; backward uses the logistic surrogate tau*s*(1-s), s = sigmoid(tau*m)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    m = _lift(m)

    def bwd(g):
        s = expit(tau * m.data.astype(np.float64))
        return ((g * (tau * s * (1.0 - s))).astype(m.dtype),)

    return _emit("ste_heaviside", (m.data > 0).astype(m.dtype), (m,), bwd)


def blend(a: Tensor, keep, fill) -> Tensor:
    """keep * a + (1 - keep) * fill, with ``keep`` typically a binary mask."""
    keep = _lift(keep, a)
    fill = _lift(fill, a)
    kd = keep.data
    out = kd * a.data + (1 - kd) * fill.data

    def bwd(g):
        return (
            unbroadcast(g * kd, a.shape) if _need(a) else None,
            unbroadcast(g * (a.data - fill.data), keep.shape) if _need(keep) else None,
            unbroadcast(g * (1 - kd), fill.shape) if _need(fill) else None,
        )

    return _emit("blend", out, (a, keep, fill), bwd)


def layerscale(x: Tensor, gamma: Tensor, relprop_eps: float | None = None) -> Tensor:
    """Per-channel scaling ``x * gamma``.

    With ``relprop_eps`` set, the signal sent back to ``x`` is the ordinary
    gradient divided by ``gamma + relprop_eps`` (the LayerScale relevance rule),
    which undoes the attenuation a small gamma imposes on the branch.
    """

    def bwd(g):
        gx = None
        if _need(x):
            gx = g * gamma.data
            if relprop_eps is not None:
                gx = gx / (gamma.data + relprop_eps)
        return gx, (unbroadcast(g * x.data, gamma.shape) if _need(gamma) else None)

    return _emit("layerscale", x.data * gamma.data, (x, gamma), bwd)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = gb = None
        if _need(a):
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if _need(b):
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: {x.shape} with weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*x.shape[:-1], weight.shape[0])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if _need(x) else None
        gw = (g2.T @ x2) if _need(weight) else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if _need(bias) else None)

    return _emit("linear", out, inputs, bwd)


# -- normalisation --------------------------------------------------------


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mean, rstd = kernels.layernorm_fwd(x2, weight.data, bias.data, eps)

    def bwd(g):
        gx, gw, gb = kernels.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), x2, mean, rstd, weight.data)
        return (gx.reshape(x.shape) if _need(x) else None,
                gw.astype(weight.dtype) if _need(weight) else None,
                gb.astype(bias.dtype) if _need(bias) else None)

    return _emit("layernorm", y.reshape(x.shape), (x, weight, bias), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.ndim - 1):
        raise ValueError("softmax is only defined over the last axis")
    d = x.shape[-1]
    y = kernels.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, d)))

    def bwd(g):
        return (kernels.softmax_bwd(y, np.ascontiguousarray(g.reshape(-1, d))).reshape(x.shape),)

    return _emit("softmax", y.reshape(x.shape), (x,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = (lse - z[rows, labels]).mean()

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / labels.size)).astype(logits.dtype),)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# -- reductions -----------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = _sum64(x.data, axis, keepdims)

    def bwd(g):
        return (np.ascontiguousarray(_expand(g, x.shape, axis, keepdims)),)

    return _emit("sum", np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = (x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims) / n).astype(x.dtype)

    def bwd(g):
        return (np.ascontiguousarray(_expand(g / n, x.shape, axis, keepdims)),)

    return _emit("mean", np.asarray(out), (x,), bwd)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx, gk, axis)
        return (gx,)

    return _emit("max", out, (x,), bwd)


def l2norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    sq = (x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    out = norm if keepdims else np.squeeze(norm, axis)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return ((gk * np.where(norm > 0, x.data / safe, 0.0)).astype(x.dtype),)

    return _emit("l2norm", out.astype(x.dtype), (x,), bwd)


# -- shape ----------------------------------------------------------------


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", np.transpose(x.data, axes), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", x.data.reshape(shape), (x,), bwd)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    advanced = _is_advanced(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return _emit("slice", np.asarray(x.data[idx]), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def track(x: Tensor, name: str) -> Tensor:
    """Identity that is always taped and named, so its gradient is reported.

    Unlike a leaf, gradients keep flowing through to ``x``.
    """
    out = Tensor(x.data, name=name)
    tape = active_tape()
    if tape is not None:
        out.requires_grad = True
        tape.record(out, (x,), lambda g: (g,))
    return out


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "linear": linear,
    "layernorm": layernorm,
    "softmax": softmax,
    "gelu": gelu,
    "cross_entropy": cross_entropy,
    "sum": sum,
    "mean": mean,
    "max": max,
    "l2norm": l2norm,
    "transpose": transpose,
    "reshape": reshape,
    "slice": getitem,
    "concat": concat,
    "ste_heaviside": ste_heaviside,
    "blend": blend,
    "layerscale": layerscale,
}


def primitive_forward(name: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by id, e.g. ``primitive_forward("softmax", x)``."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}") from None
    if name == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)
