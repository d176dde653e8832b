"""Tensor value type and the gradient tape."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d float array, optionally tracked for reverse-mode gradients.

    ``name`` is what :func:`backward` uses as the key of the returned gradient
    map; untracked or unnamed tensors never show up there.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from impact.numerics import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from impact.numerics import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from impact.numerics import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from impact.numerics import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from impact.numerics import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from impact.numerics import ops

        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from impact.numerics import ops

        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from impact.numerics import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from impact.numerics import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from impact.numerics import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from impact.numerics import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records primitive applications so :func:`backward` can replay them.

    A tape is single-owner and single-use::

        with GradTape() as tape:
            y = f(x)
        grads = tape.backward(seed=np.ones(y.shape, y.dtype))
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._named: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: Iterable[Tensor], backward: BackwardFn) -> None:
        inputs = tuple(inputs)
        self.nodes.append(_Node(out, inputs, backward))
        for t in inputs:
            if t.requires_grad and t.name is not None:
                self._named[id(t)] = t
        if out.name is not None:
            self._named[id(out)] = out

    def watch(self, t: Tensor) -> None:
        """Make a tensor's gradient appear in the result under ``t.name``."""
        if t.name is None:
            raise TapeError("only named tensors can be watched")
        self._named[id(t)] = t

    @property
    def output(self) -> Tensor:
        if not self.nodes:
            raise TapeError("empty tape")
        return self.nodes[-1].out

    def backward(self, seed=None, output: Tensor | None = None) -> dict[str, np.ndarray]:
        return backward(self, seed, output)


def backward(tape: GradTape, seed=None, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Return d(output . seed)/d(t) for every named tensor reached by the tape.

    ``output`` defaults to the last recorded value. ``seed`` defaults to ones
    (a scalar output gives the plain gradient).
    """
    if tape.consumed:
        raise TapeError("tape already consumed")
    out = tape.output if output is None else output
    if seed is None:
        seed = np.ones(out.shape, dtype=out.dtype)
    seed = np.asarray(seed, dtype=out.dtype)
    if seed.shape != out.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output shape {out.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(out): seed}
    result: dict[str, np.ndarray] = {}
    named = tape._named
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if id(node.out) in named:
            result[node.out.name] = g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, g in grads.items():
        t = named.get(key)
        if t is not None and t.name not in result:
            result[t.name] = g
    tape.nodes = []
    return result
