"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op produces a :class:`Tensor` holding a reference to
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` orders the recorded graph topologically and visits each
node exactly once, accumulating gradients across fan-out.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import UsageError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float array that may take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype.type in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    # construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # array-like surface ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar; implementations live in ops ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning module."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        self.data = np.ascontiguousarray(value)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Leaf gradients accumulate (call ``zero_grad`` between steps); interior
    gradients are discarded once propagated.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class Rng:
    """Seeded random stream backed by numpy's Philox counter-based generator.

    Philox output depends only on (key, counter), so a given seed yields the
    same stream on every platform. ``child`` derives independent streams,
    e.g. one per (epoch, sample).
    """

    def __init__(self, seed: int = 0, *key: int):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, *self.key, *key)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal samples redrawn until they fall within ``bound`` std devs."""
        out = self.generator.normal(0.0, std, size=shape)
        bad = np.abs(out) > bound * std
        while bad.any():
            out[bad] = self.generator.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > bound * std
        return out

    def state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "bit_generator": self.generator.bit_generator.state}
