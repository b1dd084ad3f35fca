"""Minimal reverse-mode differentiation over a recorded computation graph.

Every loss in this package (conditional velocity regression, reconstruction
error through an unrolled solver, dominance penalties) is expressed with the
`Tensor` ops below, so a single `backward()` call yields gradients for any
parameter collection.  All arithmetic is float64 numpy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Numpy array plus graph bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out._parents = parents
            out._backward = backward
            out.requires_grad = any(p.requires_grad for p in parents)
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; scalar outputs default to seed 1."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accumulate(g)
            if node._backward is not None:
                node._backward_dispatch(g, grads)

    def _backward_dispatch(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        local = self._backward(g)
        for parent, pg in zip(self._parents, local):
            if pg is None:
                continue
            if parent.requires_grad and parent._backward is None:
                parent._accumulate(pg)
            elif parent._parents:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic ----------------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data + b.data
        return Tensor._result(data, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data - b.data
        return Tensor._result(data, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), lambda g: (-g,))

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data * b.data
        return Tensor._result(data, (a, b), lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data / b.data
        return Tensor._result(data, (a, b), lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data @ b.data
        def back(g):
            ga = g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data)
            gb = a.data.T @ g if a.data.ndim == 2 else np.outer(a.data, g)
            return ga, gb
        return Tensor._result(data, (a, b), back)

    def square(self):
        a = self
        return Tensor._result(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,))

    def tanh(self):
        a = self
        t = np.tanh(a.data)
        return Tensor._result(t, (a,), lambda g: (g * (1.0 - t * t),))

    def relu(self):
        a = self
        mask = (a.data > 0).astype(np.float64)
        return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))

    def leaky_relu(self, slope: float):
        a = self
        scale = np.where(a.data > 0, 1.0, slope)
        return Tensor._result(a.data * scale, (a,), lambda g: (g * scale,))

    def sum(self, axis: int | None = None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)
        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).astype(np.float64),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.data.shape).astype(np.float64),)
        return Tensor._result(data, (a,), back)

    def mean(self, axis: int | None = None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def item(self) -> float:
        return float(self.data)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = [Tensor._coerce(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._result(data, tuple(parts), back)


class ParamStore:
    """Flat named collection of trainable arrays with parallel gradient slots.

    Shapes are frozen at construction.  A gradient array exists exactly for
    the trainable parameters; frozen entries keep `grad is None` forever.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for _, p in self.trainable():
            p.grad = np.zeros_like(p.data)

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.trainable():
            if p.grad is not None:
                total += float(np.sum(p.grad ** 2))
        return float(np.sqrt(total))

    def clip_grads(self, max_norm: float) -> float:
        """Scale all gradients so the global norm is at most `max_norm`."""
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for _, p in self.trainable():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def freeze(self) -> None:
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            p = self._params[n]
            if p.data.shape != np.asarray(v).shape:
                raise ValueError(f"shape mismatch loading {n}")
            p.data[...] = v


class NonFiniteLoss(RuntimeError):
    """Raised when a loss evaluation produced NaN or Inf."""


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
               h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is |analytic - fd| / max(1, |fd|).  A
    non-finite loss at a perturbed point raises `NonFiniteLoss` naming the
    offending parameter coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NonFiniteLoss("loss is non-finite at the base point")
    out.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.trainable()}

    max_rel = 0.0
    for name, p in params.trainable():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(params).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteLoss(
                    f"non-finite loss perturbing {name}[{i}] by ±{h}")
            fd = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - fd) / max(1.0, abs(fd))
            max_rel = max(max_rel, rel)
    return max_rel
