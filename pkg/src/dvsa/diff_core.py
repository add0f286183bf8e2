"""Dense float64 tensors with a small reverse-mode tape.

Every op records a closure that pushes the upstream gradient to its parents.
Arrays may carry leading batch axes; matrix ops act on the last two axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _scatter_add(shape: tuple, idx, g: np.ndarray) -> np.ndarray:
    """Adjoint of ``x[idx]``: accumulate ``g`` into zeros(shape), summing repeated indices."""
    arrays = idx if isinstance(idx, tuple) else (idx,)
    if arrays and all(isinstance(a, np.ndarray) and a.dtype.kind in "iu" for a in arrays):
        lead = shape[: len(arrays)]
        lin = np.ravel_multi_index(np.broadcast_arrays(*arrays), lead)
        width = int(np.prod(shape[len(arrays):], dtype=np.int64))
        flat_idx = (lin.reshape(-1, 1) * width + np.arange(width)).ravel()
        total = int(np.prod(lead, dtype=np.int64)) * width
        return np.bincount(flat_idx, weights=g.reshape(-1), minlength=total).reshape(shape)
    full = np.zeros(shape)
    np.add.at(full, idx, g)
    return full


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing -------------------------------------------------

    def _child(self, data, parents: tuple, backward) -> "Tensor":
        parents = tuple(p for p in parents if p.requires_grad)
        out = Tensor(data, requires_grad=bool(parents), _parents=parents)
        if parents:
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior nodes hold transient grads; leaves keep theirs
        upstream: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                upstream[key] = upstream[key] + pg if key in upstream else pg

    # -- elementwise ----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return self._child(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self._child(-self.data, (self,), lambda g: ((self, -g),))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            )

        return self._child(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            return (
                (a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * out / b.data, b.shape)),
            )

        return self._child(out, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        src_shape = self.shape

        def bw(g):
            return ((self, _scatter_add(src_shape, idx, g)),)

        return self._child(self.data[idx], (self,), bw)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self._child(out, (self,), lambda g: ((self, g * out),))

    def log(self) -> "Tensor":
        return self._child(np.log(self.data), (self,), lambda g: ((self, g / self.data),))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return self._child(out, (self,), lambda g: ((self, g * 0.5 / out),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return self._child(self.data * mask, (self,), lambda g: ((self, g * mask),))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.logaddexp(0.0, x)
        sig = np.exp(-np.logaddexp(0.0, -x))
        return self._child(out, (self,), lambda g: ((self, g * sig),))

    def clip_max(self, hi: float) -> "Tensor":
        mask = self.data <= hi
        out = np.minimum(self.data, hi)
        return self._child(out, (self,), lambda g: ((self, g * mask),))

    # -- reductions and shape -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((self, np.broadcast_to(g, shape).copy()),)

        return self._child(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        src = self.shape
        return self._child(self.data.reshape(*shape), (self,), lambda g: ((self, g.reshape(src)),))

    @property
    def mT(self) -> "Tensor":
        return self._child(np.swapaxes(self.data, -1, -2), (self,), lambda g: ((self, np.swapaxes(g, -1, -2)),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(zip(parts, np.split(g, splits, axis=axis)))

    return parts[0]._child(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


# -- named operations ----------------------------------------------------


def matmul(A, B) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {A.shape} x {B.shape}")
    out = np.matmul(A.data, B.data)

    def bw(g):
        ga = gb = None
        if A.requires_grad:
            if A.ndim == 2 and B.ndim > 2:
                # shared left operand: fold the batch into the contraction
                ga = np.swapaxes(g, 0, -2).reshape(g.shape[-2], -1) @ np.swapaxes(B.data, 0, -2).reshape(B.shape[-2], -1).T
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(B.data, -1, -2)), A.shape)
        if B.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                gb = A.data.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A.data, -1, -2), g), B.shape)
        return ((A, ga), (B, gb))

    return A._child(out, (A, B), bw)


def softmax_rows(X) -> Tensor:
    """Softmax along the last axis, shifted by the row max."""
    X = as_tensor(X)
    z = X.data - X.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((X, out * (g - (g * out).sum(axis=-1, keepdims=True))),)

    return X._child(out, (X,), bw)


def log_softmax_rows(X) -> Tensor:
    X = as_tensor(X)
    z = X.data - X.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(out)

    def bw(g):
        return ((X, g - sm * g.sum(axis=-1, keepdims=True)),)

    return X._child(out, (X,), bw)


def l2_normalize_rows(X) -> Tensor:
    """Divide each last-axis vector by its norm; zero norms are an error."""
    X = as_tensor(X)
    norms = np.linalg.norm(X.data, axis=-1)
    if np.any(norms == 0.0):
        bad = np.argwhere(norms == 0.0)[0].tolist()
        raise DegenerateInputError(f"zero-norm vector at index {bad}")
    return X / (X * X).sum(axis=-1, keepdims=True).sqrt()


def cosine_matrix(V, P) -> Tensor:
    """Pairwise cosine similarity between rows of V (..., n, d) and P (..., q, d)."""
    return matmul(l2_normalize_rows(V), l2_normalize_rows(P).mT)


def cosine(u, v) -> float:
    u = np.asarray(getattr(u, "data", u), dtype=np.float64).ravel()
    v = np.asarray(getattr(v, "data", v), dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine shape mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def gap(F) -> Tensor:
    """Global average pooling over the region axis (second to last)."""
    F = as_tensor(F)
    if F.ndim < 2 or F.shape[-2] == 0:
        raise DegenerateInputError(f"gap needs at least one region, got shape {F.shape}")
    return F.mean(axis=-2)


# -- parameters and optimisation -------------------------------------------


class ParamStore:
    """Named leaf tensors that receive gradients."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._slots: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._slots:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._slots[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._slots.items()

    @property
    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self._slots.items()}

    def zero_grad(self) -> None:
        for t in self._slots.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._slots.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self._slots[k].shape != np.shape(v):
                raise ShapeError(f"parameter {k!r}: expected {self._slots[k].shape}, got {np.shape(v)}")
            self._slots[k].data = np.array(v, dtype=np.float64)


@dataclass
class OptimState:
    lr: float = 1e-2
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    clip_norm: float | None = None  # rescale the joint gradient when its L2 norm exceeds this

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def sgd_step(params: ParamStore, optim: OptimState, names: Iterable[str] | None = None) -> ParamStore:
    """One (momentum) SGD update over `names` (all slots by default), then zero those grads."""
    names = list(params) if names is None else list(names)
    for name in names:
        if params[name].grad is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
    scale = 1.0
    if optim.clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(params[n].grad ** 2)) for n in names))
        if norm > optim.clip_norm:
            scale = optim.clip_norm / norm
    for name in names:
        t = params[name]
        g = t.grad * scale if scale != 1.0 else t.grad
        if optim.momentum:
            vel = optim.velocity.get(name)
            vel = g.copy() if vel is None else optim.momentum * vel + g
            optim.velocity[name] = vel
            g = vel
        t.data = t.data - optim.lr * g
        t.grad = None
    optim.step += 1
    return params


@dataclass
class GradCheckReport:
    ok: bool
    max_error: float
    checked: int
    offenders: list[tuple[str, tuple, float, float]]  # (slot, index, analytic, numeric)

    def offending_slots(self) -> set[str]:
        return {o[0] for o in self.offenders}


def grad_check(
    loss: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-6,
    tol: float = 1e-5,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, entry by entry.

    `analytic` overrides the tape gradients (used for negative controls).
    """
    params.zero_grad()
    loss(params).backward()
    grads = analytic if analytic is not None else {
        k: (g if g is not None else np.zeros_like(params[k].data)) for k, g in params.grads.items()
    }
    params.zero_grad()
    offenders = []
    worst = 0.0
    checked = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss(params).item()
            flat[j] = orig - eps
            down = loss(params).item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = float(grads[name].reshape(-1)[j])
            err = abs(a - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err) if math.isfinite(err) else math.inf
            checked += 1
            if not err <= tol:
                offenders.append((name, np.unravel_index(j, t.shape), a, numeric))
    return GradCheckReport(ok=not offenders, max_error=worst, checked=checked, offenders=offenders)
