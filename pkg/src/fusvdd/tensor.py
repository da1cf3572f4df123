"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tape` records every primitive op executed while it is active and
whose inputs require gradients. Nodes are appended in execution order, which
is already a topological order, so ``backward`` is a single reverse sweep.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A forward or backward computation produced NaN or Inf."""


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Gradients:
    """Gradient lookup keyed by tensor identity; unreached tensors get zeros."""

    def __init__(self, grads: dict[int, np.ndarray], refs: dict[int, Tensor]):
        self._grads = grads
        self._refs = refs

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._refs.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._refs.get(id(t)) is t


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Records differentiable ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Backward) -> None:
        self._nodes.append(_Node(out, parents, backward))
        self._produced.add(id(out))

    def reset(self) -> None:
        self._nodes.clear()
        self._produced.clear()
        self._used = False

    def backward(self, root: Tensor) -> Gradients:
        if self._used:
            raise GradientError("backward already called on this tape; call reset() first")
        if root.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise GradientError("root is detached from the tape (does not require grad)")
        self._used = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        refs: dict[int, Tensor] = {id(root): root}
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    refs[key] = p
        for key, t in refs.items():
            if key not in self._produced:
                t.grad = grads[key]
        return Gradients(grads, refs)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{opname} produced non-finite values")


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, opname: str) -> Tensor:
    """Wrap an op output and record it on the active tape when needed."""
    _check_finite(data, opname)
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.shape == ()


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b):
        b = Tensor(b)
    if not isinstance(b, Tensor):
        return make_result(a.data + b, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b):
        b = Tensor(b)
    if not isinstance(b, Tensor):
        return make_result(a.data - b, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_result(a.data * a.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a 0-d tensor or python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b):
        b = Tensor(b)
    if not isinstance(b, Tensor):
        return scale(a, b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd
        gb = g * ad
        if a.shape == () and g.shape != ():
            ga = np.asarray(ga.sum())
        if b.shape == () and g.shape != ():
            gb = np.asarray(gb.sum())
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def sum_squares(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.asarray(np.sum(ad * ad)), (a,), lambda g: (2.0 * g * ad,), "sum_squares")


def total(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def expand_batch(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of length ``n``."""
    a = as_tensor(a)
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return make_result(data, (a,), lambda g: (g.sum(axis=0),), "expand_batch")


def pad_channels(a: Tensor, channels: int) -> Tensor:
    """Zero-pad axis 1 of an N×C×H×W tensor up to ``channels``."""
    a = as_tensor(a)
    c = a.shape[1]
    if channels < c:
        raise ShapeError(f"pad_channels: cannot pad {c} channels down to {channels}")
    if channels == c:
        return a
    pad = [(0, 0)] * a.ndim
    pad[1] = (0, channels - c)
    return make_result(np.pad(a.data, pad), (a,), lambda g: (g[:, :c],), "pad_channels")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Stack tensors of equal trailing shape along axis 0."""
    tensors = [as_tensor(t) for t in tensors]
    tail = {t.shape[1:] for t in tensors}
    if len(tail) != 1:
        raise ShapeError(f"concat: trailing shapes differ {sorted(tail)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    data = np.concatenate([t.data for t in tensors])
    return make_result(data, tuple(tensors),
                       lambda g: [g[a:b] for a, b in zip(bounds[:-1], bounds[1:])], "concat")


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat`."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[0]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {a.shape[0]}")
    out, start = [], 0
    for n in sizes:
        lo, hi = start, start + n

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[lo:hi] = g
            return (full,)

        out.append(make_result(a.data[lo:hi].copy(), (a,), backward, "split"))
        start = hi
    return out


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[Tensor]) -> Tensor:
    if len(terms) != len(weights):
        raise ShapeError(f"weighted_sum: {len(terms)} terms but {len(weights)} weights")
    if not terms:
        raise ShapeError("weighted_sum: no terms")
    out = mul(terms[0], weights[0])
    for t, w in zip(terms[1:], weights[1:]):
        out = add(out, mul(t, w))
    return out


def finite_diff_gradient(f: Callable[[Tensor], "Tensor | float"], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        val = f(Tensor(arr.copy()))
        val = float(val.data) if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise NumericError("finite_diff_gradient: f returned a non-finite value")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
