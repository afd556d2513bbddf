"""Dense tensors with reverse-mode autodiff, backed by numpy.

Every differentiable operation records a node holding its parents and a
closure mapping the output gradient to one gradient per parent.  Graphs are
consumed by :meth:`Tensor.backward`; a second call on the same graph raises.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (double backward, non-scalar loss)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, validation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None and arr.dtype in (np.float32, np.float64):
            dt = arr.dtype
        else:
            dt = resolve_dtype(dtype)
        self.data = np.ascontiguousarray(arr, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._released = False
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError("backward() called twice on the same graph; rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any requires_grad tensor")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad += g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
            node._backward = _released_backward
            node._parents = ()
            node._released = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _released_backward(g):
    raise GraphError("part of this graph was consumed by an earlier backward(); rebuild the forward pass")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._released = False
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), bw, "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def _gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
    return cdf + x * pdf


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * (1.0 / math.sqrt(2.0))))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        return (g * _gelu_grad(x.data, cdf).astype(x.dtype, copy=False),)

    return _make(out, (x,), bw, "gelu")


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), bw, "silu")


def where(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``cond`` holds, constant ``fill`` elsewhere (no grad to fill)."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, x.data, np.asarray(fill, dtype=x.dtype))

    def bw(g):
        return (unbroadcast(np.where(cond, g, 0.0).astype(x.dtype, copy=False), x.shape),)

    return _make(out, (x,), bw, "where")


# -- reductions -----------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError("mean over an empty extent")
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation / softmax ---------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x**2) + eps) * gain over the last axis."""
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match feature dim {x.shape[-1]}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out = normed * gain.data

    def bw(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * normed).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gn = g * gain.data
            gx = inv * (gn - normed * np.sum(gn * normed, axis=-1, keepdims=True) / d)
        return gx, gg

    return _make(out.astype(x.dtype, copy=False), (x, gain), bw, "rms_norm")


# -- shape manipulation ---------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))

    return _make(out, tensors, bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % x.ndim
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not sum to extent {x.shape[ax]} of axis {axis}")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    outs = []
    for i, n in enumerate(sizes):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        index = [slice(None)] * x.ndim
        index[ax] = slice(lo, hi)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(_make(np.ascontiguousarray(x.data[index]), (x,), bw, "split"))
    return outs


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradient scatter-adds back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), bw, "embedding")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs (x[2i], x[2i+1]) by the given angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    if x.shape[-1] % 2:
        raise ShapeError("rotate_pairs needs an even last dimension")
    cos = np.asarray(cos, dtype=x.dtype)
    sin = np.asarray(sin, dtype=x.dtype)

    def rot(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + (v.shape[-1],)), dtype=v.dtype)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    def bw(g):
        return (unbroadcast(rot(g, -sin), x.shape),)

    return _make(rot(x.data, sin), (x,), bw, "rotate_pairs")


# -- gradient checking ----------------------------------------------------
@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}, {self.checked} elems)"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "fn",
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``fn(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps vanishing gradients from turning round-off into huge ratios.  With
    ``max_elements`` only a random subset of each input is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = fn(*inputs)
    if out.size != 1:
        raise GraphError(f"grad_check needs a scalar function output, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    per_input = []
    checked = 0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn(*inputs).item()
                flat[i] = orig - eps
                fm = fn(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = float(ga.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err if np.isfinite(err) else np.inf)
            per_input.append(worst)
            checked += len(idx)
    return GradCheckReport(name, max(per_input) if per_input else 0.0, tol, per_input, checked)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
