"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every operation on gradient-tracked
tensors records its parents and a local backward rule on the output.
``backward`` walks the recorded graph once in reverse topological order.
All storage is float64 and row-major; slicing copies, it never aliases.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, DegenerateInputError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A dense float64 array, optionally tracked for differentiation.

    ``array`` is the row-major value storage, ``data`` exposes it flat.
    ``grad``, once ``backward`` has run, holds d(root)/d(self) with the
    same shape as ``array``.
    """

    __slots__ = ("array", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the value storage."""
        return self.array.ravel()

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # Small operator sugar; the module-level functions are the real API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Graph:
    """Operations reachable from a root, operands before their users."""

    nodes: list[Tensor]


def _make(array: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(array)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.array)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def trace_graph(root: Tensor) -> Graph:
    """Topologically order the gradient-tracked graph below ``root``."""
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
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))
    return Graph(nodes=order)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tracked ancestor of a scalar root."""
    if root.array.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    graph = trace_graph(root)
    root.grad = np.ones_like(root.array)
    for node in reversed(graph.nodes):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.array + b.array

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.array.shape))
        _accumulate(b, _unbroadcast(g, b.array.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.array - b.array

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.array.shape))
        _accumulate(b, _unbroadcast(-g, b.array.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.array * b.array

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.array, a.array.shape))
        _accumulate(b, _unbroadcast(g * a.array, b.array.shape))

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.array, (a,), bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a plain (non-differentiated) float."""
    factor = float(factor)

    def bwd(g):
        _accumulate(a, g * factor)

    return _make(a.array * factor, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.array)

    def bwd(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g / a.array)

    return _make(np.log(a.array), (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.array
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.array.shape[1] != b.array.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.array @ b.array

    def bwd(g):
        _accumulate(a, g @ b.array.T)
        _accumulate(b, a.array.T @ g)

    return _make(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.array.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def bwd(g):
        _accumulate(a, g.T)

    return _make(a.array.T.copy(), (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.array.shape))

    return _make(a.array.reshape(shape).copy(), (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Copy ``length`` consecutive slices along ``axis`` starting at ``start``."""
    if not (0 <= start and start + length <= a.array.shape[axis]):
        raise ShapeError(
            f"narrow range [{start}, {start + length}) outside axis {axis} of {a.shape}"
        )
    index = [slice(None)] * a.array.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.array[index].copy()

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.array)
            full[index] = g
            _accumulate(a, full)

    return _make(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([p.array for p in parts], axis=axis)
    sizes = [p.array.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(p, g[tuple(index)])
            offset += size

    return _make(out, parts, bwd)


def reduce_sum(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.full_like(a.array, np.ravel(g)[0]))

    return _make(np.asarray(a.array.sum()), (a,), bwd)


def reduce_mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.array.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Sum of the elementwise product (inner product for vectors)."""
    return reduce_sum(mul(a, b))


# ---------------------------------------------------------------------------
# normalization and attention nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.array - x.array.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - inner))

    return _make(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.array - x.array.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        _accumulate(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mean = x.array.mean(axis=-1, keepdims=True)
    var = x.array.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.array - mean) * inv_std
    out = gamma.array * xhat + beta.array
    lead_axes = tuple(range(x.array.ndim - 1))

    def bwd(g):
        g_xhat = g * gamma.array
        term = g_xhat - g_xhat.mean(axis=-1, keepdims=True)
        term -= xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, term * inv_std)
        _accumulate(gamma, (g * xhat).sum(axis=lead_axes))
        _accumulate(beta, g.sum(axis=lead_axes))

    return _make(out, (x, gamma, beta), bwd)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit L2 norm."""
    norms = np.sqrt((x.array * x.array).sum(axis=-1, keepdims=True))
    if np.any(norms < 1e-12):
        raise DegenerateInputError("cannot L2-normalize a (near-)zero vector")
    out = x.array / norms

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - out * inner) / norms)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    ``f`` must rebuild its computation from the current value of ``x`` on
    every call (define-by-run).  The relative error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ContractError("finite_diff_check requires h > 0")
    if not x.requires_grad:
        raise ContractError("finite_diff_check requires a gradient-tracked input")
    x.grad = None
    out = f(x)
    backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.array)).ravel().copy()

    numeric = np.empty_like(analytic)
    flat = x.array.ravel()
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = f(x).item()
            flat[i] = saved - h
            f_minus = f(x).item()
            flat[i] = saved
            numeric[i] = (f_plus - f_minus) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
