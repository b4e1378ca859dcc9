"""Reverse-mode automatic differentiation over dense float64 tensors.

Execution is eager: every primitive computes its value immediately and, when
gradients are enabled and at least one input requires them, records the input
references together with a vector-Jacobian closure on the output tensor.
Because outputs are created strictly after their inputs, creation order is a
topological order of the graph; ``backward`` walks the nodes reachable from
the loss in descending creation order, which visits each node exactly once.
Separate graphs (e.g. built on different threads) never share mutable state.

Numerical conventions:

- all values are 64-bit floats stored row-major,
- gradients accumulate by summation; the optimizer zeroes them after a step,
- ``exp`` clamps its input to [-60, 60], sigmoid/softplus use overflow-safe
  formulations.

Broadcasting is supported for elementwise binary ops in the limited numpy
sense the models need (same shape, scalar expansion, row/column vectors);
the gradient of a broadcast operand is sum-reduced back to its shape.
"""

from __future__ import annotations

import itertools
import json
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, DomainError

_EXP_CLAMP = 60.0

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (anchor/eval forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 value, optionally carrying a gradient and graph node.

    ``data`` is a C-contiguous ndarray; ``grad`` is either ``None`` or an
    ndarray of the same shape. Leaf tensors are created directly; non-leaf
    tensors come out of the primitives below and remember their parents plus
    a closure that routes the output gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_id", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep rank
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def to_json(self) -> str:
        """Debug dump used by test fixtures."""
        return json.dumps({"shape": list(self.shape), "data": self.data.ravel().tolist()})

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of the common primitives ---------------------------
    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def clamp_min(self, bound: float):
        return clamp_min(self, bound)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: vjp closures may hand the same buffer to several parents
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary primitives
# ---------------------------------------------------------------------------

def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"operands with shapes {a.shape} and {b.shape} do not broadcast") from err

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(da(g, a.data, b.data), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(db(g, a.data, b.data), b.shape))

    return _make(data, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


# ---------------------------------------------------------------------------
# matmul / layout
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands with exact gradients."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g: np.ndarray) -> None:
        if a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        elif a.ndim == 2 and b.ndim == 1:
            if a.requires_grad:
                _accumulate(a, np.outer(g, b.data))
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            if a.requires_grad:
                _accumulate(a, b.data @ g)
            if b.requires_grad:
                _accumulate(b, np.outer(a.data, g))
        else:  # vector dot product
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, g * a.data)

    return _make(data, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def vjp(g: np.ndarray) -> None:
        _accumulate(x, g.T)

    return _make(np.ascontiguousarray(x.data.T), (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    data = x.data.reshape(shape)

    def vjp(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DomainError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])

    return _make(data, parts, vjp)


# ---------------------------------------------------------------------------
# elementwise unary primitives
# ---------------------------------------------------------------------------

def _unary(x, data: np.ndarray, dlocal: np.ndarray) -> Tensor:
    def vjp(g: np.ndarray) -> None:
        _accumulate(x, g * dlocal)

    return _make(data, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), (x.data > 0.0).astype(np.float64))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp(-|v|) never overflows; the two branches share it
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _unary(x, s, s * (1.0 - s))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _unary(x, t, 1.0 - t * t)


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, _softplus(x.data), _sigmoid(x.data))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    clipped = np.clip(x.data, -_EXP_CLAMP, _EXP_CLAMP)
    e = np.exp(clipped)
    inside = (x.data > -_EXP_CLAMP) & (x.data < _EXP_CLAMP)
    return _unary(x, e, e * inside)


def log(x) -> Tensor:
    x = _as_tensor(x)
    bad = np.flatnonzero(x.data <= 0.0)
    if bad.size:
        raise DomainError(f"log of non-positive entry at flat index {int(bad[0])}")
    return _unary(x, np.log(x.data), 1.0 / x.data)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    bad = np.flatnonzero(x.data < 0.0)
    if bad.size:
        raise DomainError(f"sqrt of negative entry at flat index {int(bad[0])}")
    r = np.sqrt(x.data)
    with np.errstate(divide="ignore"):
        d = np.where(x.data > 0.0, 0.5 / np.maximum(r, np.finfo(np.float64).tiny), 0.0)
    return _unary(x, r, d)


def clamp_min(x, bound: float) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, np.maximum(x.data, bound), (x.data > bound).astype(np.float64))


_UNARY_KINDS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "log": log,
}


def map_unary(x, kind: str) -> Tensor:
    """Apply a named elementwise function; see ``_UNARY_KINDS`` for choices."""
    try:
        fn = _UNARY_KINDS[kind]
    except KeyError:
        raise DomainError(f"unknown unary kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# reductions and row-wise fused ops
# ---------------------------------------------------------------------------

def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0:
        raise DomainError("reduction over an empty tensor")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DomainError(f"axis {axis} invalid for shape {x.shape}")
    data = x.data.sum(axis=axis)

    def vjp(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(np.asarray(data), (x,), vjp)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0:
        raise DomainError("mean of an empty tensor")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DomainError(f"axis {axis} invalid for shape {x.shape}")
    count = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / count)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable log(sum(exp(row))) for a 2-D tensor, one value per row."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"logsumexp_rows expects a matrix, got shape {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    data = (m + np.log(s)).ravel()
    soft = e / s

    def vjp(g: np.ndarray) -> None:
        _accumulate(x, g[:, None] * soft)

    return _make(data, (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Stable per-row softmax of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> None:
        inner = (g * p).sum(axis=1, keepdims=True)
        _accumulate(x, p * (g - inner))

    return _make(p, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial primitives (valid convolution, non-overlapping max pooling)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, biases: Tensor) -> Tensor:
    """Valid 2-D convolution, stride 1.

    ``x`` is (batch, H, W, C_in), ``kernels`` is (k_h, k_w, C_in, C_out),
    ``biases`` is (C_out,). Output is (batch, H', W', C_out) with
    H' = H - k_h + 1. The kernel is applied as a sliding dot product
    (cross-correlation), matching the discrete definition used throughout.
    """
    x, kernels, biases = _as_tensor(x), _as_tensor(kernels), _as_tensor(biases)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects (b,H,W,C) and (kh,kw,Cin,Cout), got {x.shape}, {kernels.shape}")
    b, h, w, c_in = x.shape
    kh, kw, kc, c_out = kernels.shape
    if kc != c_in:
        raise DimensionError(f"kernel input channels {kc} != input channels {c_in}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if biases.shape != (c_out,):
        raise DimensionError(f"bias shape {biases.shape} != ({c_out},)")
    ho, wo = h - kh + 1, w - kw + 1

    # im2col in the sliding-view's native (Cin, kh, kw) axis order, so the
    # reshape gathers without an extra transpose; columns are kept for the
    # kernel gradient when recording
    view = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    cols = view.reshape(b * ho * wo, c_in * kh * kw)
    kmat = kernels.data.transpose(2, 0, 1, 3).reshape(c_in * kh * kw, c_out)
    data = (cols @ kmat).reshape(b, ho, wo, c_out) + biases.data

    def vjp(g: np.ndarray) -> None:
        gmat = g.reshape(b * ho * wo, c_out)
        if biases.requires_grad:
            _accumulate(biases, gmat.sum(axis=0))
        if kernels.requires_grad:
            gk = (cols.T @ gmat).reshape(c_in, kh, kw, c_out).transpose(1, 2, 0, 3)
            _accumulate(kernels, np.ascontiguousarray(gk))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for p in range(kh):
                for q in range(kw):
                    # g (b,H',W',Cout) @ K[p,q] (Cin,Cout)^T -> (b,H',W',Cin)
                    gx[:, p:p + ho, q:q + wo, :] += g @ kernels.data[p, q].T
            _accumulate(x, gx)

    return _make(data, (x, kernels, biases), vjp)


def maxpool2d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping stride x stride max pooling over (batch, H, W, C).

    Ties route the gradient to the first maximal entry in row-major window
    scan order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects (b,H,W,C), got shape {x.shape}")
    b, h, w, c = x.shape
    s = int(stride)
    if h % s or w % s:
        raise DimensionError(f"input {h}x{w} not divisible by pooling stride {s}")
    ho, wo = h // s, w // s
    # strided-view maxima; no window matrix is materialized
    data = x.data[:, 0::s, 0::s, :].copy()
    for p in range(s):
        for q in range(s):
            if p or q:
                np.maximum(data, x.data[:, p::s, q::s, :], out=data)

    def vjp(g: np.ndarray) -> None:
        # ties route to the first maximal entry in row-major window order
        gx = np.zeros_like(x.data)
        claimed = np.zeros(data.shape, dtype=bool)
        for p in range(s):
            for q in range(s):
                window = x.data[:, p::s, q::s, :]
                hit = (window == data) & ~claimed
                gx[:, p::s, q::s, :] += np.where(hit, g, 0.0)
                claimed |= hit
        _accumulate(x, gx)

    return _make(data, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def avgpool2d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping stride x stride average pooling over (batch, H, W, C).

    Unlike max pooling this commutes with linear functionals of the input,
    which matters when downstream layers need global sums.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects (b,H,W,C), got shape {x.shape}")
    b, h, w, c = x.shape
    s = int(stride)
    if h % s or w % s:
        raise DimensionError(f"input {h}x{w} not divisible by pooling stride {s}")
    ho, wo = h // s, w // s
    scale = 1.0 / (s * s)
    data = x.data[:, 0::s, 0::s, :].copy()
    for p in range(s):
        for q in range(s):
            if p or q:
                data += x.data[:, p::s, q::s, :]
    data *= scale

    def vjp(g: np.ndarray) -> None:
        gx = np.empty_like(x.data)
        gs = g * scale
        for p in range(s):
            for q in range(s):
                gx[:, p::s, q::s, :] = gs
        _accumulate(x, gx)

    return _make(data, (x,), vjp)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that requires it and feeds ``loss``.

    Gradients of tensors used in several places accumulate by summation.
    Repeated backward calls on disjoint graphs do not interfere; the walk is
    restricted to nodes actually reachable from ``loss``.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward requires a scalar tensor, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with no recorded graph")

    reachable: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._vjp is not None:
            reachable.append(node)
            stack.extend(node._parents)

    loss.grad = np.ones((), dtype=np.float64)
    for node in sorted(reachable, key=lambda n: n._id, reverse=True):
        node._vjp(node.grad)
