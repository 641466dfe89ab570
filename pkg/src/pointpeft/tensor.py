"""Dense tensors with reverse-mode automatic differentiation (NumPy backend).

Every differentiable primitive records its parents and a closure mapping the
output gradient to one gradient per parent. ``grad`` walks that tape once in
reverse topological order and accumulates contributions, so a tensor used in
several places (a shared weight, for instance) receives the sum.

Shapes are strict. Binary elementwise ops accept two operands of identical
shape, or one operand that broadcasts one-directionally onto the other
(missing leading axes, or size-1 axes). That covers row-wise bias addition,
batch-shared parameters and keepdims-style normalisation; anything else is a
``ShapeError``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, a, b=None, detail: str = ""):
        self.op = op
        self.shapes = (tuple(a), None if b is None else tuple(b))
        msg = f"{op}: incompatible shapes {tuple(a)}"
        if b is not None:
            msg += f" and {tuple(b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register an op defined outside this module.

    ``backward(g)`` must return one array (or None) per parent, each shaped
    like that parent.
    """
    return _make(np.asarray(data), parents, backward)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor) -> dict[int, np.ndarray]:
    """Return gradients of ``loss`` keyed by ``id`` of every reachable node."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError("backward", pg.shape, p.shape, "gradient shape")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        if node._parents:
            # interior gradient no longer needed
            del grads[id(node)]
    return grads


def grad(loss: Tensor, params: Iterable[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named tensor that requires grad.

    Parameters that do not require grad are skipped entirely; trainable
    parameters unreachable from ``loss`` get zeros.
    """
    raw = backprop(loss)
    out = {}
    for name, p in params:
        if not p.requires_grad:
            continue
        g = raw.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(op: str, big: tuple, small: tuple) -> bool:
    if len(small) > len(big):
        return False
    for b, s in zip(big[::-1], small[::-1]):
        if s != b and s != 1:
            return False
    return True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if _check_broadcast(op, a.shape, b.shape) or _check_broadcast(op, b.shape, a.shape):
        return
    raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, sa) if a.requires_grad else None,
            _unbroadcast(g * ad, sb) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def sqrt(a: Tensor) -> Tensor:
    """Square root whose gradient at exactly zero is taken as zero."""
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(g.dtype),)

    return _make(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _make(out.astype(x.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., m, k).

    ``b`` is either a plain (k, n) matrix shared across the leading axes of
    ``a``, or (..., k, n) with leading axes identical to ``a``'s.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, "batch axes differ")
    if b.ndim == 2:
        return linear(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x (..., k), w (k, n), b (n,), run as one flattened gemm."""
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    k, n = w.shape
    if b is not None and b.shape != (n,):
        raise ShapeError("linear", w.shape, b.shape, "bias")
    x2 = np.ascontiguousarray(x.data).reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    wd = w.data

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)  # strided views miss BLAS
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(x.shape[:-1] + (n,)), parents, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape, f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        parts = []
        for lo, hi, t in zip(bounds[:-1], bounds[1:], tensors):
            if not t.requires_grad:
                parts.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(out, tuple(tensors), backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], (a,), backward)


def gather(a: Tensor, idx, batched: bool = False) -> Tensor:
    """Row gather.

    Unbatched: ``a`` is (M, ...) and the result is ``a[idx]``.
    Batched: ``a`` is (B, M, ...), ``idx`` is (B, ...) and row ``b`` of the
    result reads from ``a[b]``.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if batched:
        if a.ndim < 2 or idx.ndim < 1 or idx.shape[0] != a.shape[0]:
            raise ShapeError("gather", a.shape, idx.shape, "batch axes differ")
        rows = a.shape[1]
    else:
        rows = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError("gather", a.shape, idx.shape, "index out of range")

    if batched:
        B = a.shape[0]
        bidx = np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1))
        out = a.data[bidx, idx]
        flat = (idx + bidx * rows).reshape(-1)
    else:
        out = a.data[idx]
        flat = idx.reshape(-1)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        tail = shape[2:] if batched else shape[1:]
        n = shape[0] * rows if batched else rows
        # scatter-add as a sparse product; much faster than np.add.at
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=dtype), (flat, np.arange(flat.size))), shape=(n, flat.size)
        )
        acc = scatter @ g.reshape(flat.size, -1)
        return (np.asarray(acc, dtype=dtype).reshape(shape),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


def max(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    ax = axis % a.ndim
    x = a.data
    shape, dtype = a.shape, a.dtype

    def backward(g):
        # argmax only when a gradient is actually needed
        arg = np.expand_dims(x.argmax(axis=ax), ax)
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return _make(x.max(axis=ax, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# normalisation


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature affine."""
    D = x.shape[-1]
    if weight.shape != (D,) or bias.shape != (D,):
        raise ShapeError("layer_norm", x.shape, weight.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = weight.data
    out = xhat * w + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * w
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gw, gb

    return _make(out.astype(x.dtype), (x, weight, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under (B, C) logits."""
    labels = np.asarray(labels, dtype=np.intp)
    B, C = logits.shape
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    return scale(sum(mul(log_softmax(logits), Tensor(onehot))), -1.0 / B)
