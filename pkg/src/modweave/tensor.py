"""Dense tensors with reverse-mode differentiation over NumPy arrays.

The graph is define-by-run: every op returns a new Tensor holding its
inputs in `_parents` and a closure in `_vjp` that maps the upstream
gradient to per-parent gradients. `backward()` topologically sorts the
graph and accumulates gradients into every tensor that requires them.
Gradients of repeated `backward()` calls add up; `zero_grad()` resets.

Training runs in float32, oracle and gradient-check work in float64;
`set_default_dtype` flips the dtype every new tensor is created with.
Hot elementwise/reduction math is delegated to `kernels` (compiled or
NumPy, chosen at import); matmul goes straight to NumPy's BLAS.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DataError, ShapeError

DEFAULT_DTYPE = np.float32

GELU_COEF = kernels.GELU_C0  # sqrt(2/pi) to the digits both backends use


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"default dtype must be float32 or float64, got {dtype}")
    DEFAULT_DTYPE = dtype


def default_dtype():
    return DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarray or scalars, not another Tensor")
        if isinstance(data, np.ndarray):
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; divide by scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap array-like data, casting floats to the current default dtype."""
    arr = np.asarray(data)
    if arr.dtype != DEFAULT_DTYPE:
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._vjp is not None):
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not (parent.requires_grad or parent._vjp is not None):
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _make(data, parents, vjp) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req and not any(p._vjp is not None for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=req, _parents=tuple(parents), _vjp=vjp)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), vjp)


def gelu(a) -> Tensor:
    """tanh-form gaussian error linear unit with coefficient GELU_COEF."""
    a = _as_tensor(a)
    flat = np.ascontiguousarray(a.data.reshape(-1))
    out = kernels.gelu_fwd(flat).reshape(a.data.shape)

    def vjp(g):
        gflat = np.ascontiguousarray(g.reshape(-1))
        return (kernels.gelu_bwd(flat, gflat).reshape(a.data.shape),)

    return _make(out, (a,), vjp)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d+ operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad or a._vjp is not None:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad or b._vjp is not None:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


# -- shape moves ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeError(
            f"narrow [{start}:{start + length}) exceeds axis {axis} of {a.data.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), vjp)


# -- reductions -----------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    inv = 1.0 / float(count)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * inv, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * inv, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


# -- normalized nonlinearities ---------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    last = a.ndim - 1
    moved = a.data if ax == last else np.moveaxis(a.data, ax, last)
    d = moved.shape[-1]
    flat = np.ascontiguousarray(moved.reshape(-1, d))
    y = kernels.softmax_fwd(flat)
    out = y.reshape(moved.shape)
    if ax != last:
        out = np.moveaxis(out, last, ax)

    def vjp(g):
        gm = g if ax == last else np.moveaxis(g, ax, last)
        gflat = np.ascontiguousarray(gm.reshape(-1, d))
        gx = kernels.softmax_bwd(y, gflat).reshape(moved.shape)
        if ax != last:
            gx = np.moveaxis(gx, last, ax)
        return (gx,)

    return _make(out, (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis {d}")
    x2 = np.ascontiguousarray(a.data.reshape(-1, d))
    y2, mean, rstd = kernels.layernorm_fwd(x2, gain.data, bias.data, eps)
    out = y2.reshape(a.data.shape)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = kernels.layernorm_bwd(x2, gain.data, mean, rstd, g2)
        return gx.reshape(a.data.shape), ggain, gbias

    return _make(out, (a, gain, bias), vjp)


# -- indexed access ---------------------------------------------------------

def embedding(table, ids) -> Tensor:
    """Row lookup into `table` (V, d) with integer `ids` of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise DataError(f"symbol id {bad} outside table of {table.data.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), vjp)


def gather_rows(a, idx) -> Tensor:
    """Pick token rows: (B, n, d) with idx (B, k) -> (B, k, d); 2-d likewise."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if a.ndim == 2:
        out = a.data[idx]

        def vjp2(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        return _make(out, (a,), vjp2)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"gather_rows got tokens {a.data.shape}, idx {idx.shape}")
    out = np.take_along_axis(a.data, idx[:, :, None], axis=1)
    rows = np.arange(a.data.shape[0])[:, None]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(out, (a,), vjp)


def scatter_rows(values, idx, n: int) -> Tensor:
    """Spread token rows (B, k, d) to (B, n, d) at idx (B, k); zeros elsewhere."""
    values = _as_tensor(values)
    idx = np.asarray(idx)
    if values.ndim == 2:
        out = np.zeros((n, values.data.shape[-1]), dtype=values.data.dtype)
        np.add.at(out, idx, values.data)

        def vjp2(g):
            return (g[idx],)

        return _make(out, (values,), vjp2)
    if values.ndim != 3 or idx.shape != values.data.shape[:2]:
        raise ShapeError(f"scatter_rows got values {values.data.shape}, idx {idx.shape}")
    b, _, d = values.data.shape
    rows = np.arange(b)[:, None]
    out = np.zeros((b, n, d), dtype=values.data.dtype)
    np.add.at(out, (rows, idx), values.data)

    def vjp(g):
        return (np.take_along_axis(g, idx[:, :, None], axis=1),)

    return _make(out, (values,), vjp)


def dropout(a, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None."""
    if rate <= 0.0 or rng is None:
        return _as_tensor(a)
    a = _as_tensor(a)
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    return mul(a, Tensor(keep * (1.0 / (1.0 - rate))))


# -- losses -----------------------------------------------------------------

def l2_loss(pred, target) -> Tensor:
    """Mean squared difference over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"l2_loss shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    scale = 2.0 / float(diff.size)

    def vjp(g):
        gp = g * scale * diff
        return gp, -gp

    return _make(out, (pred, target), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the labeled class; fused gradient."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy wants logits (B, K) and labels (B,), got "
            f"{logits.data.shape} and {labels.shape}")
    b, k = logits.data.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
        raise DataError(f"label {bad} outside [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    nll = (np.log(se) + m - z[rows, labels][:, None]).reshape(-1)
    out = np.asarray(nll.mean())

    def vjp(g):
        p = e / se
        p[rows, labels] -= 1.0
        return (g * p * (1.0 / b),)

    return _make(out, (logits,), vjp)
