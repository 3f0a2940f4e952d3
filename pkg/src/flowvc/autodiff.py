"""Reverse-mode automatic differentiation over dense numpy arrays.

Every trainable computation in this package runs through the `Tensor`
class below.  Each operation records its inputs and a vector-Jacobian
closure; `Tensor.backward()` walks the recorded graph in reverse
topological order and accumulates gradients into the participating
leaves.  Execution is single-threaded and deterministic for a fixed
seed; float32 is the default element type and float64 is supported for
high-precision gradient checking.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_",
    "matmul",
    "exp",
    "log",
    "tanh",
    "relu",
    "gelu",
    "sum_",
    "mean_",
    "softmax",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "stop_gradient",
    "grad_check",
    "randn",
    "zeros",
]

DEFAULT_DTYPE = np.float32

_GRAD_STATE = threading.local()  # per-thread so model instances stay independent


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class no_grad:
    """Context manager that suspends graph recording (inference paths)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_STATE.enabled = self._prev
        return False


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph ---------------------------------------------------------

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every participating leaf.

        `self` must be a scalar (size 1).  Leaves marked requires_grad
        accumulate across calls; call `zero_grad` between steps.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        for node in topo:
            if node is not self and (node._parents or not node.requires_grad):
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(node.grad)):
                if pg is None:
                    continue
                if not (parent.requires_grad or parent._parents):
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            if node is not self and not node.requires_grad:
                node.grad = None  # free intermediate storage promptly

    # -- operator sugar --------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _toposort(root: Tensor):
    order = []
    seen = set()
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


def _make(data, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = parents
    out._vjp = vjp
    return out


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(*tensors) -> bool:
    return _grad_enabled() and any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` over the axes numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    data = a.data + b.data
    if not _tracked(a, b):
        return _make(data, (), None)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp)


def sub(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    data = a.data - b.data
    if not _tracked(a, b):
        return _make(data, (), None)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), vjp)


def mul(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    data = a.data * b.data
    if not _tracked(a, b):
        return _make(data, (), None)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(data, (a, b), vjp)


def div(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    data = a.data / b.data
    if not _tracked(a, b):
        return _make(data, (), None)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _make(data, (a, b), vjp)


def neg(a):
    a = _coerce(a)
    data = -a.data
    if not _tracked(a):
        return _make(data, (), None)
    return _make(data, (a,), lambda g: (-g,))


def pow_(a, p: float):
    """Elementwise power with a constant exponent."""
    a = _coerce(a)
    p = float(p)
    data = a.data**p
    if not _tracked(a):
        return _make(data, (), None)
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(data, (a,), vjp)


def exp(a):
    a = _coerce(a)
    data = np.exp(a.data)
    if not _tracked(a):
        return _make(data, (), None)
    return _make(data, (a,), lambda g: (g * data,))


def log(a):
    a = _coerce(a)
    data = np.log(a.data)
    if not _tracked(a):
        return _make(data, (), None)
    ad = a.data
    return _make(data, (a,), lambda g: (g / ad,))


def tanh(a):
    a = _coerce(a)
    data = np.tanh(a.data)
    if not _tracked(a):
        return _make(data, (), None)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def relu(a):
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return _make(data, (), None)
    mask = (a.data > 0).astype(a.data.dtype)
    return _make(data, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Gaussian error linear unit (tanh approximation)."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)
    if not _tracked(a):
        return _make(data, (), None)

    def vjp(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _make(data, (a,), vjp)


# -- reductions ------------------------------------------------------------


def _restore_axes(g, axis, shape, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return _make(data, (), None)
    shape = a.data.shape

    def vjp(g):
        return (_restore_axes(g, axis, shape, keepdims).copy(),)

    return _make(data, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    a = _coerce(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return _make(data, (), None)
    shape = a.data.shape
    count = a.data.size / data.size

    def vjp(g):
        return (_restore_axes(g, axis, shape, keepdims) / count,)

    return _make(data, (a,), vjp)


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes.

    Gradient contract: d/da = g @ b^T, d/db = a^T @ g (batched
    accordingly).  Both operands must have ndim >= 2.
    """
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul shapes {a.data.shape} and {b.data.shape} are incompatible"
        )
    data = a.data @ b.data
    if not _tracked(a, b):
        return _make(data, (), None)
    ad, bd = a.data, b.data
    need_a = a.requires_grad or a._parents
    need_b = b.requires_grad or b._parents

    def vjp(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`.

    Outputs are positive, sum to one along `axis`, and are invariant to
    adding a constant to the inputs.
    """
    a = _coerce(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax requires finite inputs")
    # exponentiate in float64 for underflow headroom, return input dtype
    shifted = a.data.astype(np.float64) - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = (e / e.sum(axis=axis, keepdims=True)).astype(a.data.dtype)
    if not _tracked(a):
        return _make(data, (), None)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), vjp)


# -- shape manipulation -----------------------------------------------------


def reshape(a, shape):
    a = _coerce(a)
    data = a.data.reshape(shape)
    if not _tracked(a):
        return _make(data, (), None)
    orig = a.data.shape
    return _make(data, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None):
    a = _coerce(a)
    data = np.transpose(a.data, axes)
    if not _tracked(a):
        return _make(data, (), None)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(data, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return _make(data, (), None)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), vjp)


def _getitem(a, key):
    a = _coerce(a)
    data = a.data[key]
    if not _tracked(a):
        return _make(data, (), None)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make(data, (a,), vjp)


def gather_rows(a, indices):
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(
            f"gather_rows expects a 2-D table and 1-D indices, got {a.data.shape} and {idx.shape}"
        )
    data = a.data[idx]
    if not _tracked(a):
        return _make(data, (), None)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (a,), vjp)


def stop_gradient(a) -> Tensor:
    """Value of `a` with the graph severed (no gradient flows upstream)."""
    return _coerce(a).detach()


# -- construction helpers -----------------------------------------------------


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, scale=1.0, dtype=DEFAULT_DTYPE, requires_grad=False):
    data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


# -- verification -------------------------------------------------------------


def grad_check(f, params: dict, h: float = 1e-3) -> float:
    """Compare analytic gradients of `f` against central differences.

    `f` is a zero-argument callable returning a scalar Tensor built from
    the (requires_grad) tensors in `params`; it must be deterministic so
    the perturbed re-evaluations see the same computation.  Returns the
    max over parameter elements of |analytic - fd| / max(1, |fd|).
    """
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check requires a scalar function, got {out.shape}")
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: forward value is not finite")
    for p in params.values():
        p.zero_grad()
    out.backward()
    analytic = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = f().item()
                flat[i] = orig - h
                lo = f().item()
                flat[i] = orig
                fd = (hi - lo) / (2.0 * h)
                err = abs(float(ana[i]) - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst
