"""Dense real tensors with a minimal reverse-mode differentiation core.

The graph is define-by-run: each operation stores its input tensors and a
backward rule on its output, and ``backward()`` replays the recording once
in reverse topological order. Arrays are numpy underneath; float64 is the
default so gradient checks stay meaningful, float32 is accepted for faster
training runs.
"""

import threading

import numpy as np

from .errors import DimensionError, DomainError, OracleError, UsageError

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class _ThreadState(threading.local):
    # per-thread, so parallel eval-mode passes stay independent
    recording = True


_State = _ThreadState()


class no_grad:
    """Disable graph recording inside a ``with`` block (or as a decorator)."""

    def __enter__(self):
        self._previous = _State.recording
        _State.recording = False
        return self

    def __exit__(self, *exc):
        _State.recording = self._previous
        return False

    def __call__(self, fn):
        def wrapped(*args, **kwargs):
            with no_grad():
                return fn(*args, **kwargs)

        return wrapped


class Tensor:
    """A dense float array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_backward_ran")

    # keep numpy from consuming Tensors elementwise; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_ran = False

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

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flags})"

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis):
        return reduce_max(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b):
    """Lift the non-Tensor operand to a constant matching the other's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return Tensor(np.asarray(a, dtype=b.dtype)), b


def _record(data, parents, op):
    out = Tensor(data)
    if _State.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
    return out


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _pair(a, b)
    out = _record(a.data + b.data, (a, b), "add")
    if out._parents:
        def rule(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))

        out._backward_fn = rule
    return out


def sub(a, b):
    a, b = _pair(a, b)
    out = _record(a.data - b.data, (a, b), "sub")
    if out._parents:
        def rule(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.data.shape))

        out._backward_fn = rule
    return out


def mul(a, b):
    a, b = _pair(a, b)
    out = _record(a.data * b.data, (a, b), "mul")
    if out._parents:
        def rule(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        out._backward_fn = rule
    return out


def div(a, b):
    a, b = _pair(a, b)
    out = _record(a.data / b.data, (a, b), "div")
    if out._parents:
        def rule(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data),
                                            b.data.shape))

        out._backward_fn = rule
    return out


def neg(a):
    a = as_tensor(a)
    out = _record(-a.data, (a,), "neg")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, -g)
    return out


def matmul(a, b):
    """Matrix product for rank-2 operands, optionally batched on the left.

    Supported shapes: (m,k)@(k,p), (B,m,k)@(B,k,p), (B,m,k)@(k,p).
    """
    a, b = _pair(a, b)
    if not (2 <= a.ndim <= 3) or not (2 <= b.ndim <= 3):
        raise DimensionError(
            f"matmul expects rank-2 or rank-3 operands, got {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise DimensionError(
            f"matmul does not broadcast a rank-2 left operand: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"matmul batch extents disagree: {a.shape} @ {b.shape}")
    out = _record(a.data @ b.data, (a, b), "matmul")
    if out._parents:
        def rule(g):
            if a.requires_grad:
                _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                if b.ndim == 2 and a.ndim == 3:
                    gb = np.tensordot(a.data, g, axes=((0, 1), (0, 1)))
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                _accumulate(b, gb)

        out._backward_fn = rule
    return out


def relu(a):
    """Elementwise max(0, x); the gradient at exactly 0 is defined as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    out = _record(np.where(mask, a.data, 0.0), (a,), "relu")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, g * mask)
    return out


def exp(a):
    a = as_tensor(a)
    out = _record(np.exp(a.data), (a,), "exp")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, g * out.data)
    return out


def log(a):
    a = as_tensor(a)
    out = _record(np.log(a.data), (a,), "log")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, g / a.data)
    return out


def sqrt(a):
    a = as_tensor(a)
    root = np.sqrt(a.data)
    out = _record(root, (a,), "sqrt")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, g * 0.5 / root)
    return out


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _accurate_sum(data, axes):
    # accumulate float32 reductions at float64 so the result does not depend
    # on summation order beyond one final rounding
    if data.dtype == np.float32:
        return data.sum(axis=axes, dtype=np.float64).astype(np.float32)
    return data.sum(axis=axes)


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = _record(_accurate_sum(a.data, axes), (a,), "sum")
    if out._parents:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

        def rule(g):
            _accumulate(a, np.broadcast_to(g.reshape(kept), a.shape))

        out._backward_fn = rule
    return out


def reduce_mean(a, axis=None):
    """Arithmetic mean over ``axis``; the gradient spreads uniformly (1/n)."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise DomainError("cannot average over an empty axis")
    if a.dtype == np.float32:
        mean_data = (a.data.sum(axis=axes, dtype=np.float64)
                     / count).astype(np.float32)
    else:
        mean_data = a.data.mean(axis=axes)
    out = _record(mean_data, (a,), "mean")
    if out._parents:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

        def rule(g):
            _accumulate(a, np.broadcast_to(g.reshape(kept), a.shape) / count)

        out._backward_fn = rule
    return out


def reduce_max(a, axis):
    """Maximum over one axis; gradient routes to the first argmax on ties."""
    a = as_tensor(a)
    if not isinstance(axis, int):
        raise UsageError("reduce_max takes a single integer axis")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise DomainError("cannot take a maximum over an empty axis")
    idx = a.data.argmax(axis=axis)  # first occurrence on ties
    out = _record(a.data.max(axis=axis), (a,), "max")
    if out._parents:
        def rule(g):
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis)
            _accumulate(a, gx)

        out._backward_fn = rule
    return out


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; the gradient splits by original extents."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != base[i]
                                 for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat extents disagree off axis {axis}: "
                f"{[tuple(t.shape) for t in tensors]}")
    out = _record(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), "concat")
    if out._parents:
        offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def rule(g):
            for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
                if t.requires_grad:
                    _accumulate(t, piece)

        out._backward_fn = rule
    return out


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    out = _record(a.data.reshape(shape), (a,), "reshape")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose_last2(a):
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    out = _record(np.swapaxes(a.data, -1, -2), (a,), "transpose")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, np.swapaxes(g, -1, -2))
    return out


def repeat_rows(a, n):
    """Repeat a (..., k) tensor into (..., n, k); gradients sum back over rows."""
    a = as_tensor(a)
    out = _record(np.repeat(np.expand_dims(a.data, -2), n, axis=-2), (a,),
                  "repeat_rows")
    if out._parents:
        out._backward_fn = lambda g: _accumulate(a, g.sum(axis=-2))
    return out


def take_per_row(a, indices):
    """Pick one column per row of a rank-2 tensor: out[i] = a[i, indices[i]]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_per_row expects a rank-2 tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise DimensionError(
            f"index count {idx.shape} does not match row count {a.shape[0]}")
    rows = np.arange(a.shape[0])
    out = _record(a.data[rows, idx], (a,), "take_per_row")
    if out._parents:
        def rule(g):
            gx = np.zeros_like(a.data)
            np.add.at(gx, (rows, idx), g)
            _accumulate(a, gx)

        out._backward_fn = rule
    return out


def log_softmax(a):
    """log(softmax) along the last axis, computed in log-sum-exp form."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = _record(data, (a,), "log_softmax")
    if out._parents:
        def rule(g):
            _accumulate(a, g - np.exp(data) * g.sum(axis=-1, keepdims=True))

        out._backward_fn = rule
    return out


def graph_order(root):
    """Recorded nodes reachable from ``root``, every node after its inputs."""
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
            stack.append((parent, False))
    return order


def backward(root):
    """Populate ``grad`` on every reachable requires_grad tensor.

    The seed must be scalar, and a graph can only be traversed once; build a
    fresh forward pass before calling again.
    """
    if not isinstance(root, Tensor):
        raise UsageError("backward expects a Tensor")
    if root.size != 1:
        raise UsageError(f"backward seed must be scalar, got shape {root.shape}")
    if root._backward_ran:
        raise UsageError(
            "backward already ran for this graph; rebuild the forward pass first")
    root._backward_ran = True
    if not root.requires_grad:
        return
    order = graph_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def finite_diff_check(f, params, h=1e-4):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic scalar function of ``params`` (float64).
    Returns the maximum over all parameter components of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if h <= 0:
        raise UsageError("finite difference step must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise UsageError("gradient checking requires float64 parameters")
        if not p.requires_grad:
            raise UsageError("all checked parameters must require gradients")
    first = f()
    second = f()
    if first.size != 1:
        raise UsageError("finite_diff_check needs a scalar-valued function")
    if first.item() != second.item():
        raise OracleError(
            "function is not deterministic: two evaluations at the same "
            f"parameters gave {first.item()} and {second.item()}")
    for p in params:
        p.grad = None
    backward(first)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    with no_grad():
        for p, ref in zip(params, analytic):
            if not p.data.flags["C_CONTIGUOUS"]:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)  # view; perturbations hit p.data
            grads = ref.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                upper = f().item()
                flat[i] = orig - h
                lower = f().item()
                flat[i] = orig
                numeric = (upper - lower) / (2.0 * h)
                err = abs(grads[i] - numeric) / max(1.0, abs(grads[i]), abs(numeric))
                worst = max(worst, err)
    return worst
