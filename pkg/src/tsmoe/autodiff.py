"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray plus the closures needed to propagate
gradients to its parents. Operations build the DAG eagerly; :func:`backward`
walks it once in reverse topological order and returns a gradient per named
parameter. Constants (inputs, masks) are untracked, so no work is spent on
their gradients.

Float64 is the default and what every tolerance in the test suite assumes;
float32 graphs work the same way and are opt-in for faster training runs.
"""

import numpy as np

from . import kernels


class NumericsError(RuntimeError):
    """A non-finite value or a malformed graph was encountered."""


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("data", "parents", "vjps", "grad", "track")

    def __init__(self, data, parents=(), vjps=(), track=None):
        self.data = data
        self.parents = parents
        self.vjps = vjps
        self.grad = None
        if track is None:
            track = any(p.track for p in parents)
        self.track = track

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, track={self.track})"

    # operator sugar; scalars and ndarrays are folded in as constants
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(value, dtype=np.float64):
    """Wrap a value as an untracked graph leaf."""
    return Tensor(np.asarray(value, dtype=dtype), track=False)


def parameter(value, dtype=np.float64):
    """Wrap a value as a tracked graph leaf (a trainable tensor)."""
    return Tensor(np.array(value, dtype=dtype), track=True)


def _coerce(other, like):
    if isinstance(other, Tensor):
        return other
    return constant(other, dtype=like.data.dtype)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    return Tensor(a.data + b.data, (a, b),
                  (lambda g: _unbroadcast(g, a.data.shape),
                   lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b):
    return Tensor(a.data - b.data, (a, b),
                  (lambda g: _unbroadcast(g, a.data.shape),
                   lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    return Tensor(a.data * b.data, (a, b),
                  (lambda g: _unbroadcast(g * b.data, a.data.shape),
                   lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    out = a.data / b.data
    return Tensor(out, (a, b),
                  (lambda g: _unbroadcast(g / b.data, a.data.shape),
                   lambda g: _unbroadcast(-g * out / b.data, b.data.shape)))


def neg(a):
    return Tensor(-a.data, (a,), (lambda g: -g,))


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, (a,), (lambda g: g * out,))


def log(a):
    return Tensor(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor(out, (a,), (lambda g: g * (0.5 / out),))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor(out, (a,), (lambda g: g * (1.0 - out * out),))


def square(a):
    return Tensor(a.data * a.data, (a,), (lambda g: g * (2.0 * a.data),))


def gelu(a):
    return Tensor(kernels.gelu_fwd(a.data), (a,),
                  (lambda g: kernels.gelu_bwd(a.data, g),))


def softplus(a):
    return Tensor(kernels.softplus_fwd(a.data), (a,),
                  (lambda g: kernels.softplus_bwd(a.data, g),))


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return Tensor(np.matmul(a.data, b.data), (a, b), (vjp_a, vjp_b))


def transpose(a, axes):
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), (a,),
                  (lambda g: np.transpose(g, inv),))


def reshape(a, shape):
    return Tensor(np.reshape(a.data, shape), (a,),
                  (lambda g: np.reshape(g, a.data.shape),))


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(a.data.shape, axis)

    def vjp(g):
        return np.broadcast_to(np.reshape(g, kshape), a.data.shape).copy()

    return Tensor(out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(a.data.shape, axis)
    count = a.data.size // max(int(np.prod(kshape)), 1)

    def vjp(g):
        return np.broadcast_to(np.reshape(g, kshape), a.data.shape) / count

    return Tensor(out, (a,), (vjp,))


def getitem(a, idx):
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return full

    return Tensor(out, (a,), (vjp,))


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return Tensor(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def take_rows(a, idx):
    """Gather rows along axis 0; backward scatter-adds (duplicates allowed)."""
    idx = np.asarray(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return Tensor(a.data[idx], (a,), (vjp,))


def take_cols_2d(a, idx):
    """Per-row column gather on a 2-D tensor: out[i, k] = a[i, idx[i, k]]."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])[:, None]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return full

    return Tensor(a.data[rows, idx], (a,), (vjp,))


def scatter_rows(src, row_idx, n_rows):
    """Place 2-D rows of ``src`` into a zero (n_rows, D) tensor, adding duplicates."""
    row_idx = np.asarray(row_idx)
    out = np.zeros((n_rows, src.data.shape[1]), dtype=src.data.dtype)
    np.add.at(out, row_idx, src.data)
    return Tensor(out, (src,), (lambda g: g[row_idx],))


def softmax(a):
    out = kernels.softmax_fwd(a.data)
    return Tensor(out, (a,), (lambda g: kernels.softmax_bwd(out, g),))


def logsumexp(a):
    lse = kernels.logsumexp_fwd(a.data)
    return Tensor(lse, (a,), (lambda g: kernels.logsumexp_bwd(a.data, lse, g),))


def layer_norm(x, gain, bias, eps=1e-5):
    y, xhat, inv_std = kernels.layernorm_fwd(x.data, gain.data, bias.data, eps)
    cache = {}

    def run(g):
        if "out" not in cache:
            cache["out"] = kernels.layernorm_bwd(xhat, inv_std, gain.data, g)
        return cache["out"]

    return Tensor(y, (x, gain, bias),
                  (lambda g: run(g)[0], lambda g: run(g)[1], lambda g: run(g)[2]))


def _toposort(root):
    """Deterministic post-order over the DAG rooted at ``root`` (tracked nodes only)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.track:
            continue
        visited.add(id(node))
        stack.append((node, True))
        # reversed so parents are visited left-to-right, keeping order stable
        for p in reversed(node.parents):
            if p.track and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, params):
    """Accumulate d(loss)/d(param) for every named parameter.

    ``params`` maps names to leaf Tensors. Parameters the loss does not reach
    receive zero gradients. Raises :class:`NumericsError` for a non-scalar
    loss or non-finite gradients.
    """
    if loss.data.shape != ():
        raise NumericsError(f"loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NumericsError("loss is not finite")

    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.data.dtype)

    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.track:
                continue
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg

    grads = {}
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        else:
            g = np.asarray(g)
            if g.shape != tensor.data.shape:
                g = np.broadcast_to(g, tensor.data.shape).copy()
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g

    for node in order:
        node.grad = None
    return grads


class ParamStore:
    """Ordered name -> Tensor registry with a frozen (non-trainable) subset."""

    def __init__(self):
        self._tensors = {}
        self.frozen = set()

    def add(self, name, value, frozen=False, dtype=np.float64):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=dtype), track=not frozen)
        self._tensors[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self):
        return {k: v for k, v in self._tensors.items() if k not in self.frozen}

    def arrays(self):
        return {k: v.data for k, v in self._tensors.items()}

    def load_arrays(self, arrays):
        for name, value in arrays.items():
            t = self._tensors[name]
            if t.data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{t.data.shape} vs {value.shape}")
            t.data = np.array(value, dtype=t.data.dtype)
