"""Numerical kernels with a compiled core and a pure-numpy fallback.

The compiled Cython module (``tsmoe.kernels._fast``) is used when it was
built; otherwise the numpy reference (``tsmoe.kernels._ref``) takes over.
Selection can be forced with the ``TSMOE_KERNELS`` environment variable
(``auto`` | ``python`` | ``compiled``) or at runtime via :func:`set_backend`.

All public functions accept float32/float64 arrays of any shape; row kernels
(softmax, logsumexp, layernorm) reduce over the last axis.
"""

import os

import numpy as np

from . import _ref

try:
    from . import _fast
except ImportError:
    _fast = None

_impl = None
_name = None


def available_backends():
    names = ["python"]
    if _fast is not None:
        names.append("compiled")
    return names


def set_backend(name):
    """Select the kernel implementation: 'python', 'compiled' or 'auto'."""
    global _impl, _name
    if name == "auto":
        name = "compiled" if _fast is not None else "python"
    if name == "python":
        _impl = _ref
    elif name == "compiled":
        if _fast is None:
            raise RuntimeError("compiled kernels requested but the extension is not built")
        _impl = _fast
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    _name = name


def backend_name():
    return _name


set_backend(os.environ.get("TSMOE_KERNELS", "auto"))


def _flat(x):
    return np.ascontiguousarray(x).reshape(-1)


def _rows(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1])


def gelu_fwd(x):
    out = np.empty_like(x, order="C")
    _impl.gelu_fwd_into(_flat(x), out.reshape(-1))
    return out


def gelu_bwd(x, gy):
    out = np.empty_like(x, order="C")
    _impl.gelu_bwd_into(_flat(x), _flat(gy), out.reshape(-1))
    return out


def softplus_fwd(x):
    out = np.empty_like(x, order="C")
    _impl.softplus_fwd_into(_flat(x), out.reshape(-1))
    return out


def softplus_bwd(x, gy):
    out = np.empty_like(x, order="C")
    _impl.softplus_bwd_into(_flat(x), _flat(gy), out.reshape(-1))
    return out


def softmax_fwd(x):
    out = np.empty_like(x, order="C")
    _impl.softmax_fwd_into(_rows(x), out.reshape(-1, x.shape[-1]))
    return out


def softmax_bwd(y, gy):
    out = np.empty_like(y, order="C")
    _impl.softmax_bwd_into(_rows(y), _rows(gy), out.reshape(-1, y.shape[-1]))
    return out


def logsumexp_fwd(x):
    lse = np.empty(x.shape[:-1], dtype=x.dtype, order="C")
    _impl.logsumexp_fwd_into(_rows(x), lse.reshape(-1))
    return lse


def logsumexp_bwd(x, lse, gy):
    out = np.empty_like(x, order="C")
    _impl.logsumexp_bwd_into(_rows(x), _flat(lse), _flat(gy),
                             out.reshape(-1, x.shape[-1]))
    return out


def layernorm_fwd(x, gain, bias, eps):
    y = np.empty_like(x, order="C")
    xhat = np.empty_like(x, order="C")
    inv_std = np.empty(x.shape[:-1], dtype=x.dtype, order="C")
    n = x.shape[-1]
    _impl.layernorm_fwd_into(_rows(x), _flat(gain), _flat(bias), float(eps),
                             y.reshape(-1, n), xhat.reshape(-1, n),
                             inv_std.reshape(-1))
    return y, xhat, inv_std


def layernorm_bwd(xhat, inv_std, gain, gy):
    gx = np.empty_like(xhat, order="C")
    ggain = np.empty_like(gain, order="C")
    gbias = np.empty_like(gain, order="C")
    n = xhat.shape[-1]
    _impl.layernorm_bwd_into(_rows(xhat), _flat(inv_std), _flat(gain),
                             _rows(gy), gx.reshape(-1, n), ggain, gbias)
    return gx, ggain, gbias
