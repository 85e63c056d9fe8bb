"""Differentiable operations.

Every op accepts plain arrays or :class:`Variable` arguments. With no
Variable among the inputs the op simply returns the numpy result, so the same
forward code serves both the plain and the recorded evaluation paths.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tape import Variable

__all__ = [
    "OPS",
    "abs",
    "add",
    "axpy",
    "concat_channels",
    "conv3d",
    "conv3d_transposed",
    "divide",
    "dot",
    "givens",
    "hadamard",
    "index",
    "leaky_relu",
    "matvec_const",
    "maxpool3d",
    "mean",
    "norm2",
    "reshape",
    "scale",
    "sqrt",
    "stack",
    "sub",
    "sum",
    "value_of",
]

OPS = (
    "add", "sub", "scale", "hadamard", "dot", "norm2", "axpy", "divide", "sqrt",
    "abs", "matvec_const", "conv3d", "conv3d_transposed", "maxpool3d",
    "concat_channels", "leaky_relu", "reshape", "index", "stack", "sum", "mean",
    "givens",
)


def value_of(x):
    return x.value if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)


def _emit(kind, args, value, vjp):
    """Record ``value`` if any of ``args`` is a Variable.

    ``vjp(g)`` must return one gradient per entry of ``args``; entries for
    non-Variable arguments are dropped.
    """
    vars_ = [a for a in args if isinstance(a, Variable)]
    if not vars_:
        return value
    tape = vars_[0].tape
    if any(v.tape is not tape for v in vars_):
        raise ValueError(f"{kind}: operands live on different tapes")
    mask = [isinstance(a, Variable) for a in args]

    def node_vjp(g):
        grads = vjp(g)
        return tuple(gi for gi, m in zip(grads, mask) if m)

    return tape.record(kind, vars_, value, node_vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}") from None


# --- elementwise algebra ----------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("add", av, bv)
    return _emit("add", (a, b), av + bv,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("sub", av, bv)
    return _emit("sub", (a, b), av - bv,
                 lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def hadamard(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("hadamard", av, bv)
    return _emit("hadamard", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def divide(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("divide", av, bv)
    if np.any(bv == 0.0):
        raise ZeroDivisionError("divide: zero denominator")
    q = av / bv
    return _emit("divide", (a, b), q,
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * q / bv, bv.shape)))


def scale(x, alpha: float):
    xv = value_of(x)
    alpha = float(alpha)
    return _emit("scale", (x,), alpha * xv, lambda g: (alpha * g,))


def axpy(a, x, y):
    """``a * x + y`` with ``a`` a scalar (Variable or float)."""
    av, xv, yv = value_of(a), value_of(x), value_of(y)
    if av.size != 1:
        raise ValueError("axpy: coefficient must be a scalar")
    if xv.shape != yv.shape:
        raise ValueError(f"axpy: shape mismatch {xv.shape} vs {yv.shape}")
    return _emit("axpy", (a, x, y), av * xv + yv,
                 lambda g: (np.reshape(np.vdot(g, xv), av.shape), av * g, g))


def sqrt(x):
    xv = value_of(x)
    if np.any(xv <= 0.0):
        raise ZeroDivisionError("sqrt: argument must be positive")
    y = np.sqrt(xv)
    return _emit("sqrt", (x,), y, lambda g: (0.5 * g / y,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    xv = value_of(x)
    return _emit("abs", (x,), np.abs(xv), lambda g: (g * np.sign(xv),))


def leaky_relu(x, slope=0.01):
    xv = value_of(x)
    pos = xv > 0
    return _emit("leaky_relu", (x,), np.where(pos, xv, slope * xv),
                 lambda g: (np.where(pos, g, slope * g),))


# --- reductions -------------------------------------------------------------


def dot(x, y):
    xv, yv = value_of(x), value_of(y)
    if xv.shape != yv.shape:
        raise ValueError(f"dot: shape mismatch {xv.shape} vs {yv.shape}")
    return _emit("dot", (x, y), np.asarray(np.vdot(xv, yv)), lambda g: (g * yv, g * xv))


def norm2(x):
    xv = value_of(x)
    n = np.sqrt(np.vdot(xv, xv))
    if n == 0.0:
        raise ZeroDivisionError("norm2: gradient undefined at the zero vector")
    return _emit("norm2", (x,), np.asarray(n), lambda g: (g * xv / n,))


def sum(x):  # noqa: A001
    xv = value_of(x)
    return _emit("sum", (x,), np.asarray(xv.sum()), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def mean(x):
    xv = value_of(x)
    n = xv.size
    return _emit("mean", (x,), np.asarray(xv.mean()),
                 lambda g: (np.full(xv.shape, float(g) / n),))


# --- structural -------------------------------------------------------------


def reshape(x, shape):
    xv = value_of(x)
    return _emit("reshape", (x,), xv.reshape(shape), lambda g: (g.reshape(xv.shape),))


def index(x, key):
    xv = value_of(x)
    out = np.array(xv[key], dtype=np.float64)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("index", (x,), out, vjp)


def stack(xs):
    vals = [value_of(x) for x in xs]
    n = len(vals)
    return _emit("stack", tuple(xs), np.stack(vals), lambda g: tuple(g[i] for i in range(n)))


def concat_channels(xs):
    vals = [value_of(x) for x in xs]
    splits = np.cumsum([v.shape[1] for v in vals])[:-1]
    return _emit("concat_channels", tuple(xs), np.concatenate(vals, axis=1),
                 lambda g: tuple(np.split(g, splits, axis=1)))


# --- linear operators -------------------------------------------------------


def matvec_const(A, x):
    """``A @ x`` for a constant sparse ``A``; ``x`` may be ``(N,)`` or ``(B, N)``."""
    xv = value_of(x)
    if xv.shape[-1] != A.cols:
        raise ValueError(f"matvec_const: A is {A.shape}, x has shape {xv.shape}")
    M = A.to_scipy()
    if xv.ndim == 1:
        return _emit("matvec_const", (x,), M @ xv, lambda g: (M.T @ g,))
    return _emit("matvec_const", (x,), (M @ xv.T).T, lambda g: ((M.T @ g.T).T,))


def conv3d(x, w, bias=None):
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 5 or wv.ndim != 5:
        raise ValueError("conv3d: expected 5-D input and kernel")
    y = kernels.conv3d_forward(xv, wv)
    if bias is not None:
        y = y + value_of(bias).reshape(1, -1, 1, 1, 1)

    def vjp(g):
        dx, dw = kernels.conv3d_backward(xv, wv, g)
        return (dx, dw) + ((g.sum(axis=(0, 2, 3, 4)),) if bias is not None else ())

    args = (x, w) + ((bias,) if bias is not None else ())
    return _emit("conv3d", args, y, vjp)


def conv3d_transposed(x, w, bias=None, stride=2, out_size=None):
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 5 or wv.ndim != 5:
        raise ValueError("conv3d_transposed: expected 5-D input and kernel")
    k = wv.shape[2]
    if out_size is None:
        out_size = tuple(kernels.transposed_full_size(m, k, stride) for m in xv.shape[2:])
    y = kernels.conv3d_transposed_forward(xv, wv, stride, out_size)
    if bias is not None:
        y = y + value_of(bias).reshape(1, -1, 1, 1, 1)

    def vjp(g):
        dx, dw = kernels.conv3d_transposed_backward(xv, wv, stride, g)
        return (dx, dw) + ((g.sum(axis=(0, 2, 3, 4)),) if bias is not None else ())

    args = (x, w) + ((bias,) if bias is not None else ())
    return _emit("conv3d_transposed", args, y, vjp)


def maxpool3d(x):
    xv = value_of(x)
    y, idx = kernels.maxpool3d_forward(xv)
    return _emit("maxpool3d", (x,), y, lambda g: (kernels.maxpool3d_backward(xv.shape, idx, g),))


# --- fused Givens -----------------------------------------------------------


def givens(h1, h2):
    """Fused rotation node returning ``[c, s, r]`` for the pair ``(h1, h2)``.

    ``r`` takes the sign of ``h1`` (positive when ``h1 == 0``). The adjoint
    uses the closed-form partials, e.g. ``ds/dh1 = -h1 h2 / r^3``.
    """
    a, b = float(value_of(h1)), float(value_of(h2))
    rho = float(np.hypot(a, b))
    if rho == 0.0:
        raise ZeroDivisionError("givens: both entries are zero")
    r = -rho if a < 0 else rho
    c, s = a / r, b / r
    r3 = r ** 3

    def vjp(g):
        gc, gs, gr = g
        d1 = gc * (b * b / r3) + gs * (-a * b / r3) + gr * c
        d2 = gc * (-a * b / r3) + gs * (a * a / r3) + gr * s
        return (np.reshape(d1, np.shape(value_of(h1))), np.reshape(d2, np.shape(value_of(h2))))

    return _emit("givens", (h1, h2), np.array([c, s, r]), vjp)
