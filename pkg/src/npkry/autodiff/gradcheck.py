"""Finite-difference validation of reverse-mode gradients."""

import numpy as np

from .tape import Tape

__all__ = ["central_difference", "grad_check", "value_and_grad"]


def value_and_grad(f, theta):
    """Evaluate ``f`` on a fresh tape and return ``(value, gradient)``.

    ``f`` receives the parameter Variable and must return a scalar Variable.
    """
    tape = Tape()
    th = tape.leaf(np.array(theta, dtype=np.float64))
    out = f(th)
    tape.backward(out)
    return float(out.value), th.grad.copy()


def central_difference(f, theta, step=1e-6):
    """Component-wise central differences of a scalar function of arrays."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(np.asarray(f(theta)))
        flat[i] = orig - step
        fm = float(np.asarray(f(theta)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def grad_check(f, theta0, step=1e-6):
    """Maximum deviation between reverse-mode and central-difference gradients.

    ``f`` must accept either a plain array (returning a float) or a tape
    Variable (returning a scalar Variable); ops from :mod:`npkry.autodiff.ops`
    do both. The deviation is ``max|g - g_fd| / max|g_fd|``.
    """
    _, g = value_and_grad(f, theta0)
    g_fd = central_difference(f, theta0, step)
    scale = max(np.max(np.abs(g_fd)), np.finfo(float).tiny)
    return float(np.max(np.abs(g - g_fd)) / scale)
