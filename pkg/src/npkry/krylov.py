"""Flexible GMRES, the differentiable Arnoldi-Givens process and angle diagnostics.

The sine ``|s_j|`` of the ``j``-th Givens rotation equals the sine of the
principal angle between the residual ``r_{j-1}`` and the subspace
``W_j = span{A z_0, ..., A z_{j-1}}``, and the residual norms obey
``||r_j|| = |s_j| ||r_{j-1}||``. :func:`extract_sines` recovers the sines
from a Hessenberg matrix by two independent routes, and
:func:`principal_angle_sine` / :func:`projection_sines` compute them
directly from the geometry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import unet
from .autodiff import ops
from .autodiff.tape import Variable
from .linalg import (
    ARNOLDI_BREAKDOWN_TOL,
    BREAKDOWN_TOL,
    Breakdown,
    GivensPair,
    SparseMatrix,
    _apply_rotations,
    _back_substitute,
    as_vector,
    givens_compute,
    mgs_orthogonalize,
)

__all__ = [
    "DiagonalPreconditioner",
    "ExactInversePreconditioner",
    "IdentityPreconditioner",
    "KrylovTrace",
    "NetworkPreconditioner",
    "NumericalHealthWarning",
    "ag_m",
    "extract_sines",
    "fgmres",
    "principal_angle_sine",
    "projection_sines",
]


class NumericalHealthWarning(RuntimeWarning):
    """Recursive and explicit residuals disagree beyond tolerance."""


# --- preconditioners --------------------------------------------------------


class IdentityPreconditioner:
    def apply(self, v, instance=None):
        return np.array(v, dtype=np.float64)

    def bind(self, theta=None):
        return lambda v: v

    def __call__(self, v):
        return self.apply(v)


class DiagonalPreconditioner:
    """``z = diag * v``."""

    def __init__(self, diag):
        self.diag = as_vector(diag, name="diag")

    def apply(self, v, instance=None):
        return self.diag * v

    def bind(self, theta=None):
        return lambda v: ops.hadamard(self.diag, v)

    def __call__(self, v):
        return self.apply(v)


class ExactInversePreconditioner:
    """Dense LU solve with ``A``; a reference stub for small systems."""

    def __init__(self, A: SparseMatrix):
        self._lu = scipy.linalg.lu_factor(A.toarray())

    def apply(self, v, instance=None):
        return scipy.linalg.lu_solve(self._lu, np.asarray(v, dtype=np.float64))

    def bind(self, theta=None):
        return lambda v: self.apply(ops.value_of(v))

    def __call__(self, v):
        return self.apply(v)


class NetworkPreconditioner:
    """Learned operator ``v -> N_theta(v, d)`` for one problem instance."""

    def __init__(self, params, d):
        self.params = params
        self.desc = unet.descriptor_of(params)
        self.d = as_vector(d, self.desc.n, name="d")

    def apply(self, v, instance=None):
        d = self.d if instance is None else instance.d
        return unet.forward(self.params, np.asarray(v, dtype=np.float64), d, desc=self.desc)

    def bind(self, theta):
        """Return ``v -> N_theta(v)`` recording on ``theta``'s tape."""
        return lambda v: unet.forward(self.params, v, self.d, theta=theta, desc=self.desc)

    def __call__(self, v):
        return self.apply(v)


def _as_callable(precond):
    if precond is None:
        return lambda v: v
    if hasattr(precond, "apply"):
        return precond.apply
    return precond


# --- flexible GMRES ---------------------------------------------------------


@dataclass
class KrylovTrace:
    """Everything recorded by one flexible GMRES run.

    ``H`` is ``(m+1, m)`` in its unrotated Arnoldi form. ``sines[j-1]`` is
    ``|s_j|`` and ``res_norms[j]`` the recursive residual norm after ``j``
    steps. ``V`` holds ``m+1`` basis vectors unless the run ended in a
    breakdown, in which case the last row of ``H`` is zero and ``V`` has
    ``m`` columns.
    """

    V: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    givens: list
    sines: np.ndarray
    res_norms: np.ndarray
    breakdown_at: Optional[int] = None
    converged: bool = False
    explicit_res_norm: float = np.nan
    flags: list = field(default_factory=list)

    @property
    def iters(self):
        return self.Z.shape[1]

    def arnoldi_residual(self, A: SparseMatrix):
        """``||A Z - V H||_F`` for the recorded flexible Arnoldi relation."""
        m = self.iters
        AZ = A.to_scipy() @ self.Z
        k = self.V.shape[1]
        return float(np.linalg.norm(AZ - self.V @ self.H[:k, :m]))

    def relative_residuals(self):
        return self.res_norms / self.res_norms[0]


def fgmres(A: SparseMatrix, b, precond=None, tol=1e-6, max_iter=400):
    """Right-preconditioned flexible GMRES from ``x0 = 0`` without restarts.

    Parameters
    ----------
    A : SparseMatrix
    b : array_like
        Nonzero right-hand side.
    precond : callable or object with ``apply``, optional
        Possibly nonlinear map ``v -> z``; identity when omitted.
    tol : float
        Relative residual target ``||b - A x|| / ||b||``.
    max_iter : int
        Iteration cap; hitting it is flagged in the trace, not raised.

    Returns
    -------
    x : ndarray
        Final iterate.
    trace : KrylovTrace
    iters : int
    """
    b = as_vector(b, A.rows, name="b")
    beta = float(np.linalg.norm(b))
    if beta == 0.0:
        raise ValueError("b must be nonzero")
    apply = _as_callable(precond)
    n = b.size
    V = np.zeros((n, max_iter + 1))
    Z = np.zeros((n, max_iter))
    H = np.zeros((max_iter + 1, max_iter))
    R = np.zeros((max_iter + 1, max_iter))
    V[:, 0] = b / beta
    g = np.zeros(max_iter + 1)
    g[0] = beta
    givens, sines, res = [], [], [beta]
    breakdown_at, converged, flags = None, False, []
    m = 0
    for j in range(max_iter):
        z = np.asarray(apply(V[:, j]), dtype=np.float64)
        if z.shape != (n,) or not np.all(np.isfinite(z)):
            raise FloatingPointError(f"preconditioner returned invalid output at iteration {j + 1}")
        Z[:, j] = z
        w = A.matvec(z)
        basis = [V[:, i] for i in range(j + 1)]
        happy = False
        try:
            coeffs, h_next, v_next = mgs_orthogonalize(w, basis)
        except Breakdown as exc:
            coeffs, h_next, v_next, happy = exc.coeffs, 0.0, None, True
        H[:j + 1, j] = coeffs
        H[j + 1, j] = h_next
        col = _apply_rotations(H[:j + 2, j].copy(), givens)
        try:
            (c, s), r = givens_compute(col[j], col[j + 1])
        except Breakdown:
            flags.append("singular")
            break
        col[j], col[j + 1] = r, 0.0
        R[:j + 2, j] = col
        givens.append(GivensPair(c, s))
        g[j], g[j + 1] = c * g[j], -s * g[j]
        sines.append(abs(s))
        res.append(abs(g[j + 1]))
        m = j + 1
        if happy:
            breakdown_at = m
            converged = True
            break
        V[:, j + 1] = v_next
        if res[-1] <= tol * beta:
            converged = True
            break
    if m == 0:
        x = np.zeros(n)
    else:
        y = _back_substitute(np.triu(R[:m, :m]), g[:m])
        x = Z[:, :m] @ y
    if not converged and "singular" not in flags:
        flags.append("max_iter")
    explicit = float(np.linalg.norm(b - A.matvec(x)))
    if abs(explicit - res[-1]) > 1e-8 * beta:
        flags.append("residual_mismatch")
        warnings.warn(
            f"recursive residual {res[-1]:.3e} and explicit residual {explicit:.3e} disagree",
            NumericalHealthWarning, stacklevel=2)
    k = m if breakdown_at is not None else m + 1
    trace = KrylovTrace(
        V=V[:, :k].copy(), Z=Z[:, :m].copy(), H=H[:m + 1, :m].copy(), givens=givens,
        sines=np.array(sines), res_norms=np.array(res), breakdown_at=breakdown_at,
        converged=converged, explicit_res_norm=explicit, flags=flags)
    return x, trace, m


# --- differentiable Arnoldi-Givens -------------------------------------------


def _zero_scalar(tape):
    return tape.constant(0.0) if tape is not None else np.float64(0.0)


def ag_m(A: SparseMatrix, r0, precond: Callable, M: int, tol=ARNOLDI_BREAKDOWN_TOL):
    """Run ``M`` flexible Arnoldi steps and Givens rotations on the tape.

    Parameters
    ----------
    A : SparseMatrix
        Constant operator.
    r0 : array_like
        Nonzero initial residual (constant).
    precond : callable
        ``v -> z``; returns a tape Variable when it depends on parameters.
    M : int
        Number of steps.

    Returns
    -------
    list
        ``|s_1|, ..., |s_M|`` as scalar Variables (plain floats if nothing
        depends on a parameter). After a happy breakdown at step ``k`` the
        remaining entries are constant zeros.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    r0 = as_vector(r0, A.rows, name="r0")
    beta = float(np.linalg.norm(r0))
    if beta == 0.0:
        raise ValueError("r0 must be nonzero")
    basis = [r0 / beta]
    rotations = []  # (c, s) scalars on the tape
    sines = []
    tape = None
    for j in range(M):
        z = precond(basis[j])
        zv = ops.value_of(z)
        if not np.all(np.isfinite(zv)):
            raise FloatingPointError(f"preconditioner returned non-finite values at step {j + 1}")
        if isinstance(z, Variable):
            tape = z.tape
        w = ops.matvec_const(A, z)
        wnorm = float(np.linalg.norm(ops.value_of(w)))
        col = []
        for v in basis:
            h = ops.dot(w, v)
            w = ops.axpy(ops.scale(h, -1.0), v, w)
            col.append(h)
        if float(np.linalg.norm(ops.value_of(w))) < 0.5 * wnorm:
            for i, v in enumerate(basis):
                h = ops.dot(w, v)
                w = ops.axpy(ops.scale(h, -1.0), v, w)
                col[i] = ops.add(col[i], h)
        h_next_val = float(np.linalg.norm(ops.value_of(w)))
        happy = h_next_val <= tol * wnorm or h_next_val == 0.0
        h_next = _zero_scalar(tape) if happy else ops.norm2(w)
        col.append(h_next)
        for i, (c, s) in enumerate(rotations):
            a, b = col[i], col[i + 1]
            col[i] = ops.add(ops.hadamard(c, a), ops.hadamard(s, b))
            col[i + 1] = ops.sub(ops.hadamard(c, b), ops.hadamard(s, a))
        rot = ops.givens(col[j], col[j + 1])
        c, s = ops.index(rot, 0), ops.index(rot, 1)
        rotations.append((c, s))
        sines.append(ops.abs(s))
        if happy:
            sines.extend(_zero_scalar(tape) for _ in range(M - j - 1))
            break
        basis.append(ops.divide(w, h_next))
    return sines


# --- sine extraction and geometric oracles ----------------------------------


def extract_sines(H, method="rotation_component"):
    """Sines ``|s_1|, ..., |s_m|`` hidden in an ``(m+1, m)`` Hessenberg matrix.

    ``"rotation_component"`` reads ``|s|`` from each Givens rotation after the
    previous ones are applied to the column. ``"givens_ratio"`` takes, for
    every ``j``, a Householder QR of the leading ``(j+1, j)`` block and forms
    the ratio of first-column entries of consecutive orthogonal factors.
    """
    H = np.asarray(H, dtype=np.float64)
    m = H.shape[1]
    if H.shape != (m + 1, m):
        raise ValueError(f"expected an (m+1, m) Hessenberg matrix, got {H.shape}")
    sines = np.zeros(m)
    if method == "rotation_component":
        rotations = []
        for j in range(m):
            col = _apply_rotations(H[:j + 2, j].copy(), rotations)
            try:
                (c, s), _ = givens_compute(col[j], col[j + 1])
            except Breakdown:
                break
            rotations.append((c, s))
            sines[j] = abs(s)
        return sines
    if method == "givens_ratio":
        prev = 1.0
        for j in range(1, m + 1):
            if abs(prev) <= BREAKDOWN_TOL:
                break
            Q, _ = np.linalg.qr(H[:j + 1, :j], mode="complete")
            cur = Q[0, j]
            sines[j - 1] = abs(cur / prev)
            prev = cur
        return sines
    raise ValueError(f"unknown method {method!r}")


def _orthonormal_basis(Y):
    Q, Rf = np.linalg.qr(Y)
    keep = np.abs(np.diag(Rf)) > 1e-14 * max(np.abs(np.diag(Rf)).max(), 1e-300)
    return Q[:, keep]


def principal_angle_sine(x, Y_basis) -> float:
    """``||(I - P_Y) x|| / ||x||`` for the span of ``Y_basis``."""
    x = as_vector(x, name="x")
    nx = np.linalg.norm(x)
    if nx == 0.0:
        raise ValueError("x must be nonzero")
    if len(Y_basis) == 0:
        return 1.0
    Y = np.column_stack([np.asarray(y, dtype=np.float64) for y in Y_basis])
    Q = _orthonormal_basis(Y)
    return float(np.linalg.norm(x - Q @ (Q.T @ x)) / nx)


def projection_sines(A: SparseMatrix, r0, Z):
    """Reference sines from projections onto ``W_j = span(A Z[:, :j])``.

    The minimal-residual iterate gives ``r_{j-1} = (I - P_{W_{j-1}}) r0``,
    and the ``j``-th sine is its principal-angle sine against ``W_j``.
    """
    r0 = as_vector(r0, A.rows, name="r0")
    W = A.to_scipy() @ np.asarray(Z)
    out = []
    r = r0.copy()
    for j in range(1, W.shape[1] + 1):
        out.append(principal_angle_sine(r, list(W[:, :j].T)))
        Q = _orthonormal_basis(W[:, :j])
        r = r0 - Q @ (Q.T @ r0)
        if np.linalg.norm(r) <= BREAKDOWN_TOL * np.linalg.norm(r0):
            out.extend([0.0] * (W.shape[1] - j))
            break
    return np.array(out)
