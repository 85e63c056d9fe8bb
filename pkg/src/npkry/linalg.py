"""Sparse operators and the non-differentiable kernels of the Arnoldi process.

Dense vectors are plain one-dimensional ``float64`` numpy arrays; the
compressed-row :class:`SparseMatrix` is a thin validated wrapper around
``scipy.sparse.csr_matrix``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp

__all__ = [
    "BREAKDOWN_TOL",
    "Breakdown",
    "GivensPair",
    "SparseMatrix",
    "as_vector",
    "dense_solve_ls",
    "givens_compute",
    "mgs_orthogonalize",
    "read_mtx",
    "read_vector",
    "spmv",
    "write_mtx",
    "write_vector",
]

BREAKDOWN_TOL = 1e-14
# Arnoldi breakdown is judged against the norm of the vector being
# orthogonalized; approximate inverses leave O(eps * cond) noise behind.
ARNOLDI_BREAKDOWN_TOL = 1e-12


class Breakdown(ArithmeticError):
    """Signal that a rotation or orthogonalization hit a (happy) breakdown.

    The partial results computed before the breakdown are attached so the
    caller can finish the iteration.
    """

    def __init__(self, msg, coeffs=None, h_next=0.0):
        super().__init__(msg)
        self.coeffs = coeffs
        self.h_next = h_next


def as_vector(x, n=None, name="x"):
    """Return ``x`` as a finite 1-D float64 array, validating its length."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {x.shape}")
    if n is not None and x.size != n:
        raise ValueError(f"{name} has length {x.size}, expected {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed-row matrix.

    Parameters
    ----------
    rows, cols : int
        Matrix dimensions.
    row_ptr, col_idx, values : ndarray
        CSR arrays; ``row_ptr`` has ``rows + 1`` entries.
    spd : bool
        Whether the matrix is claimed symmetric positive definite. Only
        symmetry is verified here.
    """

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    spd: bool = False
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("matrix dimensions must be positive")
        if row_ptr.shape != (self.rows + 1,) or row_ptr[0] != 0:
            raise ValueError("row_ptr must have rows + 1 entries starting at 0")
        if np.any(np.diff(row_ptr) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if row_ptr[-1] != col_idx.size or col_idx.size != values.size:
            raise ValueError("row_ptr[rows] must equal nnz")
        if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= self.cols):
            raise ValueError("column index out of range")
        if not np.all(np.isfinite(values)):
            raise ValueError("matrix values must be finite")
        csr = sp.csr_matrix((values, col_idx, row_ptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_csr", csr)
        if self.spd and not self.is_symmetric():
            raise ValueError("matrix flagged SPD is not symmetric")

    @classmethod
    def from_scipy(cls, A, spd=False):
        A = sp.csr_matrix(A, dtype=np.float64)
        A.sort_indices()
        return cls(A.shape[0], A.shape[1], A.indptr, A.indices, A.data, spd=spd)

    @classmethod
    def from_dense(cls, A, spd=False):
        return cls.from_scipy(sp.csr_matrix(np.asarray(A, dtype=np.float64)), spd=spd)

    @classmethod
    def identity(cls, n):
        return cls.from_scipy(sp.identity(n, format="csr"), spd=True)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return int(self.values.size)

    def to_scipy(self):
        return self._csr

    def toarray(self):
        return self._csr.toarray()

    def diagonal(self):
        return self._csr.diagonal()

    def matvec(self, x):
        return self._csr @ x

    def rmatvec(self, y):
        return self._csr.T @ y

    def norm(self):
        """Frobenius norm."""
        return float(np.linalg.norm(self.values))

    def is_symmetric(self, rtol=1e-12):
        diff = abs(self._csr - self._csr.T)
        scale = max(abs(self.values).max(initial=0.0), 1e-300)
        return diff.nnz == 0 or diff.max() <= rtol * scale


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """Sparse matrix-vector product ``A @ x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or A.cols != x.size:
        raise ValueError(f"dimension mismatch: A is {A.shape}, x has shape {x.shape}")
    return A.matvec(x)


class GivensPair(NamedTuple):
    c: float
    s: float


def givens_compute(h1: float, h2: float) -> tuple[GivensPair, float]:
    """Rotation ``(c, s)`` mapping ``(h1, h2)`` to ``(r, 0)``.

    ``r`` carries the sign of ``h1`` (positive when ``h1 == 0``), so ``c`` is
    never negative. Raises :class:`Breakdown` if ``r`` vanishes.
    """
    rho = float(np.hypot(h1, h2))
    if rho < BREAKDOWN_TOL * max(1.0, abs(h1), abs(h2)):
        raise Breakdown("Givens rotation of a zero pair")
    r = -rho if h1 < 0 else rho
    return GivensPair(h1 / r, h2 / r), r


def _apply_rotations(col, givens):
    """Apply the stored rotations in order to a Hessenberg column in place."""
    for i, (c, s) in enumerate(givens):
        a, b = col[i], col[i + 1]
        col[i] = c * a + s * b
        col[i + 1] = -s * a + c * b
    return col


def mgs_orthogonalize(w, basis: Sequence[np.ndarray], tol=ARNOLDI_BREAKDOWN_TOL):
    """Orthogonalize ``w`` against an orthonormal ``basis`` (modified Gram-Schmidt).

    A second pass is made when the first one cancels more than half of
    ``||w||``.

    Returns
    -------
    coeffs : ndarray
        Projection coefficients onto ``basis``.
    h_next : float
        Norm of the orthogonal remainder.
    v_next : ndarray
        Normalized remainder.

    Raises
    ------
    Breakdown
        If the remainder is negligible relative to ``||w||``; the exception
        carries ``coeffs`` and ``h_next``.
    """
    w = np.array(w, dtype=np.float64)
    wnorm = float(np.linalg.norm(w))
    coeffs = np.zeros(len(basis))
    for i, v in enumerate(basis):
        h = float(v @ w)
        coeffs[i] += h
        w -= h * v
    h_next = float(np.linalg.norm(w))
    if basis and h_next < 0.5 * wnorm:
        for i, v in enumerate(basis):
            h = float(v @ w)
            coeffs[i] += h
            w -= h * v
        h_next = float(np.linalg.norm(w))
    if h_next <= tol * wnorm or h_next == 0.0:
        raise Breakdown("orthogonal remainder vanished", coeffs=coeffs, h_next=h_next)
    return coeffs, h_next, w / h_next


def dense_solve_ls(H, beta: float) -> np.ndarray:
    """Minimize ``||beta e_1 - H nu||`` for an upper-Hessenberg ``(m+1, m)`` ``H``.

    Uses Givens rotations followed by back substitution on the triangular
    factor.
    """
    H = np.array(H, dtype=np.float64)
    m1, m = H.shape
    if m1 != m + 1:
        raise ValueError(f"expected an (m+1, m) Hessenberg matrix, got {H.shape}")
    g = np.zeros(m + 1)
    g[0] = beta
    givens = []
    for j in range(m):
        col = _apply_rotations(H[:, j], givens)
        (c, s), r = givens_compute(col[j], col[j + 1])
        col[j], col[j + 1] = r, 0.0
        givens.append((c, s))
        g[j], g[j + 1] = c * g[j], -s * g[j]
    R = np.triu(H[:m, :m])
    if np.any(np.abs(np.diag(R)) == 0.0):
        raise np.linalg.LinAlgError("singular triangular factor")
    return _back_substitute(R, g[:m])


def _back_substitute(R, g):
    m = g.size
    y = np.zeros(m)
    for i in range(m - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


# --- file formats -----------------------------------------------------------


def write_mtx(path, A: SparseMatrix):
    """Write ``A`` in Matrix Market coordinate format (1-based, general)."""
    scipy.io.mmwrite(str(path), A.to_scipy(), field="real", symmetry="general", precision=17)


def read_mtx(path, spd=False) -> SparseMatrix:
    return SparseMatrix.from_scipy(scipy.io.mmread(str(path)).tocsr(), spd=spd)


def write_vector(path, x):
    """Write a vector as ``u64`` length header followed by little-endian f64 data."""
    x = as_vector(x)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", x.size))
        fh.write(x.astype("<f8").tobytes())


def read_vector(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated vector header")
    (n,) = struct.unpack("<Q", data[:8])
    if len(data) != 8 + 8 * n:
        raise ValueError(f"{path}: header says {n} entries, payload has {(len(data) - 8) / 8}")
    return np.frombuffer(data[8:], dtype="<f8").astype(np.float64)
