import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_spd, tiny_net
from npkry.autodiff import grad_check, ops
from npkry.krylov import (
    DiagonalPreconditioner,
    ExactInversePreconditioner,
    IdentityPreconditioner,
    NetworkPreconditioner,
    ag_m,
    extract_sines,
    fgmres,
    principal_angle_sine,
    projection_sines,
)
from npkry.linalg import SparseMatrix


def krylov_residual_norms(A, r0, m):
    """Classical GMRES residual norms by least squares on a power basis."""
    A = A.toarray()
    K = [r0 / np.linalg.norm(r0)]
    for _ in range(m - 1):
        k = A @ K[-1]
        K.append(k / np.linalg.norm(k))
    out = [np.linalg.norm(r0)]
    for j in range(1, m + 1):
        W = A @ np.column_stack(K[:j])
        y, *_ = np.linalg.lstsq(W, r0, rcond=None)
        out.append(np.linalg.norm(r0 - W @ y))
    return np.array(out)


def test_identity_matrix_one_step():
    b = np.array([3.0, -1.0, 2.0])
    x, tr, it = fgmres(SparseMatrix.identity(3), b)
    assert it == 1 and tr.sines[0] == 0.0 and tr.converged
    assert_allclose(x, b)
    assert tr.res_norms[-1] == 0.0


def test_diag_two_by_two():
    A = SparseMatrix.from_dense(np.diag([1.0, 2.0]))
    x, tr, it = fgmres(A, [1.0, 1.0])
    assert it == 2
    assert_allclose(tr.sines[0], 1 / np.sqrt(10), rtol=1e-14)
    assert_allclose(x, [1.0, 0.5], rtol=1e-14)


def test_max_iter_is_flagged_not_raised(desk_instance):
    x, tr, it = fgmres(desk_instance.A, desk_instance.b, max_iter=5)
    assert it == 5 and not tr.converged and "max_iter" in tr.flags
    assert np.isfinite(x).all()


def test_zero_rhs_rejected():
    with pytest.raises(ValueError):
        fgmres(SparseMatrix.identity(2), np.zeros(2))


def test_bad_preconditioner_output():
    with pytest.raises(FloatingPointError):
        fgmres(SparseMatrix.identity(2), np.ones(2), lambda v: np.full(2, np.nan))


def test_converges_to_tolerance(desk_instance):
    A, b = desk_instance.A, desk_instance.b
    x, tr, it = fgmres(A, b, tol=1e-6)
    assert tr.converged
    assert np.linalg.norm(b - A.matvec(x)) <= 1e-6 * np.linalg.norm(b) * (1 + 1e-6)
    assert tr.flags == []


def test_bit_stable(desk_instance):
    _, a, _ = fgmres(desk_instance.A, desk_instance.b)
    _, b, _ = fgmres(desk_instance.A, desk_instance.b)
    assert_array_equal(a.res_norms, b.res_norms)


def test_identity_matches_classical_gmres():
    A = random_spd(32, 4)
    r0 = np.random.default_rng(4).standard_normal(32)
    _, tr, _ = fgmres(A, r0, IdentityPreconditioner(), tol=0, max_iter=6)
    assert_allclose(tr.res_norms, krylov_residual_norms(A, r0, 6), rtol=1e-8)


def test_trace_invariants(desk_instance):
    A, b = desk_instance.A, desk_instance.b
    _, tr, m = fgmres(A, b, DiagonalPreconditioner(1 / A.diagonal()))
    assert_allclose(tr.res_norms[1:], tr.sines * tr.res_norms[:-1], rtol=1e-10)
    assert tr.arnoldi_residual(A) <= 1e-10 * A.norm() * np.linalg.norm(tr.Z)
    assert np.max(np.abs(tr.V.T @ tr.V - np.eye(tr.V.shape[1]))) < 1e-9


def test_nested_subspaces():
    A = random_spd(32, 1)
    _, tr, _ = fgmres(A, np.ones(32), DiagonalPreconditioner(np.linspace(1, 2, 32)), tol=0, max_iter=8)
    W = A.toarray() @ tr.Z
    for j in range(2, 9):
        for i in range(j - 1):
            assert principal_angle_sine(W[:, i], list(W[:, :j].T)) <= 1e-9


def test_extract_sines_single_rotation():
    assert_allclose(extract_sines([[3.0], [4.0]]), [0.8])
    assert_allclose(extract_sines([[3.0], [4.0]], "givens_ratio"), [0.8])
    assert_array_equal(extract_sines([[2.0], [0.0]]), [0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_extract_methods_agree(seed):
    rng = np.random.default_rng(seed)
    H = np.triu(rng.standard_normal((6, 5)), -1)
    H[np.arange(1, 6), np.arange(5)] = rng.uniform(0.2, 2.0, 5)
    assert_allclose(extract_sines(H, "givens_ratio"), extract_sines(H), atol=1e-12)


def test_extract_unknown_method():
    with pytest.raises(ValueError):
        extract_sines([[1.0], [1.0]], "qr")


def test_principal_angle_examples():
    assert principal_angle_sine([1.0, 0.0], [np.array([0.0, 1.0])]) == pytest.approx(1.0)
    assert principal_angle_sine([1.0, 2.0], [np.array([2.0, 4.0])]) == pytest.approx(0.0, abs=1e-15)
    assert principal_angle_sine([1.0, 1.0], [np.array([1.0, 2.0])]) == pytest.approx(1 / np.sqrt(10))
    assert principal_angle_sine([1.0, 1.0], []) == 1.0


def test_ag_identity_equals_fgmres(desk_instance):
    A = desk_instance.A
    r0 = desk_instance.b / np.linalg.norm(desk_instance.b)
    sines = ag_m(A, r0, lambda v: v, 10)
    _, tr, _ = fgmres(A, r0, tol=0, max_iter=10)
    assert_allclose(np.array(sines, dtype=float), tr.sines, atol=1e-12)


def test_ag_exact_inverse_pads_zeros():
    A = random_spd(32, 2)
    pre = ExactInversePreconditioner(A)
    sines = ag_m(A, np.ones(32), pre.bind(), 4)
    assert len(sines) == 4
    assert max(abs(float(s)) for s in sines) <= 1e-12


def test_ag_rejects_nan():
    with pytest.raises(FloatingPointError):
        ag_m(SparseMatrix.identity(3), np.ones(3), lambda v: v * np.nan, 2)


def test_ag_scaling_preconditioner_gradient():
    A = random_spd(32, 3)
    r0 = np.random.default_rng(3).standard_normal(32)
    base = np.linspace(0.5, 2.0, 32)

    def f(th):
        # z = theta * diag-weighted v, nonlinear in theta through a second term
        pre = lambda v: ops.add(ops.hadamard(ops.scale(th, 1.0), ops.hadamard(base, v)),
                                ops.scale(ops.hadamard(ops.hadamard(th, th), v), 0.3))
        s = ag_m(A, r0, pre, 5)
        total = s[0]
        for x in s[1:]:
            total = ops.add(total, x)
        return total

    assert grad_check(f, np.array([1.3])) < 1e-5


def test_network_preconditioner_oracle():
    p = tiny_net((4, 4, 4), seed=2)
    A = random_spd(64, 5)
    rng = np.random.default_rng(5)
    pre = NetworkPreconditioner(p, rng.uniform(size=64))
    _, tr, _ = fgmres(A, rng.standard_normal(64), pre, tol=0, max_iter=10)
    ref = projection_sines(A, tr.V[:, 0] * tr.res_norms[0], tr.Z)
    assert_allclose(tr.sines, ref, atol=1e-9)

