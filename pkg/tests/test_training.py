from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from npkry import training, unet
from npkry.autodiff import Tape, grad_check, ops
from npkry.krylov import ExactInversePreconditioner, fgmres, principal_angle_sine
from npkry.linalg import SparseMatrix
from npkry.problems import ProblemInstance, build_rhs_set


def _bare(A):
    n = A.rows
    return ProblemInstance(A, np.ones(n), np.zeros(n), None, 0.1, 0)


def test_alpha_norm_examples():
    assert training.alpha_norm([_bare(SparseMatrix.identity(8))]) == 1.0
    assert training.alpha_norm([_bare(SparseMatrix.from_dense(4 * np.eye(8)))]) == 0.25
    two = [_bare(SparseMatrix.from_dense(2 * np.eye(5))), _bare(SparseMatrix.from_dense(4 * np.eye(5)))]
    assert training.alpha_norm(two) == pytest.approx(1 / 3, rel=1e-15)
    with pytest.raises(ValueError):
        training.alpha_norm([])


@pytest.fixture(scope="module")
def tiny_setup(tiny_instances):
    desc = unet.UNetDescriptor(grid=(4, 4, 4), widths=(1, 1))
    alpha = training.alpha_norm(tiny_instances)
    return unet.init_params(desc, seed=0), alpha


def test_static_loss_zero_operator(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    batch = training.static_batches(tiny_instances[:2])
    loss = training.loss_static(params, batch, alpha, precond=lambda V, inst: np.zeros_like(V))
    assert_allclose(float(loss), 1.0, rtol=1e-14)


def test_static_loss_exact_inverse(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    batch = training.static_batches(tiny_instances[:2])

    def inverse(V, inst):
        return alpha * np.linalg.solve(inst.A.toarray(), V.T).T

    assert float(training.loss_static(params, batch, alpha, precond=inverse)) < 1e-24


def test_static_loss_straight_line(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    batch = training.static_batches(tiny_instances[:3], seed=4)
    ref = 0.0
    for inst, rhs in batch:
        terms = []
        for v in rhs.vectors:
            y = unet.apply(params, v, inst.d)
            terms.append(np.sum((v - inst.A.toarray() @ y / alpha) ** 2))
        ref += np.mean(terms)
    ref /= len(batch)
    assert_allclose(float(training.loss_static(params, batch, alpha)), ref, rtol=1e-12)


def test_dynamic_loss_exact_inverse(tiny_instances, tiny_setup):
    params, _ = tiny_setup
    loss = training.loss_dynamic(params, tiny_instances[:2], 5,
                                 precond=lambda inst: ExactInversePreconditioner(inst.A).bind())
    assert abs(float(loss)) <= 1e-12


def test_dynamic_loss_first_sine_oracle(tiny_instances, tiny_setup):
    params, _ = tiny_setup
    inst = tiny_instances[0]
    r0 = inst.b / np.linalg.norm(inst.b)
    z = unet.apply(params, r0, inst.d)
    ref = principal_angle_sine(r0, [inst.A.matvec(z)])
    assert_allclose(float(training.loss_dynamic(params, [inst], 1)), ref, rtol=1e-12)


def test_dynamic_loss_range(tiny_instances, tiny_setup):
    params, _ = tiny_setup
    val = float(training.loss_dynamic(params, tiny_instances, 6))
    assert 0.0 <= val <= 1.0


def test_static_gradient(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    batch = training.static_batches(tiny_instances[:2])
    assert grad_check(lambda th: training.loss_static(params, batch, alpha, theta=th), params.theta) < 2e-3


def test_dynamic_gradient_helper_matches_single_tape(tiny_instances, tiny_setup):
    params, _ = tiny_setup
    loss, grad, sines = training.dynamic_loss_and_grad(params, tiny_instances[:3], 4)
    tape = Tape()
    th = tape.leaf(params.theta)
    ref = training.loss_dynamic(params, tiny_instances[:3], 4, theta=th)
    tape.backward(ref)
    assert_allclose(loss, float(ref.value), rtol=1e-13)
    assert_allclose(grad, th.grad, rtol=1e-10, atol=1e-14)
    assert sines.shape == (3, 4)


def test_adam_matches_closed_form():
    # one step on f = 0.5 |theta|^2 gives m_hat = g, v_hat = g^2
    theta = np.array([1.0, -2.0, 0.5])
    opt = training.Adam(lr=0.1)
    new = opt.step(theta, theta.copy())
    assert_allclose(new, theta - 0.1 * theta / (np.abs(theta) + 1e-8), rtol=1e-12)
    g2 = new.copy()
    m = 0.9 * 0.1 * theta + 0.1 * g2
    v = 0.999 * 0.001 * theta ** 2 + 0.001 * g2 ** 2
    expect = new - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert_allclose(opt.step(new, g2), expect, rtol=1e-12)


def test_lr_zero_leaves_params(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    cfg = training.TrainConfig.for_phase("static", epochs=2, lr=0.0, batch=2)
    out, _ = training.train(cfg, tiny_instances[:2], tiny_instances[2:3], params, alpha=alpha)
    assert_array_equal(out.theta, params.theta)


def test_training_reduces_loss_and_is_deterministic(tmp_path, tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    cfg = training.TrainConfig.for_phase("static", epochs=4, lr=1e-2, batch=2, M=4)
    a, ra = training.train(cfg, tiny_instances[:3], tiny_instances[3:], params, alpha=alpha,
                           out_dir=tmp_path, metrics_path=tmp_path / "m.csv")
    b, rb = training.train(cfg, tiny_instances[:3], tiny_instances[3:], params, alpha=alpha)
    assert_array_equal(a.theta, b.theta)
    assert [r.row() for r in ra] == [r.row() for r in rb]
    assert ra[-1].train_loss < ra[0].train_loss
    assert (tmp_path / "static_final.npk").exists()
    back = training.read_metrics(tmp_path / "m.csv")
    assert [r.row() for r in back] == [r.row() for r in ra]


def test_dynamic_phase_am_gm(tiny_instances, tiny_setup):
    params, _ = tiny_setup
    cfg = training.TrainConfig.for_phase("dynamic", epochs=2, lr=1e-3, batch=2, M=5, checkpoint_every=1)
    _, reports = training.train(cfg, tiny_instances[:2], tiny_instances[2:], params)
    for rep in reports:
        s = [Fraction(float(x)) for x in rep.mean_sines]
        loss = sum(s) / len(s)
        prod = Fraction(1)
        for x in s:
            prod *= x
        assert prod <= loss ** len(s)
        assert rep.val_loss == pytest.approx(float(loss), rel=1e-12)


def test_divergence_abort(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    cfg = training.TrainConfig.for_phase("static", epochs=5, lr=1e-3, batch=2,
                                         divergence_factor=0.0, divergence_epochs=2)
    with pytest.raises(training.TrainingDiverged) as info:
        training.train(cfg, tiny_instances[:2], [], params, alpha=alpha)
    assert len(info.value.reports) == 3


def test_early_stop(tiny_instances, tiny_setup):
    params, alpha = tiny_setup
    cfg = training.TrainConfig.for_phase("static", epochs=10, lr=0.0, batch=2, patience=2)
    _, reports = training.train(cfg, tiny_instances[:2], tiny_instances[2:], params, alpha=alpha)
    assert reports[-1].epoch == 3


def test_config_validation():
    with pytest.raises(ValueError):
        training.TrainConfig(phase="warmup")
    with pytest.raises(ValueError):
        training.TrainConfig(M=0)
    assert training.TrainConfig.for_phase("dynamic").batch == 20


def test_load_config(tmp_path):
    (tmp_path / "c.cfg").write_text("lr = 0.01  # faster\nepochs = 7\npatience = none\nM = 4\n")
    cfg = training.load_config(tmp_path / "c.cfg", phase="dynamic")
    assert (cfg.phase, cfg.lr, cfg.epochs, cfg.batch, cfg.patience, cfg.M) == ("dynamic", 0.01, 7, 20, None, 4)
    (tmp_path / "bad.cfg").write_text("[train]\nwarmup = 3\n")
    with pytest.raises(ValueError):
        training.load_config(tmp_path / "bad.cfg")


def test_read_metrics_missing_column(tmp_path):
    (tmp_path / "m.csv").write_text("epoch,phase,train_loss\n0,static,1.0\n")
    with pytest.raises(ValueError, match="val_loss"):
        training.read_metrics(tmp_path / "m.csv")
