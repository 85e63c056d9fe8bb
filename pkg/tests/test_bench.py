import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from npkry import bench, unet
from npkry.linalg import SparseMatrix
from npkry.problems import ProblemInstance
from npkry.training import LossReport, write_metrics


def _normal_equations(j, y):
    X = np.column_stack([j, np.ones_like(j)])
    return np.linalg.solve(X.T @ X, X.T @ y)


def test_linear_exact():
    j = np.arange(1, 11.0)
    f = bench.fit_linear(j, 2 * j + 1)
    assert_allclose(f.coef, (2.0, 1.0), atol=1e-12)
    assert f.rss < 1e-20 and f.n_points == 10


def test_linear_constant():
    f = bench.fit_linear([1, 2, 3], [0.4, 0.4, 0.4])
    assert_allclose(f.coef, (0.0, 0.4), atol=1e-15)


def test_linear_degenerate():
    with pytest.raises(ValueError):
        bench.fit_linear([2, 2, 2], [1, 2, 3])


def test_exponential_exact():
    j = np.arange(1, 11.0)
    f = bench.fit_exponential(j, np.exp(-j))
    assert_allclose(f.coef, (-1.0, 0.0), atol=1e-12)
    assert_allclose(bench.fit_exponential(j, np.full(10, 0.3)).coef[0], 0.0, atol=1e-15)


def test_exponential_rejects_nonpositive():
    with pytest.raises(ValueError):
        bench.fit_exponential([1, 2, 3], [1.0, 0.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 30))
def test_fits_match_normal_equations(seed, n):
    rng = np.random.default_rng(seed)
    j = np.arange(1.0, n + 1)
    y = rng.uniform(0.01, 2.0, n)
    assert_allclose(bench.fit_linear(j, y).coef, _normal_equations(j, y), rtol=1e-9, atol=1e-12)
    assert_allclose(bench.fit_exponential(j, y).coef, _normal_equations(j, np.log(y)), rtol=1e-9, atol=1e-12)


def test_product_estimate():
    assert bench.sine_product_estimate([0.5, 0.5]) == (0.25, 0.25)
    est, _ = bench.sine_product_estimate([0.592766] * 10)
    assert f"{est:.2e}" == "5.36e-03"
    est, _ = bench.sine_product_estimate([0.317659] * 10)
    assert f"{est:.1e}" == "1.0e-05"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_product_below_estimate(s):
    est, prod = bench.sine_product_estimate(s)
    assert prod <= est * (1 + 1e-12) + 1e-300


def test_bench_identity_instance(tmp_path):
    inst = ProblemInstance(SparseMatrix.identity(27), np.ones(27), np.zeros(27), None, 0.1, 3)
    summary = bench.bench([inst], {"static": None}, out_dir=tmp_path)
    assert summary.counts == {"none": [1]}
    with open(tmp_path / "bench.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["seed", "iters_none", "converged_none"], ["0", "1", "1"]]


def test_bench_ordering_and_flags(tmp_path, tiny_instances):
    p = unet.init_params(unet.UNetDescriptor(grid=(4, 4, 4), widths=(1, 1)), seed=0)
    s = bench.bench(tiny_instances, {"static": p}, max_iter=3, out_dir=tmp_path, workers=2)
    assert set(s.counts) == {"none", "static"}
    st_ = s.stats("none")
    assert st_["min"] <= st_["mean"] <= st_["max"]
    # every solve hits the cap and is reported rather than dropped
    assert s.counts["static"] == [3] * len(tiny_instances)
    assert s.n_failed["static"] == len(tiny_instances)
    assert bench.read_bench(tmp_path / "bench.csv")["iters_static"] == [3] * len(tiny_instances)


def _write(path, reps):
    write_metrics(path, reps)


def test_report_round_trip(tmp_path):
    reps = [LossReport(e, "dynamic", 0.5, 0.4, np.linspace(0.3, 0.5, 10) - 0.01 * e) for e in range(3)]
    _write(tmp_path / "m.csv", reps)
    traces = {0: np.exp(-0.5 * np.arange(1, 11))[None, :] * np.array([[1.0], [1.1]])}
    out = bench.report(tmp_path / "m.csv", tmp_path / "r", traces=traces)
    assert len(out["sine"]) == 3
    assert_allclose(out["sine"][1]["mean_sine"], reps[1].mean_sines.mean())
    assert_allclose(out["residual"][0]["fit"].coef[0], -0.5, atol=0.05)
    for name in ("sine_table.csv", "residual_table.csv", "sines.svg", "residuals.svg"):
        assert (tmp_path / "r" / name).exists()
    assert (tmp_path / "r" / "sines.svg").read_text().startswith("<svg")
    # report consumes its own metrics CSV without loss
    from npkry.training import read_metrics

    back = read_metrics(tmp_path / "m.csv")
    assert [r.row() for r in back] == [r.row() for r in reps]


def test_report_single_epoch(tmp_path):
    _write(tmp_path / "m.csv", [LossReport(0, "static", 1.0, 1.0, np.array([0.4, 0.6]))])
    out = bench.report(tmp_path / "m.csv", tmp_path / "r", svg=False)
    assert len(out["sine"]) == 1 and np.isnan(out["sine"][0]["fit_a"])


def test_report_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("epoch,phase,train_loss,val_loss,mean_sine_1\n")
    with pytest.raises(ValueError, match="no epochs"):
        bench.report(tmp_path / "empty.csv", tmp_path / "r")
    (tmp_path / "bad.csv").write_text("epoch,train_loss\n0,1\n")
    with pytest.raises(ValueError, match="phase"):
        bench.report(tmp_path / "bad.csv", tmp_path / "r")
