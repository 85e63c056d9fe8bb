import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from npkry import unet
from npkry.autodiff import grad_check, ops


def _count(desc):
    """Closed-form parameter count, layer by layer."""
    k3, w, c = desc.kernel_size ** 3, desc.widths, desc.in_channels
    total = c * w[0] * k3
    total += sum(w[j - 1] * w[j] * k3 for j in range(1, len(w)))
    total += w[-1] ** 2 * k3
    total += sum(w[j] * w[j - 1] * 8 + w[j - 1] + 2 * w[j - 1] * w[j - 1] * k3 for j in range(1, len(w)))
    return total + w[0] + 1


def test_desk_parameter_count():
    desc = unet.UNetDescriptor.desk(9)
    p = unet.init_params(desc)
    assert p.size == _count(desc) == 67_793


def test_paper_scale_count():
    desc = unet.UNetDescriptor.paper()
    assert desc.level_sizes == ((21,) * 3, (10,) * 3, (5,) * 3)
    n = sum(row[-1] for row in unet.layer_table(desc))
    assert n == _count(desc) == 1_079_105


def test_init_deterministic_and_biases_zero():
    desc = unet.UNetDescriptor(grid=(4, 4, 4), widths=(2, 3))
    a, b = unet.init_params(desc, seed=5), unet.init_params(desc, seed=5)
    assert_array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, unet.init_params(desc, seed=6).theta)
    for name, arr in a.view().items():
        if name.endswith(".b"):
            assert_array_equal(arr, 0.0)


def test_zero_params_give_zero_output():
    desc = unet.UNetDescriptor(grid=(5, 5, 5), widths=(2, 3))
    p = unet.init_params(desc)
    p = p.copy(np.zeros_like(p.theta))
    assert_array_equal(unet.apply(p, np.ones(125), np.ones(125)), 0.0)


def test_apply_deterministic_and_batched():
    desc = unet.UNetDescriptor(grid=(5, 6, 4), widths=(2, 2))
    p = unet.init_params(desc, seed=1)
    rng = np.random.default_rng(0)
    V, d = rng.standard_normal((3, 120)), rng.uniform(size=120)
    y1, y2 = unet.apply(p, V[1], d), unet.apply(p, V[1], d)
    assert_array_equal(y1, y2)
    assert_allclose(unet.apply(p, V, d)[1], y1, rtol=1e-13, atol=1e-15)


def test_odd_grid_round_trip():
    desc = unet.UNetDescriptor(grid=(21, 21, 21), widths=(1, 1, 1))
    p = unet.init_params(desc)
    out = unet.apply(p, np.ones(desc.n), np.zeros(desc.n))
    assert out.shape == (21 ** 3,)


def test_out_scale_is_a_fixed_factor():
    base = unet.UNetDescriptor(grid=(4, 4, 4), widths=(2, 2))
    scaled = unet.UNetDescriptor(grid=(4, 4, 4), widths=(2, 2), out_scale=1e-3)
    p, q = unet.init_params(base, seed=2), unet.init_params(scaled, seed=2)
    assert_array_equal(p.theta, q.theta)
    v = np.random.default_rng(1).standard_normal(64)
    assert_allclose(unet.apply(q, v, v), 1e-3 * unet.apply(p, v, v), rtol=1e-14)


def test_length_mismatch():
    p = unet.init_params(unet.UNetDescriptor(grid=(4, 4, 4), widths=(2,)))
    with pytest.raises(ValueError):
        unet.apply(p, np.ones(63), np.ones(64))


def test_pad_or_embed():
    v = np.arange(1.0, 9.0)
    vol = unet.pad_or_embed(v, 2)
    assert vol[0, 0, 1] == 2.0 and vol[1, 0, 0] == 5.0
    assert_array_equal(unet.flatten(vol), v)
    with pytest.raises(ValueError):
        unet.pad_or_embed(np.ones(10), 2)


def test_descriptor_validation():
    with pytest.raises(ValueError):
        unet.UNetDescriptor(grid=(2, 2, 2), widths=(1, 1, 1))
    with pytest.raises(ValueError):
        unet.UNetDescriptor(kernel_size=2)
    d = unet.UNetDescriptor(grid=(6, 6, 6), widths=(2, 3), out_scale=0.5)
    assert unet.UNetDescriptor.from_dict(d.to_dict()) == d


def test_network_gradient():
    desc = unet.UNetDescriptor(grid=(4, 4, 4), widths=(1, 1))
    p = unet.init_params(desc, seed=3)
    rng = np.random.default_rng(4)
    v, d = rng.standard_normal(64), rng.uniform(size=64)
    target = rng.standard_normal(64)
    assert p.size <= 200

    def f(th):
        out = unet.forward(p, v, d, theta=th)
        r = ops.sub(out, target)
        return ops.dot(r, r)

    assert grad_check(f, p.theta) < 1e-6
