"""Per-channel affine modulation: identity init, orders, gradients."""

import numpy as np
import pytest

import slnet.tensor as T
from slnet.gmu import Gmu, gmu_forward
from slnet.tensor import ShapeError, Tape, Tensor, backward, finite_diff_grad


def test_identity_at_init():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 7, 8)).astype(np.float32))
    for order in ("ab", "ba"):
        unit = Gmu(8, order=order)
        np.testing.assert_array_equal(unit(x).data, x.data)


def test_zero_alpha_broadcasts_beta():
    unit = Gmu(3, order="ab")
    unit.alpha.value.data[:] = 0.0
    unit.beta.value.data[:] = [1.0, -2.0, 3.0]
    x = Tensor(np.random.default_rng(1).standard_normal((5, 3)))
    np.testing.assert_allclose(unit(x).data, np.tile([1.0, -2.0, 3.0], (5, 1)))


def test_order_variants_differ():
    unit_ab = Gmu(2, order="ab")
    unit_ba = Gmu(2, order="ba")
    for unit in (unit_ab, unit_ba):
        unit.alpha.value.data[:] = 2.0
        unit.beta.value.data[:] = 1.0
    x = Tensor(np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(unit_ab(x).data, [[3.0, 3.0]])   # 2*1 + 1
    np.testing.assert_allclose(unit_ba(x).data, [[4.0, 4.0]])   # 2*(1 + 1)


def test_parameter_count_is_exactly_2d():
    for d in (16, 32):
        unit = Gmu(d)
        assert unit.alpha.value.size + unit.beta.value.size == 2 * d


def test_channel_mismatch_errors():
    unit = Gmu(4)
    with pytest.raises(ShapeError):
        unit(Tensor(np.zeros((2, 5))))


def test_unknown_order_rejected():
    with pytest.raises(ValueError):
        Gmu(4, order="xy")


def test_channel_axis_selection():
    rng = np.random.default_rng(2)
    unit = Gmu(5)
    unit.alpha.value.data[:] = np.arange(1, 6)
    x = rng.standard_normal((5, 3))
    out = gmu_forward(Tensor(x), unit, channel_axis=0)
    np.testing.assert_allclose(out.data, x * np.arange(1, 6)[:, None])


def test_sum_loss_gradients_analytic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4, 3))
    unit = Gmu(3, order="ab")
    with Tape() as tape:
        loss = T.sum_reduce(unit(Tensor(x)))
    backward(tape, loss)
    # d(sum)/d(beta_d) = number of positions per channel; d/d(alpha_d) = sum of inputs
    np.testing.assert_allclose(unit.beta.grad.data, np.full(3, 24.0))
    np.testing.assert_allclose(unit.alpha.grad.data, x.sum(axis=(0, 1)), rtol=1e-6)


@pytest.mark.parametrize("order", ["ab", "ba"])
@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(order, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5, 4))
    weights = rng.standard_normal((3, 5, 4))
    unit = Gmu(4, order=order, dtype=np.float64)
    unit.alpha.value.data[:] = rng.standard_normal(4)
    unit.beta.value.data[:] = rng.standard_normal(4)

    def f(_):
        with Tape():
            out = unit(Tensor(x))
            return float((out.data * weights).sum())

    with Tape() as tape:
        loss = T.sum_reduce(T.mul(unit(Tensor(x)), Tensor(weights)))
    backward(tape, loss)
    for p in (unit.alpha, unit.beta):
        fd = finite_diff_grad(f, p, h=1e-5)
        err = np.abs(fd.data - p.grad.data).max() / max(np.abs(fd.data).max(), 1e-9)
        assert err < 1e-4


def test_first_forward_identical_with_gmu_enabled_or_bypassed():
    from slnet.backbone import ModelConfig, build_model

    rng = np.random.default_rng(4)
    clouds = rng.uniform(-1, 1, (2, 64, 3)).astype(np.float32)
    with_unit = build_model(ModelConfig.slnet_s_tiny(n_points=64), seed=9).eval()
    without = build_model(ModelConfig.slnet_s_tiny(n_points=64,
                                                   gmu_placement="none"), seed=9).eval()
    np.testing.assert_array_equal(with_unit.forward(clouds).data,
                                  without.forward(clouds).data)
