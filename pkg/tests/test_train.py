"""Losses, schedule, optimizer, EMA, and metric computations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slnet.tensor import Param, Tape, Tensor, backward, finite_diff_grad
from slnet.train import (ConfusionMatrix, Ema, LossConfig, OptimConfig, SGD,
                         class_weights, cosine_lr, cross_entropy, ema_update,
                         focal_loss, iou_metrics, make_loss, metrics, softmax)


def ce_oracle(logits, targets, eps=0.0, weights=None):
    """Direct scalar computation of the smoothed weighted objective."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    total, denom = 0.0, 0.0
    for i in range(n):
        z = logits[i] - logits[i].max()
        logp = z - math.log(np.exp(z).sum())
        q = np.full(c, eps / (c - 1))
        q[targets[i]] = 1.0 - eps
        w = weights[targets[i]] if weights is not None else 1.0
        total += w * float(-(q * logp).sum())
        denom += w
    return total / denom


def focal_oracle(logits, targets, gamma):
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for i, t in enumerate(targets):
        z = logits[i] - logits[i].max()
        p = np.exp(z) / np.exp(z).sum()
        total += (1 - p[t]) ** gamma * -math.log(p[t])
    return total / len(targets)


# ---------------------------------------------------------------------------
# cross entropy

def test_ce_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = cross_entropy(logits, np.array([0, 1, 2]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_ce_confident_limit():
    logits = np.zeros((1, 4))
    logits[0, 0] = 200.0
    loss = cross_entropy(Tensor(logits), np.array([0]))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_ce_smoothed_matches_scalar_oracle():
    logits = np.array([[10.0, 0.0, 0.0, 0.0]])
    targets = np.array([0])
    loss = cross_entropy(Tensor(logits), targets, label_smoothing=0.1)
    assert loss.item() == pytest.approx(ce_oracle(logits, targets, eps=0.1), abs=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_ce_random_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((7, 5))
    targets = rng.integers(0, 5, 7)
    weights = class_weights(rng.integers(1, 50, 5))
    for eps, w in ((0.0, None), (0.1, None), (0.0, weights), (0.2, weights)):
        loss = cross_entropy(Tensor(logits), targets, eps, w)
        assert loss.item() == pytest.approx(ce_oracle(logits, targets, eps, w),
                                            abs=1e-6)


def test_ce_rejects_bad_targets():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_ce_equals_focal_gamma_zero():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((9, 6))
    targets = rng.integers(0, 6, 9)
    a = cross_entropy(Tensor(logits), targets).item()
    b = focal_loss(Tensor(logits), targets, gamma=0.0).item()
    assert a == pytest.approx(b, abs=1e-6)


# ---------------------------------------------------------------------------
# class weights

def test_class_weights_equal_freqs():
    np.testing.assert_allclose(class_weights([10, 10, 10]), np.ones(3))


def test_class_weights_ratio():
    w = class_weights([1, 4])
    np.testing.assert_allclose(w, [4.0 / 3.0, 2.0 / 3.0])
    assert w[0] / w[1] == pytest.approx(2.0)


def test_class_weights_random_ratios():
    rng = np.random.default_rng(2)
    f = rng.integers(1, 100, 13).astype(float)
    w = class_weights(f)
    assert w.mean() == pytest.approx(1.0)
    for a in range(13):
        for b in range(13):
            assert w[a] / w[b] == pytest.approx(math.sqrt(f[b] / f[a]), rel=1e-9)


def test_class_weights_zero_freq_errors():
    with pytest.raises(ValueError):
        class_weights([3, 0, 1])


# ---------------------------------------------------------------------------
# focal loss

def test_focal_vanishes_faster_than_ce():
    logits = np.array([[6.0, 0.0]])
    t = np.array([0])
    ce = cross_entropy(Tensor(logits), t).item()
    foc = focal_loss(Tensor(logits), t, gamma=2.0).item()
    assert 0 < foc < ce


@pytest.mark.parametrize("seed", range(5))
def test_focal_matches_scalar_oracle(seed):
    rng = np.random.default_rng(10 + seed)
    logits = rng.standard_normal((8, 4)) * 3
    targets = rng.integers(0, 4, 8)
    loss = focal_loss(Tensor(logits), targets, gamma=2.0)
    assert loss.item() == pytest.approx(focal_oracle(logits, targets, 2.0), abs=1e-6)


# ---------------------------------------------------------------------------
# loss gradients

@pytest.mark.parametrize("kind,eps,gamma", [
    ("ce", 0.0, 0.0), ("ce", 0.1, 0.0), ("wce", 0.0, 0.0), ("focal", 0.0, 2.0),
])
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(kind, eps, gamma, seed):
    rng = np.random.default_rng(100 + seed)
    logits = Param(rng.standard_normal((6, 4)), name="logits")
    targets = rng.integers(0, 4, 6)
    cfg = LossConfig(kind=kind, label_smoothing=eps, gamma=gamma,
                     class_freqs=rng.integers(1, 9, 4) if kind == "wce" else None)
    loss_fn = make_loss(cfg)

    def f(p):
        with Tape():
            return loss_fn(p, targets).item()

    with Tape() as tape:
        loss = loss_fn(logits, targets)
    backward(tape, loss)
    fd = finite_diff_grad(f, logits, h=1e-6)
    err = np.abs(fd.data - logits.grad.data).max() / max(np.abs(fd.data).max(), 1e-9)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# schedule and optimizer

def test_cosine_lr_endpoints_and_midpoint():
    cfg = OptimConfig(lr0=0.1, epochs=60)
    assert cosine_lr(0, cfg) == pytest.approx(0.1)
    assert cosine_lr(60, cfg) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(30, cfg) == pytest.approx(0.05)


def test_cosine_lr_range_checked():
    with pytest.raises(ValueError):
        cosine_lr(61, OptimConfig(epochs=60))


def test_sgd_plain_step():
    p = Param(np.array([1.0, 2.0]), name="p")
    p.grad.data[:] = [0.5, -1.0]
    opt = SGD([p], momentum=0.0, weight_decay=0.0)
    opt.step(lr=0.1)
    np.testing.assert_allclose(p.value.data, [0.95, 2.1])


def test_sgd_zero_grad_no_motion():
    p = Param(np.array([3.0]), name="p")
    opt = SGD([p], momentum=0.0, weight_decay=0.0)
    opt.step(lr=0.1)
    np.testing.assert_allclose(p.value.data, [3.0])


def test_sgd_momentum_matches_scalar_recurrence():
    # minimize f(x) = x^2 with gradient 2x; hand-rolled trajectory oracle
    x0, lr, mom, wd = 2.0, 0.1, 0.9, 0.01
    p = Param(np.array([x0]), name="x")
    opt = SGD([p], momentum=mom, weight_decay=wd)
    x_ref, v_ref = x0, 0.0
    for _ in range(5):
        g = 2.0 * x_ref
        v_ref = mom * v_ref + g + wd * x_ref
        x_ref -= lr * v_ref
        p.grad.data[:] = 2.0 * p.value.data
        opt.step(lr)
    assert p.value.data[0] == pytest.approx(x_ref, rel=1e-12)


# ---------------------------------------------------------------------------
# EMA

def test_ema_update_formula():
    shadow = np.zeros(3)
    ema_update(shadow, np.ones(3), rho=0.999)
    np.testing.assert_allclose(shadow, np.full(3, 0.001))
    shadow = np.array([5.0])
    ema_update(shadow, np.array([1.0]), rho=1.0)
    assert shadow[0] == 5.0
    shadow = np.array([5.0])
    ema_update(shadow, np.array([1.0]), rho=0.0)
    assert shadow[0] == 1.0


def test_ema_contracts_toward_constant_params():
    p = Param(np.full(4, 2.0), name="p")
    ema = Ema([p], rho=0.9)
    ema.shadow[0][:] = 0.0
    gap = 2.0
    for _ in range(10):
        ema.update()
        new_gap = np.abs(ema.shadow[0] - 2.0).max()
        assert new_gap == pytest.approx(0.9 * gap, rel=1e-9)
        gap = new_gap


def test_ema_swap_roundtrip():
    p = Param(np.array([1.0, 2.0]), name="p")
    ema = Ema([p], rho=0.5)
    p.value.data[:] = [3.0, 4.0]
    ema.update()
    ema.swap_in()
    np.testing.assert_allclose(p.value.data, [2.0, 3.0])
    ema.swap_out()
    np.testing.assert_allclose(p.value.data, [3.0, 4.0])


# ---------------------------------------------------------------------------
# metrics

def test_metrics_perfect_diagonal():
    conf = ConfusionMatrix(3)
    conf.counts[:] = np.diag([5, 2, 7])
    oa, macc = metrics(conf)
    assert oa == 1.0 and macc == 1.0


def test_metrics_collapsed_predictions():
    conf = ConfusionMatrix(2)
    conf.update([0] * 10 + [1] * 10, [0] * 20)
    oa, macc = metrics(conf)
    assert oa == 0.5 and macc == 0.5


def test_metrics_skips_absent_classes():
    conf = ConfusionMatrix(3)
    conf.update([0, 0, 1, 1], [0, 0, 1, 0])
    _, macc = metrics(conf)
    assert macc == pytest.approx((1.0 + 0.5) / 2)


def test_metrics_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 5, 200)
    pred = rng.integers(0, 5, 200)
    conf = ConfusionMatrix(5)
    conf.update(truth, pred)
    oa, macc = metrics(conf)
    assert oa == pytest.approx(float((truth == pred).mean()))
    per_class = [float((pred[truth == c] == c).mean())
                 for c in range(5) if (truth == c).any()]
    assert macc == pytest.approx(float(np.mean(per_class)))


def test_metrics_merge_equals_joint():
    rng = np.random.default_rng(4)
    t1, p1 = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    t2, p2 = rng.integers(0, 3, 70), rng.integers(0, 3, 70)
    a, b, joint = ConfusionMatrix(3), ConfusionMatrix(3), ConfusionMatrix(3)
    a.update(t1, p1)
    b.update(t2, p2)
    joint.update(np.concatenate([t1, t2]), np.concatenate([p1, p2]))
    np.testing.assert_array_equal(a.merge(b).counts, joint.counts)


def test_oa_invariant_under_relabeling():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 4, 100)
    pred = rng.integers(0, 4, 100)
    perm = rng.permutation(4)
    a, b = ConfusionMatrix(4), ConfusionMatrix(4)
    a.update(truth, pred)
    b.update(perm[truth], perm[pred])
    assert metrics(a)[0] == metrics(b)[0]


# ---------------------------------------------------------------------------
# IoU

PART_RANGES = {0: (0, 2), 1: (2, 5)}


def test_iou_perfect_prediction():
    truth = [np.array([0, 0, 1, 1]), np.array([2, 3, 4, 2])]
    ins, cls = iou_metrics(truth, truth, [0, 1], PART_RANGES)
    assert ins == 1.0 and cls == 1.0


def test_iou_disjoint_part_scores_zero():
    truth = [np.array([0, 0, 0, 0])]
    pred = [np.array([1, 1, 1, 1])]
    ins, _ = iou_metrics(pred, truth, [0], PART_RANGES)
    assert ins == 0.0  # both parts present in union, both IoU zero


def test_iou_hand_computed_three_shapes():
    # shape A (cat 0): parts {0,1}; prediction half right on part 0
    a_truth = np.array([0, 0, 1, 1])
    a_pred = np.array([0, 1, 1, 1])
    # part0: inter 1, union 2 -> 0.5 ; part1: inter 2, union 3 -> 2/3
    a_iou = (0.5 + 2 / 3) / 2
    # shape B (cat 0): exact
    b_truth = np.array([1, 1, 0, 0])
    b_iou = 1.0
    # shape C (cat 1): part 2 correct, parts 3,4 absent everywhere -> both 1
    c_truth = np.array([2, 2, 2, 2])
    c_pred = np.array([2, 2, 2, 2])
    c_iou = 1.0
    ins, cls = iou_metrics([a_pred, b_truth, c_pred],
                           [a_truth, b_truth, c_truth], [0, 0, 1], PART_RANGES)
    assert ins == pytest.approx((a_iou + b_iou + c_iou) / 3)
    assert cls == pytest.approx(((a_iou + b_iou) / 2 + c_iou) / 2)


def test_iou_empty_union_convention():
    truth = [np.array([2, 2])]   # parts 3, 4 never appear
    pred = [np.array([2, 2])]
    ins, _ = iou_metrics(pred, truth, [1], PART_RANGES)
    assert ins == 1.0


def test_iou_unknown_category_errors():
    with pytest.raises(ValueError):
        iou_metrics([np.array([0])], [np.array([0])], [7], PART_RANGES)


# ---------------------------------------------------------------------------
# misc

def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(6)
    p = softmax(rng.standard_normal((11, 5)) * 10)
    np.testing.assert_allclose(p.sum(axis=1), np.ones(11), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=10 ** 6), min_size=2, max_size=20))
def test_class_weights_mean_one_property(freqs):
    w = class_weights(freqs)
    assert w.mean() == pytest.approx(1.0, rel=1e-9)
    assert np.all(w > 0)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kind="nope")
    with pytest.raises(ValueError):
        LossConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        LossConfig(kind="wce")  # missing freqs
