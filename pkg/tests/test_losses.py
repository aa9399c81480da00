import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atseg import tensor as T
from atseg.errors import ContractError, ShapeError
from atseg.losses import (
    EMPTY_METRICS,
    LossConfig,
    MetricsRecord,
    aggregate,
    combined_loss,
    compute_metrics,
    dice_loss,
    loss_terms,
    mse_loss,
)
from atseg.segnet import soft_binarize
from atseg.tensor import Tape, Tensor
from conftest import check_gradients

EPS = 1e-6


def oracle_dice_loss(p, t, eps=EPS):
    p = [float(v) for v in np.ravel(p)]
    t = [float(v) for v in np.ravel(t)]
    inter = sum(a * b for a, b in zip(p, t))
    return 1 - 2 * inter / (sum(a * a for a in p) + sum(b * b for b in t) + eps)


def test_dice_loss_examples():
    m = np.array([1, 1, 0, 0], dtype=np.float32)
    assert dice_loss(Tensor(m), m, EPS).item() <= 1e-5
    assert dice_loss(Tensor([0, 0, 1, 1]), m, EPS).item() >= 1 - 1e-5
    got = dice_loss(Tensor([1, 0, 0, 0]), m, EPS).item()
    assert got == pytest.approx(1 - 2 / (2 + 1 + EPS), abs=1e-7)
    assert got == pytest.approx(0.3333, abs=1e-4)
    with pytest.raises(ShapeError):
        dice_loss(Tensor([1.0, 0.0]), m)


def test_mse_examples():
    assert mse_loss(Tensor([0.3, 0.7]), Tensor([0.3, 0.7])).item() == 0
    assert mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 0.5
    assert mse_loss(Tensor([0.0, 1.0]), Tensor([1.0, 0.0])).item() == 1.0
    with pytest.raises(ShapeError):
        mse_loss(Tensor([0.0]), Tensor([1.0, 0.0]))


unit_arrays = arrays(np.float32, st.integers(1, 32), elements=st.floats(0, 1, width=32))


@given(unit_arrays, st.data())
@settings(max_examples=60, deadline=None)
def test_dice_loss_matches_oracle_and_range(p, data):
    t = data.draw(arrays(np.float32, p.shape, elements=st.sampled_from([0.0, 1.0])))
    got = dice_loss(Tensor(p), t, EPS).item()
    assert got == pytest.approx(oracle_dice_loss(p, t), abs=1e-6)
    assert -1e-6 <= got <= 1 + 1e-6


@given(unit_arrays, st.data())
@settings(max_examples=60, deadline=None)
def test_mse_symmetric_bitwise(a, data):
    b = data.draw(arrays(np.float32, a.shape, elements=st.floats(0, 1, width=32)))
    assert mse_loss(Tensor(a), Tensor(b)).item() == mse_loss(Tensor(b), Tensor(a)).item()


def test_dice_loss_monotone_in_foreground_pixels():
    for seed in range(20):
        r = np.random.default_rng(seed)
        p = r.random(16).astype(np.float32)
        t = (r.random(16) > 0.5).astype(np.float32)
        t[0] = 1
        leaf = Tensor(p, requires_grad=True)
        with Tape() as tape:
            loss = dice_loss(leaf, t, EPS)
        T.backward(loss, tape)
        fd = T.finite_diff_grad(lambda x: dice_loss(x, t, EPS), Tensor(p), 1e-3).data
        assert np.all(leaf.grad[t == 1] <= 1e-7)
        assert np.all(fd[t == 1] <= 1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_dice_and_mse_gradients(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(0.05, 0.95, (1, 1, 4, 4))
    t = (r.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    assert check_gradients(lambda x: dice_loss(x, t, EPS), [p]) < 1e-2
    assert check_gradients(mse_loss, [p, r.random((1, 1, 4, 4))]) < 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_combined_loss_gradient(seed):
    r = np.random.default_rng(seed)
    p, thr = r.uniform(0.05, 0.95, (2, 1, 4, 4)), r.uniform(0.2, 0.8, (2, 1, 4, 4))
    t = (r.random((2, 1, 4, 4)) > 0.5).astype(np.float32)
    cfg = LossConfig(lambda_mse=0.7, tau=0.2)
    assert check_gradients(lambda a, b: combined_loss(a, b, t, cfg), [p, thr]) < 1e-2


def test_combined_loss_lambda_zero_is_dice():
    r = np.random.default_rng(0)
    p, thr = Tensor(r.random((1, 1, 4, 4))), Tensor(r.random((1, 1, 4, 4)))
    t = (r.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    total = combined_loss(p, thr, t, LossConfig(lambda_mse=0.0)).item()
    assert total == dice_loss(p, t, EPS).item()
    _, _, mse = loss_terms(p, thr, t, LossConfig(lambda_mse=0.0))
    assert mse is None


def test_combined_loss_small_when_confident():
    # 2x2 case: prob equals the binary target, threshold 0.5, margin 0.5 >> tau
    t = np.array([[[[1, 0], [0, 1]]]], dtype=np.float32)
    loss = combined_loss(Tensor(t), Tensor(np.full_like(t, 0.5)), t, LossConfig(tau=0.01)).item()
    dice_part = 1 - 2 * 2 / (2 + 2 + EPS)
    mse_part = (1 / (1 + np.exp(50))) ** 2
    assert loss == pytest.approx(dice_part + mse_part, abs=1e-6)
    assert loss < 0.05


def test_combined_loss_finite_nonnegative():
    for seed in range(20):
        r = np.random.default_rng(seed)
        p, thr = Tensor(r.random((2, 1, 8, 8))), Tensor(r.random((2, 1, 8, 8)))
        t = (r.random((2, 1, 8, 8)) > 0.5).astype(np.float32)
        loss = combined_loss(p, thr, t, LossConfig()).item()
        assert np.isfinite(loss) and loss >= -1e-6


def test_combined_is_dice_plus_weighted_mse():
    r = np.random.default_rng(3)
    p, thr = Tensor(r.random((1, 1, 4, 4))), Tensor(r.random((1, 1, 4, 4)))
    t = (r.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    cfg = LossConfig(lambda_mse=0.25, tau=0.3)
    expected = dice_loss(p, t).item() + 0.25 * mse_loss(soft_binarize(p, thr, 0.3), Tensor(t)).item()
    assert combined_loss(p, thr, t, cfg).item() == pytest.approx(expected, rel=1e-6)


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(epsilon=0)
    with pytest.raises(ContractError):
        LossConfig(lambda_mse=-1)
    with pytest.raises(ContractError):
        LossConfig(tau=0)


# ---------------------------------------------------------------- metrics


def test_metrics_examples():
    m = np.array([1, 1, 0, 0])
    r = compute_metrics(m, m)
    assert (r.dice, r.iou, r.pixel_accuracy, r.fp, r.fn) == (1.0, 1.0, 1.0, 0, 0)
    r = compute_metrics(np.ones(6), np.zeros(6))
    assert r.fp == 6 and r.dice == 0.0
    r = compute_metrics(np.array([1, 0, 0, 1]), m)
    assert (r.tp, r.fp, r.fn, r.tn) == (1, 1, 1, 1)
    assert r.dice == 0.5 and r.iou == pytest.approx(1 / 3) and r.pixel_accuracy == 0.5


def test_both_empty_convention():
    r = compute_metrics(np.zeros(4), np.zeros(4))
    assert r.dice == r.iou == 1.0
    assert EMPTY_METRICS.dice == 1.0


def test_metrics_contracts():
    with pytest.raises(ContractError):
        compute_metrics(np.array([0.5, 1.0]), np.array([1, 0]))
    with pytest.raises(ShapeError):
        compute_metrics(np.zeros(3), np.zeros(4))


binary = st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.int8, n, elements=st.sampled_from([0, 1])), arrays(np.int8, n, elements=st.sampled_from([0, 1]))))


@given(binary)
@settings(max_examples=100, deadline=None)
def test_metric_invariants(pair):
    p, t = pair
    r = compute_metrics(p, t)
    assert r.tp + r.fp + r.fn + r.tn == p.size
    assert r.iou <= r.dice + 1e-12
    for v in (r.dice, r.iou, r.pixel_accuracy):
        assert 0.0 <= v <= 1.0
    if p.any() and t.any():
        loss = dice_loss(Tensor(p.astype(np.float32)), t.astype(np.float32), EPS).item()
        assert r.dice == pytest.approx(1 - loss, abs=1e-4)


def test_aggregate_micro_average():
    recs = [MetricsRecord(1, 2, 3, 4), MetricsRecord(5, 0, 1, 10), EMPTY_METRICS]
    total = aggregate(recs)
    assert total == MetricsRecord(6, 2, 4, 14)
    assert total.tp == sum(r.tp for r in recs)
    assert total.dice == 2 * 6 / (12 + 2 + 4)
    assert aggregate([]) == EMPTY_METRICS
