import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctr import autodiff as ad
from ctr.autodiff import Tensor
from ctr.head import (RefineOutput, TrainingTarget, conf_target_from_iou, fuse_scores, refine_loss,
                      sample_training_set)


def test_conf_target_examples():
    assert conf_target_from_iou(0.25) == 0.0
    assert conf_target_from_iou(0.75) == 1.0
    assert conf_target_from_iou(0.55) == pytest.approx(0.6)


@given(st.floats(0, 1), st.floats(0, 1))
def test_conf_target_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    ta, tb = conf_target_from_iou(lo), conf_target_from_iou(hi)
    assert 0.0 <= ta <= tb <= 1.0


def test_regression_gate():
    t = TrainingTarget.build([0.55, 0.56, 0.9, 0.1], np.zeros((4, 7)))
    np.testing.assert_array_equal(t.is_regression_active, [False, True, True, False])


def test_balanced_split():
    ious = np.r_[np.full(100, 0.8), np.full(100, 0.2)]
    s = sample_training_set(ious, 128, np.random.default_rng(0))
    assert (s.n_fg, s.n_bg, s.imbalanced) == (64, 64, False)
    assert np.all(ious[s.indices[:64]] > 0.55) and np.all(ious[s.indices[64:]] <= 0.55)
    assert len(np.unique(s.indices)) == 128


def test_shortage_fallback():
    ious = np.r_[np.full(10, 0.8), np.full(300, 0.2)]
    s = sample_training_set(ious, 128, np.random.default_rng(0))
    assert (s.n_fg, s.n_bg, s.imbalanced) == (10, 118, True)


def test_sampling_errors():
    with pytest.raises(ValueError):
        sample_training_set([], 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_training_set([0.9, 0.1], 3, np.random.default_rng(0))


def test_sampling_uniform_within_sides():
    ious = np.r_[np.full(20, 0.8), np.full(30, 0.2)]
    rng = np.random.default_rng(1)
    counts = np.zeros(50)
    trials = 10_000
    for _ in range(trials):
        np.add.at(counts, sample_training_set(ious, 8, rng).indices, 1)
    for side, k in ((counts[:20], 4), (counts[20:], 4)):
        expect = trials * k / len(side)
        chi2 = ((side - expect) ** 2 / expect).sum()
        # df = 19 or 29; the 99.9th percentile is below 60
        assert chi2 < 60


def loop_loss(logits, residual, conf, reg, active):
    total = 0.0
    for i in range(len(logits)):
        x, t = float(logits[i]), float(conf[i])
        total += max(x, 0) - x * t + math.log1p(math.exp(-abs(x)))
        if active[i]:
            for a, b in zip(residual[i], reg[i]):
                d = abs(a - b)
                total += 0.5 * d * d if d < 1.0 else d - 0.5
    return total / len(logits)


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    iou = rng.uniform(0, 1, 8)
    t = TrainingTarget.build(iou, rng.standard_normal((8, 7)))
    logits, res = rng.standard_normal(8) * 3, rng.standard_normal((8, 7)) * 2
    with ad.precision("float64"):
        got = refine_loss(RefineOutput(Tensor(logits), Tensor(res)), t).item()
    assert got == pytest.approx(loop_loss(logits, res, t.conf_target, t.reg_target, t.is_regression_active),
                                abs=1e-6)


def test_loss_at_optimum():
    reg = np.random.default_rng(1).standard_normal((4, 7))
    t = TrainingTarget.build([0.9] * 4, reg)
    with ad.precision("float64"):
        loss = refine_loss(RefineOutput(Tensor(np.full(4, 20.0)), Tensor(reg)), t).item()
    assert loss < 1e-6 + math.log1p(math.exp(-20))


def test_background_batch_has_no_regression_term():
    rng = np.random.default_rng(2)
    t = TrainingTarget.build([0.1, 0.3, 0.5], rng.standard_normal((3, 7)))
    logits = Tensor(rng.standard_normal(3))
    a = refine_loss(RefineOutput(logits, Tensor(rng.standard_normal((3, 7)) * 50)), t).item()
    b = refine_loss(RefineOutput(logits, Tensor(np.zeros((3, 7)))), t).item()
    assert a == b


@given(st.integers(0, 2**31))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 10))
    t = TrainingTarget.build(rng.uniform(0, 1, m), rng.standard_normal((m, 7)))
    out = RefineOutput(Tensor(rng.standard_normal(m) * 10), Tensor(rng.standard_normal((m, 7)) * 5))
    assert refine_loss(out, t).item() >= 0.0


def test_loss_shape_mismatch():
    t = TrainingTarget.build([0.9, 0.1], np.zeros((2, 7)))
    with pytest.raises(ad.ShapeError):
        refine_loss(RefineOutput(Tensor(np.zeros(3)), Tensor(np.zeros((3, 7)))), t)


def test_fuse_scores():
    assert fuse_scores(0.8, 0.6) == pytest.approx(0.7)
    x = np.random.default_rng(0).uniform(0, 1, 100)
    np.testing.assert_array_equal(fuse_scores(x, x), x)
