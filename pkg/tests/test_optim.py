import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from petra.optim import DivergenceError, LrSchedule, SgdState, lr_at, preset_schedule, scaled_base_lr, sgd_step


def test_plain_sgd_when_no_momentum_or_decay(rng):
    p = rng.standard_normal(5)
    d = rng.standard_normal(5)
    expect = p - 0.3 * d
    sgd_step([p], [d], SgdState.for_params([p], [False], momentum=0.0), 0.3)
    np.testing.assert_allclose(p, expect, rtol=0, atol=1e-15)


def test_exempt_tensor_gets_no_decay(rng):
    p = rng.standard_normal(4)
    before = p.copy()
    state = SgdState.for_params([p], [True], momentum=0.9, weight_decay=0.5)
    for _ in range(3):
        sgd_step([p], [np.zeros(4)], state, 0.1)
    np.testing.assert_array_equal(p, before)


def test_two_steps_match_hand_unrolled_nesterov():
    mu, lr, wd = 0.9, 0.1, 0.0
    p = np.array([1.0, -2.0])
    d = np.array([0.5, 0.25])
    st_ = SgdState.for_params([p], [False], mu, wd)
    sgd_step([p], [d], st_, lr)
    sgd_step([p], [d], st_, lr)
    # v1 = d, p1 = p0 - lr (d + mu d); v2 = mu d + d, p2 = p1 - lr (d + mu (1 + mu) d)
    expect = np.array([1.0, -2.0]) - lr * (1 + mu) * d - lr * (1 + mu + mu * mu) * d
    np.testing.assert_allclose(p, expect, rtol=1e-15)


def test_weight_decay_folds_into_the_gradient():
    p = np.array([2.0])
    sgd_step([p], [np.array([0.0])], SgdState.for_params([p], [False], 0.0, 0.1), 1.0)
    np.testing.assert_allclose(p, [1.8])


def test_nan_gradient_raises():
    p = np.ones(2)
    with pytest.raises(DivergenceError):
        sgd_step([p], [np.array([np.nan, 0.0])], SgdState.for_params([p], [False]), 0.1)


def test_shape_mismatch_raises():
    p = np.ones(2)
    with pytest.raises(ValueError):
        sgd_step([p], [np.ones(3)], SgdState.for_params([p], [False]), 0.1)


@pytest.mark.parametrize("k,lr", [(1, 0.025), (4, 0.1), (32, 0.8)])
def test_scaled_base_lr(k, lr):
    assert scaled_base_lr(k) == pytest.approx(lr, rel=1e-15)


def test_scaled_base_lr_rejects_zero():
    with pytest.raises(ValueError):
        scaled_base_lr(0)


def test_warmup_midpoint_is_half_base():
    s = LrSchedule(0.4, steps_per_epoch=10, warmup_epochs=5, milestones=[])
    assert lr_at(s, 25) == pytest.approx(0.2)
    assert lr_at(s, 0) == 0.0


def test_cifar_preset_epoch_200():
    s, wd, epochs = preset_schedule("cifar10", 0.1, 100)
    assert (wd, epochs) == (5e-4, 300)
    assert lr_at(s, 200 * 100) == pytest.approx(0.01)


def test_imagenet_preset_epoch_85():
    s, wd, epochs = preset_schedule("imagenet", 0.1, 100)
    assert (wd, epochs) == (1e-4, 90)
    assert lr_at(s, 85 * 100) == pytest.approx(1e-4)


def test_desk_preset_milestones():
    s, wd, _ = preset_schedule("desk", 1.0, 10, epochs=20)
    assert s.milestones == [10.0, 15.0]
    with pytest.raises(ValueError):
        preset_schedule("desk", 1.0, 10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(1, 50), st.integers(0, 10), st.integers(20, 60))
def test_schedule_monotone_in_each_phase(base, spe, warm, epochs):
    s = LrSchedule(base, spe, warm, [epochs // 2, 3 * epochs // 4])
    lrs = [lr_at(s, t) for t in range(epochs * spe)]
    w = warm * spe
    assert all(a <= b for a, b in zip(lrs[:w], lrs[1:w]))
    assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_stage_order_does_not_matter(seed, order):
    rng = np.random.default_rng(seed)
    shapes = [(3,), (2, 2), (4,), (1, 3)]
    params = [rng.standard_normal(s) for s in shapes]
    grads = [rng.standard_normal(s) for s in shapes]
    exempt = [False, True, False, True]
    # monolithic step over all tensors
    mono = [p.copy() for p in params]
    sgd_step(mono, grads, SgdState.for_params(mono, exempt, 0.9, 1e-2), 0.05)
    # one optimizer per tensor, stepped in a random order
    split = [p.copy() for p in params]
    states = [SgdState.for_params([p], [e], 0.9, 1e-2) for p, e in zip(split, exempt)]
    for i in order:
        sgd_step([split[i]], [grads[i]], states[i], 0.05)
    for a, b in zip(mono, split):
        np.testing.assert_array_equal(a, b)


def test_decay_only_touches_non_exempt_tensors(rng):
    params = [rng.standard_normal(3), rng.standard_normal(3)]
    before = [p.copy() for p in params]
    wd, lr = 0.1, 0.5
    sgd_step(params, [np.zeros(3), np.zeros(3)], SgdState.for_params(params, [False, True], 0.0, wd), lr)
    np.testing.assert_allclose(before[0] - params[0], lr * wd * before[0])
    np.testing.assert_array_equal(params[1], before[1])
