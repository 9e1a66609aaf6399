import numpy as np
import pytest

from cgmm_enhance.exceptions import NetworkError, NumericalAbortError
from cgmm_enhance.optimizer import AdamState, EarlyStopping, PlateauScheduler, adam_step, clip_grad_norm


def test_adam_converges_on_quadratic():
    x = np.array([1.0])
    state = AdamState.zeros(1)
    for _ in range(100):
        x, state = adam_step(x, 2.0 * x, state, lr=0.1)
    assert abs(x[0]) < 1e-2
    assert state.step == 100


def test_adam_first_step_is_lr_sized():
    x = np.array([1.0, -2.0])
    new, _ = adam_step(x, np.array([3.0, -0.5]), AdamState.zeros(2), lr=0.01)
    assert np.allclose(new, [0.99, -1.99], atol=1e-8)


def test_adam_does_not_mutate_inputs():
    x = np.array([1.0, 2.0])
    state = AdamState.zeros(2)
    adam_step(x, np.ones(2), state, lr=0.1)
    assert np.array_equal(x, [1.0, 2.0])
    assert state.step == 0 and np.all(state.m == 0)


def test_decoupled_weight_decay():
    x = np.array([2.0])
    plain, _ = adam_step(x, np.zeros(1), AdamState.zeros(1), lr=0.1)
    decayed, _ = adam_step(x, np.zeros(1), AdamState.zeros(1), lr=0.1, weight_decay=0.5)
    assert plain[0] == 2.0
    assert decayed[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericalAbortError):
        adam_step(np.zeros(3), np.array([0.0, np.inf, 1.0]), AdamState.zeros(3), lr=0.1)


def test_adam_shape_mismatch():
    with pytest.raises(NetworkError, match="形状不一致"):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), lr=0.1)


def test_clip_grad_norm():
    grads, norm = clip_grad_norm(np.array([3.0, 4.0]), 1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose(grads, [0.6, 0.8])
    same, _ = clip_grad_norm(np.array([0.3, 0.4]), 1.0)
    assert np.array_equal(same, [0.3, 0.4])


def test_plateau_halves_after_patience():
    sched = PlateauScheduler(lr=1e-3, patience=3)
    assert not sched.step(1.0)
    assert not sched.step(1.0)
    assert not sched.step(1.0)
    assert sched.step(1.0)
    assert sched.lr == pytest.approx(5e-4)
    # 计数器在减半后清零
    assert not sched.step(1.0)
    assert not sched.step(1.0)
    assert sched.step(1.0)
    assert sched.lr == pytest.approx(2.5e-4)
    assert sched.num_reductions == 2


def test_plateau_tolerance_counts_ties_as_no_improvement():
    sched = PlateauScheduler(lr=1.0, patience=2)
    sched.step(1.0)
    sched.step(1.0 - 5e-7)
    assert sched.step(1.0 - 9e-7)
    assert sched.lr == 0.5


def test_plateau_improvement_resets():
    sched = PlateauScheduler(lr=1.0, patience=2)
    sched.step(1.0)
    sched.step(1.1)
    sched.step(0.5)
    assert not sched.step(0.6)
    assert sched.lr == 1.0


def test_early_stopping():
    stop = EarlyStopping(patience=3)
    assert stop.step(1, 1.0)
    assert stop.step(2, 0.8)
    assert not stop.step(3, 0.9)
    assert not stop.step(4, 0.8)
    assert not stop.should_stop
    assert not stop.step(5, 0.85)
    assert stop.should_stop
    assert stop.best == 0.8
    assert stop.best_epoch == 2
