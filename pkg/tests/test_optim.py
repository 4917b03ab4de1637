import numpy as np
import pytest

import descsel.autodiff as ad
from descsel.errors import ContractViolationError, InvalidInputError
from descsel.optim import Adam, Schedule, SGDMomentum, build_optimizer


def param(values):
    return ad.parameter(np.asarray(values, dtype=np.float64), "p")


def test_adam_first_step_is_signed_lr():
    # with zero state, |update| = lr * |g| / (|g| + eps) ~= lr
    p = param([1.0, -2.0, 0.5])
    opt = Adam({"p": p}, learning_rate=0.01)
    p.grad = np.array([3.0, -0.1, 1e-3])
    opt.step(epoch=0)
    want = np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign([3.0, -0.1, 1e-3])
    assert np.allclose(p.value, want, atol=1e-6)


def test_adam_two_steps_match_reference_formula():
    p = param([0.0])
    opt = Adam({"p": p}, learning_rate=0.1)
    m = v = 0.0
    x = 0.0
    for t, g in enumerate([0.5, -0.25], start=1):
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.value[0] == pytest.approx(x, rel=1e-12)


def test_sgd_momentum_accumulates_velocity():
    p = param([0.0])
    opt = SGDMomentum({"p": p}, learning_rate=1.0, momentum=0.5)
    p.grad = np.array([1.0])
    opt.step()
    assert p.value[0] == pytest.approx(-1.0)
    p.grad = np.array([1.0])
    opt.step()
    # velocity: 0.5 * 1 + 1 = 1.5
    assert p.value[0] == pytest.approx(-2.5)


def test_schedule_staircase():
    s = Schedule.every(10, 0.1, 30)
    assert s.multiplier_at(0) == 1.0
    assert s.multiplier_at(9) == 1.0
    assert s.multiplier_at(10) == pytest.approx(0.1)
    assert s.multiplier_at(19) == pytest.approx(0.1)
    assert s.multiplier_at(20) == pytest.approx(0.01)
    assert s.multiplier_at(30) == pytest.approx(0.001)


def test_schedule_scales_update():
    p = param([0.0])
    opt = SGDMomentum({"p": p}, learning_rate=1.0, momentum=0.0,
                      schedule=Schedule.every(1, 0.5, 2))
    p.grad = np.array([1.0])
    opt.step(epoch=1)
    assert p.value[0] == pytest.approx(-0.5)


def test_step_without_backward_raises():
    p = param([1.0])
    opt = Adam({"p": p}, learning_rate=0.1)
    with pytest.raises(ContractViolationError):
        opt.step()


def test_partial_gradients_update_only_touched_params():
    a, b = param([1.0]), param([1.0])
    opt = SGDMomentum({"a": a, "b": b}, learning_rate=1.0, momentum=0.0)
    a.grad = np.array([1.0])  # b untouched this step
    opt.step()
    assert a.value[0] == pytest.approx(0.0)
    assert b.value[0] == pytest.approx(1.0)


def test_zero_grad_clears_all():
    a, b = param([1.0]), param([1.0])
    a.grad, b.grad = np.array([2.0]), np.array([3.0])
    opt = Adam({"a": a, "b": b}, learning_rate=0.1)
    opt.zero_grad()
    assert a.grad is None and b.grad is None


def test_build_optimizer_dispatch():
    p = {"p": param([0.0])}
    assert isinstance(build_optimizer("adam", p, 0.1), Adam)
    assert isinstance(build_optimizer("sgd", p, 0.1), SGDMomentum)
    assert isinstance(build_optimizer("sgd-momentum", p, 0.1), SGDMomentum)
    with pytest.raises(InvalidInputError):
        build_optimizer("rmsprop", p, 0.1)
    with pytest.raises(InvalidInputError):
        build_optimizer("adam", p, -0.1)


def test_optimizer_drives_quadratic_to_minimum():
    p = param([5.0])
    opt = Adam({"p": p}, learning_rate=0.3)
    for _ in range(200):
        opt.zero_grad()
        loss = ad.reduce_sum(ad.mul(p, p))
        ad.backward(loss)
        opt.step()
    assert abs(p.value[0]) < 1e-2
