import numpy as np
import pytest

from unisplat.errors import NonFiniteGrad
from unisplat.optim import OptimState, adamw_step, grad_check, zero_grads
from unisplat.tensor import custom, parameter


def test_first_step_moves_by_lr():
    p = parameter(np.array([1.0, -2.0, 0.5]), "p")
    p.grad = np.array([3.0, -0.01, 100.0])
    state = OptimState(lr=1e-3, weight_decay=0.0)
    adamw_step({"p": p}, state)
    delta = np.array([1.0, -2.0, 0.5]) - p.data
    assert np.allclose(np.abs(delta), 1e-3, rtol=1e-4)
    assert np.all(np.sign(delta) == np.sign([3.0, -0.01, 100.0]))


def test_decay_only_step_scales_params():
    p = parameter(np.array([2.0, -4.0]), "p")
    p.grad = np.zeros(2)
    state = OptimState(lr=0.1, weight_decay=0.5)
    adamw_step({"p": p}, state)
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1.0 - 0.1 * 0.5))


def test_missing_grad_counts_as_zero():
    p = parameter(np.ones(2), "p")
    p.grad = None
    state = OptimState(lr=0.1, weight_decay=0.0)
    adamw_step({"p": p}, state)
    assert np.allclose(p.data, 1.0)
    assert state.step == 1


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_grad_leaves_params_untouched(bad):
    a = parameter(np.ones(2), "a")
    b = parameter(np.ones(2), "b")
    a.grad = np.ones(2)
    b.grad = np.array([0.0, bad])
    state = OptimState()
    with pytest.raises(NonFiniteGrad) as exc:
        adamw_step({"a": a, "b": b}, state, step_index=7)
    assert exc.value.param == "b"
    assert exc.value.step == 7
    assert np.allclose(a.data, 1.0)
    assert state.step == 0


def test_descends_a_quadratic():
    p = parameter(np.array([3.0, -1.0]), "p")
    state = OptimState(lr=0.05, weight_decay=0.0)
    for _ in range(300):
        zero_grads({"p": p})
        (p * p).sum().backward()
        adamw_step({"p": p}, state)
    assert np.linalg.norm(p.data) < 0.1


def test_grad_check_flags_a_wrong_gradient():
    x = parameter(np.array([0.3, -0.7]), "x")

    def f():
        wrong = custom(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))
        return wrong.sum()

    rec = grad_check(f, {"x": x}, check="wrong", tolerance=1e-4)
    assert not rec.passed
    assert rec.param == "x"
    assert rec.max_rel_error > 0.1


def test_grad_check_samples_coordinates():
    x = parameter(np.linspace(-1.0, 1.0, 50), "x")
    rec = grad_check(lambda: (x * x * x).sum(), {"x": x}, max_coords=5, tolerance=1e-5)
    assert rec.passed
