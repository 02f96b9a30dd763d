import numpy as np
import pytest

from unisplat.errors import TapeError
from unisplat.optim import grad_check
from unisplat.tensor import (
    Tensor,
    concat,
    exp,
    gelu,
    huber,
    layer_norm,
    log,
    normalize,
    parameter,
    sigmoid,
    softmax,
    softplus,
    stack,
    tanh,
    vector_norm,
    where,
)


def test_square_gradient():
    x = parameter(3.0, "x")
    (x * x).backward()
    assert float(x.grad) == pytest.approx(6.0)


def test_product_gradient():
    x = parameter(2.0, "x")
    y = parameter(5.0, "y")
    (x * y).backward()
    assert float(x.grad) == pytest.approx(5.0)
    assert float(y.grad) == pytest.approx(2.0)


def test_shared_node_accumulates():
    x = parameter(2.0, "x")
    y = x * 3.0
    (y + y * y).backward()
    # d/dx (3x + 9x^2) = 3 + 18x
    assert float(x.grad) == pytest.approx(39.0)


def test_broadcast_gradient_is_reduced():
    x = parameter(np.ones((3, 4)), "x")
    b = parameter(np.zeros(4), "b")
    (x + b).sum().backward()
    assert b.grad.shape == (4,)
    assert np.allclose(b.grad, 3.0)


def test_non_scalar_root_rejected():
    x = parameter(np.ones(3), "x")
    with pytest.raises(TapeError):
        (x * 2.0).backward()


def test_cycle_rejected():
    x = parameter(1.0, "x")
    y = x * 2.0
    x._parents = (y,)
    x._backward = lambda g: (g,)
    with pytest.raises(TapeError):
        y.backward()


def test_constants_do_not_record():
    assert (parameter(1.0) * 0.0).requires_grad
    assert not (Tensor(np.ones(2)) * 3.0).requires_grad


def test_softplus_at_zero():
    assert softplus(parameter(0.0)).item() == pytest.approx(0.6931, abs=1e-4)


def test_huber_branches():
    assert huber(parameter(2.0), 1.0).item() == pytest.approx(1.5)
    assert huber(parameter(0.5), 1.0).item() == pytest.approx(0.125)


def test_vector_norm_zero_has_zero_grad():
    x = parameter(np.zeros(3), "x")
    vector_norm(x).backward()
    assert np.allclose(x.grad, 0.0)


UNARY = {
    "exp": exp,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "gelu": gelu,
    "log": lambda x: log(x * x + 1.0),
    "softmax": lambda x: softmax(x, axis=-1),
    "normalize": lambda x: normalize(x, axis=-1),
    "vector_norm": lambda x: vector_norm(x, axis=-1),
    "huber": lambda x: huber(x, 0.3),
}


@pytest.mark.parametrize("op", UNARY.keys())
def test_unary_gradients(op):
    rng = np.random.default_rng(1)
    x = parameter(rng.normal(size=(3, 4)), "x")
    w = rng.normal(size=(3, 4)) if op not in ("vector_norm",) else rng.normal(size=3)
    rec = grad_check(lambda: (UNARY[op](x) * w).sum(), {"x": x}, check=op, tolerance=1e-5)
    assert rec.passed, rec


def test_structural_gradients():
    rng = np.random.default_rng(2)
    a = parameter(rng.normal(size=(2, 3)), "a")
    b = parameter(rng.normal(size=(3, 4)), "b")
    w = rng.normal(size=(4, 2))

    def f():
        m = a @ b
        joined = concat([m, m[:, ::-1]], axis=1)
        picked = stack([joined[0], joined[1] * 2.0])
        kept = where(picked.data > 0.0, picked, picked * 0.5)
        return (kept.transpose(1, 0) * w).sum()

    rec = grad_check(f, {"a": a, "b": b}, tolerance=1e-5)
    assert rec.passed, rec


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(size=(5, 6)), "x")
    g = parameter(rng.normal(size=6), "g")
    b = parameter(rng.normal(size=6), "b")
    w = rng.normal(size=(5, 6))
    rec = grad_check(lambda: (layer_norm(x, g, b) * w).sum(), {"x": x, "g": g, "b": b}, tolerance=1e-5)
    assert rec.passed, rec
