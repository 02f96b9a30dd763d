from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGrad
from .models import GradCheckRecord
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def adamw_step(
    params: Mapping[str, Tensor], state: OptimState, step_index: int | None = None
) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGrad(name, step_index)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)

        # decoupled decay acts on the pre-update value
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    *,
    check: str = "grad_check",
    tolerance: float = 1e-3,
    max_coords: int | None = None,
    floor: float = 1e-3,
    seed: int = 0,
) -> GradCheckRecord:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    The relative error per coordinate is |fd - tape| / max(|fd|, |tape|, floor).
    With ``max_coords`` set, a seeded subset of coordinates is checked per
    parameter.
    """
    zero_grads(params)
    f().backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    rng = np.random.default_rng(seed)

    worst, worst_param, worst_index = 0.0, "", []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = f().item()
            flat[c] = orig - step
            fm = f().item()
            flat[c] = orig
            fd = (fp - fm) / (2.0 * step)
            an = analytic[name].reshape(-1)[c]
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            if err > worst:
                worst = err
                worst_param = name
                worst_index = [int(i) for i in np.unravel_index(c, p.shape)]

    return GradCheckRecord(
        check=check,
        max_rel_error=float(worst),
        param=worst_param,
        index=worst_index,
        tolerance=tolerance,
        passed=bool(worst <= tolerance),
    )
