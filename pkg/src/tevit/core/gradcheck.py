"""Central-difference gradient checker."""

from __future__ import annotations

from typing import Callable

import numpy as np

from tevit.core.errors import ContractError, NumericError
from tevit.core.tensor import Tensor, no_grad


def finite_diff_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5, max_elements: int | None = None,
                      rng: np.random.Generator | None = None, pass_x: bool = True) -> float:
    """Max relative error between backprop and central differences for ``x``.

    ``f`` maps ``x`` to a scalar (or takes no argument when ``pass_x`` is
    False, useful when ``x`` is a parameter captured by a closure).  The error
    per element is ``|a - n| / max(|a|, |n|, 1e-8)``.  ``max_elements`` checks a
    random subset, which keeps big parameter tensors tractable.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    call = (lambda: f(x)) if pass_x else f
    x.requires_grad = True
    x.grad = None
    out = call()
    if out.size != 1:
        raise ContractError("gradient check needs a scalar function")
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = call().item()
            flat[i] = orig - step
            fm = call().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value while perturbing element {i}")
            num = (fp - fm) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
