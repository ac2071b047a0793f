from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    analytic: Sequence[np.ndarray] | None = None,
    floor: float = 1e-4,
) -> float:
    """Worst relative error between backprop gradients and central differences.

    ``f`` rebuilds the scalar output from the current values of ``params``.
    If ``analytic`` is given it replaces the backprop gradients (used to
    feed deliberately wrong gradients as a negative control).

    The error of a coordinate is ``|a - n| / max(|n|, floor)``; the floor
    keeps near-zero gradients from amplifying differencing noise.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    if out.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued f")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f is not finite at the check point")
    if analytic is None:
        out.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a = np.asarray(a).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("f went non-finite during differencing")
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(a[i] - num) / max(abs(num), floor))
    return worst
