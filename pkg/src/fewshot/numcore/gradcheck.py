"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumcoreError, Tensor


class VerificationError(NumcoreError):
    pass


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-4) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``fn`` maps a tensor to a scalar tensor and must be deterministic. ``x``
    is promoted to float64.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base.copy(), requires_grad=True)
    out = fn(xt)
    if not np.all(np.isfinite(out.data)):
        raise VerificationError("fn returned a non-finite value")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    def value(arr: np.ndarray) -> float:
        v = fn(Tensor(arr)).data
        if not np.all(np.isfinite(v)):
            raise VerificationError("fn returned a non-finite value during differencing")
        return float(v)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
