"""Central finite differences, the oracle for every backward pass."""
from __future__ import annotations

from typing import Callable, Optional, Union

import numpy as np

from .tensor import Tensor

ArrayLike = Union[np.ndarray, Tensor]


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v))


def finite_diff_grad(f: Callable[[Tensor], object], x: ArrayLike, h: Optional[float] = None) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x`` by central differences.

    ``f`` receives a fresh, non-grad :class:`Tensor` per evaluation. The
    default step is 1e-5 for float64 inputs and 1e-3 for float32.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x)
    if h is None:
        h = 1e-5 if base.dtype == np.float64 else 1e-3
    grad = np.zeros(base.shape, dtype=np.float64)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + h
        fp = _scalar(f(Tensor(base.copy())))
        base[idx] = orig - h
        fm = _scalar(f(Tensor(base.copy())))
        base[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def finite_diff_param(f: Callable[[], object], p: ArrayLike, h: Optional[float] = None) -> np.ndarray:
    """Like :func:`finite_diff_grad` but perturbs ``p`` in place and calls ``f()``."""
    data = p.data if isinstance(p, Tensor) else p
    if h is None:
        h = 1e-5 if data.dtype == np.float64 else 1e-3
    grad = np.zeros(data.shape, dtype=np.float64)
    for idx in np.ndindex(data.shape):
        orig = data[idx]
        data[idx] = orig + h
        fp = _scalar(f())
        data[idx] = orig - h
        fm = _scalar(f())
        data[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise.

    The floor turns the test into an absolute one for entries whose true
    gradient is ~0, where a relative error is meaningless.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
