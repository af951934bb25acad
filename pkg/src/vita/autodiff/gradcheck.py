"""Central-difference gradients; the independent oracle for :func:`backward`.

Probes are evaluated in float64 (via :func:`precision`) so the truncation and
rounding error of the oracle stays far below the float32 path it checks.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .optim import Parameter
from .tensor import Tensor, precision


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                         coords: Optional[Iterable[int]] = None) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for each flat index ``i``.

    ``coords`` restricts evaluation to a subset of flat indices; the other
    entries of the result stay zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data.astype(np.float64).ravel()
    grad = np.zeros_like(base)
    indices = range(base.size) if coords is None else coords
    with precision(np.float64):
        for i in indices:
            probe = base.copy()
            probe[i] = base[i] + h
            up = float(f(Tensor(probe.reshape(x.shape))).data)
            probe[i] = base[i] - h
            down = float(f(Tensor(probe.reshape(x.shape))).data)
            grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def finite_diff_param_gradient(f: Callable[[], Tensor], param: Parameter, h: float = 1e-3,
                               coords: Optional[Iterable[int]] = None) -> np.ndarray:
    """Like :func:`finite_diff_gradient` but perturbs a parameter in place.

    ``f`` takes no arguments and closes over the model owning ``param``.
    The parameter is restored bit-exactly afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved = param.data
    base = saved.astype(np.float64).ravel()
    grad = np.zeros_like(base)
    indices = range(base.size) if coords is None else coords
    try:
        with precision(np.float64):
            for i in indices:
                probe = base.copy()
                probe[i] = base[i] + h
                param.data = probe.reshape(saved.shape)
                up = float(f().data)
                probe[i] = base[i] - h
                param.data = probe.reshape(saved.shape)
                down = float(f().data)
                grad[i] = (up - down) / (2.0 * h)
    finally:
        param.data = saved
    return grad.reshape(saved.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the max-norm of the oracle (floored at 1e-8)."""
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(np.asarray(analytic, np.float64) - numeric).max() / scale)
