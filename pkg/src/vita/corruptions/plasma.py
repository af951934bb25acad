"""Diamond-square plasma fractal, used by the fog and frost textures."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def _check_side(n: int) -> int:
    n = int(n)
    k = n - 1
    if n < 3 or k & (k - 1):
        raise ValueError(f"side length must be 2**k + 1 with k >= 1, got {n}")
    return n


def _neighbour_mean(f: np.ndarray, rows: slice, cols: slice, half: int) -> np.ndarray:
    """Mean of the up/down/left/right neighbours at distance ``half`` that exist."""
    n = f.shape[0]
    padded = np.full((n + 2 * half, n + 2 * half), np.nan)
    padded[half:half + n, half:half + n] = f
    r = np.arange(n)[rows] + half
    c = np.arange(n)[cols] + half
    rr, cc = np.meshgrid(r, c, indexing="ij")
    stack = np.stack([padded[rr - half, cc], padded[rr + half, cc],
                      padded[rr, cc - half], padded[rr, cc + half]])
    return np.nanmean(stack, axis=0)


def diamond_square_field(n: int, roughness: float, seed: int, amplitude: float = 1.0,
                         corners: Optional[Sequence[float]] = None,
                         normalize: bool = True) -> np.ndarray:
    """Plasma field of shape ``[n, n]``.

    Corners are drawn uniformly from [0, 1] unless given (order: top-left,
    top-right, bottom-left, bottom-right). Each level averages then adds
    uniform noise in ``[-amp, amp]``, with ``amp`` multiplied by ``roughness``
    after every level. The result is min-max scaled to [0, 1] unless
    ``normalize`` is off or the field is constant.
    """
    n = _check_side(n)
    if not 0 < roughness <= 1:
        raise ValueError(f"roughness must be in (0, 1], got {roughness}")
    rng = np.random.default_rng(seed)
    f = np.zeros((n, n), dtype=np.float64)
    c = rng.uniform(0.0, 1.0, size=4) if corners is None else np.asarray(corners, dtype=np.float64)
    if c.shape != (4,):
        raise ValueError("corners must hold four values")
    f[0, 0], f[0, -1], f[-1, 0], f[-1, -1] = c
    step, amp = n - 1, float(amplitude)
    while step > 1:
        half = step // 2
        centre = (f[:-1:step, :-1:step] + f[:-1:step, step::step]
                  + f[step::step, :-1:step] + f[step::step, step::step]) / 4.0
        f[half::step, half::step] = centre + amp * rng.uniform(-1, 1, size=centre.shape)
        # edge midpoints: on corner rows between corners, and on centre rows at corner columns
        for rows, cols in ((slice(0, None, step), slice(half, None, step)),
                           (slice(half, None, step), slice(0, None, step))):
            mid = _neighbour_mean(f, rows, cols, half)
            f[rows, cols] = mid + amp * rng.uniform(-1, 1, size=mid.shape)
        amp *= roughness
        step = half
    if normalize:
        lo, hi = f.min(), f.max()
        if hi > lo:
            f = (f - lo) / (hi - lo)
    return f
