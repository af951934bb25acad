"""Weak, label-preserving augmentations with an L2 cap on the pixel change.

These are the augmentation-side vicinal samples. None of the evaluation
corruptions appear here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

WEAK_KINDS = ("rotation", "shearing", "translating", "cropping", "scaling", "solarize", "posterize")
# pseudo-kind for ablations that need "augmentation" to be a no-op
IDENTITY = "identity"

AFFINE_SCALE = (0.95, 0.96)
ROTATION_DEGREES = 5.0
SHEAR_DEGREES = 2.0
TRANSLATE_FRACTION = 0.05
CROP_AREA = (0.80, 0.85)
ZOOM_SCALE = (1.05, 1.10)
SOLARIZE_THRESHOLD = 128 / 255
POSTERIZE_BITS = 4


@dataclass
class WeakAugSpec:
    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def resolve(self) -> dict:
        """Draw any parameters not given explicitly from the seeded stream."""
        if self.kind not in WEAK_KINDS and self.kind != IDENTITY:
            raise ValueError(f"unknown weak augmentation {self.kind!r}; expected one of {WEAK_KINDS}")
        drawn = sample_params(self.kind, np.random.default_rng(self.seed))
        drawn.update(self.params)
        return drawn


@dataclass
class BudgetConfig:
    epsilon2: float = 0.5

    def __post_init__(self):
        if not self.epsilon2 > 0:
            raise ValueError(f"epsilon2 must be positive, got {self.epsilon2}")


def sample_params(kind: str, rng: np.random.Generator) -> dict:
    if kind == "rotation":
        return {"degrees": rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES),
                "scale": rng.uniform(*AFFINE_SCALE)}
    if kind == "shearing":
        return {"shear": rng.uniform(-SHEAR_DEGREES, SHEAR_DEGREES),
                "axis": int(rng.integers(2)), "scale": rng.uniform(*AFFINE_SCALE)}
    if kind == "translating":
        return {"shift": tuple(rng.uniform(-TRANSLATE_FRACTION, TRANSLATE_FRACTION, size=2)),
                "scale": rng.uniform(*AFFINE_SCALE)}
    if kind == "cropping":
        return {"area": rng.uniform(*CROP_AREA), "position": tuple(rng.uniform(0, 1, size=2))}
    if kind == "scaling":
        return {"scale": rng.uniform(*ZOOM_SCALE)}
    if kind == "solarize":
        return {"threshold": SOLARIZE_THRESHOLD}
    if kind == "posterize":
        return {"bits": POSTERIZE_BITS}
    if kind == IDENTITY:
        return {}
    raise ValueError(f"unknown weak augmentation {kind!r}; expected one of {WEAK_KINDS}")


def _warp(img: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    """Resample ``img`` [C,H,W] under ``p' = matrix (p - c) + c + shift`` (pixel units, row/col).

    Bilinear interpolation, reflect border.
    """
    h, w = img.shape[1:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(matrix)
    offset = center - inv @ (center + np.asarray(shift, dtype=np.float64))
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.affine_transform(img[c].astype(np.float64), inv, offset=offset,
                                          order=1, mode="reflect")
    return out


def _rotation(degrees: float, scale: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    return scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def weak_augment(img, spec: WeakAugSpec) -> np.ndarray:
    """Apply one weak augmentation to a single image ``[C,H,W]`` in [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"weak_augment expects a [C,H,W] image, got shape {img.shape}")
    p = spec.resolve()
    kind = spec.kind
    h, w = img.shape[1:]
    if kind == IDENTITY:
        out = img.copy()
    elif kind == "rotation":
        out = _warp(img, _rotation(p["degrees"], p["scale"]))
    elif kind == "shearing":
        tan = np.tan(np.deg2rad(p["shear"]))
        shear = np.array([[1.0, 0.0], [tan, 1.0]]) if p["axis"] == 0 else np.array([[1.0, tan], [0.0, 1.0]])
        out = _warp(img, p["scale"] * shear)
    elif kind == "translating":
        dy, dx = p["shift"]
        out = _warp(img, p["scale"] * np.eye(2), (dy * h, dx * w))
    elif kind == "cropping":
        side = np.sqrt(p["area"])
        ch, cw = side * h, side * w
        top = p["position"][0] * (h - ch)
        left = p["position"][1] * (w - cw)
        # output pixel p samples crop origin + (p + 0.5) * side - 0.5
        inv = np.diag([side, side])
        offset = np.array([top + 0.5 * side - 0.5, left + 0.5 * side - 0.5])
        out = np.stack([ndimage.affine_transform(img[c].astype(np.float64), inv, offset=offset,
                                                 order=1, mode="reflect") for c in range(img.shape[0])])
    elif kind == "scaling":
        out = _warp(img, p["scale"] * np.eye(2))
    elif kind == "solarize":
        out = np.where(img >= p["threshold"], 1.0 - img, img)
    elif kind == "posterize":
        bits = int(p["bits"])
        if not 1 <= bits <= 8:
            raise ValueError(f"posterize bits must be in 1..8, got {bits}")
        if bits == 8:
            out = img.copy()
        else:
            mask = 0xFF & ~((1 << (8 - bits)) - 1)
            out = (np.round(img * 255).astype(np.uint8) & mask) / 255.0
    else:
        raise ValueError(f"unknown weak augmentation {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def enforce_difference_budget(x, x_aug, budget: Optional[BudgetConfig] = None) -> np.ndarray:
    """Radially shrink ``x_aug - x`` onto the L2 ball of radius ``epsilon2``.

    Works on a single image or a batch (norm taken per leading-axis item when
    ``x`` has rank 4).
    """
    budget = budget or BudgetConfig()
    x = np.asarray(x, dtype=np.float32)
    x_aug = np.asarray(x_aug, dtype=np.float32)
    if x.shape != x_aug.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_aug.shape}")
    if x.size == 0:
        raise ValueError("cannot budget a zero-size image")
    batched = x.ndim == 4
    xs, xa = (x, x_aug) if batched else (x[None], x_aug[None])
    delta = (xa - xs).astype(np.float64)
    norms = np.sqrt((delta.reshape(len(xs), -1) ** 2).sum(axis=1))
    scale = np.where(norms > budget.epsilon2, budget.epsilon2 / np.maximum(norms, 1e-30), 1.0)
    out = np.where((scale < 1.0)[:, None, None, None],
                   np.clip(xs + scale[:, None, None, None] * delta, 0.0, 1.0), xa).astype(np.float32)
    # float32 rounding can push the norm a hair over the radius; pull back
    final = (out - xs).reshape(len(xs), -1).astype(np.float64)
    fn = np.sqrt((final ** 2).sum(axis=1))
    over = fn > budget.epsilon2
    if over.any():
        shrink = (budget.epsilon2 * (1 - 1e-6) / fn[over])[:, None]
        out[over] = np.clip(xs[over] + (final[over] * shrink).reshape(xs[over].shape), 0, 1)
    return out if batched else out[0]


def augment_batch(x, rng: np.random.Generator, kinds: Sequence[str] = WEAK_KINDS,
                  budget: Optional[BudgetConfig] = None) -> np.ndarray:
    """Augment each image with a uniformly drawn kind, then apply the budget."""
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        return x.copy()
    seeds = rng.integers(0, 2 ** 63, size=len(x))
    picks = rng.integers(0, len(kinds), size=len(x))
    out = np.stack([weak_augment(img, WeakAugSpec(kinds[k], int(s))) for img, k, s in zip(x, picks, seeds)])
    return enforce_difference_budget(x, out, budget)
