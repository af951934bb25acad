"""Vicinal differences and their transfer across a batch.

A vicinal difference is ``x_v - x`` for a label-preserving neighbour ``x_v``
of ``x``. Shuffling the differences and adding them to other images moves
local manifold structure between samples; a translator then pulls the raw
composition back onto the image manifold.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .networks import UNetTranslator

AUGMENTATION = "augmentation"
ADVERSARIAL = "adversarial"
SOURCES = (AUGMENTATION, ADVERSARIAL)


def _row_norms(diffs: np.ndarray) -> np.ndarray:
    return np.sqrt((diffs.reshape(len(diffs), -1) ** 2).sum(axis=1))


@dataclass
class DifferenceBatch:
    diffs: np.ndarray
    source: np.ndarray  # per-row source tag strings
    norms: np.ndarray

    def __len__(self) -> int:
        return len(self.diffs)

    def permuted(self, perm: np.ndarray) -> "DifferenceBatch":
        return DifferenceBatch(self.diffs[perm], self.source[perm], self.norms[perm])


@dataclass
class TransferConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


def vicinal_difference(x, x_v, source="augmentation") -> DifferenceBatch:
    """``x_v - x`` per row, with cached L2 norms and a source tag per row."""
    x = np.asarray(x, dtype=np.float32)
    x_v = np.asarray(x_v, dtype=np.float32)
    if x.shape != x_v.shape:
        raise ValueError(f"vicinal batch shape {x_v.shape} does not match originals {x.shape}")
    if x.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] batches, got shape {x.shape}")
    if isinstance(source, str):
        tags = np.full(len(x), source, dtype=object)
    else:
        tags = np.asarray(source, dtype=object)
        if len(tags) != len(x):
            raise ValueError(f"{len(tags)} source tags for {len(x)} rows")
    bad = set(tags) - set(SOURCES)
    if bad:
        raise ValueError(f"unknown difference source {sorted(bad)}; expected {SOURCES}")
    # float64 keeps x + diffs == x_v exact for float32 images
    diffs = x_v.astype(np.float64) - x
    return DifferenceBatch(diffs, tags, _row_norms(diffs))


def shuffle_permutation(n: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def shuffle_differences(d: DifferenceBatch, seed=None, perm: Optional[Sequence[int]] = None) -> DifferenceBatch:
    """Permute rows uniformly at random (self-assignment allowed).

    ``perm`` overrides the drawn permutation, which lets tests force the
    identity.
    """
    if len(d) == 0:
        raise ValueError("cannot shuffle an empty difference batch")
    perm = shuffle_permutation(len(d), seed) if perm is None else np.asarray(perm)
    if sorted(perm.tolist()) != list(range(len(d))):
        raise ValueError("perm must be a permutation of the row indices")
    return d.permuted(perm)


def transfer_compose(x, d: DifferenceBatch, cfg: Optional[TransferConfig] = None) -> np.ndarray:
    """``clip(x + lam * d, 0, 1)``."""
    cfg = cfg or TransferConfig()
    x = np.asarray(x, dtype=np.float32)
    if x.shape != d.diffs.shape:
        raise ValueError(f"difference shape {d.diffs.shape} does not match batch {x.shape}")
    return np.clip(x + cfg.lam * d.diffs, 0.0, 1.0).astype(np.float32)


def generate_via_translator(t: UNetTranslator, x, d: DifferenceBatch,
                            cfg: Optional[TransferConfig] = None, batch_size: int = 256) -> np.ndarray:
    """Translate ``x + lam * d`` onto the manifold. Labels of ``x`` carry over."""
    raw = transfer_compose(x, d, cfg)
    t.check_input(Tensor(raw[:1]))
    out = [t(Tensor(raw[i:i + batch_size])).data for i in range(0, len(raw), batch_size)]
    return np.clip(np.concatenate(out), 0.0, 1.0).astype(np.float32)
