"""Labeled image sets: the on-disk container, CIFAR binary ingestion and the
synthetic desk benchmark."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .networks import CheckpointError, decode_tensors, encode_tensors

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CONTAINER_FORMAT = "vita-dataset"
CONTAINER_VERSION = 1
MOTIFS = ("stripes", "disk", "checker", "gradient", "ring", "cross")


class DataError(Exception):
    """Malformed or unusable input data."""


@dataclass
class LabeledImages:
    images: np.ndarray  # float32 [N,C,H,W] in [0,1]
    labels: np.ndarray  # int64 [N]
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes}), got range "
                            f"[{self.labels.min()}, {self.labels.max()}]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.n_classes, dict(self.meta))


def save_dataset(data: LabeledImages, directory) -> Path:
    """Write ``index.json`` plus ``images.bin`` (tensor codec) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"format": CONTAINER_FORMAT, "version": CONTAINER_VERSION, "count": len(data),
             "dims": list(data.images.shape[1:]), "n_classes": int(data.n_classes),
             "labels": [int(v) for v in data.labels], "meta": data.meta}
    (directory / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
    blob = encode_tensors(json.dumps({"kind": "dataset"}, sort_keys=True), {"images": data.images})
    (directory / "images.bin").write_bytes(blob)
    return directory


def load_dataset(directory) -> LabeledImages:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
        _, tensors = decode_tensors((directory / "images.bin").read_bytes())
    except FileNotFoundError as exc:
        raise DataError(f"dataset container incomplete: {exc.filename} missing") from exc
    except (json.JSONDecodeError, CheckpointError) as exc:
        raise DataError(f"corrupt dataset container at {directory}: {exc}") from exc
    if index.get("format") != CONTAINER_FORMAT or index.get("version") != CONTAINER_VERSION:
        raise DataError(f"{directory} is not a version-{CONTAINER_VERSION} dataset container")
    images = tensors.get("images")
    if images is None or list(images.shape[1:]) != index["dims"] or len(images) != index["count"]:
        raise DataError(f"{directory}: tensor shape disagrees with index.json")
    return LabeledImages(images, np.array(index["labels"], dtype=np.int64).reshape(-1),
                         index["n_classes"], index.get("meta", {}))


def load_cifar_binary(path, n_classes: int = 10) -> LabeledImages:
    """Read CIFAR-10 binary records (label byte + 3x1024 channel-planar bytes)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                        f"record {whole} truncated at byte offset {whole * CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: record {i} (byte offset {i * CIFAR_RECORD}) has label {labels[i]} > 9")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    return LabeledImages(images, labels, n_classes, {"source": str(path)})


@dataclass
class SyntheticDatasetSpec:
    n_train: int = 2000
    n_test: int = 500
    classes: int = 4
    size: int = 32
    seed: int = 0
    jitter: int = 1
    noise: float = 0.03
    # fg/bg separation; images are squeezed toward mid-gray by this factor
    contrast: float = 1.0

    def validate(self) -> None:
        if self.size not in (16, 32):
            raise ValueError(f"synthetic size must be 16 or 32, got {self.size}")
        if not 2 <= self.classes <= len(MOTIFS):
            raise ValueError(f"classes must be in 2..{len(MOTIFS)}, got {self.classes}")
        if self.n_train < self.classes or self.n_test < 0:
            raise ValueError("need at least one training image per class")
        if self.jitter < 0 or self.noise < 0:
            raise ValueError("jitter and noise must be nonnegative")
        if not 0 < self.contrast <= 1:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")


def _motif(name: str, size: int, dy: int, dx: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size) - dy, np.arange(size) - dx, indexing="ij")
    period = size // 4
    mid = (size - 1) / 2
    if name == "stripes":
        return ((cc // (period // 2)) % 2).astype(np.float64)
    if name == "checker":
        return (((rr // (period // 2)) + (cc // (period // 2))) % 2).astype(np.float64)
    if name == "disk":
        return (np.hypot(rr - mid, cc - mid) <= size * 0.3).astype(np.float64)
    if name == "gradient":
        return np.clip((rr + cc) / (2 * (size - 1)), 0, 1)
    if name == "ring":
        d = np.hypot(rr - mid, cc - mid)
        return ((d >= size * 0.2) & (d <= size * 0.38)).astype(np.float64)
    if name == "cross":
        return ((np.abs(rr - mid) <= size / 10) | (np.abs(cc - mid) <= size / 10)).astype(np.float64)
    raise ValueError(f"unknown motif {name!r}")


def linear_probe_accuracy(x: np.ndarray, y: np.ndarray, n_classes: int, ridge: float = 1e-2,
                          max_samples: int = 2000, seed: int = 0) -> float:
    """Held-out accuracy of a closed-form ridge least-squares probe on raw pixels.

    Fits on a random half, scores on the other half. Solved in the dual so the
    cost is set by the sample count rather than the pixel count.
    """
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(x))[:max_samples]
    feats = np.asarray(x, np.float64).reshape(len(x), -1)[idx]
    feats = np.hstack([feats, np.ones((len(feats), 1))])
    labels = np.asarray(y)[idx]
    half = len(idx) // 2
    fit, held = slice(0, half), slice(half, None)
    targets = -np.ones((half, n_classes))
    targets[np.arange(half), labels[fit]] = 1.0
    gram = feats[fit] @ feats[fit].T
    alpha = np.linalg.solve(gram + ridge * np.eye(half), targets)
    scores = feats[held] @ (feats[fit].T @ alpha)
    return float((scores.argmax(axis=1) == labels[held]).mean())


@dataclass
class DeskDataset:
    train: LabeledImages
    test: LabeledImages
    certificate: Dict[str, float]


def _render(spec: SyntheticDatasetSpec, n: int, rng: np.random.Generator) -> LabeledImages:
    labels = rng.permutation(np.arange(n) % spec.classes)
    s = spec.size
    # jitter is expressed in pixels of a 32-pixel image and scales with size
    shift = spec.jitter * s // 32
    images = np.empty((n, 3, s, s), dtype=np.float64)
    for i, k in enumerate(labels):
        dy, dx = rng.integers(-shift, shift + 1, size=2)
        mask = _motif(MOTIFS[k], s, int(dy), int(dx))
        bg = rng.uniform(0.0, 0.35, size=3)[:, None, None]
        fg = rng.uniform(0.65, 1.0, size=3)[:, None, None]
        images[i] = 0.5 + spec.contrast * (bg + (fg - bg) * mask[None] - 0.5) + rng.normal(0, spec.noise, size=(3, s, s))
    return LabeledImages(np.clip(images, 0, 1), labels, spec.classes, {"source": "synthetic", "spec": asdict(spec)})


def generate_synthetic_dataset(spec: Optional[SyntheticDatasetSpec] = None,
                               min_probe_accuracy: float = 0.99) -> DeskDataset:
    """Procedural colored-motif dataset; rejects itself if a linear probe fails."""
    spec = spec or SyntheticDatasetSpec()
    spec.validate()
    ss = np.random.SeedSequence([spec.seed, 0x5EED])
    train_rng, test_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    train = _render(spec, spec.n_train, train_rng)
    test = _render(spec, spec.n_test, test_rng)
    acc = linear_probe_accuracy(train.images, train.labels, spec.classes, seed=spec.seed)
    if acc < min_probe_accuracy:
        raise DataError(f"synthetic spec unusable: linear probe accuracy {acc:.4f} < {min_probe_accuracy}")
    return DeskDataset(train, test, {"linear_probe_accuracy": acc})


def split_counts(labels: np.ndarray, n_classes: int) -> Tuple[int, ...]:
    return tuple(int(v) for v in np.bincount(labels, minlength=n_classes))
