"""Severity table, single-image application and the 75-cell evaluation suite."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..datasets import LabeledImages, load_dataset, save_dataset
from .kinds import GENERATORS

KINDS = tuple(GENERATORS)
SEVERITIES = (1, 2, 3, 4, 5)
CATEGORIES = {
    "noise": ("gaussian_noise", "shot_noise", "impulse_noise"),
    "blur": ("defocus_blur", "glass_blur", "motion_blur", "zoom_blur"),
    "weather": ("snow", "frost", "fog", "brightness"),
    "digital": ("contrast", "elastic", "pixelate", "jpeg"),
}


def _check_kind_severity(kind: str, severity: int) -> None:
    if kind not in GENERATORS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity!r}")


class SeverityTable:
    """Per-kind parameter rows for severities 1..5, loaded from JSON."""

    def __init__(self, kinds: Dict[str, dict], version: str = "1"):
        self.version = str(version)
        self.kinds = kinds
        self.validate()

    @classmethod
    def default(cls) -> "SeverityTable":
        text = resources.files("vita.data").joinpath("severity_table.json").read_text()
        return cls.from_json(text)

    @classmethod
    def from_json(cls, text: str) -> "SeverityTable":
        doc = json.loads(text)
        return cls(doc["kinds"], doc.get("version", "1"))

    @classmethod
    def load(cls, path) -> "SeverityTable":
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "kinds": self.kinds}, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def validate(self) -> None:
        missing = set(KINDS) - set(self.kinds)
        if missing:
            raise ValueError(f"severity table lacks kinds {sorted(missing)}")
        for kind, entry in self.kinds.items():
            if kind not in GENERATORS:
                raise ValueError(f"severity table has unknown kind {kind!r}")
            levels, key = entry["levels"], entry["monotone_key"]
            if len(levels) != len(SEVERITIES):
                raise ValueError(f"{kind}: expected 5 severity rows, got {len(levels)}")
            values = [row[key] for row in levels]
            sign = 1 if entry["direction"] == "increasing" else -1
            if not all(sign * (b - a) > 0 for a, b in zip(values, values[1:])):
                raise ValueError(f"{kind}.{key} must be strictly {entry['direction']} in severity: {values}")

    def params(self, kind: str, severity: int) -> dict:
        _check_kind_severity(kind, severity)
        return dict(self.kinds[kind]["levels"][severity - 1])


@dataclass
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    @classmethod
    def from_table(cls, kind: str, severity: int, seed: int = 0,
                   table: Optional[SeverityTable] = None) -> "CorruptionSpec":
        table = table or SeverityTable.default()
        return cls(kind, severity, seed, table.params(kind, severity))


def apply_corruption(img, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one ``[C,H,W]`` image in [0, 1]; the output is clamped to [0, 1]."""
    _check_kind_severity(spec.kind, spec.severity)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or min(img.shape[1:]) < 8:
        raise ValueError(f"expected a [C,H,W] image with H, W >= 8, got shape {img.shape}")
    params = spec.params or SeverityTable.default().params(spec.kind, spec.severity)
    rng = np.random.default_rng(spec.seed)
    out = GENERATORS[spec.kind](img, params, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def image_seed(global_seed: int, kind: str, severity: int, index: int) -> int:
    """Independent per-image stream for (seed, kind, severity, image index)."""
    ss = np.random.SeedSequence([int(global_seed), KINDS.index(kind), int(severity), int(index)])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def corrupt_images(images: np.ndarray, kind: str, severity: int, table: SeverityTable,
                   seed: int, workers: int = 1) -> np.ndarray:
    params = table.params(kind, severity)
    jobs = [(img, CorruptionSpec(kind, severity, image_seed(seed, kind, severity, i), params))
            for i, img in enumerate(images)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda job: apply_corruption(*job), jobs))
    else:
        out = [apply_corruption(*job) for job in jobs]
    return np.stack(out)


@dataclass
class CorruptionSuite:
    """The 75 corrupted copies of an evaluation set, keyed by (kind, severity)."""
    cells: Dict[Tuple[str, int], np.ndarray]
    labels: np.ndarray
    n_classes: int
    table_version: str
    seed: int

    def __len__(self) -> int:
        return sum(len(v) for v in self.cells.values())

    def items(self) -> Iterator[Tuple[Tuple[str, int], np.ndarray]]:
        for kind in KINDS:
            for s in SEVERITIES:
                if (kind, s) in self.cells:
                    yield (kind, s), self.cells[(kind, s)]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for (kind, s), imgs in self.items():
            meta = {"kind": kind, "severity": s, "table_version": self.table_version, "seed": self.seed}
            save_dataset(LabeledImages(imgs, self.labels, self.n_classes, meta), directory / f"{kind}-{s}")
        return directory

    @classmethod
    def load(cls, directory) -> "CorruptionSuite":
        directory = Path(directory)
        cells: Dict[Tuple[str, int], np.ndarray] = {}
        labels, n_classes, version, seed = None, 0, "", 0
        for kind in KINDS:
            for s in SEVERITIES:
                cell = directory / f"{kind}-{s}"
                if not cell.exists():
                    continue
                data = load_dataset(cell)
                cells[(kind, s)] = data.images
                labels, n_classes = data.labels, data.n_classes
                version, seed = data.meta.get("table_version", ""), data.meta.get("seed", 0)
        if labels is None:
            raise FileNotFoundError(f"no suite cells under {directory}")
        return cls(cells, labels, n_classes, version, seed)


def build_corruption_suite(dataset: LabeledImages, table: Optional[SeverityTable] = None,
                           seed: int = 0, kinds=KINDS, workers: int = 1) -> CorruptionSuite:
    if len(dataset) == 0:
        raise ValueError("cannot build a corruption suite from an empty dataset")
    table = table or SeverityTable.default()
    cells = {(k, s): corrupt_images(dataset.images, k, s, table, seed, workers)
             for k in kinds for s in SEVERITIES}
    return CorruptionSuite(cells, dataset.labels.copy(), dataset.n_classes, table.version, seed)


def mean_distortion(clean: np.ndarray, corrupted: np.ndarray) -> float:
    """Mean over images of the per-image mean squared pixel change."""
    diff = (np.asarray(corrupted, np.float64) - np.asarray(clean, np.float64)).reshape(len(clean), -1)
    return float((diff ** 2).mean(axis=1).mean())


def calibration_images(n: int = 32, size: int = 32, seed: int = 1234) -> np.ndarray:
    """Fixed natural-looking image set used to calibrate severity monotonicity.

    Smooth random fields with a few sharp edges, so blurs, noise and digital
    artifacts all register.
    """
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size), np.float32)
    rr, cc = np.mgrid[:size, :size]
    for i in range(n):
        base = ndimage.gaussian_filter(rng.random((3, size, size)), (0, 3, 3))
        base = (base - base.min()) / max(base.max() - base.min(), 1e-12)
        a, b, c = rng.normal(size=3)
        edge = (a * (rr - size / 2) + b * (cc - size / 2) + c * size / 4 > 0)
        out[i] = np.clip(0.15 + 0.6 * base + 0.25 * edge[None] * rng.uniform(-1, 1, (3, 1, 1)), 0, 1)
    return out


def distortion_curve(kind: str, table: Optional[SeverityTable] = None, images=None,
                     seed: int = 0) -> List[float]:
    table = table or SeverityTable.default()
    images = calibration_images() if images is None else images
    return [mean_distortion(images, corrupt_images(images, kind, s, table, seed)) for s in SEVERITIES]
