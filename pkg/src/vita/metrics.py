"""Corruption error tables, mCE variants and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .corruptions.suite import CATEGORIES, KINDS, SEVERITIES, CorruptionSuite
from .datasets import LabeledImages

REPORT_SCHEMA = "vita-report/1"

# AlexNet ImageNet-C errors, each read as the mean over the five severities
ALEXNET_ERRORS = {
    "gaussian_noise": 0.886, "shot_noise": 0.894, "impulse_noise": 0.923,
    "defocus_blur": 0.820, "glass_blur": 0.826, "motion_blur": 0.786, "zoom_blur": 0.798,
    "snow": 0.867, "frost": 0.827, "fog": 0.819, "brightness": 0.565,
    "contrast": 0.853, "elastic": 0.646, "pixelate": 0.718, "jpeg": 0.607,
}


def error_rate(model, data, batch_size: int = 256) -> float:
    """Misclassification fraction; argmax ties go to the lowest class index."""
    x, y = (data.images, data.labels) if isinstance(data, LabeledImages) else data
    if len(y) == 0:
        raise ValueError("error_rate needs a nonempty dataset")
    logits = model.predict_logits(np.asarray(x, np.float32), batch_size)
    return float((np.argmax(logits, axis=1) != np.asarray(y)).mean())


@dataclass
class ErrorTable:
    errors: Dict[Tuple[str, int], float]
    clean_error: float = float("nan")
    n_per_cell: Dict[Tuple[str, int], int] = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.errors.items():
            kind, sev = key
            if kind not in KINDS or sev not in SEVERITIES:
                raise ValueError(f"unknown cell {key}")
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"cell {key} error {value} outside [0, 1]")
        for key, count in self.n_per_cell.items():
            if count <= 0:
                raise ValueError(f"cell {key} has no samples")

    @classmethod
    def from_grid(cls, grid, clean_error: float = float("nan")) -> "ErrorTable":
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != (len(KINDS), len(SEVERITIES)):
            raise ValueError(f"grid must be 15x5, got {grid.shape}")
        return cls({(k, s): float(grid[i, j]) for i, k in enumerate(KINDS)
                    for j, s in enumerate(SEVERITIES)}, clean_error)

    def grid(self) -> np.ndarray:
        missing = [(k, s) for k in KINDS for s in SEVERITIES if (k, s) not in self.errors]
        if missing:
            raise ValueError(f"error table incomplete: {len(missing)} cells missing, first {missing[0]}")
        return np.array([[self.errors[(k, s)] for s in SEVERITIES] for k in KINDS])


class NormalizationConstants(dict):
    def __init__(self, values: Optional[Mapping[str, float]] = None):
        super().__init__(ALEXNET_ERRORS if values is None else values)
        missing = set(KINDS) - set(self)
        if missing:
            raise ValueError(f"normalization constants missing {sorted(missing)}")
        if len(self) != len(KINDS):
            raise ValueError(f"expected {len(KINDS)} constants, got {len(self)}")
        for k, v in self.items():
            if not 0 < v < 1:
                raise ValueError(f"constant for {k} must lie in (0, 1), got {v}")


def mce_unnormalized(table: ErrorTable) -> float:
    """Arithmetic mean of all 75 cells."""
    return float(table.grid().mean())


def mce_normalized(table: ErrorTable, consts: Optional[NormalizationConstants] = None):
    """``CE_c = mean_s E_{c,s} / const_c`` and their 15-way mean."""
    consts = consts if consts is not None else NormalizationConstants()
    grid = table.grid()
    for k in KINDS:
        if k not in consts:
            raise ValueError(f"no normalization constant for {k}")
    ce = {k: float(grid[i].mean() / consts[k]) for i, k in enumerate(KINDS)}
    return ce, float(np.mean(list(ce.values())))


def evaluate_suite(model, suite: CorruptionSuite, clean: Optional[LabeledImages] = None,
                   batch_size: int = 256) -> ErrorTable:
    """Error of ``model`` on every (kind, severity) cell of ``suite``."""
    errors, counts = {}, {}
    for key, images in suite.items():
        errors[key] = error_rate(model, (images, suite.labels), batch_size)
        counts[key] = len(images)
    clean_err = error_rate(model, clean, batch_size) if clean is not None else float("nan")
    return ErrorTable(errors, clean_err, counts)


@dataclass
class MetricReport:
    table: ErrorTable
    mce: float
    per_corruption: Dict[str, float]
    categories: Dict[str, float]
    normalized: bool = False
    config: dict = field(default_factory=dict)

    @property
    def clean_error(self) -> float:
        return self.table.clean_error


def build_report(table: ErrorTable, normalized: bool = False, config: Optional[dict] = None,
                 consts: Optional[NormalizationConstants] = None) -> MetricReport:
    """Per-corruption values are severity-mean errors, or CE ratios when normalized."""
    if normalized:
        per, mce = mce_normalized(table, consts)
    else:
        grid = table.grid()
        per = {k: float(grid[i].mean()) for i, k in enumerate(KINDS)}
        mce = mce_unnormalized(table)
    cats = {c: float(np.mean([per[k] for k in members])) for c, members in CATEGORIES.items()}
    meta = dict(config or {})
    if normalized:
        meta.setdefault("normalization", "alexnet severity-mean ratio")
    return MetricReport(table, mce, per, cats, normalized, meta)


def emit_report(report: MetricReport, path) -> Tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.csv`` (``path`` may carry either suffix)."""
    base = Path(path)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    t = report.table
    doc = {
        "schema": REPORT_SCHEMA,
        "mce": report.mce,
        "normalized": report.normalized,
        "clean_error": t.clean_error,
        "per_corruption": report.per_corruption,
        "categories": report.categories,
        "cells": [{"corruption": k, "severity": s, "error": t.errors[(k, s)],
                   "n": t.n_per_cell.get((k, s), 0)} for k in KINDS for s in SEVERITIES if (k, s) in t.errors],
        "config": report.config,
    }
    json_path, csv_path = base.with_suffix(".json"), base.with_suffix(".csv")
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corruption", "severity", "error"])
        for cell in doc["cells"]:
            w.writerow([cell["corruption"], cell["severity"], repr(cell["error"])])
        for name, value in report.categories.items():
            w.writerow([name, "mean", repr(value)])
        w.writerow(["clean", "", repr(t.clean_error)])
        w.writerow(["mCE", "", repr(report.mce)])
    return json_path, csv_path


def read_report(path) -> MetricReport:
    base = Path(path)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    doc = json.loads(base.with_suffix(".json").read_text())
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    errors = {(c["corruption"], c["severity"]): c["error"] for c in doc["cells"]}
    counts = {(c["corruption"], c["severity"]): c["n"] for c in doc["cells"] if c["n"]}
    table = ErrorTable(errors, doc["clean_error"], counts)
    return MetricReport(table, doc["mce"], doc["per_corruption"], doc["categories"],
                        doc["normalized"], doc["config"])


def read_report_csv(path) -> Dict[str, float]:
    """Flat ``{label: value}`` view of the CSV, e.g. ``"gaussian_noise/3"``, ``"noise"``, ``"mCE"``."""
    out = {}
    with open(Path(path).with_suffix(".csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            sev = row["severity"]
            key = row["corruption"] if sev in ("", "mean") else f"{row['corruption']}/{sev}"
            out[key] = float(row["error"])
    return out
