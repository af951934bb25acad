"""Resumable experiment stages with a digest manifest.

Each stage writes into its own subdirectory of the run directory. A stage is
skipped when the manifest holds the same input key for it and the files on
disk still hash to the recorded digest.
"""
from __future__ import annotations

import hashlib
import json
import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from .. import __version__
from ..attacks import accuracy_under_attack, default_spec
from ..corruptions import CorruptionSuite, SeverityTable, build_corruption_suite
from ..datasets import (
    DataError,
    LabeledImages,
    SyntheticDatasetSpec,
    generate_synthetic_dataset,
    load_cifar_binary,
    load_dataset,
    save_dataset,
)
from ..metrics import ErrorTable, build_report, emit_report, evaluate_suite
from ..networks import Classifier, PatchDiscriminator, UNetTranslator, checkpoint_load, checkpoint_save
from ..training import harvest_gan_pairs, robust_train, train_erm, train_translator
from .config import ExperimentConfig, config_digest

STAGES = ("data", "suite", "translator", "robust", "evaluate", "report")
DEPENDS = {"data": (), "suite": ("data",), "translator": ("data",), "robust": ("data", "translator"),
           "evaluate": ("suite", "robust"), "report": ("evaluate",), "attack_eval": ("data", "robust")}
MANIFEST = "manifest.json"
VAL_FRACTION = 0.1
# settings that change where or how fast things run, not what they produce
_NON_SEMANTIC = ("output_dir", "suite_workers")


def directory_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in Path(path).rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def semantic_config(cfg: ExperimentConfig) -> dict:
    doc = cfg.echo()
    for key in _NON_SEMANTIC:
        doc.pop(key, None)
    return doc


@dataclass
class StageResult:
    name: str
    skipped: bool
    digest: str


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    stages: List[StageResult] = field(default_factory=list)


def versions() -> Dict[str, str]:
    return {"vita": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _split_validation(train: LabeledImages, seed: int):
    n_val = max(1, int(round(len(train) * VAL_FRACTION)))
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(len(train))
    return train.subset(np.sort(order[n_val:])), train.subset(np.sort(order[:n_val]))


# stage bodies -------------------------------------------------------------------------

def stage_data(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    src = cfg.dataset
    if src.kind == "synthetic":
        spec = SyntheticDatasetSpec(n_train=src.n_train, n_test=src.n_test, classes=cfg.classes,
                                    size=cfg.image_size, seed=cfg.seed, jitter=src.jitter, noise=src.noise,
                                    contrast=src.contrast)
        ds = generate_synthetic_dataset(spec)
        train, test = ds.train, ds.test
        (out / "certificate.json").write_text(json.dumps(ds.certificate, sort_keys=True) + "\n")
    else:
        train = load_cifar_binary(src.train_path)
        test = load_cifar_binary(src.test_path)
        if src.n_train is not None:
            train = train.subset(np.arange(min(src.n_train, len(train))))
        if src.n_test is not None:
            test = test.subset(np.arange(min(src.n_test, len(test))))
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")


def _table(cfg: ExperimentConfig) -> SeverityTable:
    return SeverityTable.load(cfg.severity_table) if cfg.severity_table else SeverityTable.default()


def stage_suite(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    test = load_dataset(run / "data" / "test")
    table = _table(cfg)
    suite = build_corruption_suite(test, table, seed=cfg.seed, workers=cfg.suite_workers)
    suite.save(out)
    table.save(out / "severity_table.json")


def stage_translator(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    train, _ = _split_validation(load_dataset(run / "data" / "train"), cfg.seed)
    tc = cfg.train
    channels = train.images.shape[1]
    source = Classifier(channels, cfg.classes, cfg.model.classifier_width, seed=cfg.seed + 100)
    train_erm(source, train, tc.model_copy(update={"epochs": tc.pretrain_epochs}))
    checkpoint_save(source, out / "source_classifier.ckpt", cfg.digest())
    pairs = harvest_gan_pairs(train, source, tc, cfg.seed)
    t = UNetTranslator(channels, cfg.model.translator_depth, cfg.model.translator_base, seed=cfg.seed)
    d = PatchDiscriminator(channels, cfg.model.discriminator_hidden, seed=cfg.seed + 1)
    trace = train_translator(t, d, pairs, tc, out_dir=out / "epochs")
    checkpoint_save(t, out / "translator.ckpt", cfg.digest())
    checkpoint_save(d, out / "discriminator.ckpt", cfg.digest())
    (out / "trace.json").write_text(json.dumps(trace.to_dict(), indent=1) + "\n")


def stage_robust(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    train, val = _split_validation(load_dataset(run / "data" / "train"), cfg.seed)
    t = checkpoint_load(run / "translator" / "translator.ckpt", "unet_translator")
    model = Classifier(train.images.shape[1], cfg.classes, cfg.model.classifier_width, seed=cfg.seed)
    robust_train(model, train, t, cfg.train, val, out_dir=out / "epochs")
    shutil.move(str(out / "epochs" / "classifier_metrics.csv"), str(out / "metrics.csv"))
    checkpoint_save(model, out / "classifier.ckpt", cfg.digest())


def stage_evaluate(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    model = checkpoint_load(run / "robust" / "classifier.ckpt", "classifier")
    suite = CorruptionSuite.load(run / "suite")
    table = evaluate_suite(model, suite, load_dataset(run / "data" / "test"))
    doc = {"clean_error": table.clean_error,
           "cells": [{"corruption": k, "severity": s, "error": e, "n": table.n_per_cell[(k, s)]}
                     for (k, s), e in table.errors.items()]}
    (out / "errors.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_error_table(path: Path) -> ErrorTable:
    doc = json.loads(Path(path).read_text())
    errors = {(c["corruption"], c["severity"]): c["error"] for c in doc["cells"]}
    counts = {(c["corruption"], c["severity"]): c["n"] for c in doc["cells"]}
    return ErrorTable(errors, doc["clean_error"], counts)


def report_header(cfg: ExperimentConfig) -> dict:
    t = cfg.train
    return {"lambda": t.lam, "beta": t.beta, "seed": cfg.seed, "mode": t.mode, "fractions": list(t.fractions),
            "consistency": t.consistency, "attack_methods": list(t.attack_methods),
            "harvest_steps": t.harvest_steps, "severity_table_version": _table(cfg).version,
            "config_hash": cfg.digest()}


def stage_report(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    table = load_error_table(run / "evaluate" / "errors.json")
    emit_report(build_report(table, cfg.normalized_report, report_header(cfg)), out / "report")


def stage_attack_eval(cfg: ExperimentConfig, out: Path, run: Path) -> None:
    model = checkpoint_load(run / "robust" / "classifier.ckpt", "classifier").eval()
    test = load_dataset(run / "data" / "test")
    n = min(cfg.attack_eval.n_samples, len(test))
    x, y = test.images[:n], test.labels[:n]
    rows = {}
    for i, method in enumerate(cfg.attack_eval.methods):
        spec = default_spec(method)
        if cfg.train.mode == "adversarial" and method in ("pgd_linf", "bim_linf", "mim", "fgsm"):
            spec = default_spec(method, eps=cfg.train.eps_test)
        acc = accuracy_under_attack(model, x, y, spec, np.random.default_rng([cfg.seed, 99, i]))
        rows[method] = {"accuracy": acc, "error": 1.0 - acc, "eps": spec.eps, "n": n}
    (out / "attack_report.json").write_text(json.dumps({"attacks": rows, "config": report_header(cfg)},
                                                       indent=1, sort_keys=True) + "\n")


STAGE_FUNCS: Dict[str, Callable[[ExperimentConfig, Path, Path], None]] = {
    "data": stage_data, "suite": stage_suite, "translator": stage_translator, "robust": stage_robust,
    "evaluate": stage_evaluate, "report": stage_report, "attack_eval": stage_attack_eval,
}


def with_dependencies(stages: Sequence[str]) -> List[str]:
    order = list(STAGES) + ["attack_eval"]
    need = set()

    def add(s):
        if s in need:
            return
        for dep in DEPENDS[s]:
            add(dep)
        need.add(s)

    for s in stages:
        if s not in DEPENDS:
            raise ValueError(f"unknown stage {s!r}")
        add(s)
    return [s for s in order if s in need]


def _read_manifest(run: Path) -> dict:
    path = run / MANIFEST
    if path.exists():
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            return {}
    return {}


def _write_manifest(run: Path, manifest: dict) -> None:
    (run / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, stages: Optional[Sequence[str]] = None,
                   log: Optional[Callable[[str], None]] = None) -> RunResult:
    """Run ``stages`` (default: the full pipeline) and their prerequisites.

    Exceptions propagate after the failing stage is recorded in the manifest.
    """
    log = log or (lambda msg: None)
    run = Path(out_dir if out_dir is not None else cfg.output_dir)
    run.mkdir(parents=True, exist_ok=True)
    old = _read_manifest(run)
    manifest = {"schema": "vita-manifest/1", "config_hash": config_digest(semantic_config(cfg)),
                "seed": cfg.seed, "versions": versions(), "config": cfg.echo(),
                "stages": dict(old.get("stages", {}))}
    result = RunResult(run, manifest)
    todo = with_dependencies(stages or STAGES)
    for name in todo:
        deps = {d: manifest["stages"][d]["digest"] for d in DEPENDS[name]}
        key = config_digest({"stage": name, "config": semantic_config(cfg), "inputs": deps})
        out = run / name
        prev = manifest["stages"].get(name, {})
        if (prev.get("status") == "done" and prev.get("key") == key and out.exists()
                and directory_digest(out) == prev.get("digest")):
            log(f"[skip] {name}")
            result.stages.append(StageResult(name, True, prev["digest"]))
            continue
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        log(f"[run ] {name}")
        start = time.perf_counter()
        try:
            STAGE_FUNCS[name](cfg, out, run)
        except BaseException as exc:
            manifest["stages"][name] = {"status": "failed", "key": key, "error": f"{type(exc).__name__}: {exc}"}
            _write_manifest(run, manifest)
            raise
        digest = directory_digest(out)
        manifest["stages"][name] = {"status": "done", "key": key, "digest": digest,
                                    "seconds": round(time.perf_counter() - start, 3)}
        _write_manifest(run, manifest)
        result.stages.append(StageResult(name, False, digest))
    _write_manifest(run, manifest)
    return result


def load_run_dataset(run: Path, split: str) -> LabeledImages:
    path = Path(run) / "data" / split
    if not path.exists():
        raise DataError(f"no {split} split under {run}; run the data stage first")
    return load_dataset(path)
