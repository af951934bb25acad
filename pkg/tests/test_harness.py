import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from vita.datasets import (
    DataError,
    LabeledImages,
    SyntheticDatasetSpec,
    generate_synthetic_dataset,
    linear_probe_accuracy,
    load_cifar_binary,
    load_dataset,
    save_dataset,
)
from vita.harness.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, main
from vita.harness.config import ConfigError, ExperimentConfig, parse_config, schema_paths
from vita.harness.pipeline import STAGES, directory_digest, run_experiment, with_dependencies

DATA = Path(__file__).parent / "data"
ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "dataset": {"kind": "synthetic", "n_train": 40, "n_test": 8},
    "image_size": 16,
    "classes": 2,
    "train": {"epochs": 1, "gan_epochs": 1, "pretrain_epochs": 1, "harvest_steps": 2,
              "batch_size": 8, "gan_batch_size": 8},
    "model": {"classifier_width": 4, "translator_base": 4, "discriminator_hidden": 8},
    "attack_eval": {"methods": ["fgsm"], "n_samples": 8},
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


# ---------------------------------------------------------------- config

def test_golden_config_dump():
    cfg = parse_config(str(DATA / "golden_config.json"))
    assert cfg.echo() == json.loads((DATA / "golden_config_dump.json").read_text())


def test_empty_document_means_defaults(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    cfg = parse_config(str(empty))
    assert cfg.echo() == ExperimentConfig().echo() == parse_config(None).echo()
    echo = cfg.echo()
    for key in ("lambda", "beta", "attack_methods", "fractions", "harvest_steps"):
        assert key in echo["train"]
    assert "severity_table" in echo


@pytest.mark.parametrize("doc, path", [
    ({"trian": {}}, "trian: unknown key"),
    ({"train": {"fractions": [0.3, 0.3, 0.5]}}, "train.fractions"),
    ({"train": {"betta": 1}}, "train.betta: unknown key"),
    ({"model": {"classifier_width": "wide"}}, "model.classifier_width"),
    ({"dataset": {"kind": "synthetic", "n_train": 6000}}, "dataset.synthetic.n_train"),
    ({"train": {"seed": 3}}, "train.seed is derived"),
    ({"attack_eval": {"methods": ["ead"]}}, "attack_eval"),
])
def test_config_errors_are_path_qualified(doc, path, tmp_path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        parse_config(write_json(tmp_path / "c.json", doc))


def test_config_fractions_must_sum_to_one(tmp_path):
    with pytest.raises(ConfigError, match="sum to 1"):
        parse_config(write_json(tmp_path / "c.json", {"train": {"fractions": [0.3, 0.3, 0.5]}}))


def test_config_file_problems(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"seed\": 1,,}")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config(str(bad))
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(str(tmp_path / "missing.json"))
    with pytest.raises(ConfigError, match="JSON object"):
        parse_config(write_json(tmp_path / "list.json", [1, 2]))


def test_overrides_and_schema_flags():
    cfg = parse_config(None, {"train.beta": 0.25, "seed": 4})
    assert cfg.train.beta == 0.25 and cfg.train.seed == 4
    paths = schema_paths()
    assert "train.lambda" in paths and "dataset.n_train" in paths and "model.translator_base" in paths


def test_shipped_configs_parse():
    for path in sorted((ROOT / "configs").glob("*.json")):
        parse_config(str(path))


# ---------------------------------------------------------------- data

def _cifar_bytes(labels, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (len(labels), 3072), dtype=np.uint8)
    return np.hstack([np.array(labels, np.uint8)[:, None], pixels]).tobytes(), pixels


def test_cifar_reader_exact_pixels(tmp_path):
    blob, pixels = _cifar_bytes([3, 9])
    (tmp_path / "b.bin").write_bytes(blob)
    data = load_cifar_binary(tmp_path / "b.bin")
    assert data.labels.tolist() == [3, 9] and data.images.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(data.images.reshape(2, -1), (pixels / 255.0).astype(np.float32))
    # channel-planar: the first 1024 bytes are red, row-major
    assert data.images[1, 0, 0, 1] == np.float32(pixels[1, 1] / 255.0)
    assert data.images[1, 2, 31, 31] == np.float32(pixels[1, 3071] / 255.0)


def test_cifar_reader_errors(tmp_path):
    blob, _ = _cifar_bytes([1, 2])
    (tmp_path / "t.bin").write_bytes(blob[:-10])
    with pytest.raises(DataError, match="byte offset 3073"):
        load_cifar_binary(tmp_path / "t.bin")
    blob, _ = _cifar_bytes([1, 12])
    (tmp_path / "l.bin").write_bytes(blob)
    with pytest.raises(DataError, match="record 1"):
        load_cifar_binary(tmp_path / "l.bin")


def test_container_round_trip_is_bitwise(tmp_path):
    blob, _ = _cifar_bytes([0, 5, 7], seed=2)
    (tmp_path / "c.bin").write_bytes(blob)
    data = load_cifar_binary(tmp_path / "c.bin")
    save_dataset(data, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.images.tobytes() == data.images.tobytes()
    assert back.labels.tolist() == [0, 5, 7] and back.n_classes == 10
    (tmp_path / "ds" / "images.bin").write_bytes(b"junk")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "ds")
    with pytest.raises(DataError, match="missing"):
        load_dataset(tmp_path / "nowhere")


def test_labeled_images_validation():
    with pytest.raises(DataError):
        LabeledImages(np.zeros((2, 3, 4, 4)), [0, 5], 2)
    with pytest.raises(DataError):
        LabeledImages(np.zeros((2, 3, 4, 4)), [0], 2)


def test_synthetic_dataset_properties():
    spec = SyntheticDatasetSpec(n_train=200, n_test=20, classes=2, size=16, seed=3)
    a, b = generate_synthetic_dataset(spec), generate_synthetic_dataset(spec)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.train.labels.tolist() == b.train.labels.tolist()
    assert a.certificate["linear_probe_accuracy"] >= 0.99
    assert linear_probe_accuracy(a.train.images, a.train.labels, 2) >= 0.99
    counts = np.bincount(a.train.labels, minlength=2)
    assert counts.max() - counts.min() <= 1
    assert a.train.images.min() >= 0 and a.train.images.max() <= 1
    other = generate_synthetic_dataset(SyntheticDatasetSpec(n_train=200, n_test=20, classes=2, size=16, seed=4))
    assert other.train.images.tobytes() != a.train.images.tobytes()


def test_synthetic_spec_rejects_bad_values():
    for kw in ({"size": 24}, {"classes": 1}, {"contrast": 0.0}, {"noise": -1}):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(SyntheticDatasetSpec(**kw))
    with pytest.raises(DataError, match="probe"):
        generate_synthetic_dataset(SyntheticDatasetSpec(n_train=40, n_test=4, size=16), min_probe_accuracy=1.01)


# ---------------------------------------------------------------- pipeline

def test_stage_dependencies():
    assert with_dependencies(["report"]) == list(STAGES)
    assert with_dependencies(["attack_eval"]) == ["data", "translator", "robust", "attack_eval"]
    with pytest.raises(ValueError):
        with_dependencies(["deploy"])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    cfg = parse_config(None, {"output_dir": str(run), **{f"{k}": v for k, v in TINY.items()}})
    first = run_experiment(cfg)
    return cfg, run, first


def test_pipeline_writes_every_artifact(tiny_run):
    _, run, first = tiny_run
    assert [s.name for s in first.stages] == list(STAGES) and not any(s.skipped for s in first.stages)
    manifest = json.loads((run / "manifest.json").read_text())
    assert all(manifest["stages"][s]["status"] == "done" for s in STAGES)
    assert {"config_hash", "seed", "versions", "config"} <= set(manifest)
    assert manifest["config"]["train"]["lambda"] == 1.0
    report = json.loads((run / "report" / "report.json").read_text())
    assert len(report["cells"]) == 75 and report["config"]["beta"] == 1.0
    assert (run / "robust" / "metrics.csv").read_text().startswith("epoch,lr,train_loss")
    assert len(list((run / "suite").glob("*-[1-5]"))) == 75


def test_rerun_skips_everything(tiny_run):
    cfg, run, first = tiny_run
    again = run_experiment(cfg)
    assert all(s.skipped for s in again.stages)
    assert [s.digest for s in again.stages] == [s.digest for s in first.stages]


def test_deleted_report_regenerates_bit_identically(tiny_run):
    cfg, run, _ = tiny_run
    before = (run / "report" / "report.json").read_bytes()
    shutil.rmtree(run / "report")
    result = run_experiment(cfg, stages=["report"])
    assert [s.name for s in result.stages if not s.skipped] == ["report"]
    assert (run / "report" / "report.json").read_bytes() == before


def test_fresh_run_is_bit_identical(tiny_run, tmp_path):
    cfg, run, first = tiny_run
    other = run_experiment(cfg, out_dir=tmp_path / "again")
    for a, b in zip(first.stages, other.stages):
        assert a.digest == b.digest, a.name
    assert directory_digest(run / "suite") == directory_digest(tmp_path / "again" / "suite")


def test_changed_config_reruns_downstream(tiny_run, tmp_path):
    cfg, run, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(run, copy)
    changed = cfg.model_copy(update={"normalized_report": True})
    result = run_experiment(changed, out_dir=copy)
    ran = [s.name for s in result.stages if not s.skipped]
    assert ran and set(ran) <= set(STAGES)


# ---------------------------------------------------------------- CLI

def test_cli_success_and_exit_codes(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", TINY)
    out = tmp_path / "cli"
    assert main(["gen-suite", "--config", cfg, "--out", str(out), "--quiet"]) == EXIT_OK
    assert (out / "suite" / "fog-3" / "index.json").exists()
    assert main(["attack-eval", "--config", cfg, "--out", str(out), "--seed", "0", "--quiet"]) == EXIT_OK
    attack = json.loads((out / "attack_eval" / "attack_report.json").read_text())
    assert 0 <= attack["attacks"]["fgsm"]["accuracy"] <= 1

    bad = write_json(tmp_path / "bad.json", {"train": {"betta": 1}})
    assert main(["run", "--config", bad, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "train.betta" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["run", "--no-such-flag"])
    assert exc.value.code == EXIT_CONFIG

    blob, _ = _cifar_bytes([1, 2])
    (tmp_path / "trunc.bin").write_bytes(blob[:-1])
    cifar = write_json(tmp_path / "cifar.json", {"dataset": {"kind": "cifar", "train_path": str(tmp_path / "trunc.bin"),
                                                             "test_path": str(tmp_path / "trunc.bin")},
                                                 "classes": 10})
    assert main(["gen-suite", "--config", cifar, "--out", str(tmp_path / "c"), "--quiet"]) == EXIT_DATA

    diverge = write_json(tmp_path / "d.json", {**TINY, "train": {**TINY["train"], "lr": 1e30}})
    with np.errstate(all="ignore"):
        code = main(["train-robust", "--config", diverge, "--out", str(tmp_path / "d"), "--quiet"])
    assert code == EXIT_DIVERGED
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert any(s.get("status") == "failed" for s in manifest["stages"].values())


def test_cli_flags_mirror_schema(tmp_path):
    cfg = write_json(tmp_path / "c.json", TINY)
    out = tmp_path / "flags"
    assert main(["gen-suite", "--config", cfg, "--out", str(out), "--train.beta", "0.5",
                 "--dataset.n_test", "4", "--quiet"]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["beta"] == 0.5 and manifest["config"]["dataset"]["n_test"] == 4


# ---------------------------------------------------------------- directional experiment bookkeeping

def test_directional_result_counts_and_sign_test():
    from vita.harness.experiment import DirectionalResult, DirectionalSettings, SeedOutcome

    res = DirectionalResult(DirectionalSettings(seeds=(0, 1, 2)))
    for seed, (erm, vita, wo) in enumerate([(0.3, 0.2, 0.25), (0.3, 0.25, 0.2), (0.3, 0.2, 0.21)]):
        res.outcomes.append(SeedOutcome(seed, {"erm": erm, "vita": vita, "wo_gen": wo}, {}, {}, 0.0))
    assert res.wins("vita", "erm") == 3 and res.vita_beats_erm_everywhere
    assert res.wins("vita", "wo_gen") == 2 and res.generation_helps_on_majority
    # one-sided binomial tail: P(X >= 3 | n=3, p=1/2) = 1/8
    assert res.sign_test("vita", "erm") == pytest.approx(0.125)
    doc = json.loads(json.dumps(res.to_dict()))
    assert doc["settings"]["seeds"] == [0, 1, 2] and len(doc["outcomes"]) == 3
