import ast
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import tiny_dataset
from vita.corruptions import (
    KINDS,
    SEVERITIES,
    CorruptionSpec,
    CorruptionSuite,
    SeverityTable,
    apply_corruption,
    build_corruption_suite,
    calibration_images,
    diamond_square_field,
    distortion_curve,
    image_seed,
    jpeg_roundtrip,
)
from vita.datasets import LabeledImages

SRC = Path(__file__).resolve().parents[1] / "src" / "vita"


@pytest.fixture(scope="module")
def images():
    return calibration_images(4, 16, seed=9)


@pytest.mark.parametrize("kind", KINDS)
def test_every_cell_in_range_and_seed_deterministic(kind, images):
    for s in SEVERITIES:
        spec = CorruptionSpec.from_table(kind, s, seed=11)
        out = apply_corruption(images[0], spec)
        assert out.shape == images[0].shape and out.dtype == np.float32
        assert out.min() >= 0 and out.max() <= 1
        assert out.tobytes() == apply_corruption(images[0], spec).tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_distortion_strictly_increases_with_severity(kind):
    curve = distortion_curve(kind)
    assert all(b > a for a, b in zip(curve, curve[1:])), curve


def test_gaussian_noise_zero_sigma_is_identity(images):
    out = apply_corruption(images[1], CorruptionSpec("gaussian_noise", 3, 5, {"sigma": 0.0}))
    np.testing.assert_array_equal(out, images[1])


@pytest.mark.parametrize("f", [2, 4])
def test_pixelate_block_constant_image_is_fixed_point(f):
    coarse = np.random.default_rng(f).random((3, 32 // f, 32 // f))
    img = np.repeat(np.repeat(coarse, f, axis=1), f, axis=2).astype(np.float32)
    out = apply_corruption(img, CorruptionSpec("pixelate", 1, 0, {"factor": f}))
    np.testing.assert_array_equal(out, img)


def test_rejects_unknown_kind_severity_and_small_images(images):
    with pytest.raises(ValueError, match="unknown corruption"):
        apply_corruption(images[0], CorruptionSpec("rain", 1))
    with pytest.raises(ValueError, match="severity"):
        apply_corruption(images[0], CorruptionSpec("fog", 6))
    with pytest.raises(ValueError, match="H, W >= 8"):
        apply_corruption(np.zeros((3, 4, 16)), CorruptionSpec("fog", 1))


# ---------------------------------------------------------------- plasma

def test_plasma_flat_corners_without_noise_stay_flat():
    f = diamond_square_field(17, 0.5, 0, amplitude=0.0, corners=[0.5] * 4, normalize=False)
    np.testing.assert_array_equal(f, 0.5)


def test_plasma_single_diamond_step_is_corner_mean():
    f = diamond_square_field(3, 0.5, 0, amplitude=0.0, corners=[0, 0, 1, 1], normalize=False)
    assert f[1, 1] == 0.5


def test_plasma_seeds():
    a, b = diamond_square_field(33, 0.6, 4), diamond_square_field(33, 0.6, 4)
    assert a.tobytes() == b.tobytes()
    assert a.min() == 0 and a.max() == 1
    for s in range(5, 15):
        assert (diamond_square_field(33, 0.6, s) != a).mean() >= 0.5


@pytest.mark.parametrize("n", [0, 2, 4, 10, 31])
def test_plasma_rejects_invalid_side(n):
    with pytest.raises(ValueError, match="2\\*\\*k \\+ 1"):
        diamond_square_field(n, 0.5, 0)


# ---------------------------------------------------------------- jpeg

def test_jpeg_uniform_gray_at_full_quality():
    img = np.full((3, 16, 16), 0.42)
    assert np.abs(jpeg_roundtrip(img, 100) - img).max() <= 1 / 255


@pytest.mark.parametrize("q", [10, 50, 75])
def test_jpeg_roundtrip_is_near_idempotent(q):
    once = jpeg_roundtrip(calibration_images(1)[0], q)
    assert np.abs(jpeg_roundtrip(once, q) - once).max() <= 1 / 255 + 1e-7


def test_jpeg_lower_quality_loses_more():
    img = calibration_images(1)[0]
    mse = {q: float(((jpeg_roundtrip(img, q) - img) ** 2).mean()) for q in (10, 90)}
    assert mse[10] > mse[90]


def test_jpeg_pads_odd_sizes_and_rejects_bad_quality():
    img = np.random.default_rng(0).random((3, 13, 10))
    assert jpeg_roundtrip(img, 50).shape == img.shape
    for q in (0, 101):
        with pytest.raises(ValueError):
            jpeg_roundtrip(img, q)


# ---------------------------------------------------------------- table and suite

def test_default_table_is_valid_and_monotone():
    table = SeverityTable.default()
    assert set(table.kinds) == set(KINDS)
    for kind, entry in table.kinds.items():
        values = [row[entry["monotone_key"]] for row in entry["levels"]]
        diffs = np.diff(values) * (1 if entry["direction"] == "increasing" else -1)
        assert np.all(diffs > 0), kind


def test_table_rejects_non_monotone_rows():
    doc = json.loads(SeverityTable.default().to_json())
    levels = doc["kinds"]["gaussian_noise"]["levels"]
    levels[2]["sigma"] = levels[1]["sigma"]
    with pytest.raises(ValueError, match="strictly"):
        SeverityTable.from_json(json.dumps(doc))
    del doc["kinds"]["fog"]
    with pytest.raises(ValueError, match="lacks"):
        SeverityTable.from_json(json.dumps(doc))


def test_table_params_are_data():
    table = SeverityTable.default()
    assert CorruptionSpec.from_table("jpeg", 4, 1, table).params == table.params("jpeg", 4)
    assert table.params("fog", 2) == table.params("fog", 2)
    assert SeverityTable.from_json(table.to_json()).digest() == table.digest()


def test_image_seeds_are_distinct():
    seeds = {image_seed(0, k, s, i) for k in KINDS for s in SEVERITIES for i in range(4)}
    assert len(seeds) == 75 * 4


@pytest.fixture(scope="module")
def small_set():
    return tiny_dataset(n_train=8, n_test=3, size=16).test


@pytest.fixture(scope="module")
def suite(small_set):
    return build_corruption_suite(small_set, seed=3)


def test_suite_counts_and_labels(suite, small_set):
    assert len(suite) == 75 * len(small_set)
    assert len(suite.cells) == 75
    np.testing.assert_array_equal(suite.labels, small_set.labels)
    for _, imgs in suite.items():
        assert imgs.shape == small_set.images.shape
        assert imgs.min() >= 0 and imgs.max() <= 1


def test_suite_is_deterministic_and_threading_invariant(suite, small_set):
    again = build_corruption_suite(small_set, seed=3, workers=3)
    for key, imgs in suite.items():
        assert imgs.tobytes() == again.cells[key].tobytes()
    other = build_corruption_suite(small_set, seed=4, kinds=("gaussian_noise",))
    assert other.cells[("gaussian_noise", 1)].tobytes() != suite.cells[("gaussian_noise", 1)].tobytes()


def test_suite_save_load_round_trip(suite, tmp_path):
    suite.save(tmp_path / "suite")
    loaded = CorruptionSuite.load(tmp_path / "suite")
    assert loaded.table_version == suite.table_version and loaded.seed == 3
    assert set(loaded.cells) == set(suite.cells)
    for key, imgs in suite.items():
        assert loaded.cells[key].tobytes() == imgs.tobytes()
    with pytest.raises(FileNotFoundError):
        CorruptionSuite.load(tmp_path / "nothing")


def test_suite_rejects_empty_dataset():
    empty = LabeledImages(np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, np.int64), 2)
    with pytest.raises(ValueError, match="empty"):
        build_corruption_suite(empty)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(KINDS), st.sampled_from(SEVERITIES), st.integers(0, 2 ** 31))
def test_corruption_preserves_range_on_arbitrary_images(kind, severity, seed):
    img = np.random.default_rng(seed).random((3, 8, 12))
    out = apply_corruption(img, CorruptionSpec.from_table(kind, severity, seed))
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- train/eval separation

def _imports(path):
    tree = ast.parse(path.read_text())
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            yield ("." * node.level) + (node.module or "")
        elif isinstance(node, ast.Import):
            yield from (a.name for a in node.names)


@pytest.mark.parametrize("package", ["augment", "attacks", "training", "vicinal"])
def test_training_path_never_imports_corruptions(package):
    root = SRC / package
    files = list(root.rglob("*.py")) if root.is_dir() else [SRC / f"{package}.py"]
    assert files
    for f in files:
        for name in _imports(f):
            assert "corruptions" not in name, f"{f.name} imports {name}"
