from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgcfa.errors import FormatError, GenerationError, ManifestViolation, ValidationError
from tgcfa.synthdom import (
    STYLE_A,
    STYLE_B,
    DatasetConfig,
    DomainStyle,
    ManifestEntry,
    OrganSpec,
    SceneConfig,
    SplitManifest,
    build_dataset,
    build_from_config,
    generate_scene,
    load_entries,
    render,
)
from tgcfa.tensorio import decode_tensor, encode_tensor, load_tensor, save_tensor

GOLDEN = Path(__file__).parent / "golden"


def three_label_config():
    organs = (
        OrganSpec(1, "ellipse", (5, 7), (7, 9), 1.0),
        OrganSpec(2, "rounded-rect", (3, 3), (4, 5), 1.0),
    )
    return SceneConfig(height=24, width=32, n_labels=3, organs=organs)


def flat_style(name, values):
    return DomainStyle(name, tuple((v, 0.0) for v in values))


# ---------------------------------------------------------------- scenes


def test_scene_is_deterministic():
    a, b = generate_scene(SceneConfig(), 123), generate_scene(SceneConfig(), 123)
    assert a == b and np.array_equal(a.label_map(), b.label_map())
    assert not np.array_equal(a.label_map(), generate_scene(SceneConfig(), 124).label_map())


def test_golden_scene():
    expect = np.array([[int(c) for c in row] for row in (GOLDEN / "scene3_seed7.txt").read_text().split()])
    got = generate_scene(three_label_config(), 7).label_map()
    assert np.array_equal(got, expect)


def test_zero_shapes_gives_background():
    cfg = SceneConfig(height=8, width=8, n_labels=2, organs=())
    assert not generate_scene(cfg, 0).label_map().any()


def test_impossible_placement_raises():
    big = SceneConfig(height=8, width=8, n_labels=3, organs=(
        OrganSpec(1, "ellipse", (6, 6), (6, 6), 1.0),
        OrganSpec(2, "ellipse", (6, 6), (6, 6), 1.0),
    ), max_overlap=0.0, max_tries=5)
    with pytest.raises(GenerationError):
        generate_scene(big, 0)


def test_organ_label_out_of_range():
    with pytest.raises(ValidationError):
        SceneConfig(n_labels=2, organs=(OrganSpec(2, "blob", (3, 3), (4, 4)),))


def test_scene_config_round_trip():
    cfg = three_label_config()
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- rendering


def test_flat_styles_differ_by_fill():
    scene = generate_scene(three_label_config(), 7)
    a = render(scene, flat_style("a", [0.1, 0.9, 0.5]))
    b = render(scene, flat_style("b", [0.8, 0.2, 0.5]))
    organ = scene.label_map() == 1
    assert np.allclose(np.abs(a.image[0][organ] - b.image[0][organ]), 0.7, atol=1e-6)


def test_flat_style_is_piecewise_constant():
    scene = generate_scene(three_label_config(), 3)
    rec = render(scene, flat_style("flat", [0.1, 0.9, 0.5]))
    labels = scene.label_map()
    assert rec.confounder_mask is not None and not rec.confounder_mask.any()
    for r, v in enumerate([0.1, 0.9, 0.5]):
        assert np.allclose(rec.image[0][labels == r], v)


def test_render_shape_and_range():
    rec = render(generate_scene(SceneConfig(), 0), STYLE_B)
    assert rec.image.shape == (1, 64, 64) and rec.image.dtype == np.float32
    assert rec.image.min() >= 0.0 and rec.image.max() <= 1.0
    assert rec.labels.dtype == np.uint8 and rec.domain_name == "styleB"


def test_render_style_without_enough_labels():
    with pytest.raises(ValidationError):
        render(generate_scene(SceneConfig(), 0), flat_style("tiny", [0.1, 0.2]))


def test_invalid_style():
    with pytest.raises(ValidationError):
        DomainStyle("x", ((0.5, 0.0),), confounder_density=-1)
    with pytest.raises(ValidationError):
        DomainStyle("", ((0.5, 0.0),))


def test_style_round_trip():
    assert DomainStyle.from_dict(STYLE_A.to_dict()) == STYLE_A


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([STYLE_A, STYLE_B]))
def test_property_render_invariants(seed, style):
    scene = generate_scene(SceneConfig(), seed)
    rec = render(scene, style)
    again = render(scene, style)
    # labels never depend on the style, rendering is deterministic, clutter avoids organs
    assert np.array_equal(rec.labels, scene.label_map())
    assert np.array_equal(rec.image, again.image)
    assert not (rec.confounder_mask & (rec.labels > 0)).any()


# ---------------------------------------------------------------- tensor files


@pytest.mark.parametrize("arr", [np.arange(6, dtype=np.float32).reshape(2, 3), np.array([[1, 2]], np.uint8),
                                 np.zeros((0, 4), np.float32)])
def test_tensor_round_trip(tmp_path, arr):
    save_tensor(tmp_path / "t.tgts", arr)
    back = load_tensor(tmp_path / "t.tgts")
    assert back.dtype == arr.dtype and np.array_equal(back, arr)


def test_tensor_errors():
    blob = encode_tensor(np.ones((3, 3), np.float32))
    with pytest.raises(FormatError):
        decode_tensor(blob[:-4])
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="dtype"):
        encode_tensor(np.ones(3, np.int64))


# ---------------------------------------------------------------- datasets


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    manifest = build_dataset(root, 6, 3, 4, STYLE_A, [STYLE_B], seed=5)
    return root, manifest


def test_dataset_splits_are_disjoint(small_dataset):
    _, manifest = small_dataset
    seeds = {s: {e.scene_seed for e in manifest.select(s)} for s in ("train", "val", "test")}
    assert len(seeds["train"]) == 6 and len(seeds["val"]) == 3 and len(seeds["test"]) == 4
    assert not seeds["train"] & seeds["val"] and not seeds["train"] & seeds["test"] and not seeds["val"] & seeds["test"]


def test_dataset_domains(small_dataset):
    _, manifest = small_dataset
    assert {e.domain for e in manifest.select("train")} == {"styleA"}
    assert manifest.domains("test") == ["styleA", "styleB"]
    a = {e.scene_seed for e in manifest.select("test", "styleA")}
    assert a == {e.scene_seed for e in manifest.select("test", "styleB")}
    manifest.check_hygiene()


def test_dataset_manifest_reloads(small_dataset):
    root, manifest = small_dataset
    back = SplitManifest.load(root)
    assert back.entries == manifest.entries and back.source_domain == "styleA"


def test_dataset_regeneration_is_bit_identical(small_dataset, tmp_path):
    root, _ = small_dataset
    build_dataset(tmp_path, 6, 3, 4, STYLE_A, [STYLE_B], seed=5)
    files = sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    for rel in files:
        assert (root / rel).read_bytes() == (tmp_path / rel).read_bytes()


def test_duplicate_style_names(tmp_path):
    with pytest.raises(ValidationError, match="duplicate"):
        build_dataset(tmp_path, 1, 1, 1, STYLE_A, [STYLE_A], seed=0)


def test_unknown_style_in_config(tmp_path):
    with pytest.raises(ValidationError, match="unknown style"):
        build_from_config(DatasetConfig(n_train=1, n_val=1, n_test=1, targets=("styleZ",)), tmp_path, 0)


def test_hygiene_violations(small_dataset):
    root, manifest = small_dataset
    leak = manifest.select("test", "styleB")[0]
    bad = SplitManifest(root, manifest.entries + [ManifestEntry("train", "styleB", 1, leak.image, leak.label)], "styleA")
    with pytest.raises(ManifestViolation):
        bad.check_hygiene()
    moved = SplitManifest(root, [ManifestEntry("train", "styleA", 1, leak.image, leak.label)], "styleA")
    with pytest.raises(ManifestViolation):
        moved.check_hygiene()


def test_load_entries_refuses_test(small_dataset):
    _, manifest = small_dataset
    x, y = load_entries(manifest, manifest.select("train"))
    assert x.shape == (6, 1, 64, 64) and y.shape == (6, 64, 64)
    with pytest.raises(ManifestViolation):
        load_entries(manifest, manifest.select("test"))


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ValidationError):
        SplitManifest.load(tmp_path)
