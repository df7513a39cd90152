"""Case bundle round trips, instance labeling, and box generation."""

import json

import numpy as np
import pytest

from oracles import bfs_components, tight_box_reference
from segforge.bundle import (
    BoxPrompt,
    CaseBundle,
    InstanceMask,
    boxes_from_instances,
    load_case,
    save_case,
    semantic_to_instances,
)
from segforge.errors import FormatError, IntegrityError, ValidationError


def make_case(rng, three_d=False, dtype=np.uint8, modality=None):
    if three_d:
        image = rng.integers(0, 255, (4, 16, 16)).astype(dtype)
        mask = np.zeros((4, 16, 16), dtype=np.int32)
        mask[1:3, 2:6, 3:8] = 1
        mask[0, 10:14, 10:14] = 2
        spacing = (2.5, 0.8, 0.8)
        modality = modality or "CT"
    else:
        image = rng.integers(0, 255, (16, 16)).astype(dtype)
        mask = np.zeros((16, 16), dtype=np.int32)
        mask[2:6, 3:8] = 1
        spacing = (1.0, 1.0)
        modality = modality or "US"
    case = CaseBundle(
        id="case_x",
        modality=modality,
        image=image,
        spacing=spacing,
        reference=mask,
        prompts=boxes_from_instances(InstanceMask(mask, int(mask.max())), jitter=0),
    )
    return case


def assert_cases_equal(a: CaseBundle, b: CaseBundle):
    assert a.id == b.id and a.modality == b.modality
    assert a.spacing == b.spacing
    assert a.image.dtype == b.image.dtype
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.reference, b.reference)
    assert [(p.target_label, p.box) for p in a.prompts] == [
        (p.target_label, p.box) for p in b.prompts
    ]


@pytest.mark.parametrize("three_d", [False, True])
def test_save_load_round_trip(tmp_path, rng, three_d):
    case = make_case(rng, three_d=three_d)
    save_case(case, tmp_path / "c")
    loaded = load_case(tmp_path / "c")
    assert_cases_equal(case, loaded)
    # second save of the loaded bundle must produce identical bytes
    save_case(loaded, tmp_path / "c2")
    for name in ("manifest.json", "image.bin", "mask.bin"):
        assert (tmp_path / "c" / name).read_bytes() == (tmp_path / "c2" / name).read_bytes()


def test_round_trip_2slice_ct(tmp_path, rng):
    image = rng.normal(0, 300, (2, 8, 8)).astype("<f4")
    mask = np.zeros((2, 8, 8), dtype=np.int32)
    mask[0, 1:3, 1:3] = 1
    case = CaseBundle("ct2", "CT", image, (5.0, 1.0, 1.0), mask, window="lung")
    save_case(case, tmp_path / "ct")
    loaded = load_case(tmp_path / "ct")
    assert loaded.image.shape == (2, 8, 8)
    assert loaded.is_3d
    assert loaded.window == "lung"
    assert_cases_equal(case, loaded)


def test_empty_reference_round_trips_k0(tmp_path, rng):
    case = make_case(rng)
    case.reference = np.zeros_like(case.reference)
    case.prompts = []
    save_case(case, tmp_path / "c")
    loaded = load_case(tmp_path / "c")
    assert loaded.num_instances == 0
    assert loaded.prompts == []


def test_anisotropic_spacing_preserved_exactly(tmp_path, rng):
    case = make_case(rng, three_d=True)
    case.spacing = (1.0, 0.8, 0.8)
    save_case(case, tmp_path / "c")
    assert load_case(tmp_path / "c").spacing == (1.0, 0.8, 0.8)


def test_rgb_case_round_trip(tmp_path, rng):
    image = rng.integers(0, 255, (12, 10, 3)).astype(np.uint8)
    mask = np.zeros((12, 10), dtype=np.int32)
    mask[4:7, 2:5] = 1
    case = CaseBundle("rgb", "Endoscopy", image, (1.0, 1.0), mask)
    save_case(case, tmp_path / "c")
    loaded = load_case(tmp_path / "c")
    assert loaded.image.shape == (12, 10, 3)
    assert loaded.spatial_shape == (12, 10)
    assert not loaded.is_3d


def test_size_mismatch_is_validation_error(tmp_path, rng):
    case = make_case(rng)
    save_case(case, tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    blob = np.arange(17, dtype="<u1").tobytes()
    (tmp_path / "c" / "image.bin").write_bytes(blob)
    manifest["shape"] = [4, 4]
    manifest["checksums"]["image.bin"] = __import__("hashlib").sha256(blob).hexdigest()
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValidationError):
        load_case(tmp_path / "c")


def test_corrupt_blob_is_integrity_error(tmp_path, rng):
    case = make_case(rng)
    save_case(case, tmp_path / "c")
    blob = bytearray((tmp_path / "c" / "image.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "c" / "image.bin").write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_case(tmp_path / "c")


def test_missing_manifest_is_format_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        load_case(tmp_path / "empty")


def test_auto_prompts_one_box_per_instance(tmp_path, rng):
    mask = np.zeros((20, 20), dtype=np.int32)
    mask[1:4, 1:4] = 1
    mask[6:9, 10:15] = 2
    mask[15:18, 2:5] = 3
    case = CaseBundle("k3", "US", rng.integers(0, 255, (20, 20)).astype(np.uint8), (1, 1), mask)
    save_case(case, tmp_path / "c")
    loaded = load_case(tmp_path / "c", auto_prompts=True)
    _, count = bfs_components(mask > 0)
    assert count == 3
    assert len(loaded.prompts) == count
    assert sorted(p.target_label for p in loaded.prompts) == [1, 2, 3]


def test_noncontiguous_labels_rejected(rng):
    mask = np.zeros((8, 8), dtype=np.int32)
    mask[0, 0] = 2  # label 1 missing
    case = CaseBundle("bad", "US", rng.integers(0, 255, (8, 8)).astype(np.uint8), (1, 1), mask)
    with pytest.raises(ValidationError):
        case.validate()


class TestSemanticToInstances:
    def test_two_disjoint_blobs(self):
        mask = np.zeros((6, 6), dtype=np.int32)
        mask[0:2, 0:2] = 1
        mask[4:6, 4:6] = 1
        inst = semantic_to_instances(mask)
        _, count = bfs_components(mask)
        assert inst.count == count == 2
        assert set(np.unique(inst.labels)) == {0, 1, 2}

    def test_all_zero_mask(self):
        inst = semantic_to_instances(np.zeros((5, 5), dtype=np.int32))
        assert inst.count == 0
        assert not inst.labels.any()

    def test_full_foreground_single_instance(self):
        inst = semantic_to_instances(np.ones((4, 4), dtype=np.int32))
        assert inst.count == 1
        assert (inst.labels == 1).all()

    def test_idempotent_on_own_output(self, rng):
        mask = (rng.random((16, 16)) < 0.4).astype(np.int32)
        first = semantic_to_instances(mask)
        second = semantic_to_instances(first.labels)
        assert second.count == first.count
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_labels_in_scan_order(self):
        mask = np.zeros((6, 6), dtype=np.int32)
        mask[5, 0:2] = 1  # later in scan order despite lower class
        mask[0, 4:6] = 2
        inst = semantic_to_instances(mask)
        assert inst.labels[0, 4] == 1
        assert inst.labels[5, 0] == 2

    def test_diagonal_connectivity_option(self):
        mask = np.zeros((4, 4), dtype=np.int32)
        mask[0, 0] = 1
        mask[1, 1] = 1
        assert semantic_to_instances(mask, "faces").count == 2
        assert semantic_to_instances(mask, "faces+edges").count == 1

    @pytest.mark.parametrize("shape", [(16, 16), (8, 8, 8)])
    def test_matches_bfs_oracle_on_random_masks(self, shape):
        # 200 seeds total across the two shapes per the module invariant
        for seed in range(100):
            rng = np.random.default_rng(seed)
            mask = (rng.random(shape) < 0.35).astype(np.int32)
            inst = semantic_to_instances(mask)
            ref_labels, ref_count = bfs_components(mask)
            assert inst.count == ref_count, f"seed {seed}"
            np.testing.assert_array_equal(inst.labels, ref_labels)


class TestBoxesFromInstances:
    def test_tight_box_half_open(self):
        mask = np.zeros((8, 8), dtype=np.int32)
        mask[1:3, 3:5] = 1  # rows 1-2, cols 3-4
        boxes = boxes_from_instances(InstanceMask(mask, 1), jitter=0)
        assert boxes[0].box == (3, 1, 5, 3)

    def test_jitter_zero_is_tight_for_random_masks(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            mask = np.zeros((12, 12), dtype=np.int32)
            y, x = rng.integers(0, 9), rng.integers(0, 9)
            h, w = rng.integers(1, 4), rng.integers(1, 4)
            mask[y : y + h, x : x + w] = 1
            box = boxes_from_instances(InstanceMask(mask, 1), jitter=0)[0].box
            assert box == tight_box_reference(mask, 1)

    def test_jitter_clamped_at_border(self):
        mask = np.zeros((10, 10), dtype=np.int32)
        mask[0:3, 7:10] = 1  # touches two borders
        for seed in range(20):
            box = boxes_from_instances(InstanceMask(mask, 1), jitter=5, seed=seed)[0]
            x0, y0, x1, y1 = box.box
            assert 0 <= x0 < x1 <= 10
            assert 0 <= y0 < y1 <= 10

    def test_deterministic_given_seed(self):
        mask = np.zeros((10, 10), dtype=np.int32)
        mask[2:5, 2:5] = 1
        a = boxes_from_instances(InstanceMask(mask, 1), jitter=3, seed=7)
        b = boxes_from_instances(InstanceMask(mask, 1), jitter=3, seed=7)
        assert [p.box for p in a] == [p.box for p in b]

    def test_extremal_voxels_touch_tight_box_faces(self, rng):
        mask = (rng.random((14, 14)) < 0.3).astype(np.int32)
        inst = semantic_to_instances(mask)
        for prompt in boxes_from_instances(inst, jitter=0):
            x0, y0, x1, y1 = prompt.box
            ys, xs = np.nonzero(inst.labels == prompt.target_label)
            assert xs.min() == x0 and xs.max() == x1 - 1
            assert ys.min() == y0 and ys.max() == y1 - 1
            assert ((xs >= x0) & (xs < x1)).all() and ((ys >= y0) & (ys < y1)).all()

    def test_3d_boxes(self):
        mask = np.zeros((5, 8, 8), dtype=np.int32)
        mask[1:3, 2:4, 5:7] = 1
        box = boxes_from_instances(InstanceMask(mask, 1), jitter=0)[0]
        assert box.box == (5, 2, 1, 7, 4, 3)
        assert box.z_range() == (1, 3)
        assert box.box_2d() == (5, 2, 7, 4)


def test_box_prompt_validation():
    with pytest.raises(ValidationError):
        BoxPrompt(1, (4, 1, 4, 3))  # x_min == x_max
    with pytest.raises(ValidationError):
        BoxPrompt(0, (0, 0, 1, 1))  # label must be positive
    with pytest.raises(ValidationError):
        BoxPrompt(1, (0, 0, 1))  # wrong arity
    prompt = BoxPrompt(1, (0, 0, 4, 4))
    with pytest.raises(ValidationError):
        prompt.check_within((3, 3))
