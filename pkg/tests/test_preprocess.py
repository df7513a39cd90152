"""Intensity maps, resize geometry, and flip augmentation."""

import numpy as np
import pytest

from oracles import bilinear_reference, percentile_reference
from segforge.bundle import BoxPrompt
from segforge.errors import ValidationError
from segforge.preprocess import (
    PadInfo,
    WindowSpec,
    apply_flips,
    bilinear_resize,
    intensity_normalize,
    load_window_presets,
    normalize_minmax,
    percentile_clip_rescale,
    random_flip,
    resize_longest_pad,
    window_ct,
)


class TestWindowCT:
    def test_window_endpoints(self):
        w = WindowSpec(level=40, width=400)
        out = window_ct(np.array([-160.0, 240.0]), w)
        assert out.tolist() == [0, 255]

    def test_center_rounds_half_to_even(self):
        # HU 40 maps to 127.5, which rounds to 128
        out = window_ct(np.array([40.0]), WindowSpec(40, 400))
        assert out[0] == 128

    def test_constant_volume_at_level(self):
        out = window_ct(np.full((4, 4), 40.0), WindowSpec(40, 400))
        assert (out == 128).all()

    def test_clipping_outside_window(self):
        out = window_ct(np.array([-5000.0, 5000.0]), WindowSpec(40, 400))
        assert out.tolist() == [0, 255]

    def test_monotone_nondecreasing(self, rng):
        v = np.sort(rng.normal(0, 500, 200))
        out = window_ct(v, WindowSpec(40, 400))
        assert (np.diff(out.astype(int)) >= 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(ValidationError):
            window_ct(np.array([np.nan]), WindowSpec(40, 400))
        with pytest.raises(ValidationError):
            WindowSpec(40, 0)


class TestPercentileClip:
    def test_bounds_match_reference_on_1_to_1000(self):
        v = np.arange(1, 1001, dtype=np.float64)
        lo = percentile_reference(v, 0.5)
        hi = percentile_reference(v, 99.5)
        assert lo == pytest.approx(5.995)
        assert hi == pytest.approx(995.005)
        out = percentile_clip_rescale(v, mask_nonzero=False)
        assert out[v <= lo].max(initial=0) == 0
        assert out[-1] == 255
        assert (out[v >= hi] == 255).all()

    def test_matches_percentile_oracle(self, rng):
        v = rng.normal(100, 30, (32, 32))
        lo = percentile_reference(v, 0.5)
        hi = percentile_reference(v, 99.5)
        got = percentile_clip_rescale(v, mask_nonzero=False)
        want = np.rint((np.clip(v, lo, hi) - lo) / (hi - lo) * 255.0).astype(np.uint8)
        np.testing.assert_array_equal(got, want)

    def test_constant_foreground_all_zeros(self):
        v = np.full((5, 5), 7.0)
        assert not percentile_clip_rescale(v).any()

    def test_uint8_range_identity_bounds(self):
        # enough mass at both extremes that the percentiles hit 0 and 255
        v = np.concatenate([np.zeros(300), np.arange(1, 255), np.full(300, 255.0)])
        lo = percentile_reference(v, 0.5)
        hi = percentile_reference(v, 99.5)
        assert (lo, hi) == (0.0, 255.0)
        out = percentile_clip_rescale(v, mask_nonzero=False)
        np.testing.assert_array_equal(out, np.rint(v).astype(np.uint8))

    def test_foreground_masking(self):
        v = np.zeros(100)
        v[:10] = np.linspace(10, 20, 10)
        out = percentile_clip_rescale(v, mask_nonzero=True)
        assert out.max() == 255  # scaled by foreground stats only

    def test_empty_foreground_rejected(self):
        with pytest.raises(ValidationError):
            percentile_clip_rescale(np.zeros(10), mask_nonzero=True)

    def test_monotone_nondecreasing(self, rng):
        v = np.sort(rng.normal(50, 20, 500))
        out = percentile_clip_rescale(v, mask_nonzero=False)
        assert (np.diff(out.astype(int)) >= 0).all()


class TestResizeLongestPad:
    def test_512x256(self, rng):
        img = rng.random((512, 256)).astype(np.float32)
        out, info = resize_longest_pad(img)
        assert out.shape == (256, 256)
        assert (info.resized_h, info.resized_w) == (256, 128)
        assert (info.pad_right, info.pad_bottom) == (128, 0)
        assert not out[:, 128:].any()

    def test_identity_at_target_size(self, rng):
        img = rng.random((256, 256)).astype(np.float32)
        out, info = resize_longest_pad(img)
        assert info.scale == 1.0
        assert info.pad_right == info.pad_bottom == 0
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_100x300_geometry(self, rng):
        img = rng.random((100, 300)).astype(np.float32)
        out, info = resize_longest_pad(img)
        assert (info.resized_h, info.resized_w) == (85, 256)
        assert info.pad_bottom == 171
        assert out.shape == (256, 256)

    def test_bilinear_matches_reference(self, rng):
        img = (rng.random((13, 9)) * 255).astype(np.float32)
        got = bilinear_resize(img, 7, 17)
        want = bilinear_reference(img, 7, 17)
        np.testing.assert_array_equal(got, want)

    def test_bilinear_rgb_matches_reference(self, rng):
        img = (rng.random((6, 11, 3)) * 255).astype(np.float32)
        got = bilinear_resize(img, 9, 5)
        want = bilinear_reference(img, 9, 5)
        np.testing.assert_array_equal(got, want)

    def test_output_always_square_target(self, rng):
        for h, w in [(1, 50), (33, 7), (256, 255), (300, 300)]:
            out, info = resize_longest_pad(rng.random((h, w)).astype(np.float32))
            assert out.shape == (256, 256)
            assert info.resized_h + info.pad_bottom == 256
            assert info.resized_w + info.pad_right == 256

    def test_unpad_then_resize_recovers_shape(self, rng):
        img = rng.random((100, 300)).astype(np.float32)
        out, info = resize_longest_pad(img)
        cropped = out[: info.resized_h, : info.resized_w]
        restored = bilinear_resize(cropped, info.original_h, info.original_w)
        assert restored.shape == img.shape


class TestNormalize:
    def test_endpoints_and_example(self):
        out = normalize_minmax(np.array([0, 51, 255], dtype=np.uint8))
        assert out[0] == 0.0
        assert out[2] == 1.0
        assert out[1] == pytest.approx(0.2)

    def test_no_per_image_stretching(self):
        out = normalize_minmax(np.full((3, 3), 128, dtype=np.uint8))
        np.testing.assert_allclose(out, 128 / 255)

    def test_output_in_unit_interval(self, rng):
        img = rng.integers(0, 256, (20, 20)).astype(np.uint8)
        out = normalize_minmax(img)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestRandomFlip:
    def test_p0_is_identity(self, rng):
        img = rng.random((6, 8)).astype(np.float32)
        mask = (rng.random((6, 8)) < 0.5).astype(np.int32)
        box = BoxPrompt(1, (1, 2, 4, 5))
        img2, mask2, box2 = random_flip(img, mask, box, p=0.0, seed=3)
        np.testing.assert_array_equal(img, img2)
        np.testing.assert_array_equal(mask, mask2)
        assert box2.box == box.box

    def test_p1_double_flip_box(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4)
        mask = np.zeros((4, 4), dtype=np.int32)
        mask[0:2, 0:2] = 1
        box = BoxPrompt(1, (0, 0, 2, 2))
        img2, mask2, box2 = random_flip(img, mask, box, p=1.0, seed=0)
        assert box2.box == (2, 2, 4, 4)
        assert mask2[2:4, 2:4].all()
        np.testing.assert_array_equal(img2, img[::-1, ::-1])

    def test_involution(self, rng):
        img = rng.random((5, 7)).astype(np.float32)
        mask = (rng.random((5, 7)) < 0.5).astype(np.int32)
        box = BoxPrompt(1, (1, 1, 3, 4))
        for h in (False, True):
            for v in (False, True):
                i2, m2, b2 = apply_flips(img, mask, box, h, v)
                i3, m3, b3 = apply_flips(i2, m2, b2, h, v)
                np.testing.assert_array_equal(img, i3)
                np.testing.assert_array_equal(mask, m3)
                assert b3.box == box.box

    def test_foreground_count_invariant(self, rng):
        mask = (rng.random((9, 9)) < 0.4).astype(np.int32)
        img = rng.random((9, 9)).astype(np.float32)
        for seed in range(10):
            _, m2, _ = random_flip(img, mask, None, p=0.5, seed=seed)
            assert m2.sum() == mask.sum()

    def test_deterministic_given_seed(self, rng):
        img = rng.random((6, 6)).astype(np.float32)
        mask = np.zeros((6, 6), dtype=np.int32)
        a = random_flip(img, mask, None, p=0.5, seed=11)
        b = random_flip(img, mask, None, p=0.5, seed=11)
        np.testing.assert_array_equal(a[0], b[0])


class TestIntensityPolicy:
    def test_uint8_passthrough(self, rng):
        img = rng.integers(0, 255, (8, 8)).astype(np.uint8)
        assert intensity_normalize(img, "Fundus") is img

    def test_ct_uses_window_preset(self):
        img = np.array([[40.0, 240.0]])
        out = intensity_normalize(img, "CT", window="soft_tissue")
        assert out.tolist() == [[128, 255]]

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValidationError):
            intensity_normalize(np.array([[1.0, 2.0]]), "CT", window="nope")

    def test_non_ct_float_uses_percentiles(self, rng):
        img = rng.normal(500, 100, (16, 16))
        out = intensity_normalize(img, "MRI")
        assert out.dtype == np.uint8
        np.testing.assert_array_equal(out, percentile_clip_rescale(img))

    def test_presets_file_contents(self):
        presets = load_window_presets()
        assert presets["soft_tissue"] == WindowSpec(40.0, 400.0)
        assert presets["lung"] == WindowSpec(-500.0, 1500.0)
        assert presets["bone"] == WindowSpec(400.0, 1800.0)


def test_padinfo_invariants():
    with pytest.raises(ValidationError):
        PadInfo(scale=0.0, resized_h=1, resized_w=1, pad_right=0, pad_bottom=0, original_h=1, original_w=1)
    with pytest.raises(ValidationError):
        PadInfo(scale=1.0, resized_h=10, resized_w=5, pad_right=2, pad_bottom=0, original_h=10, original_w=5)
