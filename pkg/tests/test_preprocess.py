import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from anatseg.core import IntensitySlice, SegMask, StudyMetadata, stack_from_arrays
from anatseg.errors import InputError, ParameterError
from anatseg.preprocess import (NormalizationContext, apply_window, bloodpool_median, clahe, crop_or_pad,
                                normalize_by_bloodpool_median, preprocess_stack, quarter_rotate,
                                scale_to_byte_range, to_bins, uncrop)

from oracles import global_equalize

images = hnp.arrays(np.float64, st.tuples(st.integers(8, 24), st.integers(8, 24)),
                    elements=st.floats(0, 1000, allow_nan=False))


class TestWindow:
    def test_identity_without_window(self, rng):
        s = IntensitySlice(rng.random((4, 4)))
        assert np.array_equal(apply_window(s, StudyMetadata()).data, s.data)

    def test_worked_value(self):
        out = apply_window(IntensitySlice([[100.0]]), StudyMetadata(2.0, -10.0, 190.0, 100.0))
        assert out.data[0, 0] == 127.5

    def test_below_window_is_zero(self):
        out = apply_window(IntensitySlice([[10.0, 139.0]]), StudyMetadata(1.0, 0.0, 190.0, 100.0))
        assert out.data.tolist() == [[0.0, 0.0]]


class TestRotate:
    def test_hand_rotation(self):
        out = quarter_rotate(np.array([[1, 2, 3], [4, 5, 6]]), 1)
        assert out.tolist() == [[3, 6], [2, 5], [1, 4]]

    def test_half_turn_twice_is_identity(self, rng):
        a = rng.integers(0, 4, (5, 7))
        assert np.array_equal(quarter_rotate(quarter_rotate(a, 2), 2), a)

    def test_spacing_swaps_on_odd_turns(self):
        s = IntensitySlice(np.ones((2, 3)), 0.5, 2.0)
        assert quarter_rotate(s, 1).spacing == (2.0, 0.5)
        assert quarter_rotate(s, 2).spacing == (0.5, 2.0)

    def test_bad_turns(self):
        with pytest.raises(ParameterError):
            quarter_rotate(np.ones((2, 2)), 4)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.uint8, (6, 9), elements=st.integers(0, 3)), st.integers(0, 3))
    def test_label_multiset_preserved(self, labels, k):
        out = quarter_rotate(SegMask(labels), k)
        assert np.array_equal(np.bincount(out.labels.ravel(), minlength=4), np.bincount(labels.ravel(), minlength=4))


class TestClahe:
    def test_constant_image(self):
        out = clahe(IntensitySlice(np.full((16, 16), 7.0)), (4, 4), 2.0)
        assert np.ptp(out.data) == 0

    def test_single_tile_huge_clip_is_global_equalization(self, rng):
        img = rng.integers(0, 256, (37, 29)).astype(np.float64)
        out = clahe(IntensitySlice(img), (1, 1), 1e9)
        assert np.allclose(out.data, global_equalize(to_bins(img)), atol=1e-9)

    def test_tiles_larger_than_image(self):
        with pytest.raises(ParameterError):
            clahe(IntensitySlice(np.ones((4, 4))), (8, 8), 2.0)

    def test_monotone_within_tile_grid(self, rng):
        # with one tile the mapping is a monotone function of intensity
        img = rng.random((20, 20)) * 255
        out = clahe(IntensitySlice(img), (1, 1), 2.0).data
        order = np.argsort(img.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order]) >= -1e-12)

    @settings(max_examples=25, deadline=None)
    @given(images, st.integers(1, 4), st.floats(0.1, 10))
    def test_output_range(self, img, tiles, clip):
        out = clahe(IntensitySlice(img), (tiles, tiles), clip)
        assert out.data.min() >= 0 and out.data.max() <= 255


class TestCropPad:
    def test_identity(self, rng):
        a = rng.random((192, 192))
        out, off = crop_or_pad(a, 192)
        assert np.array_equal(out, a) and off == (0, 0)

    def test_offsets(self):
        a = np.arange(180 * 200).reshape(180, 200)
        out, (oy, ox) = crop_or_pad(a, 192)
        assert (oy, ox) == (6, -4)
        assert np.array_equal(out[6:186], a[:, 4:196])
        assert not out[:6].any() and not out[186:].any()

    def test_mask_padding_is_background(self, rng):
        m = SegMask(rng.integers(1, 4, (10, 10)))
        out, _ = crop_or_pad(m, 16)
        assert (out.labels[:3] == 0).all() and (out.labels[:, -3:] == 0).all()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 30))
    def test_inverse_restores_interior(self, h, w, size):
        a = np.arange(1, h * w + 1).reshape(h, w)
        out, off = crop_or_pad(a, size)
        back = uncrop(out, off, (h, w))
        kept = back != 0
        assert np.array_equal(back[kept], a[kept])
        assert kept.sum() == min(h, size) * min(w, size)


class TestScaling:
    def test_worked_values(self):
        s = IntensitySlice([[10.0, 20.0, 30.0]])
        assert scale_to_byte_range(s).data.tolist() == [[0.0, 127.5, 255.0]]

    def test_constant_region(self):
        assert not scale_to_byte_range(IntensitySlice(np.full((3, 3), 4.0))).data.any()

    def test_outside_region_zero(self, rng):
        img = rng.random((5, 5)) * 100
        region = np.zeros((5, 5), bool)
        region[1:4, 1:4] = True
        out = scale_to_byte_range(IntensitySlice(img), region).data
        assert not out[~region].any()
        assert out[region].min() == 0 and out[region].max() == 255

    def test_identity_on_full_range(self):
        img = np.array([[0.0, 100.0, 255.0]])
        assert np.array_equal(scale_to_byte_range(IntensitySlice(img)).data, img)

    @settings(max_examples=25, deadline=None)
    @given(images)
    def test_range(self, img):
        out = scale_to_byte_range(IntensitySlice(img)).data
        assert out.min() >= 0 and out.max() <= 255


class TestBloodPoolNormalization:
    def test_worked_example(self):
        stack = stack_from_arrays([np.array([[0.0, 50.0, 100.0]])])
        ctx = NormalizationContext(np.ones((1, 3), bool), 50.0)
        out = normalize_by_bloodpool_median(stack, ctx)
        assert out.images[0].data.tolist() == [[0.0, 127.5, 255.0]]

    def test_rescaling_invariance(self, rng):
        imgs = [rng.random((6, 6)) * 300 for _ in range(3)]
        region = np.zeros((6, 6), bool)
        region[1:5, 1:5] = True
        a = normalize_by_bloodpool_median(stack_from_arrays(imgs), NormalizationContext(region, 40.0))
        b = normalize_by_bloodpool_median(stack_from_arrays([3.7 * i for i in imgs]),
                                          NormalizationContext(region, 3.7 * 40.0))
        for x, y in zip(a.images, b.images):
            assert np.allclose(x.data, y.data, atol=1e-9)

    def test_output_clamped(self, rng):
        img = rng.random((6, 6)) * 300
        region = np.zeros((6, 6), bool)
        region[2:4, 2:4] = True
        out = normalize_by_bloodpool_median(stack_from_arrays([img]), NormalizationContext(region, 10.0))
        assert out.images[0].data.min() >= 0 and out.images[0].data.max() <= 255

    def test_degenerate_region(self):
        with pytest.raises(InputError):
            normalize_by_bloodpool_median(stack_from_arrays([np.ones((2, 2))]),
                                          NormalizationContext(np.ones((2, 2), bool), 1.0))

    def test_non_positive_median(self):
        with pytest.raises(ParameterError):
            NormalizationContext(np.ones((2, 2), bool), 0.0)

    def test_median_over_volume(self):
        labs = [np.array([[1, 1, 0]]), np.array([[1, 0, 2]])]
        imgs = [np.array([[10.0, 30.0, 99.0]]), np.array([[20.0, 99.0, 99.0]])]
        assert bloodpool_median(stack_from_arrays(imgs, labs)) == 20.0

    def test_median_needs_blood_pool(self):
        with pytest.raises(InputError):
            bloodpool_median(stack_from_arrays([np.ones((2, 2))], [np.zeros((2, 2), int)]))


def test_preprocess_stack_geometry(rng):
    imgs = [rng.random((20, 24)) * 1000 for _ in range(2)]
    labs = [rng.integers(0, 4, (20, 24)) for _ in range(2)]
    out = preprocess_stack(stack_from_arrays(imgs, labs), StudyMetadata(), (2, 2), 2.0, 32, turns=1)
    assert out.shape == (32, 32)
    assert out.images[0].data.max() == 255 and out.images[0].data.min() == 0
    expected, _ = crop_or_pad(np.rot90(labs[0]), 32)
    assert np.array_equal(out.masks[0].labels, expected)
