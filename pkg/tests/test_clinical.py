import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from anatseg.clinical import dice, evaluate_stack, fwhm_scar, hausdorff, lv_volume, region_of, relative_mse
from anatseg.core import stack_from_arrays
from anatseg.errors import InputError
from anatseg.phantoms import perturbation_suite

from oracles import brute_dice, brute_hausdorff
from shapes import disk

masks = hnp.arrays(np.bool_, (12, 12), elements=st.booleans())


class TestDice:
    def test_identical(self, rng):
        a = rng.random((8, 8)) < 0.5
        a[0, 0] = True
        assert dice(a, a) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0] = True
        b[1] = True
        assert dice(a, b) == 0.0

    def test_half(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0] = True
        b[0, :2] = True
        b[1, :2] = True
        assert dice(a, b) == 0.5

    def test_both_empty(self):
        assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=60, deadline=None)
    @given(masks, masks)
    def test_symmetric_bounded(self, a, b):
        d = dice(a, b)
        assert d == dice(b, a) and 0.0 <= d <= 1.0
        assert d == brute_dice(a, b)

    @settings(max_examples=60, deadline=None)
    @given(masks, masks, masks)
    def test_adding_shared_pixels(self, a, b, c):
        if (a | b).any():
            assert dice(a | c, b | c) >= dice(a, b) - 1e-12


class TestHausdorff:
    def test_identical(self, rng):
        a = rng.random((8, 8)) < 0.5
        a[3, 3] = True
        assert hausdorff(a, a) == 0.0

    def test_points(self):
        a = np.zeros((5, 8), bool)
        b = a.copy()
        a[2, 1] = True
        b[2, 4] = True
        assert hausdorff(a, b) == 3.0
        assert hausdorff(a, b, (2.0, 2.0)) == 6.0

    def test_anisotropic(self):
        a = np.zeros((8, 8), bool)
        b = a.copy()
        a[1, 1] = True
        b[5, 4] = True
        assert hausdorff(a, b, (0.5, 2.0)) == pytest.approx(math.hypot(1.5, 8.0))

    def test_empty(self):
        with pytest.raises(InputError):
            hausdorff(np.zeros((3, 3)), np.ones((3, 3)))

    @settings(max_examples=60, deadline=None)
    @given(masks, masks, st.sampled_from([(1.0, 1.0), (0.7, 1.9)]))
    def test_matches_brute_force(self, a, b, spacing):
        if a.any() and b.any():
            assert hausdorff(a, b, spacing) == brute_hausdorff(a, b, spacing)
            assert hausdorff(a, b, spacing) == hausdorff(b, a, spacing)

    def test_triangle_inequality(self):
        g = np.random.default_rng(3)
        for _ in range(100):
            a, b, c = (g.random((3, 10, 10)) < 0.3)
            a[0, 0] = b[5, 5] = c[9, 9] = True
            assert hausdorff(a, c) <= hausdorff(a, b) + hausdorff(b, c) + 1e-12


class TestRegions:
    def test_nine(self):
        assert [region_of(i, 9) for i in range(9)] == ["apex"] * 3 + ["middle"] * 3 + ["base"] * 3

    def test_one(self):
        assert region_of(0, 1) == "apex"

    def test_seven(self):
        r = [region_of(i, 7) for i in range(7)]
        assert (r.count("apex"), r.count("middle"), r.count("base")) == (3, 2, 2)

    @given(st.integers(1, 60))
    def test_partition(self, n):
        r = [region_of(i, n) for i in range(n)]
        order = {"apex": 0, "middle": 1, "base": 2}
        assert [order[x] for x in r] == sorted(order[x] for x in r)

    def test_out_of_range(self):
        with pytest.raises(InputError):
            region_of(3, 3)


class TestVolume:
    def test_single_slice(self):
        lab = np.zeros((20, 20), int)
        lab[:10, :10] = 2
        assert lv_volume(stack_from_arrays([np.zeros((20, 20))], [lab], slice_gap=10.0)) == 1000.0

    def test_empty(self):
        z = [np.zeros((5, 5), int)] * 3
        assert lv_volume(stack_from_arrays([np.zeros((5, 5))] * 3, z)) == 0.0

    def test_cylinder(self):
        lab = disk(64, 20).astype(int) * 2
        st_ = stack_from_arrays([np.zeros((64, 64))] * 10, [lab] * 10, spacing=(1.0, 1.0), slice_gap=8.0)
        assert abs(lv_volume(st_) - math.pi * 400 * 80) / (math.pi * 400 * 80) < 0.02

    def test_additive_and_linear(self, rng):
        labs = [rng.integers(0, 4, (6, 6)) for _ in range(4)]
        imgs = [np.zeros((6, 6))] * 4
        whole = lv_volume(stack_from_arrays(imgs, labs, spacing=(0.5, 2.0), slice_gap=3.0))
        parts = (lv_volume(stack_from_arrays(imgs[:2], labs[:2], spacing=(0.5, 2.0), slice_gap=3.0))
                 + lv_volume(stack_from_arrays(imgs[2:], labs[2:], spacing=(0.5, 2.0), slice_gap=3.0)))
        assert whole == pytest.approx(parts)
        double = lv_volume(stack_from_arrays(imgs, labs, spacing=(0.5, 2.0), slice_gap=6.0))
        assert double == pytest.approx(2 * whole)


class TestFwhm:
    def test_hand_case(self):
        img = np.array([[100.0, 60.0, 45.0, 20.0]])
        q = fwhm_scar(img, np.ones((1, 4), bool))
        assert (q.threshold_intensity, q.scar_pixel_count, q.gz_pixel_count) == (50.0, 2, 2)

    def test_uniform(self):
        q = fwhm_scar(np.full((3, 3), 7.0), np.ones((3, 3), bool))
        assert q.scar_pixel_count == 9

    def test_all_zero(self):
        q = fwhm_scar(np.zeros((2, 2)), np.ones((2, 2), bool))
        assert q.scar_pixel_count == 4 and q.threshold_intensity == 0 and q.degenerate

    def test_empty_fibrosis(self):
        q = fwhm_scar(np.ones((2, 2)), np.zeros((2, 2), bool))
        assert (q.scar_pixel_count, q.gz_pixel_count) == (0, 0)

    def test_area_uses_spacing(self):
        q = fwhm_scar(np.array([[10.0, 9.0]]), np.ones((1, 2), bool), (0.5, 3.0))
        assert q.scar_area_mm2 == 3.0

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (6, 6), elements=st.floats(0, 500)), masks.map(lambda m: m[:6, :6]))
    def test_counts_partition(self, img, fib):
        q = fwhm_scar(img, fib)
        assert q.scar_pixel_count + q.gz_pixel_count == fib.sum()


class TestRelativeMse:
    def test_equal(self):
        assert relative_mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand(self):
        assert relative_mse([2.0], [1.0]) == 1.0

    def test_scale_invariant(self, rng):
        p, g = rng.random(5), rng.random(5) + 0.1
        assert relative_mse(3 * p, 3 * g) == pytest.approx(relative_mse(p, g))

    def test_zero_reference(self):
        with pytest.raises(InputError):
            relative_mse([1.0], [0.0])


class TestEvaluateStack:
    def _stack(self, masks):
        labels = [m.astype(int) * 2 for m in masks]
        return stack_from_arrays([np.zeros(m.shape) for m in masks], labels, slice_gap=5.0)

    def test_self_agreement(self):
        clean, _, _ = perturbation_suite(9, 32, seed=1)
        s = self._stack(clean)
        rep = evaluate_stack(s, s)
        assert all(r["dice_lv"] == 1.0 and r["dice_myo"] == 1.0 and r["hausdorff_mm"] == 0.0 for r in rep["slices"])
        assert rep["volume_rel_error"] == 0.0

    def test_dice_matches_recomputation(self):
        clean, broken, _ = perturbation_suite(30, 32, seed=2)
        rep = evaluate_stack(self._stack(broken), self._stack(clean))
        for row, a, b in zip(rep["slices"], broken, clean):
            assert abs(row["dice_myo"] - brute_dice(a, b)) <= 1e-12

    def test_kept_range(self):
        clean, broken, _ = perturbation_suite(9, 32, seed=3)
        rep = evaluate_stack(self._stack(broken), self._stack(clean), kept=6)
        assert len(rep["slices"]) == 6
        apex = [r["dice_myo"] for r in rep["slices"] if r["region"] == "apex"]
        assert rep["regions"]["apex"]["dice_myo_mean"] == pytest.approx(np.mean(apex))
        assert sum(r["count"] for r in rep["regions"].values()) == 6

    def test_misaligned(self):
        clean, _, _ = perturbation_suite(3, 32, seed=4)
        with pytest.raises(InputError):
            evaluate_stack(self._stack(clean), self._stack(clean[:2]))
