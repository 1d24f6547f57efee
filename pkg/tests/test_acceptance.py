"""One test per acceptance criterion, each printing a PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest

from anatseg import autoencoder as ae
from anatseg import latent
from anatseg.anatomy import is_valid
from anatseg.clinical import dice, fwhm_scar, hausdorff, lv_volume, relative_mse
from anatseg.cli import main
from anatseg.core import BLOOD_POOL, FIBROSIS, MYOCARDIUM, IntensitySlice, SegMask, stack_from_arrays
from anatseg.losses import balanced_bce, soft_dice, tversky
from anatseg.phantoms import perturbation_suite, phantom_labels
from anatseg.preprocess import NormalizationContext, normalize_by_bloodpool_median
from anatseg.synth import speckle_noise
from anatseg.volumetric import final_index, select_slices

from acceptlog import record
from gradcheck import finite_difference_check, generic_model
from oracles import brute_dice, brute_hausdorff
from shapes import annulus, disk

pytestmark = pytest.mark.slow


def _stack(labels):
    return stack_from_arrays([np.zeros(l.shape) for l in labels], labels)


@pytest.fixture(scope="module")
def repaired(trained_ae, latent_bank):
    model, _ = trained_ae
    _, bank = latent_bank
    clean, broken, kinds = perturbation_suite(500, 64, seed=123)
    t0 = time.perf_counter()
    out = [latent.repair_mask(b, model, bank)[0] for b in broken]
    elapsed = time.perf_counter() - t0
    return clean, broken, out, elapsed


class TestRepair:
    def test_guarantee_and_fidelity(self, repaired):
        clean, _, out, elapsed = repaired
        valid = np.mean([is_valid(r) for r in out])
        good = np.mean([dice(r, c) >= 0.85 for r, c in zip(out, clean)])
        ok = valid == 1.0 and good >= 0.90 and elapsed < 300
        record("repair: 100% valid, >=90% Dice>=0.85, <5 min", ok,
               f"valid {valid:.1%}, Dice>=0.85 {good:.1%}, {elapsed:.1f} s")
        assert ok

    def test_idempotent(self, repaired, trained_ae, latent_bank):
        _, _, out, _ = repaired
        again = [latent.repair_mask(r, trained_ae[0], latent_bank[1])[0] for r in out]
        same = sum(np.array_equal(a, r) for a, r in zip(again, out))
        ok = same == len(out)
        record("repair idempotence", ok, f"{same}/{len(out)} bit-identical")
        assert ok


class TestAutoencoder:
    def test_heldout_dice(self, trained_ae, phantom_masks):
        model, _ = trained_ae
        _, held = phantom_masks
        rec = ae.decode(model, ae.encode(model, held))[1]
        mean = float(np.mean([dice(r, h) for r, h in zip(rec, held)]))
        ok = mean >= 0.95
        record("autoencoder held-out Dice >= 0.95", ok, f"mean {mean:.4f} on {len(held)} masks")
        assert ok

    def test_gradient_check(self):
        g = np.random.default_rng(2024)
        model = generic_model(seed=7)
        x = (g.random((3, 16, 16)) < 0.4).astype(float)
        rows = finite_difference_check(model, x, g, n=10, h=1e-3)
        worst = max(r[2] for r in rows)
        kinds = sorted({r[1] for r in rows})
        ok = worst < 1e-4 and kinds == ["conv", "dense", "tconv"]
        record("autoencoder gradient check < 1e-4", ok, f"max rel err {worst:.2e} over {kinds}")
        assert ok

    def test_overfit_one_sample(self):
        m = annulus(64, 10, 16)
        model, hist = ae.train_autoencoder(m[None], ae.TrainConfig(epochs=200, batch_size=1, learning_rate=5e-3))
        d = dice(ae.reconstruct(model, m), m)
        ok = d == 1.0 and hist[-1] < 0.05
        record("autoencoder overfits one sample", ok, f"Dice {d}, final loss {hist[-1]:.2e}")
        assert ok


class TestGmm:
    def test_nll_monotone(self):
        worst = -np.inf
        for s in range(100):
            g = np.random.default_rng(s)
            d = int(g.integers(1, 6))
            k = int(g.integers(1, 6))
            x = g.normal(size=(int(g.integers(30, 150)), d)) * g.uniform(0.2, 3.0, d)
            x += g.normal(0, 4, (k, d))[g.integers(0, k, len(x))]
            hist = latent.fit_gmm_em(x, k, seed=s, tol=0.0, max_iter=100).history
            worst = max(worst, max(np.diff(hist), default=-np.inf))
        ok = worst <= 1e-9
        record("EM NLL non-increasing within 1e-9", ok, f"largest step increase {worst:.2e} over 100 datasets")
        assert ok

    def test_single_component_mle(self):
        g = np.random.default_rng(11)
        x = g.normal(size=(500, 4)) @ g.normal(size=(4, 4)) + g.normal(size=4)
        fit = latent.fit_gmm_em(x, 1)
        mu = x.mean(axis=0)
        cov = (x - mu).T @ (x - mu) / len(x)
        err = max(np.abs(fit.model.means[0] - mu).max(), np.abs(fit.model.covariances[0] - cov).max())
        ok = err < 1e-10
        record("k=1 EM equals closed-form MLE", ok, f"max abs err {err:.1e}")
        assert ok

    def test_selects_three(self):
        # three unit-variance components, pairwise at least 11 standard deviations apart
        centres = np.array([[0, 0, 0, 0], [8, 8, 8, 8], [-8, 8, -8, 8]], float)
        hits = 0
        for trial in range(10):
            g = np.random.default_rng(200 + trial)
            x = np.concatenate([g.normal(c, 1.0, (150, 4)) for c in centres])
            hits += latent.select_model(x, range(1, 9), folds=10, seed=trial).chosen_k == 3
        ok = hits >= 9
        record("model selection picks k=3", ok, f"{hits}/10 trials")
        assert ok


class TestEffectiveRank:
    def test_exact_values_and_bounds(self):
        a = latent.effective_rank(np.eye(16))
        b = latent.effective_rank(np.diag([4.0, 1.0, 1.0]))
        g = np.random.default_rng(5)
        out_of_bounds = 0
        for _ in range(10_000):
            d = int(g.integers(1, 17))
            m = g.normal(size=(d, d))
            r = latent.effective_rank(m @ m.T + 1e-6 * np.eye(d))
            out_of_bounds += not (1.0 <= r <= d)
        ok = a == 16.0 and b == 1.5 and out_of_bounds == 0
        record("effective_rank exact cases and [1, d] bounds", ok,
               f"I16 -> {a}, diag(4,1,1) -> {b}, {out_of_bounds}/10000 out of bounds")
        assert ok


class TestMetrics:
    def test_oracle_equivalence(self):
        g = np.random.default_rng(9)
        bad_dice = bad_hd = 0
        for _ in range(1000):
            h, w = (int(v) for v in g.integers(1, 33, 2))
            a, b = g.random((2, h, w)) < g.uniform(0.05, 0.95)
            a.flat[g.integers(a.size)] = True
            b.flat[g.integers(b.size)] = True
            bad_dice += dice(a, b) != brute_dice(a, b)
            bad_hd += hausdorff(a, b) != brute_hausdorff(a, b)
        ok = bad_dice == 0 and bad_hd == 0
        record("Dice and Hausdorff equal brute force", ok, f"{bad_dice} Dice and {bad_hd} HD mismatches / 1000")
        assert ok

    def test_hand_loss_values(self):
        b = balanced_bce([1.0], [0.5], 0.5)
        p = np.array([1, 1, 1, 1, 0, 0], float)
        q = np.array([1, 1, 0, 0, 1, 1], float)
        t = tversky(p, q, 0.5)
        ok = abs(b - 0.5 * math.log(2)) < 1e-9 and abs(b - 0.3466) < 1e-4 and abs(t - 1 / 3) < 1e-9
        record("hand loss values 0.3466 and 1/3", ok, f"bce {b:.12f}, tversky {t:.12f}")
        assert ok


class TestFwhm:
    @staticmethod
    def _planted(seed):
        g = np.random.default_rng(seed)
        labels = phantom_labels(g, 64, scar=True)
        img = np.select([labels == FIBROSIS, labels == MYOCARDIUM, labels == BLOOD_POOL], [210.0, 60.0, 200.0], 30.0)
        return img, labels

    def test_noiseless_exact(self):
        img, labels = self._planted(0)
        q = fwhm_scar(img, SegMask(labels).myocardium)
        true = int((labels == FIBROSIS).sum())
        err = relative_mse([q.scar_pixel_count], [true])
        ok = err == 0.0
        record("FWHM noiseless exact count", ok, f"{q.scar_pixel_count} of {true}, relative MSE {err}")
        assert ok

    def test_speckle(self):
        worst = 0.0
        for s in range(100):
            img, labels = self._planted(s)
            noisy = speckle_noise(img, 0.05, 1000 + s)
            q = fwhm_scar(noisy, SegMask(labels).myocardium)
            true = int((labels == FIBROSIS).sum())
            worst = max(worst, abs(q.scar_pixel_count - true) / true)
        ok = worst < 0.05
        record("FWHM under speckle sigma=0.05", ok, f"worst relative error {worst:.3%} over 100 seeds")
        assert ok


class TestVolume:
    def test_cylinder(self):
        lab = disk(64, 20).astype(np.uint8) * MYOCARDIUM
        stack = stack_from_arrays([np.zeros((64, 64))] * 10, [lab] * 10, spacing=(1.0, 1.0), slice_gap=8.0)
        v = lv_volume(stack)
        exact = math.pi * 20 ** 2 * 80
        err = abs(v - exact) / exact
        ok = err < 0.02
        record("cylinder LV volume within 2%", ok, f"{v:.0f} vs {exact:.0f} mm3, {err:.3%}")
        assert ok


class TestSliceSelection:
    def test_worked_examples(self):
        a = final_index(4, 5, 8, 10)
        b = final_index(7, 2, 3, 10)
        mono = select_slices(_stack([annulus(48, r - 5, r) * MYOCARDIUM for r in (10, 12, 14, 16, 18)]))
        ok = a == 6 and b == 7 and mono.index == 4 and mono.i_d is None and mono.i_c is None
        record("slice-selection worked examples", ok, f"{a}, {b}, monotone keeps {mono.index + 1}/5")
        assert ok

    def test_at_most_one_c_slice(self):
        g = np.random.default_rng(31)
        worst = 0
        multi_c = 0
        for _ in range(1000):
            n = int(g.integers(1, 11))
            labs = [phantom_labels(g, 32, c_gap=bool(g.random() < 0.3)) for _ in range(n)]
            sel = select_slices(_stack(labs))
            multi_c += len(sel.c_indices) >= 2
            worst = max(worst, sum(1 for i in sel.c_indices if i <= sel.index))
        ok = worst <= 1
        record("retained prefix has <= 1 C slice", ok,
               f"max {worst} over 1000 stacks, {multi_c} stacks had >= 2 C slices")
        assert ok


class TestFormulas:
    def test_normalization_example(self):
        sl = IntensitySlice(np.array([[0.0, 50.0, 100.0]]))
        vol = stack_from_arrays([sl.data])
        ctx = NormalizationContext(np.ones((1, 3), bool), 50.0)
        out = normalize_by_bloodpool_median(vol, ctx).images[0].data.ravel().tolist()
        ok = out == [0.0, 127.5, 255.0]
        record("blood-pool normalization {0,50,100}, m=50", ok, f"-> {out}")
        assert ok

    @pytest.mark.xfail(strict=True, reason="at beta=1/2 the Tversky loss is (1-D)/(1+D), not 1-D")
    def test_tversky_half_is_one_minus_dice(self):
        g = np.random.default_rng(77)
        worst = 0.0
        for _ in range(200):
            n = int(g.integers(1, 50))
            p = (g.random(n) < 0.5).astype(float)
            q = g.random(n)
            worst = max(worst, abs(tversky(p, q, 0.5) - (1.0 - soft_dice(p, q))))
        ok = worst <= 1e-12
        record("Tversky(beta=0.5) == 1 - soft Dice", ok,
               f"max deviation {worst:.3f}; the identity is T = (1-D)/(1+D), see ledger")
        assert ok


class TestDeterminism:
    def test_pipeline_bytes(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 11, "data": {"n": 64}, "autoencoder": {"epochs": 100,
                                   "learning_rate": 0.003}, "gmm": {"k_range": [1, 3], "folds": 3},
                                   "bank": {"n": 100}}))
        trees = []
        for name in ("a", "b"):
            assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
            root = tmp_path / name
            trees.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
        a, b = trees
        diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
        ok = not diff
        record("seeded pipeline runs are byte-identical", ok, f"{len(a)} files, {len(diff)} differ")
        assert ok
