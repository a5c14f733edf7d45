"""Tests for PSNR/SSIM, the Gaussian-blur baseline, and the noise report."""

import math

import numpy as np
import pytest

from bldn.data import Image2D, dihedral_apply, generate_phantom, synth_noise
from bldn.metrics import (
    BaselineResult,
    gaussian_baseline,
    noise_report,
    psnr,
    ssim,
)


def _image(values):
    return Image2D(np.asarray(values, dtype=np.float32))


def _pair(seed, shape=(64, 64), noise=10.0):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 200, size=shape).astype(np.float32)
    pred = gt + rng.normal(scale=noise, size=shape).astype(np.float32)
    return _image(pred), _image(gt)


class TestPsnr:
    def test_identical_images_positive_infinity(self):
        img, _ = _pair(0)
        assert psnr(img, img) == float("inf")

    def test_hand_computed_value(self):
        # gt range 100, MSE exactly 1 -> 10*log10(100^2/1) = 40 dB
        gt = np.zeros((16, 16), dtype=np.float32)
        gt[0, 0] = 100.0
        pred = gt + 1.0
        assert psnr(_image(pred), _image(gt)) == pytest.approx(40.0, abs=1e-9)

    def test_scales_with_range_not_values(self):
        # adding a constant to both leaves range and MSE unchanged
        # (integer-valued images keep the float32 shift exact)
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 200, size=(64, 64)).astype(np.float32)
        pred = gt + rng.integers(-20, 21, size=(64, 64)).astype(np.float32)
        before = psnr(_image(pred), _image(gt))
        after = psnr(_image(pred + 500.0), _image(gt + 500.0))
        assert after == pytest.approx(before, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(_image(np.zeros((16, 16))), _image(np.zeros((16, 8))))

    def test_dihedral_invariance(self):
        pred, gt = _pair(2)
        base = psnr(pred, gt)
        for idx in range(8):
            v = psnr(_image(dihedral_apply(pred.values, idx)),
                     _image(dihedral_apply(gt.values, idx)))
            assert v == pytest.approx(base, abs=1e-9)

    def test_zero_range_gt_negative_infinity(self):
        gt = _image(np.full((16, 16), 5.0))
        pred = _image(np.full((16, 16), 6.0))
        assert psnr(pred, gt) == float("-inf")


class TestSsim:
    def test_identical_images_equal_one(self):
        img, _ = _pair(3)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_noise_level(self):
        rng = np.random.default_rng(4)
        gt = rng.uniform(0, 200, size=(64, 64)).astype(np.float32)
        mild = gt + rng.normal(scale=5, size=gt.shape).astype(np.float32)
        harsh = gt + rng.normal(scale=60, size=gt.shape).astype(np.float32)
        assert ssim(_image(harsh), _image(gt)) < ssim(_image(mild), _image(gt))

    def test_matches_reference_implementation(self):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        for seed in range(5):
            pred, gt = _pair(10 + seed, shape=(48, 56))
            data_range = float(gt.values.max() - gt.values.min())
            reference = skimage_metrics.structural_similarity(
                gt.values.astype(np.float64), pred.values.astype(np.float64),
                win_size=11, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=data_range)
            assert ssim(pred, gt) == pytest.approx(reference, abs=1e-4)

    def test_dihedral_invariance(self):
        pred, gt = _pair(5)
        base = ssim(pred, gt)
        for idx in range(8):
            v = ssim(_image(dihedral_apply(pred.values, idx)),
                     _image(dihedral_apply(gt.values, idx)))
            assert v == pytest.approx(base, abs=1e-6)

    def test_value_range(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(0, 100, size=(32, 32)).astype(np.float32)
        anti = (100.0 - gt).astype(np.float32)  # anticorrelated
        v = ssim(_image(anti), _image(gt))
        assert -1.0 <= v < 1.0

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(_image(np.zeros((8, 8))), _image(np.zeros((8, 8))))


class TestGaussianBaseline:
    def test_zero_noise_prefers_smallest_sigma(self):
        rng = np.random.default_rng(7)
        images = [_image(rng.uniform(0, 200, size=(48, 48)))
                  for _ in range(3)]
        result = gaussian_baseline(images, images)
        assert result.sigma == pytest.approx(0.3)

    def test_improves_noisy_phantoms(self):
        rng = np.random.default_rng(8)
        gt = [generate_phantom(96, 96, rng) for _ in range(4)]
        noisy = [synth_noise(im, "gaussian", rng, sigma=40.0) for im in gt]
        result = gaussian_baseline(noisy, gt)
        raw = float(np.mean([psnr(n, g) for n, g in zip(noisy, gt)]))
        assert result.psnr > raw
        assert 0.3 < result.sigma <= 5.0

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        gt = [generate_phantom(64, 64, rng) for _ in range(2)]
        noisy = [synth_noise(im, "gaussian", rng, sigma=30.0) for im in gt]
        a = gaussian_baseline(noisy, gt)
        b = gaussian_baseline(noisy, gt)
        assert (a.sigma, a.psnr, a.ssim) == (b.sigma, b.psnr, b.ssim)

    def test_empty_sets_rejected(self):
        with pytest.raises(ValueError):
            gaussian_baseline([], [])

    def test_result_is_named_tuple_like(self):
        assert BaselineResult(0.3, 20.0, 0.5).sigma == 0.3


def _flat_field_sets(seed, sigma=20.0, count=6, size=256):
    """Images whose gt values sweep a range, with known Gaussian noise."""
    rng = np.random.default_rng(seed)
    gt, noisy = [], []
    for _ in range(count):
        base = rng.uniform(50, 950, size=(size, size)).astype(np.float32)
        gt.append(_image(base))
        noisy.append(_image(base + rng.normal(scale=sigma, size=base.shape)
                            .astype(np.float32)))
    return noisy, gt


class TestNoiseReport:
    def test_gaussian_noise_recovered_per_bin(self):
        noisy, gt = _flat_field_sets(10, sigma=20.0)
        report = noise_report(noisy, gt, bins=32)
        confident = report.confident_rows()
        assert len(confident) >= 20
        for row in confident:
            se = 20.0 / math.sqrt(2 * row.count)
            assert abs(row.emp_std - 20.0) < 4 * se + 0.05, row.index

    def test_poisson_gaussian_curve_recovered(self):
        rng = np.random.default_rng(11)
        gt, noisy = [], []
        for _ in range(6):
            base = rng.uniform(100, 1000, size=(256, 256)).astype(np.float32)
            gt.append(_image(base))
            noisy.append(synth_noise(_image(base), "poisson_gaussian", rng,
                                     dataset_min=100.0, alpha=5.0, eta=12.0))
        report = noise_report(noisy, gt, bins=32)
        for row in report.confident_rows():
            expected = math.sqrt(5.0 * max(row.x_median - 100.0, 0.0) + 144.0)
            assert row.emp_std == pytest.approx(expected, rel=0.1), row.index

    def test_symmetric_noise_has_zero_skewness(self):
        noisy, gt = _flat_field_sets(12, sigma=15.0)
        report = noise_report(noisy, gt, bins=32)
        for row in report.confident_rows():
            se = math.sqrt(6.0 / row.count)
            assert abs(row.emp_skew) < 5 * se, row.index

    def test_bins_cover_min_to_cutoff(self):
        noisy, gt = _flat_field_sets(13, count=2, size=128)
        report = noise_report(noisy, gt, bins=16)
        pooled = np.concatenate([g.values.ravel() for g in gt])
        assert report.edges[0] == pytest.approx(float(pooled.min()))
        assert report.cutoff == pytest.approx(float(np.percentile(pooled, 99.5)),
                                              rel=1e-6)
        assert report.percentile == 99.5
        included = pooled[pooled <= report.cutoff]
        assert sum(r.count for r in report.rows) == included.size

    def test_low_count_bins_flagged(self):
        rng = np.random.default_rng(14)
        # nearly all mass at 100, a thin tail up to 1000: upper bins starve
        base = np.full((128, 128), 100.0, dtype=np.float32)
        tail = rng.random(base.shape) < 0.01
        base[tail] = rng.uniform(100, 1000, size=int(tail.sum()))
        gt = [_image(base)]
        noisy = [_image(base + rng.normal(scale=10, size=base.shape)
                        .astype(np.float32))]
        report = noise_report(noisy, gt, bins=32)
        flags = [r.confident for r in report.rows]
        assert flags[0]              # the 100-valued bin is huge
        assert not all(flags)        # starved bins exist and are flagged
        for row in report.rows:
            assert row.confident == (row.count >= 100)

    def test_tsv_round_trip(self, tmp_path):
        noisy, gt = _flat_field_sets(15, count=2, size=128)
        report = noise_report(noisy, gt, bins=16)
        path = tmp_path / "report.tsv"
        report.to_tsv(path)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split("\t")
        assert header[:6] == ["bin", "lo", "hi", "x_median", "count",
                              "confident"]
        assert len(lines) - 1 == len(report.rows)
        first = dict(zip(header, lines[1].split("\t")))
        assert int(first["bin"]) == 0
        assert int(first["count"]) == report.rows[0].count

    def test_report_with_bundle_attaches_predictions(self, toy_trained_bundle):
        bundle = toy_trained_bundle["bundle"]
        rng = np.random.default_rng(16)
        levels = [80.0, 95.0, 105.0, 120.0]
        gt = [_image(np.full((64, 64), lv)) for lv in levels]
        noisy = [_image(lv + rng.normal(scale=20.0, size=(64, 64))
                        .astype(np.float32)) for lv in levels]
        report = noise_report(noisy, gt, bundles=bundle, bins=8)
        assert report.variants == ("model",)
        confident = report.confident_rows()
        assert confident
        for row in confident:
            assert row.pred_std["model"] > 0
            assert row.kl["model"] >= 0
        assert np.isfinite(report.median_kl("model"))

    def test_pixel_order_invariance(self):
        noisy, gt = _flat_field_sets(17, count=1, size=128)
        report_a = noise_report(noisy, gt, bins=16)
        perm = np.random.default_rng(18).permutation(128 * 128)
        shuffled_gt = [_image(gt[0].values.ravel()[perm].reshape(128, 128))]
        shuffled_noisy = [_image(noisy[0].values.ravel()[perm].reshape(128, 128))]
        report_b = noise_report(shuffled_noisy, shuffled_gt, bins=16)
        for ra, rb in zip(report_a.rows, report_b.rows):
            assert ra.count == rb.count
            assert ra.emp_std == pytest.approx(rb.emp_std, rel=1e-6, abs=1e-9)

    def test_mismatched_set_sizes_rejected(self):
        noisy, gt = _flat_field_sets(19, count=2, size=128)
        with pytest.raises(ValueError):
            noise_report(noisy, gt[:1])
