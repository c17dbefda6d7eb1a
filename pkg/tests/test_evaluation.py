import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from oracles import flatness_trial, mae_oracle, psnr_oracle, ssim_oracle, sweep_oracle
from srunc import ConfigError, ShapeError
from srunc.evaluation import (
    CalibrationCurve,
    MetricReport,
    binned_calibration,
    evaluate_set,
    gaussian_window,
    mae,
    mae_map,
    psnr,
    reports_from_csv,
    reports_to_csv,
    ssim,
    threshold_sweep,
    to_luminance,
)
from srunc.imaging import TrainingPair, bicubic_resize
from srunc.uncertainty import SampleStack

images = arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1))


class TestPsnr:
    def test_identity_sentinel(self, rng):
        a = rng.uniform(size=(8, 8, 3))
        assert psnr(a, a) == math.inf

    def test_constant_offset(self, rng):
        a = rng.uniform(0, 0.9, size=(16, 16, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
        # exact binary fractions: offset 1/8 gives 10 log10(64)
        assert psnr(np.full((4, 4, 1), 0.25), np.full((4, 4, 1), 0.375)) == 10 * math.log10(64)

    def test_oracle(self, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-9)
        assert psnr(a, b, data_range=2.0) == pytest.approx(psnr_oracle(a, b, 2.0), abs=1e-9)

    def test_luminance(self, rng):
        a, b = rng.uniform(size=(2, 8, 8, 3))
        ya = a @ np.array([0.299, 0.587, 0.114])
        yb = b @ np.array([0.299, 0.587, 0.114])
        assert psnr(a, b, luminance=True) == pytest.approx(psnr_oracle(ya, yb), abs=1e-9)
        assert to_luminance(a[:, :, :1]).shape == (8, 8, 1)

    def test_errors(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
        with pytest.raises(ConfigError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), data_range=0)


class TestSsim:
    def test_identity_exact(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert ssim(a, a) == 1.0

    def test_constant_images(self):
        c1 = 1e-4
        got = ssim(np.zeros((11, 11, 1)), np.ones((11, 11, 1)))
        assert got == pytest.approx(c1 / (1 + c1), rel=1e-9)
        assert got == pytest.approx(9.999e-5, abs=1e-8)

    def test_small_window_oracle(self, rng):
        a, b = rng.uniform(size=(2, 5, 5, 1))
        assert ssim(a, b, window=3) == pytest.approx(ssim_oracle(a, b, window=3), abs=1e-6)

    def test_oracle_16(self, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)

    def test_matches_skimage(self, rng):
        a = rng.uniform(size=(32, 32, 3))
        b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
        ref = structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
                                    sigma=1.5, use_sample_covariance=False)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_window_taps(self):
        g = gaussian_window()
        assert g.size == 11 and g.sum() == pytest.approx(1.0)
        assert g[5] == g.max() and g[0] == g[-1]

    def test_too_small(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestMae:
    def test_constants(self):
        m = mae_map(np.full((3, 3, 1), 0.2), np.full((3, 3, 1), 0.5))
        np.testing.assert_allclose(m, 0.3, atol=1e-15)
        assert mae(np.full((3, 3, 1), 0.2), np.full((3, 3, 1), 0.5)) == pytest.approx(0.3)

    def test_oracle(self, rng):
        a, b = rng.uniform(size=(2, 9, 7, 3))
        assert mae(a, b) == pytest.approx(mae_oracle(a, b), abs=1e-9)
        assert np.all(mae_map(a, a) == 0)


class TestSymmetry:
    @settings(max_examples=25, deadline=None)
    @given(images, images)
    def test_metrics_symmetric(self, a, b):
        assert psnr(a, b) == psnr(b, a)
        assert ssim(a, b, window=5) == pytest.approx(ssim(b, a, window=5), abs=1e-12)
        assert mae(a, b) == mae(b, a)

    @settings(max_examples=25, deadline=None)
    @given(images, images)
    def test_ranges(self, a, b):
        assert -1 - 1e-9 <= ssim(a, b, window=5) <= 1 + 1e-9
        assert mae(a, b) >= 0


class TestBinned:
    def test_hand_example(self):
        curve = binned_calibration([(0.1, 0.1), (0.2, 0.2), (0.3, 0.3), (0.4, 0.4)], 2)
        assert curve.kind == "binned_images"
        assert len(curve.points) == 2
        for got, want in zip(curve.points, [(0.175, 0.15, 2), (0.325, 0.35, 2)]):
            assert got[0] == pytest.approx(want[0], abs=1e-12)
            assert got[1] == pytest.approx(want[1], abs=1e-12)
            assert got[2] == want[2]

    def test_equal_sigmas(self):
        curve = binned_calibration([(0.2, 0.1), (0.2, 0.3), (0.2, 0.5)], 3)
        assert curve.points == [(0.2, pytest.approx(0.3), 3)]

    def test_order_invariant(self, rng):
        recs = [tuple(x) for x in rng.uniform(size=(30, 2))]
        a = binned_calibration(recs, 5)
        b = binned_calibration(recs[::-1], 5)
        assert a.points == b.points

    def test_empty_bins_dropped(self):
        curve = binned_calibration([(0.0, 1.0), (0.01, 1.0), (1.0, 2.0)], 3)
        assert curve.counts.tolist() == [2, 1]
        assert curve.counts.sum() == 3

    def test_too_few(self):
        with pytest.raises(ConfigError):
            binned_calibration([(0.1, 0.1)], 2)

    def test_levels_strictly_increasing(self):
        with pytest.raises(ConfigError):
            CalibrationCurve([(0.2, 1.0, 1), (0.2, 1.0, 1)], "binned_images")

    def test_csv_round_trip(self, rng):
        curve = binned_calibration([tuple(x) for x in rng.uniform(size=(20, 2))], 4)
        text = curve.to_csv()
        assert text.splitlines()[0] == "level,mean_error,count"
        assert CalibrationCurve.from_csv(text, curve.kind).points == curve.points


class TestSweep:
    def test_uniform_sigma(self, rng):
        err = rng.uniform(size=(6, 6, 3))
        curve = threshold_sweep(np.full((6, 6, 3), 0.4), err, 50)
        assert len(curve.points) == 1
        level, e, n = curve.points[0]
        assert level == 0.4 and e == pytest.approx(err.mean()) and n == 108

    def test_matches_oracle(self, rng):
        sigma, err = rng.uniform(size=(2, 10, 10, 1))
        curve = threshold_sweep(sigma, err, 20)
        ref = sweep_oracle(sigma, err, np.linspace(sigma.min(), sigma.max(), 20))
        assert len(curve.points) == len(ref)
        for got, want in zip(curve.points, ref):
            assert got[0] == pytest.approx(want[0])
            assert got[1] == pytest.approx(want[1], abs=1e-12)
            assert got[2] == want[2]

    def test_perfect_correlation_monotone(self, rng):
        err = rng.uniform(size=(16, 16, 1))
        curve = threshold_sweep(err, err, 50)
        assert np.all(np.diff(curve.errors) >= 0)
        assert curve.counts[0] == 256 and np.all(np.diff(curve.counts) <= 0)

    def test_independent_flat(self):
        spread, bound = flatness_trial(threshold_sweep)
        assert spread < bound

    def test_accepts_uncertainty_map(self, rng):
        from srunc.uncertainty import UncertaintyMap

        s = rng.uniform(size=(4, 4, 1))
        assert threshold_sweep(UncertaintyMap(s, "sample_std"), s, 5).points == threshold_sweep(s, s, 5).points

    def test_errors(self):
        with pytest.raises(ShapeError):
            threshold_sweep(np.zeros((4, 4, 1)), np.zeros((4, 5, 1)))
        with pytest.raises(ConfigError):
            threshold_sweep(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), 1)


def _identity_sampler(scale=4):
    def sample(lr):
        return SampleStack(bicubic_resize(lr, lr.shape[0] * scale, lr.shape[1] * scale)[None], "stub")
    return sample


class TestEvaluateSet:
    def test_oracle_stub(self):
        # flat images survive the bicubic round trip exactly
        pairs = [TrainingPair(np.full((4, 4, 3), v), np.full((16, 16, 3), v), f"c{i}")
                 for i, v in enumerate([0.25, 0.5, 0.75])]
        res = evaluate_set(_identity_sampler(), pairs)
        assert all(r.psnr_db == math.inf and r.ssim == 1.0 and r.mae == 0 for r in res.reports)
        assert [r.image_id for r in res.reports] == ["c0", "c1", "c2"]

    def test_summary_is_mean(self, synthetic_pairs):
        res = evaluate_set(_identity_sampler(), synthetic_pairs[:4], n_bins=2)
        by_hand = np.mean([r.psnr_db for r in res.reports])
        assert res.summary["psnr_db"] == pytest.approx(by_hand, abs=1e-9)
        assert res.summary["mae"] == pytest.approx(np.mean([r.mae for r in res.reports]), abs=1e-9)
        assert set(res.sweeps) == {p.source_id for p in synthetic_pairs[:4]}

    def test_empty(self):
        with pytest.raises(ConfigError):
            evaluate_set(_identity_sampler(), [])

    def test_reports_csv(self):
        reps = [MetricReport("a", math.inf, 1.0, 0.0, 0.0), MetricReport("b", 23.5, 0.81, 0.04, 0.01)]
        text = reports_to_csv(reps)
        assert "inf" in text.splitlines()[1]
        assert reports_from_csv(text) == reps

    def test_negative_mae_rejected(self):
        with pytest.raises(ConfigError):
            MetricReport("x", 1.0, 1.0, -0.1)
