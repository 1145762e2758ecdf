"""Metric tests; SSIM is checked against an independently coded
direct-convolution reference, PSNR/ATE against naive loop oracles."""

import numpy as np
import pytest

from evfields.metrics import ate_rmse, mse_psnr, ssim


def _ssim_reference(a, b):
    """Direct double-loop SSIM: explicit 11x11 Gaussian windows."""
    half = 5
    x = np.arange(11) - 5.0
    g1 = np.exp(-(x * x) / (2 * 1.5 * 1.5))
    g1 /= g1.sum()
    g2 = np.outer(g1, g1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = a.shape
    vals = []
    for i in range(half, h - half):
        for j in range(half, w - half):
            wa = a[i - half:i + half + 1, j - half:j + half + 1]
            wb = b[i - half:i + half + 1, j - half:j + half + 1]
            mu_a = (g2 * wa).sum()
            mu_b = (g2 * wb).sum()
            va = (g2 * wa * wa).sum() - mu_a ** 2
            vb = (g2 * wb * wb).sum() - mu_b ** 2
            cov = (g2 * wa * wb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestMsePsnr:
    def test_identical_images_cap(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        mse, psnr = mse_psnr(img, img)
        assert mse == 0.0 and psnr == 99.0

    def test_uniform_difference_closed_form(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)
        mse, psnr = mse_psnr(a, b)
        assert mse == pytest.approx(0.01, abs=1e-15)
        assert psnr == pytest.approx(20.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 5, 3))
        b = rng.random((6, 5, 3))
        mse, _ = mse_psnr(a, b)
        acc = 0.0
        for i in range(6):
            for j in range(5):
                for c in range(3):
                    acc += (a[i, j, c] - b[i, j, c]) ** 2
        assert mse == pytest.approx(acc / 90, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mse_psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))

    def test_psnr_decreasing_in_mse(self):
        rng = np.random.default_rng(2)
        base = rng.random((8, 8, 3)) * 0.5 + 0.25
        psnrs = []
        for eps in (0.01, 0.02, 0.05, 0.1):
            _, p = mse_psnr(base, np.clip(base + eps, 0, 1))
            psnrs.append(p)
        assert np.all(np.diff(psnrs) < 0)


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(3).random((16, 16))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_for_anticorrelated_pattern(self):
        ys, xs = np.mgrid[0:32, 0:32]
        a = 0.5 + 0.4 * np.sin(xs * 0.8) * np.cos(ys * 0.6)
        b = 1.0 - a  # same mean, inverted structure
        assert ssim(a, b) < 0

    def test_matches_direct_convolution_reference(self):
        rng = np.random.default_rng(4)
        a = rng.random((64, 64))
        b = np.clip(a + rng.normal(0, 0.1, (64, 64)), 0, 1)
        assert ssim(a, b) == pytest.approx(_ssim_reference(a, b), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.random((20, 20))
        b = rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_color_inputs_use_luminance(self):
        rng = np.random.default_rng(6)
        a = rng.random((16, 16, 3))
        from evfields.events import luminance
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)
        b = rng.random((16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(luminance(a), luminance(b)), abs=1e-12)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestAteRmse:
    def _traj(self, rng, n=20):
        return [(float(t), rng.uniform(-2, 2, 3)) for t in np.linspace(0, 1, n)]

    def test_identical_zero(self):
        traj = self._traj(np.random.default_rng(7))
        assert ate_rmse(traj, traj) == 0.0

    def test_constant_offset(self):
        traj = self._traj(np.random.default_rng(8))
        d = np.array([0.3, -0.4, 1.2])
        shifted = [(t, p + d) for t, p in traj]
        assert ate_rmse(shifted, traj) == pytest.approx(np.linalg.norm(d), abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        ref = self._traj(rng)
        est = [(t, p + rng.normal(0, 0.1, 3)) for t, p in ref]
        acc = [np.sum((np.asarray(p) - np.asarray(q)) ** 2)
               for (_, p), (_, q) in zip(est, ref)]
        assert ate_rmse(est, ref) == pytest.approx(np.sqrt(np.mean(acc)), abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        ref = self._traj(rng)
        est = [(t, p + 0.1) for t, p in ref]
        perm = np.random.default_rng(11).permutation(len(ref))
        assert ate_rmse([est[i] for i in perm], ref) == pytest.approx(
            ate_rmse(est, ref), abs=1e-12)

    def test_timestamp_mismatch(self):
        ref = self._traj(np.random.default_rng(12))
        bad = [(t + 0.01, p) for t, p in ref]
        with pytest.raises(ValueError):
            ate_rmse(bad, ref)
