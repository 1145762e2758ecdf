"""Volume renderer tests.

Quadrature oracle: dense 1e4-point evaluation of the same transmittance
integral.  Statistical tests run on fixed seeds.
"""

import numpy as np
import pytest
from scipy import stats

from evfields import autodiff as ad
from evfields.fields import (
    FieldConfig,
    FieldModel,
    TimeNormalizer,
    constant_rays,
    posenet_rays,
)
from evfields.geometry import CameraIntrinsics, Pose, Ray
from evfields.render import (
    RaySamples,
    RenderConfig,
    hierarchical_resample,
    make_depths,
    render_batch,
    render_deformation_map,
    render_image,
    render_ray,
    render_rays,
    sample_stratified,
)

K = CameraIntrinsics(24.0, 24.0, 8.0, 8.0, 16, 16)


class _ConstCanonical:
    """Stub canonical field: fixed sigma and color everywhere."""

    def __init__(self, sigma, color):
        self.sigma = sigma
        self.color = np.asarray(color, dtype=np.float64)

    def encode_dirs(self, dirs):
        return np.zeros((len(dirs), 1))

    def __call__(self, xp, d_enc, latent=None):
        n = xp.value.shape[0] if isinstance(xp, ad.Var) else len(xp)
        return ad.as_var(np.tile(self.color, (n, 1))), ad.as_var(np.full(n, self.sigma))


class _ConstDeform:
    def __init__(self, offset=(0.0, 0.0, 0.0), latent_dim=None):
        self.offset = np.asarray(offset, dtype=np.float64)
        self.latent_dim = latent_dim

    def __call__(self, x, t, alpha=None):
        n = x.value.shape[0] if isinstance(x, ad.Var) else len(x)
        off = ad.as_var(np.tile(self.offset, (n, 1)))
        return off, None


class _StubModel:
    """Satisfies the FieldModel protocol used by the renderer."""

    def __init__(self, sigma, color, offset=(0.0, 0.0, 0.0)):
        self.cfg = FieldConfig.small()
        self.cfg.use_latent = False
        self.normalizer = TimeNormalizer(0.0, 1.0)
        self.deform_field = _ConstDeform(offset)
        self.canonical = _ConstCanonical(sigma, color)

    def normalize_points(self, x):
        return x


def _ident_ray(near=0.0, far=1.0):
    return Ray([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], near, far)


class TestStratified:
    def test_midpoints_without_jitter(self):
        rs = sample_stratified(Ray([0, 0, 0], [0, 0, -1], 0.0, 1.0), 4, None)
        np.testing.assert_allclose(rs.depths, [0.125, 0.375, 0.625, 0.875], atol=1e-15)
        # forward spacings; the last one closes the gap to far
        np.testing.assert_allclose(rs.deltas, [0.25, 0.25, 0.25, 0.125], atol=1e-15)

    def test_samples_stay_in_their_bins(self):
        rng = np.random.default_rng(0)
        ray = _ident_ray(2.0, 6.0)
        edges = np.linspace(2.0, 6.0, 9)
        for _ in range(10_000 // 8):
            rs = sample_stratified(ray, 8, rng)
            assert np.all(rs.depths >= edges[:-1]) and np.all(rs.depths < edges[1:])

    def test_mean_matches_uniform_mixture(self):
        # a stratified draw over equal bins is marginally U[near, far]
        rng = np.random.default_rng(1)
        near, far, n = 1.0, 3.0, 4
        draws = 100_000
        u = rng.random((draws, n))
        depths = near + (np.arange(n) + u) * (far - near) / n
        se = (far - near) / np.sqrt(12.0 * draws * n)
        assert abs(depths.mean() - (near + far) / 2) < 3 * se


class TestHierarchical:
    def _uniform_coarse(self, n=8, near=0.0, far=1.0):
        depths = near + (np.arange(n) + 0.0) * (far - near) / n
        deltas = np.full(n, (far - near) / n)
        return RaySamples(depths, deltas)

    def test_uniform_weights_give_uniform_samples(self):
        rng = np.random.default_rng(2)
        coarse = self._uniform_coarse()
        fine = []
        for _ in range(100):
            rs = hierarchical_resample(coarse, np.ones(8), 1000, rng, far=1.0)
            mask = ~np.isin(rs.depths, coarse.depths)
            fine.append(rs.depths[mask])
        fine = np.concatenate(fine)
        assert fine.size == 100_000
        _, p = stats.kstest(fine, "uniform")
        assert p > 0.01

    def test_single_hot_bin_confines_samples(self):
        rng = np.random.default_rng(3)
        coarse = self._uniform_coarse(8)
        w = np.zeros(8)
        w[3] = 1.0
        rs = hierarchical_resample(coarse, w, 500, rng, far=1.0, floor=0.0)
        fine = rs.depths[~np.isin(rs.depths, coarse.depths)]
        assert np.all(fine >= coarse.depths[3]) and np.all(fine <= coarse.depths[3] + 0.125)

    def test_two_to_one_ratio(self):
        rng = np.random.default_rng(4)
        coarse = RaySamples(np.array([0.0, 0.5]), np.array([0.5, 0.5]))
        w = np.array([2.0, 1.0])
        n = 30_000
        rs_all = []
        for _ in range(30):
            rs = hierarchical_resample(coarse, w, 1000, rng, far=1.0, floor=0.0)
            rs_all.append(rs.depths[~np.isin(rs.depths, coarse.depths)])
        fine = np.concatenate(rs_all)
        frac = np.mean(fine < 0.5)
        sigma = np.sqrt((2 / 3) * (1 / 3) / n)
        assert abs(frac - 2 / 3) < 3 * sigma

    def test_all_zero_weights_fall_back_to_uniform(self):
        rng = np.random.default_rng(5)
        coarse = self._uniform_coarse(4)
        rs = hierarchical_resample(coarse, np.zeros(4), 100, rng, far=1.0, floor=0.0)
        assert rs.depths.size == 104
        assert np.all(np.diff(rs.depths) > 0)

    def test_rejects_bad_weights(self):
        coarse = self._uniform_coarse(4)
        with pytest.raises(ValueError):
            hierarchical_resample(coarse, np.ones(3), 10, np.random.default_rng(0))
        with pytest.raises(ValueError):
            hierarchical_resample(coarse, -np.ones(4), 10, np.random.default_rng(0))


class TestRenderRay:
    def test_zero_density_gives_background(self):
        model = _StubModel(sigma=0.0, color=[0.3, 0.3, 0.3])
        cfg = RenderConfig(n_coarse=16, n_fine=0, jitter=False)
        out = render_ray(_ident_ray(), 0.5, model, cfg)
        np.testing.assert_allclose(out.color, [1.0, 1.0, 1.0], atol=1e-12)
        assert out.opacity == pytest.approx(0.0, abs=1e-12)

    def test_opaque_sample_returns_field_color(self):
        color = np.array([0.2, 0.6, 0.9])
        model = _StubModel(sigma=50.0, color=color)
        rays = constant_rays(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), 0.0, 1.0)
        batch = render_batch(rays, [0.5], model,
                             RenderConfig(n_fine=0, jitter=False),
                             depths=np.array([[0.0]]))   # sigma * delta = 50
        np.testing.assert_allclose(batch.color.value[0], color, atol=1e-9)

    def test_homogeneous_medium_matches_closed_form_and_quadrature(self):
        sigma = 2.0
        model = _StubModel(sigma=sigma, color=[0.5, 0.5, 0.5])
        cfg = RenderConfig(n_coarse=256, n_fine=0, jitter=False)
        out = render_ray(_ident_ray(), 0.5, model, cfg)
        closed = 1.0 - np.exp(-sigma * 1.0)
        assert abs(out.opacity - closed) < 1e-3
        # dense-quadrature oracle: 1e4-point discrete sum of the same scheme
        dz = 1.0 / 10_000
        tau = np.full(10_000, sigma * dz)
        T = np.exp(-(np.cumsum(tau) - tau))
        oracle = np.sum(T * (1 - np.exp(-tau)))
        assert abs(out.opacity - oracle) < 1e-3

    def test_weights_plus_tail_is_one(self):
        rng = np.random.default_rng(7)
        model = FieldModel(FieldConfig.small(), TimeNormalizer(0, 1), [0, 0, -0.5], 1.0,
                           np.random.default_rng(8))
        for p in model.params():
            p.assign(rng.standard_normal(p.shape) * 0.3)
        cfg = RenderConfig(n_coarse=24, n_fine=0, jitter=True)
        n = 10_000
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rays = constant_rays(np.zeros((n, 3)), dirs, 0.1, 1.4)
        batch = render_rays(rays, rng.uniform(0, 1, n), model, cfg, rng)
        total = batch.weights.value.sum(axis=1) + batch.t_end.value
        assert np.max(np.abs(total - 1.0)) < 1e-9

    def test_compositing_monotone_in_sigma(self):
        cfg = RenderConfig(n_coarse=16, n_fine=0, jitter=False)
        opacities = []
        for sigma in (0.0, 0.5, 1.0, 2.0, 4.0):
            out = render_ray(_ident_ray(), 0.0, _StubModel(sigma, [0.5] * 3), cfg)
            opacities.append(out.opacity)
        assert np.all(np.diff(opacities) >= 0)

    def test_resolution_refinement_converges(self):
        sigma = 2.0
        model = _StubModel(sigma=sigma, color=[0.5] * 3)
        out1 = render_ray(_ident_ray(), 0.0, model, RenderConfig(n_coarse=128, n_fine=0, jitter=False))
        out2 = render_ray(_ident_ray(), 0.0, model, RenderConfig(n_coarse=256, n_fine=0, jitter=False))
        assert abs(out1.opacity - out2.opacity) < 1e-3

    def test_non_finite_field_output_raises(self):
        class _BadCanonical(_ConstCanonical):
            def __call__(self, xp, d_enc, latent=None):
                c, s = super().__call__(xp, d_enc, latent)
                bad = s.value.copy()
                bad[0] = np.nan
                return c, ad.as_var(bad)

        model = _StubModel(1.0, [0.5] * 3)
        model.canonical = _BadCanonical(1.0, [0.5] * 3)
        with pytest.raises(FloatingPointError, match="sample index"):
            render_ray(_ident_ray(), 0.0, model, RenderConfig(n_coarse=4, n_fine=0, jitter=False))


class TestGradientsThroughRendering:
    def _real_model(self, seed=11):
        model = FieldModel(FieldConfig.small(), TimeNormalizer(0, 1), [0, 0, -1.0], 1.0,
                           np.random.default_rng(seed),
                           knots=[(0.0, Pose(np.eye(3), [0, 0, 0.5])),
                                  (1.0, Pose(np.eye(3), [0.2, 0, 0.5]))])
        rng = np.random.default_rng(seed + 1)
        for p in model.deform_field.params() + model.canonical.params():
            p.assign(rng.standard_normal(p.shape) * 0.2)
        return model

    def test_color_gradient_wrt_canonical_weights(self):
        model = self._real_model()
        cfg = RenderConfig(n_coarse=12, n_fine=0, jitter=False)
        rng = np.random.default_rng(12)
        dirs = rng.standard_normal((3, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rays = constant_rays(np.zeros((3, 3)), dirs, 0.2, 2.0)
        w = model.canonical.density_net.weights[0]

        def loss():
            batch = render_rays(rays, [0.1, 0.5, 0.9], model, cfg, None)
            return ad.vsum(batch.color)

        w.zero_grad()
        ad.backward(loss())
        analytic = w.grad.copy()
        base = w.values.copy()
        for i in rng.choice(base.size, 8, replace=False):
            h = 1e-5
            vals = base.reshape(-1).copy()
            vals[i] += h
            w.assign(vals.reshape(base.shape))
            hi = float(loss().value)
            vals[i] -= 2 * h
            w.assign(vals.reshape(base.shape))
            lo = float(loss().value)
            fd = (hi - lo) / (2 * h)
            ref = analytic.reshape(-1)[i]
            assert abs(fd - ref) / max(abs(fd), abs(ref), 1e-8) < 1e-4
        w.assign(base)

    def test_color_gradient_wrt_translation_residual(self):
        model = self._real_model(seed=21)
        cfg = RenderConfig(n_coarse=10, n_fine=0, jitter=False)
        times = np.array([0.3, 0.7])
        pixels = np.array([[8.5, 8.5], [4.5, 10.5]])
        b = model.posenet.trans_net.biases[-1]

        def loss():
            rays = posenet_rays(model.posenet, times, pixels, K, 0.2, 2.0)
            batch = render_rays(rays, times, model, cfg, None)
            return ad.vsum(batch.color)

        b.zero_grad()
        ad.backward(loss())
        analytic = b.grad.copy()
        base = b.values.copy()
        for i in range(3):
            h = 1e-5
            vals = base.copy()
            vals[i] += h
            b.assign(vals)
            hi = float(loss().value)
            vals[i] -= 2 * h
            b.assign(vals)
            lo = float(loss().value)
            fd = (hi - lo) / (2 * h)
            assert abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-8) < 1e-4
        b.assign(base)


class TestRenderImage:
    def test_zero_density_image_all_white(self):
        model = _StubModel(0.0, [0.5] * 3)
        small_k = CameraIntrinsics(3.0, 3.0, 1.0, 1.0, 2, 2)
        color, depth, _ = render_image(Pose.identity(), 0.0, small_k, model,
                                       RenderConfig(n_coarse=8, n_fine=0, jitter=False),
                                       near=0.1, far=2.0)
        np.testing.assert_allclose(color, 1.0, atol=1e-12)
        np.testing.assert_allclose(depth, 2.0, atol=1e-12)

    def test_matches_pixel_loop_of_render_ray(self):
        model = self._varied_model()
        cfg = RenderConfig(n_coarse=8, n_fine=0, jitter=False, chunk=1)
        color, _, _ = render_image(Pose.identity(), 0.4, K, model, cfg, 0.2, 2.0)
        from evfields.geometry import pixel_to_ray
        for (y, x) in [(0, 0), (3, 11), (15, 15), (8, 8)]:
            ray = pixel_to_ray((x + 0.5, y + 0.5), K, Pose.identity(), 0.2, 2.0)
            out = render_ray(ray, 0.4, model, cfg)
            assert np.array_equal(out.color, color[y, x])

    def _varied_model(self):
        model = FieldModel(FieldConfig.small(), TimeNormalizer(0, 1), [0, 0, -1.0], 1.0,
                           np.random.default_rng(31))
        rng = np.random.default_rng(32)
        for p in model.params():
            p.assign(rng.standard_normal(p.shape) * 0.3)
        return model

    def test_parallel_und_reordered_match_serial(self):
        model = self._varied_model()
        cfg = RenderConfig(n_coarse=8, n_fine=4, jitter=True, chunk=64)
        args = (Pose.identity(), 0.3, K, model, cfg, 0.2, 2.0)
        serial, sd, _ = render_image(*args, seed=5)
        reordered, rd, _ = render_image(*args, seed=5, chunk_order="reversed")
        threaded, td, _ = render_image(*args, seed=5, workers=2)
        assert np.array_equal(serial, reordered) and np.array_equal(sd, rd)
        assert np.array_equal(serial, threaded) and np.array_equal(sd, td)


class TestDeformationMap:
    def test_identity_init_gives_zero_map(self):
        model = FieldModel(FieldConfig.small(), TimeNormalizer(0, 1), [0, 0, -1.0], 1.0,
                           np.random.default_rng(41))
        mag = render_deformation_map(Pose.identity(), 0.2, K, model,
                                     RenderConfig(n_coarse=8, n_fine=0, jitter=False),
                                     near=0.2, far=2.0)
        np.testing.assert_allclose(mag, 0.0, atol=1e-15)

    def test_constant_warp_on_opaque_medium(self):
        model = _StubModel(sigma=80.0, color=[0.5] * 3, offset=(0.2, 0.0, 0.0))
        cfg = RenderConfig(n_coarse=32, n_fine=0, jitter=False, compute_deform_mag=True)
        mag = render_deformation_map(Pose.identity(), 0.0, K, model, cfg, 0.2, 2.0)
        np.testing.assert_allclose(mag, 0.2, atol=1e-3)

    def test_map_non_negative_for_random_models(self):
        model = FieldModel(FieldConfig.small(), TimeNormalizer(0, 1), [0, 0, -1.0], 1.0,
                           np.random.default_rng(51))
        rng = np.random.default_rng(52)
        for p in model.params():
            p.assign(rng.standard_normal(p.shape) * 0.4)
        mag = render_deformation_map(Pose.identity(), 0.7, K, model,
                                     RenderConfig(n_coarse=8, n_fine=0, jitter=False),
                                     near=0.2, far=2.0)
        assert np.all(mag >= 0)
