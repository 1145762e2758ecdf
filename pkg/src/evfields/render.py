"""Ray quadrature and volume rendering.

Transmittance uses the exponential form T_i = exp(-sum_{j<i} sigma_j d_j),
identical to the product of (1 - alpha_j) for the same samples, which keeps
the whole compositing chain smooth for reverse-mode differentiation.  Fine
sample positions from hierarchical resampling are treated as constants
(gradients flow through the field values at those positions, not through the
positions themselves).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fields import DiffRays, FieldModel, constant_rays, field_forward
from .geometry import CameraIntrinsics, Pose, Ray


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 128
    jitter: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)   # white for synthetic scenes
    alpha: float | None = None       # coarse-to-fine window position for the warp encoding
    resample_floor: float = 1e-5
    compute_deform_mag: bool = False
    chunk: int = 2048

    def with_alpha(self, alpha):
        out = RenderConfig(**self.__dict__)
        out.alpha = alpha
        return out


@dataclass
class RaySamples:
    """Strictly increasing quadrature depths with their forward spacings."""

    depths: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        if d.ndim != 1 or d.size < 1 or np.any(np.diff(d) <= 0):
            raise ValueError("depths must be strictly increasing")
        self.depths = d


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: float
    deform_mag: float
    weights: np.ndarray
    opacity: float


def sample_stratified(ray: Ray, n_coarse: int, rng: np.random.Generator | None) -> RaySamples:
    """One uniform jitter per bin over [near, far]; bin midpoints when rng is None."""
    if n_coarse < 2:
        raise ValueError("need at least 2 coarse samples")
    u = rng.random(n_coarse) if rng is not None else np.full(n_coarse, 0.5)
    depths = ray.near + (np.arange(n_coarse) + u) * (ray.far - ray.near) / n_coarse
    return RaySamples(depths, _deltas(depths, ray.far))


def _deltas(depths: np.ndarray, far: float) -> np.ndarray:
    out = np.empty_like(depths)
    out[:-1] = np.diff(depths)
    out[-1] = far - depths[-1]
    return out


def _stratified_batch(near, far, n, n_rays, u):
    return near + (np.arange(n) + u) * (far - near) / n


def hierarchical_resample(coarse: RaySamples, weights, n_fine: int,
                          rng: np.random.Generator, far: float | None = None,
                          floor: float = 1e-5, u=None) -> RaySamples:
    """Inverse-CDF draws over the floored piecewise-constant weight PDF,
    merged with the coarse samples and re-sorted."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != coarse.depths.shape:
        raise ValueError("weights must match the coarse sample count")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if far is None:
        far = coarse.depths[-1] + coarse.deltas[-1]
    w = w + floor
    total = w.sum()
    if total <= 0:
        w = np.ones_like(w)
        total = w.sum()
    pdf = w / total
    cdf = np.concatenate([[0.0], np.cumsum(pdf)])
    cdf[-1] = 1.0
    edges = np.concatenate([coarse.depths, [far]])
    if u is None:
        u = rng.random(n_fine)
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(pdf) - 1)
    seg = (u - cdf[idx]) / np.maximum(cdf[idx + 1] - cdf[idx], 1e-300)
    fine = edges[idx] + seg * (edges[idx + 1] - edges[idx])
    merged = np.sort(np.concatenate([coarse.depths, fine]))
    # nudge exact duplicates apart so the strict-increase invariant holds
    for _ in range(2):
        dup = np.flatnonzero(np.diff(merged) <= 0)
        if dup.size == 0:
            break
        merged[dup + 1] = np.nextafter(merged[dup + 1], np.inf)
        merged = np.sort(merged)
    return RaySamples(merged, _deltas(merged, max(far, merged[-1])))


class RenderBatch:
    """Traced render of a batch of rays; fields are autodiff Vars."""

    def __init__(self, color: ad.Var, depth: ad.Var, opacity: ad.Var,
                 weights: ad.Var, t_end: ad.Var, deform_mag: np.ndarray | None):
        self.color = color            # (B, 3)
        self.depth = depth            # (B,)
        self.opacity = opacity        # (B,)
        self.weights = weights        # (B, S)
        self.t_end = t_end            # (B,)
        self.deform_mag = deform_mag  # (B,) plain numpy or None

    def outputs(self) -> list[RenderOutput]:
        mags = self.deform_mag if self.deform_mag is not None \
            else np.zeros(self.color.value.shape[0])
        return [RenderOutput(color=self.color.value[i].copy(),
                             depth=float(self.depth.value[i]),
                             deform_mag=float(mags[i]),
                             weights=self.weights.value[i].copy(),
                             opacity=float(self.opacity.value[i]))
                for i in range(self.color.value.shape[0])]


def _sample_points(rays: DiffRays, depths: np.ndarray):
    """World-frame quadrature points: X = o + z * d, shape (B*S, 3)."""
    b, s = depths.shape
    if not any(v.requires_grad for v in rays.origin_cols + rays.dir_cols):
        o = np.stack([v.value for v in rays.origin_cols], axis=1)
        d = np.stack([v.value for v in rays.dir_cols], axis=1)
        pts = o[:, None, :] + depths[:, :, None] * d[:, None, :]
        return ad.as_var(pts.reshape(b * s, 3)), d
    z = depths.reshape(-1)
    cols = []
    for i in range(3):
        oi = ad.repeat(rays.origin_cols[i], s, axis=0)
        di = ad.repeat(rays.dir_cols[i], s, axis=0)
        cols.append(oi + di * z)
    d_val = np.stack([v.value for v in rays.dir_cols], axis=1)
    return ad.stack_cols(cols), d_val


def render_batch(rays: DiffRays, times, model: FieldModel, cfg: RenderConfig,
                 depths: np.ndarray) -> RenderBatch:
    """Composite a batch of rays at the given per-ray times and fixed depths.

    ``depths`` is (B, S); gradients flow into the field parameters and, for
    DiffRays built from PoseNet, into the pose residuals.
    """
    b, s = depths.shape
    x_world, d_val = _sample_points(rays, depths)
    x_norm = model.normalize_points(x_world)
    t_norm = model.normalizer.normalize(np.asarray(times, dtype=np.float64))
    # time and view-direction encodings are constant along a ray: encode once
    # per ray, then spread to the samples
    t_enc = ad.posenc(t_norm.reshape(b, 1), model.deform_field.time_enc)
    d_unit = d_val / np.linalg.norm(d_val, axis=1, keepdims=True)
    d_enc = model.canonical.encode_dirs(d_unit)
    color, sigma, offset = field_forward(model, x_norm, alpha=cfg.alpha,
                                         t_enc=np.repeat(t_enc, s, axis=0),
                                         d_enc=np.repeat(d_enc, s, axis=0))
    if not np.all(np.isfinite(sigma.value)) or not np.all(np.isfinite(color.value)):
        bad = np.flatnonzero(~np.isfinite(sigma.value.reshape(-1)))
        raise FloatingPointError(f"non-finite field output at sample index "
                                 f"{int(bad[0]) if bad.size else -1}")

    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = rays.far - depths[:, -1]

    tau = ad.mul(ad.reshape(sigma, (b, s)), deltas)               # sigma_i * delta_i
    inclusive = ad.cumsum(tau, axis=1)
    accum_before = ad.sub(inclusive, tau)                         # exclusive prefix sum
    transmittance = ad.exp(ad.mul(accum_before, -1.0))            # T_i
    alpha_i = ad.sub(1.0, ad.exp(ad.mul(tau, -1.0)))
    weights = ad.mul(transmittance, alpha_i)                      # (B, S)
    t_end = ad.exp(ad.mul(inclusive[:, s - 1], -1.0))             # (B,)

    w3 = ad.reshape(weights, (b, s, 1))
    c3 = ad.reshape(color, (b, s, 3))
    bg = np.asarray(cfg.background, dtype=np.float64)
    out_color = ad.add(ad.vsum(ad.mul(w3, c3), axis=1),
                       ad.mul(ad.reshape(t_end, (b, 1)), bg.reshape(1, 3)))
    out_depth = ad.add(ad.vsum(ad.mul(weights, depths), axis=1),
                       ad.mul(t_end, rays.far))
    opacity = ad.vsum(weights, axis=1)

    deform_mag = None
    if cfg.compute_deform_mag:
        mag = np.linalg.norm(offset.value, axis=1).reshape(b, s)
        deform_mag = (weights.value * mag).sum(axis=1)
    return RenderBatch(out_color, out_depth, opacity, weights, t_end, deform_mag)


def make_depths(near: float, far: float, n_rays: int, cfg: RenderConfig,
                rng: np.random.Generator | None, jitter_u: np.ndarray | None = None):
    """Stratified coarse depths for a batch; jitter_u overrides the rng draw."""
    if jitter_u is None:
        if cfg.jitter and rng is not None:
            jitter_u = rng.random((n_rays, cfg.n_coarse))
        else:
            jitter_u = np.full((n_rays, cfg.n_coarse), 0.5)
    grid = np.arange(cfg.n_coarse)
    return near + (grid[None, :] + jitter_u) * (far - near) / cfg.n_coarse


def render_rays(rays: DiffRays, times, model: FieldModel, cfg: RenderConfig,
                rng: np.random.Generator | None,
                jitter_u: np.ndarray | None = None,
                resample_u: np.ndarray | None = None) -> RenderBatch:
    """Coarse pass plus optional hierarchical refinement; returns the traced
    batch of the final (merged) pass."""
    depths = make_depths(rays.near, rays.far, rays.count, cfg, rng, jitter_u)
    batch = render_batch(rays, times, model, cfg, depths)
    if cfg.n_fine <= 0:
        return batch
    w = batch.weights.value
    merged = np.empty((rays.count, depths.shape[1] + cfg.n_fine))
    for i in range(rays.count):
        coarse = RaySamples(depths[i], _deltas(depths[i], rays.far))
        u = resample_u[i] if resample_u is not None else None
        rs = hierarchical_resample(coarse, w[i], cfg.n_fine, rng, far=rays.far,
                                   floor=cfg.resample_floor, u=u)
        merged[i] = rs.depths
    return render_batch(rays, times, model, cfg, merged)


def render_ray(ray: Ray, t: float, model: FieldModel, cfg: RenderConfig,
               rng: np.random.Generator | None = None) -> RenderOutput:
    """Single-ray convenience wrapper."""
    rays = constant_rays(ray.origin[None, :], ray.direction[None, :], ray.near, ray.far)
    batch = render_rays(rays, [t], model, cfg, rng)
    return batch.outputs()[0]


def camera_rays(pose: Pose, K: CameraIntrinsics, near: float, far: float):
    """Pixel-center rays for a full image, row-major; returns (origins, dirs)."""
    ys, xs = np.mgrid[0:K.height, 0:K.width]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    d_cam = np.stack([(px - K.cx) / K.fx, -(py - K.cy) / K.fy, -np.ones(px.size)], axis=1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, d_world.shape).copy()
    return origins, d_world


def render_image(pose: Pose, t: float, K: CameraIntrinsics, model: FieldModel,
                 cfg: RenderConfig, near: float, far: float, seed: int = 0,
                 workers: int = 1, chunk_order: str = "forward"):
    """Full-frame render; returns (color HxWx3, depth HxW, deform_mag HxW).

    All per-pixel randomness is drawn up front from ``seed`` in row-major
    order, so chunked, reordered, and threaded execution are bit-identical.
    """
    origins, dirs = camera_rays(pose, K, near, far)
    n = origins.shape[0]
    rng = np.random.default_rng(seed)
    if cfg.jitter:
        jitter_u = rng.random((n, cfg.n_coarse))
    else:
        jitter_u = np.full((n, cfg.n_coarse), 0.5)
    resample_u = rng.random((n, cfg.n_fine)) if cfg.n_fine > 0 else None

    color = np.empty((n, 3))
    depth = np.empty(n)
    mag = np.zeros(n)
    spans = [(s, min(s + cfg.chunk, n)) for s in range(0, n, cfg.chunk)]
    if chunk_order == "reversed":
        spans = spans[::-1]

    def run(span):
        lo, hi = span
        rays = constant_rays(origins[lo:hi], dirs[lo:hi], near, far)
        ru = resample_u[lo:hi] if resample_u is not None else None
        batch = render_rays(rays, np.full(hi - lo, t), model, cfg, None,
                            jitter_u=jitter_u[lo:hi], resample_u=ru)
        return span, batch

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, spans))
    else:
        results = [run(sp) for sp in spans]
    for (lo, hi), batch in results:
        color[lo:hi] = batch.color.value
        depth[lo:hi] = batch.depth.value
        if batch.deform_mag is not None:
            mag[lo:hi] = batch.deform_mag
    shape = (K.height, K.width)
    return color.reshape(shape + (3,)), depth.reshape(shape), mag.reshape(shape)


def render_deformation_map(pose: Pose, t: float, K: CameraIntrinsics, model: FieldModel,
                           cfg: RenderConfig, near: float, far: float, seed: int = 0):
    """HxW map of the composited warp magnitude at (pose, t)."""
    mag_cfg = cfg.with_alpha(cfg.alpha)
    mag_cfg.compute_deform_mag = True
    _, _, mag = render_image(pose, t, K, model, mag_cfg, near, far, seed=seed)
    return mag
