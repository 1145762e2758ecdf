"""The three learnable components: residual time-to-pose network, inverse
deformation field, and canonical radiance field.

Composition order is fixed as residual-on-the-left in the world frame:
P(t) = exp_screw(residual) o interpolate(t).  With zero-initialized final
layers the whole system renders exactly like a rigid canonical field at the
interpolated poses.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import (
    CameraIntrinsics,
    Pose,
    PoseInterpolator,
    ScrewAxis,
    compose,
    exp_screw,
)


@dataclass(frozen=True)
class TimeNormalizer:
    """Affine bijection [t_min, t_max] -> [-1, 1]."""

    t_min: float
    t_max: float

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError("need t_min < t_max")

    def normalize(self, t):
        return 2.0 * (np.asarray(t, dtype=np.float64) - self.t_min) \
            / (self.t_max - self.t_min) - 1.0

    def denormalize(self, s):
        return (np.asarray(s, dtype=np.float64) + 1.0) / 2.0 \
            * (self.t_max - self.t_min) + self.t_min


@dataclass
class FieldConfig:
    """Network sizes and encoding settings (defaults follow the full-scale setup)."""

    posenet_layers: int = 8
    posenet_width: int = 256
    deform_layers: int = 6
    deform_width: int = 128
    canonical_layers: int = 8
    canonical_width: int = 256
    color_width: int = 128
    feature_dim: int = 256
    latent_dim: int = 8           # deformation latent routed into the density branch
    use_latent: bool = True
    l_spatial: int = 10
    l_dir: int = 4
    l_time: int = 6
    l_posenet_time: int = 10
    residual_scale: float = 0.01

    @staticmethod
    def small() -> "FieldConfig":
        """Desk-scale configuration for tests and CPU training runs."""
        return FieldConfig(posenet_layers=4, posenet_width=64,
                           deform_layers=3, deform_width=32,
                           canonical_layers=3, canonical_width=64,
                           color_width=32, feature_dim=24, latent_dim=8,
                           l_spatial=6, l_dir=2, l_time=4, l_posenet_time=6)


class PoseNetModel:
    """Residual pose correction over temporally interpolated RGB knot poses."""

    def __init__(self, knots: list[tuple[float, Pose]], normalizer: TimeNormalizer,
                 cfg: FieldConfig, rng: np.random.Generator):
        if len(knots) < 2:
            raise ValueError("PoseNet needs at least 2 pose knots")
        self.knots = list(knots)
        self._interp = PoseInterpolator(knots)
        self.normalizer = normalizer
        self.residual_scale = cfg.residual_scale
        self.time_enc = ad.PosEncConfig(L=cfg.l_posenet_time)
        in_dim = self.time_enc.out_dim(1)
        widths = [in_dim] + [cfg.posenet_width] * (cfg.posenet_layers - 1) + [3]
        self.trans_net = ad.Mlp(widths, rng, name="posenet.trans")
        self.rot_net = ad.Mlp(widths, rng, name="posenet.rot")
        # identity start: residuals are exactly zero until trained
        self.trans_net.zero_last_layer()
        self.rot_net.zero_last_layer()

    def params(self):
        return self.trans_net.params() + self.rot_net.params()

    def time_range(self):
        return self.knots[0][0], self.knots[-1][0]

    def _check_time(self, t):
        lo, hi = self.time_range()
        tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if tt.min() < lo - 1e-12 or tt.max() > hi + 1e-12:
            raise ValueError(f"time outside knot range [{lo}, {hi}]")

    def residual_screws(self, times) -> tuple[ad.Var, ad.Var]:
        """Differentiable (B, 3) rotation and translation residuals."""
        self._check_time(times)
        tn = self.normalizer.normalize(np.atleast_1d(times)).reshape(-1, 1)
        enc = ad.posenc(tn, self.time_enc)
        r = ad.mul(ad.forward(self.rot_net, enc), self.residual_scale)
        v = ad.mul(ad.forward(self.trans_net, enc), self.residual_scale)
        return r, v

    def pose(self, t: float) -> Pose:
        """P(t) = exp_screw(residual(t)) o interpolate(t); plain numpy result."""
        r, v = self.residual_screws([t])
        residual = exp_screw(ScrewAxis(r.value[0], v.value[0]))
        return compose(residual, self._interp.pose(float(t)))

    def interpolated(self, t: float) -> Pose:
        return self._interp.pose(float(t))


def posenet_pose(t: float, model: PoseNetModel) -> Pose:
    return model.pose(t)


# ---------------------------------------------------------------------------
# differentiable batched pose -> ray pipeline


class DiffRays:
    """Batch of rays whose origins/directions carry the autodiff trace."""

    def __init__(self, origin_cols, dir_cols, near: float, far: float):
        self.origin_cols = origin_cols      # 3 Vars of shape (B,)
        self.dir_cols = dir_cols            # 3 unit-direction Vars of shape (B,)
        self.near = near
        self.far = far
        self.count = origin_cols[0].value.size


def _exp_screw_cols(r_cols, v_cols):
    """Batched screw exponential from per-component Vars.

    Returns (R, t): R as a 3x3 nested list of (B,) Vars, t as 3 Vars.
    """
    rx, ry, rz = r_cols
    vx, vy, vz = v_cols
    xx, yy, zz = rx * rx, ry * ry, rz * rz
    xy, xz, yz = rx * ry, rx * rz, ry * rz
    u = xx + yy + zz
    a, b, c = ad.rodrigues_coefficients(u)

    def rot(first, second):
        # I + first*K + second*K^2
        return [
            [1.0 + (-1.0) * second * (yy + zz), (-1.0) * first * rz + second * xy,
             first * ry + second * xz],
            [first * rz + second * xy, 1.0 + (-1.0) * second * (xx + zz),
             (-1.0) * first * rx + second * yz],
            [(-1.0) * first * ry + second * xz, first * rx + second * yz,
             1.0 + (-1.0) * second * (xx + yy)],
        ]

    R = rot(a, b)
    V = rot(b, c)
    t = [V[i][0] * vx + V[i][1] * vy + V[i][2] * vz for i in range(3)]
    return R, t


def _compose_left(R_res, t_res, interp_R: np.ndarray, interp_t: np.ndarray):
    """(R_res, t_res) o interp, with the interpolated poses held constant."""
    R_tot = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(3):
            R_tot[i][j] = (R_res[i][0] * interp_R[:, 0, j]
                           + R_res[i][1] * interp_R[:, 1, j]
                           + R_res[i][2] * interp_R[:, 2, j])
    t_tot = [R_res[i][0] * interp_t[:, 0] + R_res[i][1] * interp_t[:, 1]
             + R_res[i][2] * interp_t[:, 2] + t_res[i] for i in range(3)]
    return R_tot, t_tot


def posenet_rays(model: PoseNetModel, times, pixels, K: CameraIntrinsics,
                 near: float, far: float) -> DiffRays:
    """Backproject pixels at per-event times through PoseNet-refined poses.

    Gradients flow into both PoseNet MLPs via the screw exponential and the
    ray geometry.
    """
    times = np.asarray(times, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    r_var, v_var = model.residual_screws(times)
    r_cols = [r_var[:, i] for i in range(3)]
    v_cols = [v_var[:, i] for i in range(3)]
    R_res, t_res = _exp_screw_cols(r_cols, v_cols)

    interp = model._interp.poses(times)
    interp_R = np.stack([p.rotation for p in interp])
    interp_t = np.stack([p.translation for p in interp])
    R_tot, t_tot = _compose_left(R_res, t_res, interp_R, interp_t)

    # pinhole bearing in the camera frame (constant w.r.t. parameters)
    d_cam = np.stack([
        (pixels[:, 0] - K.cx) / K.fx,
        -(pixels[:, 1] - K.cy) / K.fy,
        -np.ones(len(pixels)),
    ], axis=1)
    d = [R_tot[i][0] * d_cam[:, 0] + R_tot[i][1] * d_cam[:, 1] + R_tot[i][2] * d_cam[:, 2]
         for i in range(3)]
    norm = ad.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    d_hat = [d[i] / norm for i in range(3)]
    return DiffRays(t_tot, d_hat, near, far)


def posenet_poses_numpy(model: PoseNetModel, times) -> tuple[np.ndarray, np.ndarray]:
    """Batched plain-numpy P(t): (rotations (B,3,3), translations (B,3))."""
    from .geometry import rotation_coefficients

    times = np.asarray(times, dtype=np.float64)
    r_var, v_var = model.residual_screws(times)
    r, v = r_var.value, v_var.value
    u = np.sum(r * r, axis=1)
    a, b, c = rotation_coefficients(u)
    zeros = np.zeros(len(times))
    K = np.stack([
        np.stack([zeros, -r[:, 2], r[:, 1]], axis=1),
        np.stack([r[:, 2], zeros, -r[:, 0]], axis=1),
        np.stack([-r[:, 1], r[:, 0], zeros], axis=1),
    ], axis=1)
    K2 = K @ K
    eye = np.eye(3)[None]
    R_res = eye + a[:, None, None] * K + b[:, None, None] * K2
    V = eye + b[:, None, None] * K + c[:, None, None] * K2
    t_res = np.einsum("bij,bj->bi", V, v)
    interp = model._interp.poses(times)
    interp_R = np.stack([p.rotation for p in interp])
    interp_t = np.stack([p.translation for p in interp])
    R_tot = R_res @ interp_R
    t_tot = np.einsum("bij,bj->bi", R_res, interp_t) + t_res
    return R_tot, t_tot


def backproject_pixels(R: np.ndarray, t: np.ndarray, pixels: np.ndarray,
                       K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-frame directions for pixel coords under batched poses."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([(pixels[:, 0] - K.cx) / K.fx,
                      -(pixels[:, 1] - K.cy) / K.fy,
                      -np.ones(len(pixels))], axis=1)
    d = np.einsum("bij,bj->bi", R, d_cam)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return t, d


def constant_rays(origins: np.ndarray, dirs: np.ndarray, near: float, far: float) -> DiffRays:
    """Rays with no pose gradient (stored RGB poses, frozen PoseNet)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    return DiffRays([ad.as_var(o[:, i]) for i in range(3)],
                    [ad.as_var(d[:, i]) for i in range(3)], near, far)


# ---------------------------------------------------------------------------
# deformation and canonical fields


class DeformationField:
    """Inverse warp X' = X + offset(X, t) with an optional latent head."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.spatial_enc = ad.PosEncConfig(L=cfg.l_spatial)
        self.time_enc = ad.PosEncConfig(L=cfg.l_time)
        in_dim = self.spatial_enc.out_dim(3) + self.time_enc.out_dim(1)
        out_dim = 3 + (cfg.latent_dim if cfg.use_latent else 0)
        widths = [in_dim] + [cfg.deform_width] * (cfg.deform_layers - 1) + [out_dim]
        self.net = ad.Mlp(widths, rng, name="deform")
        self.net.zero_last_layer()   # identity warp at initialization

    def params(self):
        return self.net.params()

    def __call__(self, x_norm, t_norm=None, alpha: float | None = None,
                 t_enc: np.ndarray | None = None):
        """Returns (offset (N,3), latent (N,latent_dim) or None) as Vars.

        Accepts either normalized times ``t_norm`` (encoded here) or an
        already-encoded ``t_enc`` block (per-ray encodings repeated outside).
        """
        spatial = dataclasses.replace(self.spatial_enc, alpha=alpha)
        n = x_norm.value.shape[0] if isinstance(x_norm, ad.Var) else len(x_norm)
        if t_enc is None:
            t_arr = np.asarray(t_norm, dtype=np.float64)
            t_enc = ad.posenc(t_arr.reshape(n, 1), self.time_enc)
        enc = ad.concat([ad.posenc(x_norm, spatial), ad.as_var(t_enc)], axis=1)
        out = ad.forward(self.net, enc)
        offset = out[:, 0:3]
        latent = out[:, 3:] if self.cfg.use_latent else None
        return offset, latent


class CanonicalField:
    """Time-independent radiance field: density from position only, color from
    position features plus the encoded viewing direction."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.spatial_enc = ad.PosEncConfig(L=cfg.l_spatial)
        self.dir_enc = ad.PosEncConfig(L=cfg.l_dir)
        density_in = self.spatial_enc.out_dim(3) + (cfg.latent_dim if cfg.use_latent else 0)
        density_widths = [density_in] + [cfg.canonical_width] * (cfg.canonical_layers - 1) \
            + [1 + cfg.feature_dim]
        self.density_net = ad.Mlp(density_widths, rng, name="canonical.density")
        color_in = cfg.feature_dim + self.dir_enc.out_dim(3)
        self.color_net = ad.Mlp([color_in, cfg.color_width, 3], rng, name="canonical.color")

    def params(self):
        return self.density_net.params() + self.color_net.params()

    def __call__(self, xp_norm, d_enc, latent=None):
        """Returns (color (N,3) in (0,1), sigma (N,) >= 0) as Vars.

        ``d_enc`` is the already-encoded viewing direction; sigma never sees it.
        """
        enc = ad.posenc(xp_norm, self.spatial_enc)
        if self.cfg.use_latent:
            if latent is None:
                n = enc.value.shape[0] if isinstance(enc, ad.Var) else len(enc)
                latent = np.zeros((n, self.cfg.latent_dim))
            enc = ad.concat([ad.as_var(enc), ad.as_var(latent)], axis=1)
        raw = ad.forward(self.density_net, enc)
        sigma = ad.softplus(raw[:, 0])
        feature = raw[:, 1:]
        color_raw = ad.forward(self.color_net, ad.concat([feature, ad.as_var(d_enc)], axis=1))
        return ad.sigmoid(color_raw), sigma

    def encode_dirs(self, dirs: np.ndarray) -> np.ndarray:
        return ad.posenc(np.asarray(dirs, dtype=np.float64), self.dir_enc)


class FieldModel:
    """Bundle of the learnable components plus the scene normalization."""

    def __init__(self, cfg: FieldConfig, normalizer: TimeNormalizer,
                 scene_center, scene_extent: float, rng: np.random.Generator,
                 knots: list[tuple[float, Pose]] | None = None):
        self.cfg = cfg
        self.normalizer = normalizer
        self.scene_center = np.asarray(scene_center, dtype=np.float64)
        self.scene_extent = float(scene_extent)
        self.deform_field = DeformationField(cfg, rng)
        self.canonical = CanonicalField(cfg, rng)
        self.posenet = PoseNetModel(knots, normalizer, cfg, rng) if knots else None

    def params(self, include_posenet=True):
        out = self.deform_field.params() + self.canonical.params()
        if include_posenet and self.posenet is not None:
            out += self.posenet.params()
        return out

    def normalize_points(self, x_world):
        if isinstance(x_world, ad.Var):
            return ad.mul(ad.sub(x_world, self.scene_center), 1.0 / self.scene_extent)
        return (np.asarray(x_world) - self.scene_center) / self.scene_extent

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.values for p in self.params()}

    def load_tensors(self, tensors: dict[str, np.ndarray]):
        for p in self.params():
            if p.name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {p.name}")
            p.assign(tensors[p.name])


def deform(model: FieldModel, x_norm, t_norm=None, alpha: float | None = None,
           t_enc: np.ndarray | None = None):
    """Map normalized observed points to canonical space: X' = X + offset."""
    offset, latent = model.deform_field(x_norm, t_norm, alpha, t_enc=t_enc)
    xp = ad.add(ad.as_var(x_norm), offset)
    return xp, offset, latent


def query_canonical(model: FieldModel, xp_norm, dirs, latent=None):
    """Color and density at canonical points seen from unit directions."""
    d = dirs if isinstance(dirs, np.ndarray) else np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("viewing directions must be unit vectors")
    return model.canonical(xp_norm, model.canonical.encode_dirs(d), latent)


def field_forward(model: FieldModel, x_norm, dirs=None, t_norm=None,
                  alpha: float | None = None, t_enc: np.ndarray | None = None,
                  d_enc: np.ndarray | None = None):
    """(c, sigma) at observed points: canonical field queried at deformed points."""
    xp, offset, latent = deform(model, x_norm, t_norm, alpha, t_enc=t_enc)
    if d_enc is None:
        color, sigma = query_canonical(model, xp, dirs, latent)
    else:
        color, sigma = model.canonical(xp, d_enc, latent)
    return color, sigma, offset
