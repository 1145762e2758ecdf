"""Event and photometric losses plus the void/active batch construction.

The event target couples the nearest frame's intensity with the intermediate
event count: target = mono(I_e(x)) * exp(dL_hat), compared against the
monochrome rendering at the event's own time and PoseNet pose.  dL_hat is
n_e * tau for a scalar threshold, or the signed per-pixel log sum
n_pos * tau_pos - n_neg * tau_neg when a ThresholdMap is available.  Events
preceding their nearest frame use the time-reversed window with negated sign,
so the target is always the brightness transported from the frame to the
event time.  Void samples carry n_e = 0 and anchor to the last frame at or
before their timestamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .events import EventStream, ThresholdMap, luminance, nearest_frame
from .fields import FieldModel, constant_rays, posenet_rays
from .geometry import PoseInterpolator, pixel_to_ray
from .oracle import Dataset
from .render import RenderConfig, render_rays

_LUMA_COL = np.array([[0.2126], [0.7152], [0.0722]])


@dataclass
class EventSupervisionSample:
    x: int
    y: int
    t: float
    frame_index: int
    n_e: int
    delta_l_hat: float
    is_void: bool = False

    def __post_init__(self):
        if self.is_void and (self.n_e != 0 or self.delta_l_hat != 0.0):
            raise ValueError("void samples must carry n_e = 0")


@dataclass
class LossBreakdown:
    event_loss: float
    rgb_loss: float
    lambda_rgb: float
    total: float

    def __post_init__(self):
        expect = self.event_loss + self.lambda_rgb * self.rgb_loss
        if not math.isfinite(expect):
            raise FloatingPointError("loss breakdown has non-finite parts")
        assert abs(self.total - expect) <= 1e-12 * max(1.0, abs(expect))


# ---------------------------------------------------------------------------
# signed counts between a frame and an event


def signed_count(stream: EventStream, x: int, y: int, t_frame: float, t_event: float,
                 thresholds: ThresholdMap | None, tau: float):
    """(n_e, dL_hat) over the window between the frame and the event.

    Events strictly after min(t) up to and including max(t) count; the sign
    flips when the event precedes the frame.
    """
    lo, hi = (t_frame, t_event) if t_event >= t_frame else (t_event, t_frame)
    sign = 1.0 if t_event >= t_frame else -1.0
    times, pols = stream.pixel_events(x, y)
    a = np.searchsorted(times, lo, side="right")
    b = np.searchsorted(times, hi, side="right")
    window = pols[a:b]
    n_pos = int(np.count_nonzero(window > 0))
    n_neg = window.size - n_pos
    n_e = int(sign) * (n_pos - n_neg)
    if thresholds is not None:
        dl = sign * (n_pos * thresholds.tau_pos[y, x] - n_neg * thresholds.tau_neg[y, x])
    else:
        dl = sign * (n_pos - n_neg) * tau
    return n_e, float(dl)


# ---------------------------------------------------------------------------
# batch construction


def active_sample(events: EventStream, deform_maps: list[np.ndarray],
                  frame_times: np.ndarray, batch_size: int, floor_eps: float,
                  rng: np.random.Generator,
                  weights: np.ndarray | None = None) -> np.ndarray:
    """Indices of `batch_size` events drawn without replacement with
    probability proportional to the rendered deformation magnitude at each
    event's pixel in its nearest frame's map (plus floor_eps)."""
    if floor_eps < 0:
        raise ValueError("floor_eps must be non-negative")
    n = len(events)
    if batch_size >= n:
        return np.arange(n)
    if weights is None:
        weights = event_weights(events, deform_maps, frame_times, floor_eps)
    if weights.sum() <= 0:
        weights = np.ones(n)
    # Gumbel top-k == weighted sampling without replacement
    gumbel = -np.log(-np.log(rng.random(n)))
    with np.errstate(divide="ignore"):
        keys = np.where(weights > 0, np.log(weights), -np.inf) + gumbel
    idx = np.argpartition(-keys, batch_size)[:batch_size]
    return np.sort(idx)


def event_weights(events: EventStream, deform_maps: list[np.ndarray],
                  frame_times: np.ndarray, floor_eps: float) -> np.ndarray:
    frame_times = np.asarray(frame_times, dtype=np.float64)
    if len(deform_maps) != frame_times.size:
        raise ValueError("need one deformation map per frame")
    mids = (frame_times[:-1] + frame_times[1:]) / 2.0
    assign = np.searchsorted(mids, events.t, side="left")  # nearest frame, ties earlier
    maps = np.stack(deform_maps)
    return maps[assign, events.y, events.x] + floor_eps


@dataclass
class BatchConfig:
    batch_size: int = 1024
    void_fraction: float = 0.05
    floor_eps_scale: float = 0.1     # floor = scale * mean(map), so no event starves


def build_event_batch(events: EventStream, dataset: Dataset,
                      deform_maps: list[np.ndarray], cfg: BatchConfig,
                      rng: np.random.Generator,
                      weights: np.ndarray | None = None) -> list[EventSupervisionSample]:
    """Active events plus void samples, with per-sample counts filled in."""
    frames = dataset.frames
    frame_times = np.array([f.t for f in frames])
    thresholds = dataset.tau if isinstance(dataset.tau, ThresholdMap) else None
    tau = dataset.tau if not isinstance(dataset.tau, ThresholdMap) else 0.0

    n_void = math.ceil(cfg.void_fraction * cfg.batch_size)
    n_active = cfg.batch_size - n_void if cfg.void_fraction > 0 else cfg.batch_size
    if cfg.void_fraction == 0:
        n_void = 0

    floor_eps = 0.0
    if deform_maps:
        floor_eps = cfg.floor_eps_scale * float(np.mean(np.stack(deform_maps)))
    idx = active_sample(events, deform_maps, frame_times, n_active, floor_eps,
                        rng, weights=weights)
    batch = []
    for i in idx:
        x, y, t = int(events.x[i]), int(events.y[i]), float(events.t[i])
        j = nearest_frame(t, frames)
        n_e, dl = signed_count(events, x, y, frames[j].t, t, thresholds, tau)
        batch.append(EventSupervisionSample(x, y, t, j, n_e, dl))

    if n_void > 0:
        from .events import sample_void

        t0, t1 = dataset.time_range
        t_void = float(rng.uniform(frame_times[0], t1))
        for (x, y, tv) in sample_void(events, frames, t_void, n_void, rng):
            j = int(np.searchsorted(frame_times, tv, side="right") - 1)
            batch.append(EventSupervisionSample(x, y, tv, max(j, 0), 0, 0.0,
                                                is_void=True))
    return batch


# ---------------------------------------------------------------------------
# losses


def _mono(color_var: ad.Var) -> ad.Var:
    return ad.reshape(ad.matmul(color_var, _LUMA_COL), (-1,))


def _reduce(err: ad.Var, loss_norm: str) -> ad.Var:
    if loss_norm == "l2":
        return ad.vmean(ad.square(err))
    if loss_norm == "l1":
        return ad.vmean(ad.absolute(err))
    raise ValueError(f"unknown loss norm {loss_norm!r}")


def event_loss(batch: list[EventSupervisionSample], dataset: Dataset,
               model: FieldModel, render_cfg: RenderConfig,
               rng: np.random.Generator | None = None,
               freeze_posenet: bool = False, loss_norm: str = "l2",
               target_clamp: float = 1.5) -> ad.Var:
    """Mean monochrome discrepancy between frame-transported brightness and
    the rendering at each event, differentiable into all three networks."""
    if not batch:
        return ad.as_var(np.zeros(()))
    times = np.array([s.t for s in batch])
    pixels = np.array([[s.x + 0.5, s.y + 0.5] for s in batch], dtype=np.float64)
    K = dataset.intrinsics

    targets = np.empty(len(batch))
    for i, s in enumerate(batch):
        frame = dataset.frames[s.frame_index]
        base = luminance(frame.image[s.y, s.x])
        targets[i] = min(base * math.exp(s.delta_l_hat), target_clamp)
        if not math.isfinite(targets[i]):
            raise FloatingPointError(f"event target overflow at sample {i}")

    if model.posenet is not None and not freeze_posenet:
        rays = posenet_rays(model.posenet, times, pixels, K, dataset.near, dataset.far)
    elif model.posenet is not None:
        # frozen: same poses (interpolation plus any trained residual), no trace
        traced = posenet_rays(model.posenet, times, pixels, K, dataset.near, dataset.far)
        rays = constant_rays(np.stack([c.value for c in traced.origin_cols], axis=1),
                             np.stack([c.value for c in traced.dir_cols], axis=1),
                             dataset.near, dataset.far)
    else:
        interp = PoseInterpolator([(f.t, dataset.extrinsics.event_pose(f.pose))
                                   for f in dataset.frames])
        origins = np.empty((len(batch), 3))
        dirs = np.empty((len(batch), 3))
        for i, (t, px) in enumerate(zip(times, pixels)):
            ray = pixel_to_ray(px, K, interp.pose(float(t)), dataset.near, dataset.far)
            origins[i] = ray.origin
            dirs[i] = ray.direction
        rays = constant_rays(origins, dirs, dataset.near, dataset.far)

    rendered = render_rays(rays, times, model, render_cfg, rng)
    return _reduce(ad.sub(_mono(rendered.color), targets), loss_norm)


def rgb_loss(frame_batch: list[tuple[int, np.ndarray]], dataset: Dataset,
             model: FieldModel, render_cfg: RenderConfig,
             rng: np.random.Generator | None = None,
             loss_norm: str = "l2") -> ad.Var:
    """Mean color discrepancy on sampled frame pixels, rendered from the
    stored frame poses at the frame timestamps."""
    if not frame_batch:
        return ad.as_var(np.zeros(()))
    K = dataset.intrinsics
    origins, dirs, times, targets = [], [], [], []
    for j, pixels in frame_batch:
        frame = dataset.frames[j]
        pixels = np.asarray(pixels)
        if pixels.size == 0:
            continue
        if pixels[:, 0].max() >= K.width or pixels[:, 1].max() >= K.height \
                or pixels.min() < 0:
            raise ValueError("pixel batch outside sensor bounds")
        centers = pixels + 0.5
        d_cam = np.stack([(centers[:, 0] - K.cx) / K.fx,
                          -(centers[:, 1] - K.cy) / K.fy,
                          -np.ones(len(pixels))], axis=1)
        d_world = d_cam @ frame.pose.rotation.T
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins.append(np.broadcast_to(frame.pose.translation, d_world.shape))
        dirs.append(d_world)
        times.append(np.full(len(pixels), frame.t))
        targets.append(frame.image[pixels[:, 1], pixels[:, 0]])
    rays = constant_rays(np.concatenate(origins), np.concatenate(dirs),
                         dataset.near, dataset.far)
    rendered = render_rays(rays, np.concatenate(times), model, render_cfg, rng)
    return _reduce(ad.sub(rendered.color, np.concatenate(targets)), loss_norm)


def total_loss(event_part, rgb_part, lambda_rgb: float = 10.0):
    """L_total = L_event + lambda * L_rgb.

    Accepts Vars or floats; returns (LossBreakdown, total) where total is a
    Var when both parts carry a trace and a float otherwise.
    """
    def value(part):
        return float(part.value) if isinstance(part, ad.Var) else float(part)

    ev, rv = value(event_part), value(rgb_part)
    for name, v in (("event", ev), ("rgb", rv)):
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} loss is non-finite")
    breakdown = LossBreakdown(event_loss=ev, rgb_loss=rv, lambda_rgb=lambda_rgb,
                              total=ev + lambda_rgb * rv)
    if isinstance(event_part, ad.Var) or isinstance(rgb_part, ad.Var):
        total = ad.add(ad.as_var(event_part), ad.mul(ad.as_var(rgb_part), lambda_rgb))
        return breakdown, total
    return breakdown, breakdown.total
