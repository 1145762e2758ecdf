"""Training loop: batch assembly, joint loss, optimization, coarse-to-fine
schedule, checkpointing and JSON-lines logging.

One step executes, in order: (1) refresh the rendered warp-magnitude maps if
due, (2) sample active events, (3) sample void events, (4) obtain per-event
poses, (5) render the event rays, (6) event loss, (7) sample and render RGB
pixel rays, (8) photometric loss, (9) total loss; then a single combined
backward pass and one Adam update with the learning-rate and window
schedules.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .events import ThresholdMap
from .fields import FieldConfig, FieldModel, TimeNormalizer
from .geometry import Pose, quat_from_matrix, quat_to_matrix
from .losses import (
    BatchConfig,
    build_event_batch,
    event_loss,
    event_weights,
    rgb_loss,
    total_loss,
)
from .metrics import mse_psnr, ssim
from .oracle import Dataset
from .render import RenderConfig, render_deformation_map, render_image


@dataclass
class TrainConfig:
    iterations: int = 20_000
    rgb_batch: int = 1024
    event_batch: int = 1024
    lr: float = 5e-4
    lr_final: float = 5e-5
    posenet_lr_scale: float = 0.1
    lambda_rgb: float = 10.0
    alpha_start: float = 0.0
    alpha_ramp_end: int = 10_000     # iteration at which the window is fully open
    void_fraction: float = 0.05
    refresh_interval: int = 500
    seed: int = 0
    snapshot_every: int = 0          # 0 disables periodic snapshots
    freeze_posenet: bool = False
    loss_norm: str = "l2"
    target_clamp: float = 1.5
    n_coarse: int = 64
    n_fine: int = 128
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    deform_map_scale: float = 0.25
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if min(self.iterations, self.rgb_batch) <= 0 or self.event_batch < 0:
            raise ValueError("iteration and batch counts must be positive")
        if self.alpha_ramp_end < 0 or self.alpha_start < 0:
            raise ValueError("alpha schedule must be monotone from a non-negative start")

    @staticmethod
    def small(**overrides) -> "TrainConfig":
        base = dict(rgb_batch=96, event_batch=96, n_coarse=32, n_fine=0,
                    field=FieldConfig.small(), alpha_ramp_end=4000)
        base.update(overrides)
        return TrainConfig(**base)

    def render_config(self, alpha: float | None) -> RenderConfig:
        return RenderConfig(n_coarse=self.n_coarse, n_fine=self.n_fine, jitter=True,
                            background=self.background, alpha=alpha)


def alpha_schedule(iteration: int, cfg: TrainConfig, l_max: int) -> float:
    """Linear ramp from alpha_start to L over [0, alpha_ramp_end], clamped."""
    if cfg.alpha_ramp_end <= 0:
        return float(l_max)
    frac = min(max(iteration / cfg.alpha_ramp_end, 0.0), 1.0)
    return float(cfg.alpha_start + (l_max - cfg.alpha_start) * frac)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    frac = min(iteration / max(cfg.iterations, 1), 1.0)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


class TrainState:
    """Model, optimizer moments, RNG, iteration counter and cached maps."""

    def __init__(self, model: FieldModel, config: TrainConfig, dataset: Dataset):
        self.model = model
        self.config = config
        self.iteration = 0
        self.rng = np.random.default_rng(config.seed)
        self.deform_maps: list[np.ndarray] = []
        self.event_weight_cache: np.ndarray | None = None
        params = model.params(include_posenet=not config.freeze_posenet)
        self.params = params
        self.opt = ad.Adam(params)
        self.lr_scales = [config.posenet_lr_scale if p.name.startswith("posenet") else 1.0
                          for p in params]
        self._frame_times = np.array([f.t for f in dataset.frames])

    def current_alpha(self) -> float:
        return alpha_schedule(self.iteration, self.config, self.model.cfg.l_spatial)


def make_model(dataset: Dataset, config: TrainConfig,
               with_posenet: bool = True) -> FieldModel:
    """Model bound to the dataset's time range, bounds, and event-camera knots."""
    t0, t1 = dataset.time_range
    normalizer = TimeNormalizer(t0, t1)
    knots = None
    if with_posenet:
        knots = [(f.t, dataset.extrinsics.event_pose(f.pose)) for f in dataset.frames]
    return FieldModel(config.field, normalizer, dataset.scene_center,
                      dataset.scene_extent, np.random.default_rng(config.seed + 1),
                      knots=knots)


def _refresh_deform_maps(state: TrainState, dataset: Dataset) -> list[np.ndarray]:
    """Warp-magnitude maps for every train frame, rendered at reduced scale."""
    cfg = state.config
    scale = cfg.deform_map_scale
    K = dataset.intrinsics
    small_k = K.scaled(scale)
    factor_y = K.height // small_k.height
    factor_x = K.width // small_k.width
    render_cfg = RenderConfig(n_coarse=max(8, cfg.n_coarse // 2), n_fine=0,
                              jitter=False, background=cfg.background,
                              alpha=state.current_alpha(), compute_deform_mag=True)
    maps = []
    for f in dataset.frames:
        mag = render_deformation_map(f.pose, f.t, small_k, state.model, render_cfg,
                                     dataset.near, dataset.far, seed=cfg.seed)
        maps.append(np.repeat(np.repeat(mag, factor_y, axis=0), factor_x, axis=1))
    return maps


def train_step(state: TrainState, dataset: Dataset,
               trace: list | None = None):
    """One optimization step; returns (state, LossBreakdown)."""
    cfg = state.config
    note = trace.append if trace is not None else (lambda _label: None)

    if cfg.event_batch > 0 and state.iteration % cfg.refresh_interval == 0:
        state.deform_maps = _refresh_deform_maps(state, dataset)
        state.event_weight_cache = None
        note("render_warp_maps")
    alpha = state.current_alpha()
    render_cfg = cfg.render_config(alpha)

    ev_var = 0.0
    if cfg.event_batch > 0:
        if state.event_weight_cache is None and state.deform_maps:
            floor = BatchConfig().floor_eps_scale * float(np.mean(np.stack(state.deform_maps)))
            state.event_weight_cache = event_weights(dataset.events, state.deform_maps,
                                                     state._frame_times, floor)
        batch_cfg = BatchConfig(batch_size=cfg.event_batch,
                                void_fraction=cfg.void_fraction)
        batch = build_event_batch(dataset.events, dataset, state.deform_maps,
                                  batch_cfg, state.rng,
                                  weights=state.event_weight_cache)
        note("sample_active_events")
        note("sample_void_events")
        note("posenet_event_poses")
        ev_var = event_loss(batch, dataset, state.model, render_cfg, state.rng,
                            freeze_posenet=cfg.freeze_posenet,
                            loss_norm=cfg.loss_norm, target_clamp=cfg.target_clamp)
        note("render_event_rays")
        note("event_loss")

    n_frames = len(dataset.frames)
    K = dataset.intrinsics
    picks = state.rng.integers(0, n_frames * K.width * K.height, size=cfg.rgb_batch)
    frame_batch = []
    for j in range(n_frames):
        mine = picks[picks // (K.width * K.height) == j] % (K.width * K.height)
        if mine.size:
            frame_batch.append((j, np.stack([mine % K.width, mine // K.width], axis=1)))
    note("sample_rgb_rays")
    rgb_var = rgb_loss(frame_batch, dataset, state.model, render_cfg, state.rng,
                       loss_norm=cfg.loss_norm)
    note("rgb_loss")

    breakdown, total_var = total_loss(ev_var, rgb_var, cfg.lambda_rgb)
    note("total_loss")

    for p in state.params:
        p.zero_grad()
    ad.backward(total_var)
    state.iteration += 1
    state.opt.step(lr_schedule(state.iteration, cfg), state.iteration,
                   lr_scales=state.lr_scales)
    return state, breakdown


def fit(dataset: Dataset, config: TrainConfig, out_dir=None,
        state: TrainState | None = None, log_every: int = 100,
        quiet: bool = True) -> TrainState:
    """Run the full training loop, logging JSON lines and snapshots."""
    if state is None:
        model = make_model(dataset, config, with_posenet=not config.freeze_posenet
                           or config.posenet_lr_scale > 0)
        state = TrainState(model, config, dataset)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a")
    t_start = time.time()
    try:
        while state.iteration < config.iterations:
            try:
                state, breakdown = train_step(state, dataset)
            except FloatingPointError:
                if out is not None:
                    save_state(state, out / "diagnostic.dnck")
                raise
            if log_file is not None and (state.iteration % log_every == 0
                                         or state.iteration == config.iterations):
                entry = {"iteration": state.iteration,
                         "event_loss": breakdown.event_loss,
                         "rgb_loss": breakdown.rgb_loss,
                         "total": breakdown.total,
                         "alpha": state.current_alpha(),
                         "lr": lr_schedule(state.iteration, config),
                         "wall_time": time.time() - t_start}
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if not quiet and state.iteration % log_every == 0:
                print(f"iter {state.iteration}: total {breakdown.total:.5f}")
            if out is not None and config.snapshot_every > 0 \
                    and state.iteration % config.snapshot_every == 0:
                save_state(state, out / f"snapshot_{state.iteration:07d}.dnck")
        if out is not None:
            save_state(state, out / "state.dnck")
            with open(out / "config.json", "w") as f:
                json.dump(config_to_json(config), f, indent=1)
    finally:
        if log_file is not None:
            log_file.close()
    return state


# ---------------------------------------------------------------------------
# checkpointing


def _rng_state_tensor(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    vals = []
    for key in ("state", "inc"):
        v = int(st["state"][key])
        vals.extend((v >> (32 * k)) & 0xFFFFFFFF for k in range(4))
    vals.append(int(st["has_uint32"]))
    vals.append(int(st["uinteger"]))
    return np.array(vals, dtype=np.float64)


def _rng_from_tensor(arr: np.ndarray) -> np.random.Generator:
    def limbs(vals):
        return sum(int(v) << (32 * k) for k, v in enumerate(vals))

    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": limbs(arr[0:4]), "inc": limbs(arr[4:8])},
        "has_uint32": int(arr[8]),
        "uinteger": int(arr[9]),
    }
    return rng


def save_state(state: TrainState, path) -> None:
    tensors = dict(state.model.named_tensors())
    for p, m, v in zip(state.opt.params, state.opt.m, state.opt.v):
        tensors[f"__adam_m__.{p.name}"] = m
        tensors[f"__adam_v__.{p.name}"] = v
    tensors["__meta__.iteration"] = np.array(float(state.iteration))
    tensors["__meta__.time_range"] = np.array([state.model.normalizer.t_min,
                                               state.model.normalizer.t_max])
    tensors["__meta__.scene"] = np.concatenate([state.model.scene_center,
                                                [state.model.scene_extent]])
    tensors["__rng__.pcg64"] = _rng_state_tensor(state.rng)
    if state.deform_maps:
        tensors["__maps__.deform"] = np.stack(state.deform_maps)
    if state.model.posenet is not None:
        rows = []
        for t, pose in state.model.posenet.knots:
            rows.append(np.concatenate([[t], quat_from_matrix(pose.rotation),
                                        pose.translation]))
        tensors["__meta__.posenet_knots"] = np.stack(rows)
    ad.save_checkpoint(path, tensors)


def load_state(path, dataset: Dataset, config: TrainConfig) -> TrainState:
    tensors = ad.load_checkpoint(path)
    has_posenet = "__meta__.posenet_knots" in tensors
    model = make_model(dataset, config, with_posenet=has_posenet)
    if has_posenet:
        knots = []
        for row in tensors["__meta__.posenet_knots"]:
            q = row[1:5]
            knots.append((float(row[0]), Pose(quat_to_matrix(q / np.linalg.norm(q)),
                                              row[5:8])))
        model.posenet.knots = knots
    model.load_tensors(tensors)
    state = TrainState(model, config, dataset)
    state.iteration = int(tensors["__meta__.iteration"])
    state.rng = _rng_from_tensor(tensors["__rng__.pcg64"])
    for i, p in enumerate(state.opt.params):
        state.opt.m[i] = tensors[f"__adam_m__.{p.name}"].copy()
        state.opt.v[i] = tensors[f"__adam_v__.{p.name}"].copy()
    if "__maps__.deform" in tensors:
        state.deform_maps = list(tensors["__maps__.deform"])
    return state


def config_to_json(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    return out


def config_from_json(data: dict) -> TrainConfig:
    data = dict(data)
    if "field" in data and isinstance(data["field"], dict):
        data["field"] = FieldConfig(**data["field"])
    if "background" in data:
        data["background"] = tuple(data["background"])
    return TrainConfig(**data)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_checkpoint(state: TrainState, dataset: Dataset,
                        frames=None, seed: int = 1234,
                        save_renders_to=None) -> dict:
    """Render held-out (pose, time) pairs and report image metrics."""
    if frames is None:
        frames = dataset.holdout_frames
    train_times = {f.t for f in dataset.frames}
    if any(f.t in train_times for f in frames) and frames is not dataset.frames:
        raise ValueError("holdout frames overlap the training set")
    cfg = state.config.render_config(state.current_alpha())
    cfg.jitter = False
    per_frame = []
    renders = []
    for i, f in enumerate(frames):
        color, _, _ = render_image(f.pose, f.t, dataset.intrinsics, state.model,
                                   cfg, dataset.near, dataset.far, seed=seed)
        renders.append(color)
        mse, psnr = mse_psnr(color, f.image)
        per_frame.append({"t": f.t, "mse": mse, "mse_scaled_1e3": mse * 1e3,
                          "psnr": psnr, "ssim": ssim(color, f.image)})
    report = {
        "iteration": state.iteration,
        "count": len(per_frame),
        "mse": float(np.mean([e["mse"] for e in per_frame])) if per_frame else 0.0,
        "psnr": float(np.mean([e["psnr"] for e in per_frame])) if per_frame else 0.0,
        "ssim": float(np.mean([e["ssim"] for e in per_frame])) if per_frame else 0.0,
        "per_frame": per_frame,
    }
    report["mse_scaled_1e3"] = report["mse"] * 1e3
    if save_renders_to is not None:
        from .imgio import save_pfm, save_ppm

        outdir = Path(save_renders_to)
        outdir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(renders):
            save_pfm(outdir / f"eval_{i:04d}.pfm", img)
            save_ppm(outdir / f"eval_{i:04d}.ppm", img)
    return report
