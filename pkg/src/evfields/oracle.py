"""Analytic deformable scene: moving spheres rendered by exact ray-sphere
intersection.  This is the ground-truth generator for datasets and acceptance
tests; it is derivative-free and shares no code with the learned volume
renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream, FrameRecord, simulate_events
from .geometry import CameraIntrinsics, Pose, PoseInterpolator, StereoExtrinsics


@dataclass
class MovingSphere:
    """Sphere with a static or sinusoidally oscillating center.

    center(t) = center + amplitude * sin(2*pi*cycles*(t-t0)/(t1-t0)), where
    [t0, t1] is the scene time range.
    """

    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    amplitude: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cycles: float = 0.0

    def center_at(self, t: float, time_range: tuple[float, float]) -> np.ndarray:
        base = np.asarray(self.center, dtype=np.float64)
        amp = np.asarray(self.amplitude, dtype=np.float64)
        if self.cycles == 0.0 or not np.any(amp):
            return base
        t0, t1 = time_range
        phase = 2.0 * math.pi * self.cycles * (t - t0) / (t1 - t0)
        return base + amp * math.sin(phase)


@dataclass
class OracleScene:
    spheres: list[MovingSphere]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bounds_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bounds_extent: float = 1.5
    time_range: tuple[float, float] = (0.0, 1.0)
    near: float = 1.0
    far: float = 4.5

    def __post_init__(self):
        center = np.asarray(self.bounds_center)
        for s in self.spheres:
            reach = np.linalg.norm(np.asarray(s.center) - center) \
                + np.linalg.norm(np.asarray(s.amplitude)) + s.radius
            if reach > self.bounds_extent + 1e-9:
                raise ValueError("sphere path leaves the scene bounds")


def default_scene() -> OracleScene:
    """A static body plus a vertically oscillating part (two full cycles)."""
    return OracleScene(
        spheres=[
            MovingSphere(center=(0.0, 0.0, -0.15), radius=0.45,
                         albedo=(0.15, 0.25, 0.75)),
            MovingSphere(center=(0.0, 0.0, 0.55), radius=0.28,
                         albedo=(0.75, 0.2, 0.12),
                         amplitude=(0.0, 0.0, 0.3), cycles=2.0),
        ],
        bounds_center=(0.0, 0.0, 0.2), bounds_extent=1.6,
    )


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """cam2world pose with the camera at `position` looking at `target`."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down_up = np.cross(right, fwd)
    R = np.stack([right, down_up, -fwd], axis=1)
    return Pose(R, pos)


def orbit_trajectory(n_knots: int, radius: float = 2.5, height: float = 0.8,
                     target=(0.0, 0.0, 0.2), time_range=(0.0, 1.0),
                     sweep: float = 2.0 * math.pi) -> list[tuple[float, Pose]]:
    """Circular orbit around `target`, spanning `sweep` radians over the range."""
    t0, t1 = time_range
    knots = []
    for j in range(n_knots):
        frac = j / (n_knots - 1) if n_knots > 1 else 0.0
        ang = sweep * frac
        pos = np.array([target[0] + radius * math.cos(ang),
                        target[1] + radius * math.sin(ang), height])
        knots.append((t0 + frac * (t1 - t0), look_at_pose(pos, target)))
    return knots


def oracle_render(scene: OracleScene, pose: Pose, t: float,
                  K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest-hit render: (HxWx3 color, HxW depth along the ray).

    Flat albedo shading; background pixels carry the scene far depth.
    """
    ys, xs = np.mgrid[0:K.height, 0:K.width]
    d_cam = np.stack([
        (xs.ravel() + 0.5 - K.cx) / K.fx,
        -(ys.ravel() + 0.5 - K.cy) / K.fy,
        -np.ones(xs.size),
    ], axis=1)
    dirs = d_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = pose.translation

    best_t = np.full(xs.size, np.inf)
    color = np.tile(np.asarray(scene.background, dtype=np.float64), (xs.size, 1))
    for sphere in scene.spheres:
        oc = origin - sphere.center_at(t, scene.time_range)
        b = dirs @ oc
        disc = b * b - (oc @ oc - sphere.radius ** 2)
        hit = disc >= 0
        s_hit = -b[hit] - np.sqrt(disc[hit])
        valid = s_hit > 1e-9
        idx = np.flatnonzero(hit)[valid]
        s_val = s_hit[valid]
        closer = s_val < best_t[idx]
        idx, s_val = idx[closer], s_val[closer]
        best_t[idx] = s_val
        color[idx] = sphere.albedo
    depth = np.where(np.isinf(best_t), scene.far, best_t)
    shape = (K.height, K.width)
    return color.reshape(shape + (3,)), depth.reshape(shape)


def default_intrinsics(size: int = 64) -> CameraIntrinsics:
    return CameraIntrinsics(fx=0.9 * size, fy=0.9 * size, cx=size / 2.0,
                            cy=size / 2.0, width=size, height=size)


def default_extrinsics() -> StereoExtrinsics:
    # 1 cm stereo baseline between the RGB and event cameras
    return StereoExtrinsics(rgb_to_event=Pose(np.eye(3), [0.01, 0.0, 0.0]))


@dataclass
class Dataset:
    """Everything the trainer consumes: sparse posed frames plus the stream."""

    frames: list[FrameRecord]
    holdout_frames: list[FrameRecord]
    events: EventStream
    intrinsics: CameraIntrinsics
    extrinsics: StereoExtrinsics
    tau: float | object            # scalar or ThresholdMap
    time_range: tuple[float, float]
    near: float
    far: float
    scene_center: tuple[float, float, float]
    scene_extent: float
    trajectory_gt: list[tuple[float, Pose]] = field(default_factory=list)

    def knots(self) -> list[tuple[float, Pose]]:
        return [(f.t, f.pose) for f in self.frames]

    def with_noisy_poses(self, sigma: float, rng: np.random.Generator) -> "Dataset":
        """Training-side pose corruption: zero-mean translation noise on every
        train frame pose (events and ground truth stay untouched)."""
        noisy = [FrameRecord(f.image, f.t,
                             Pose(f.pose.rotation, f.pose.translation
                                  + rng.normal(0.0, sigma, 3)))
                 for f in self.frames]
        return Dataset(noisy, self.holdout_frames, self.events, self.intrinsics,
                       self.extrinsics, self.tau, self.time_range, self.near,
                       self.far, self.scene_center, self.scene_extent,
                       self.trajectory_gt)

    def trajectory_extent(self) -> float:
        pts = np.stack([p.translation for _, p in self.knots()])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def generate_dataset(scene: OracleScene, trajectory: list[tuple[float, Pose]],
                     frame_count: int, event_supersample: int = 50,
                     tau: float = 0.1, rng: np.random.Generator | None = None,
                     intrinsics: CameraIntrinsics | None = None,
                     extrinsics: StereoExtrinsics | None = None,
                     holdout: bool = True) -> Dataset:
    """Render sparse RGB frames along the trajectory and simulate the event
    stream from a dense event-camera render of the same motion.

    Training frames sit at `frame_count` uniform times; holdout frames at the
    midpoints between them.  Images are quantized through float32 so that a
    saved and reloaded dataset reproduces them exactly.
    """
    if frame_count < 2:
        raise ValueError("need at least 2 frames")
    if event_supersample < 10:
        raise ValueError("event supersampling must be at least 10x")
    K = intrinsics or default_intrinsics()
    ext = extrinsics or default_extrinsics()
    t0, t1 = trajectory[0][0], trajectory[-1][0]
    interp = PoseInterpolator(trajectory)

    def rgb_pose(t):
        return interp.pose(float(t))

    def make_frames(times):
        out = []
        for t in times:
            pose = rgb_pose(t)
            img, _ = oracle_render(scene, pose, t, K)
            out.append(FrameRecord(img.astype(np.float32).astype(np.float64), t, pose))
        return out

    train_times = np.linspace(t0, t1, frame_count)
    frames = make_frames(train_times)
    holdout_frames = make_frames((train_times[:-1] + train_times[1:]) / 2.0) \
        if holdout else []

    dense_times = np.linspace(t0, t1, frame_count * event_supersample)
    dense = np.empty((dense_times.size, K.height, K.width, 3))
    for i, t in enumerate(dense_times):
        evt_pose = ext.event_pose(rgb_pose(t))
        dense[i], _ = oracle_render(scene, evt_pose, t, K)
    events = simulate_events(dense, dense_times, tau_pos=tau, tau_neg=tau)

    gt_times = dense_times[::max(1, dense_times.size // 400)]
    gt = [(float(t), rgb_pose(t)) for t in gt_times]
    return Dataset(frames, holdout_frames, events, K, ext, tau, (t0, t1),
                   scene.near, scene.far, scene.bounds_center, scene.bounds_extent,
                   trajectory_gt=gt)
