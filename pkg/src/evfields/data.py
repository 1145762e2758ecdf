"""Dataset serialization.

A dataset directory holds frame images (PFM linear + PPM preview), the
training-pose trajectory JSON, the ground-truth trajectory JSON, the EVT1
event file, an optional threshold map, and ``manifest.json`` tying them
together:

    {"frames": [{"image": ..., "t": ..., "q": [w,x,y,z], "p": [x,y,z],
                 "split": "train"|"holdout"}, ...],
     "trajectory": path, "events": path,
     "intrinsics": {fx, fy, cx, cy, width, height},
     "extrinsics": {"rgb_to_event": {"q": ..., "p": ...}},
     "tau": scalar | {"map": path},
     "time_range": [t0, t1],
     "near": ..., "far": ...,
     "scene_center": [...], "scene_extent": ...,
     "trajectory_gt": path}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .events import EventStream, FrameRecord, ThresholdMap, load_events, save_events
from .geometry import (
    CameraIntrinsics,
    Pose,
    StereoExtrinsics,
    load_trajectory,
    quat_from_matrix,
    quat_to_matrix,
    save_trajectory,
)
from .imgio import load_pfm, save_pfm, save_ppm
from .oracle import Dataset


def _pose_to_json(p: Pose) -> dict:
    return {"q": quat_from_matrix(p.rotation).tolist(), "p": p.translation.tolist()}


def _pose_from_json(d: dict) -> Pose:
    q = np.asarray(d["q"], dtype=np.float64)
    return Pose(quat_to_matrix(q / np.linalg.norm(q)), d["p"])


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames_meta = []
    for split, frames in (("train", dataset.frames), ("holdout", dataset.holdout_frames)):
        for i, f in enumerate(frames):
            name = f"frame_{split}_{i:04d}"
            save_pfm(out / f"{name}.pfm", f.image)
            save_ppm(out / f"{name}.ppm", f.image)
            frames_meta.append({"image": f"{name}.pfm", "t": f.t,
                                **_pose_to_json(f.pose), "split": split})
    save_trajectory(out / "trajectory.json", dataset.knots())
    save_trajectory(out / "trajectory_gt.json", dataset.trajectory_gt or dataset.knots())
    save_events(out / "events.evt1", dataset.events)

    if isinstance(dataset.tau, ThresholdMap):
        stacked = np.stack([dataset.tau.tau_pos, dataset.tau.tau_neg,
                            np.zeros_like(dataset.tau.tau_pos)], axis=2)
        save_pfm(out / "thresholds.pfm", stacked)
        tau_entry = {"map": "thresholds.pfm"}
    else:
        tau_entry = float(dataset.tau)

    K = dataset.intrinsics
    manifest = {
        "frames": frames_meta,
        "trajectory": "trajectory.json",
        "events": "events.evt1",
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                       "width": K.width, "height": K.height},
        "extrinsics": {"rgb_to_event": _pose_to_json(dataset.extrinsics.rgb_to_event)},
        "tau": tau_entry,
        "time_range": list(dataset.time_range),
        "near": dataset.near,
        "far": dataset.far,
        "scene_center": list(dataset.scene_center),
        "scene_extent": dataset.scene_extent,
        "trajectory_gt": "trajectory_gt.json",
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return out / "manifest.json"


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    root = path.parent
    with open(path) as f:
        manifest = json.load(f)

    frames, holdout = [], []
    for meta in manifest["frames"]:
        img = load_pfm(root / meta["image"])
        rec = FrameRecord(img, float(meta["t"]), _pose_from_json(meta))
        (holdout if meta.get("split") == "holdout" else frames).append(rec)

    ki = manifest["intrinsics"]
    K = CameraIntrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                         width=ki["width"], height=ki["height"])
    ext = StereoExtrinsics(rgb_to_event=_pose_from_json(manifest["extrinsics"]["rgb_to_event"]))
    events = load_events(root / manifest["events"])

    tau_entry = manifest["tau"]
    if isinstance(tau_entry, dict):
        stacked = load_pfm(root / tau_entry["map"])
        tau = ThresholdMap(stacked[:, :, 0], stacked[:, :, 1])
    else:
        tau = float(tau_entry)

    gt = load_trajectory(root / manifest["trajectory_gt"]) \
        if "trajectory_gt" in manifest else []
    return Dataset(frames=frames, holdout_frames=holdout, events=events,
                   intrinsics=K, extrinsics=ext, tau=tau,
                   time_range=tuple(manifest["time_range"]),
                   near=float(manifest["near"]), far=float(manifest["far"]),
                   scene_center=tuple(manifest["scene_center"]),
                   scene_extent=float(manifest["scene_extent"]),
                   trajectory_gt=gt)
