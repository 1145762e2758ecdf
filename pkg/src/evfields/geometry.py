"""SE(3) poses, screw-axis exp/log, trajectory interpolation, pixel rays.

Camera convention (fixed once for the whole package): right-handed frames,
camera looks along -z in its own frame, image x grows right and image y grows
down.  A Pose maps camera coordinates to world coordinates.  All geometry is
float64; callers that downcast do so on their side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

_ORTHO_TOL = 1e-9


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite components")
    return v


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class ScrewAxis:
    """6-DoF screw axis (r; v): axis-angle rotation part and translation part.

    Rotation angles >= pi are wrapped into [0, pi] at construction (the wrapped
    axis flips when the angle lands in (pi, 2*pi)).
    """

    r: np.ndarray
    v: np.ndarray

    def __init__(self, r, v):
        r = _as_vec3(r, "r")
        v = _as_vec3(v, "v")
        theta = float(np.linalg.norm(r))
        if theta > math.pi:
            # wrap the angle into (-pi, pi] and rescale the axis-angle vector
            wrapped = theta - 2.0 * math.pi * round(theta / (2.0 * math.pi))
            r = r * (wrapped / theta)
        r = r.copy()
        v = v.copy()
        r.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "v", v)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: X_world = rotation @ X_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __init__(self, rotation, translation):
        R = np.asarray(rotation, dtype=np.float64)
        t = _as_vec3(translation, "translation")
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
        if not np.all(np.isfinite(R)):
            raise ValueError("rotation has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ValueError("rotation determinant is not +1")
        R = R.copy()
        R.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def _unchecked(rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        """Skip invariant checks for rotations already known to be orthonormal
        (hot paths constructing from unit quaternions)."""
        p = object.__new__(Pose)
        object.__setattr__(p, "rotation", rotation)
        object.__setattr__(p, "translation", np.asarray(translation, dtype=np.float64))
        return p

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from camera frame to world frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the sensor")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for the same field of view at factor * resolution."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


@dataclass(frozen=True)
class StereoExtrinsics:
    """Fixed rigid transform; maps RGB-camera coordinates to event-camera coordinates."""

    rgb_to_event: Pose

    def event_pose(self, rgb_pose: Pose) -> Pose:
        """Event-camera cam2world pose given the RGB camera's cam2world pose."""
        return compose(rgb_pose, invert(self.rgb_to_event))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __init__(self, origin, direction, near, far):
        o = _as_vec3(origin, "origin")
        d = _as_vec3(direction, "direction")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("direction must be unit length")
        if not (0 <= near < far):
            raise ValueError(f"require 0 <= near < far, got near={near}, far={far}")
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "near", float(near))
        object.__setattr__(self, "far", float(far))

    def point_at(self, s) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(s, dtype=np.float64), self.direction)


def rotation_coefficients(theta_sq: np.ndarray):
    """Rodrigues coefficients A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3.

    Numerically stable in theta_sq = t^2, with series expansions near zero.
    """
    u = np.asarray(theta_sq, dtype=np.float64)
    small = u < 1e-4
    u_safe = np.where(small, 1.0, u)
    t = np.sqrt(u_safe)
    u2 = u * u
    a = np.where(small, 1.0 - u / 6.0 + u2 / 120.0 - u * u2 / 5040.0, np.sin(t) / t)
    b = np.where(small, 0.5 - u / 24.0 + u2 / 720.0 - u * u2 / 40320.0, (1.0 - np.cos(t)) / u_safe)
    c = np.where(small, 1.0 / 6.0 - u / 120.0 + u2 / 5040.0 - u * u2 / 362880.0,
                 (t - np.sin(t)) / (u_safe * t))
    return a, b, c


def exp_screw(s: ScrewAxis) -> Pose:
    """Exponential map R^6 -> SE(3): Rodrigues rotation plus left-Jacobian translation."""
    r, v = s.r, s.v
    theta_sq = float(r @ r)
    a, b, c = rotation_coefficients(np.array(theta_sq))
    K = _skew(r)
    K2 = K @ K
    R = np.eye(3) + float(a) * K + float(b) * K2
    V = np.eye(3) + float(b) * K + float(c) * K2
    return Pose(R, V @ v)


def log_pose(p: Pose) -> ScrewAxis:
    """Inverse of exp_screw.  Rejects rotations with angle >= pi - 1e-6."""
    R = p.rotation
    cos_theta = (np.trace(R) - 1.0) / 2.0
    cos_theta = min(1.0, max(-1.0, cos_theta))
    theta = math.acos(cos_theta)
    if theta >= math.pi - 1e-6:
        raise ValueError("rotation angle too close to pi for a stable logarithm")
    if theta < 1e-10:
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    else:
        w = theta / (2.0 * math.sin(theta)) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
    # V^{-1} = I - K/2 + (1/t^2 - (1+cos t)/(2 t sin t)) K^2
    K = _skew(w)
    K2 = K @ K
    t2 = float(w @ w)
    if t2 < 1e-12:
        coeff = 1.0 / 12.0 + t2 / 720.0
    else:
        t = math.sqrt(t2)
        coeff = (1.0 - 0.5 * t * math.sin(t) / (1.0 - math.cos(t))) / t2
    Vinv = np.eye(3) - 0.5 * K + coeff * K2
    return ScrewAxis(w, Vinv @ p.translation)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose product: (a o b).apply(x) == a.apply(b.apply(x))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    return Pose(p.rotation.T, -(p.rotation.T @ p.translation))


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z) for rotation interpolation


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_log(q: np.ndarray) -> np.ndarray:
    """Log of a unit quaternion; returns a pure-imaginary 3-vector (half axis-angle)."""
    w = min(1.0, max(-1.0, float(q[0])))
    vec = q[1:]
    n = np.linalg.norm(vec)
    if n < 1e-12:
        return np.zeros(3)
    return vec / n * math.atan2(n, w)


def quat_exp(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.array([1.0, v[0], v[1], v[2]])
    return np.concatenate([[math.cos(n)], v / n * math.sin(n)])


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    dot = float(np.dot(q0, q1))
    dot = min(1.0, max(-1.0, dot))
    if abs(dot) > 1.0 - 1e-12:
        out = (1.0 - u) * q0 + u * q1
        return out / np.linalg.norm(out)
    theta = math.acos(dot)
    s = math.sin(theta)
    return (math.sin((1.0 - u) * theta) * q0 + math.sin(u * theta) * q1) / s


def _squad_controls(quats: list[np.ndarray]) -> list[np.ndarray]:
    # end knots are duplicated so boundary segments degrade toward slerp
    n = len(quats)
    ctrl = []
    for i in range(n):
        q_prev = quats[max(i - 1, 0)]
        q_next = quats[min(i + 1, n - 1)]
        qi_inv = quat_conj(quats[i])
        arg = -(quat_log(quat_mul(qi_inv, q_prev)) + quat_log(quat_mul(qi_inv, q_next))) / 4.0
        ctrl.append(quat_mul(quats[i], quat_exp(arg)))
    return ctrl


class PoseInterpolator:
    """Timed-knot pose interpolant with precomputed spline and squad controls.

    Translation: natural cubic spline (linear below 4 knots).  Rotation: squad
    through sign-consistent unit quaternions (slerp below 4 knots).  The
    interpolant reproduces the knots exactly.
    """

    def __init__(self, knots: list[tuple[float, Pose]]):
        if len(knots) < 2:
            raise ValueError("need at least 2 knots")
        self.knots = list(knots)
        self.times = np.array([k[0] for k in knots], dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot timestamps must be strictly increasing")
        self.quats = [quat_from_matrix(k[1].rotation) for k in knots]
        for i in range(1, len(self.quats)):
            if np.dot(self.quats[i - 1], self.quats[i]) < 0:
                self.quats[i] = -self.quats[i]
        trans_knots = np.stack([k[1].translation for k in knots])
        if len(knots) < 4:
            self._spline = None
            self._trans = trans_knots
            self._ctrl = None
        else:
            self._spline = CubicSpline(self.times, trans_knots, axis=0,
                                       bc_type="natural")
            self._trans = trans_knots
            self._ctrl = _squad_controls(self.quats)

    def _rotation(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(max(i, 0), len(self.knots) - 2)
        u = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        if self._ctrl is None:
            return slerp(self.quats[i], self.quats[i + 1], u)
        if u == 0.0:
            return self.quats[i]
        if u == 1.0:
            return self.quats[i + 1]
        outer = slerp(self.quats[i], self.quats[i + 1], u)
        inner = slerp(self._ctrl[i], self._ctrl[i + 1], u)
        return slerp(outer, inner, 2.0 * u * (1.0 - u))

    def pose(self, t: float) -> Pose:
        if t < self.times[0] or t > self.times[-1]:
            raise ValueError(f"t={t} outside knot range "
                             f"[{self.times[0]}, {self.times[-1]}]")
        if self._spline is None:
            i = int(np.searchsorted(self.times, t, side="right") - 1)
            i = min(max(i, 0), len(self.knots) - 2)
            u = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
            trans = (1.0 - u) * self._trans[i] + u * self._trans[i + 1]
        else:
            trans = self._spline(t)
        return Pose._unchecked(quat_to_matrix(self._rotation(t)), trans)

    def poses(self, ts) -> list[Pose]:
        return [self.pose(float(t)) for t in ts]


def interpolate_pose(t: float, knots: list[tuple[float, Pose]]) -> Pose:
    """One-off interpolation; hold a PoseInterpolator for repeated queries."""
    return PoseInterpolator(knots).pose(t)


def pixel_to_ray(x, K: CameraIntrinsics, pose: Pose, near: float, far: float) -> Ray:
    """Backproject a (possibly fractional) pixel to a world-frame ray."""
    px, py = float(x[0]), float(x[1])
    if not (0 <= px <= K.width and 0 <= py <= K.height):
        raise ValueError(f"pixel ({px}, {py}) outside sensor {K.width}x{K.height}")
    d_cam = np.array([(px - K.cx) / K.fx, -(py - K.cy) / K.fy, -1.0])
    d_world = pose.rotation @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(pose.translation, d_world, near, far)


def project_point(X, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """World point -> pixel coordinates.  Requires the point in front of the camera."""
    Xc = pose.rotation.T @ (np.asarray(X, dtype=np.float64) - pose.translation)
    if Xc[2] >= 0:
        raise ValueError("point is behind the camera")
    z = -Xc[2]
    return np.array([K.cx + K.fx * Xc[0] / z, K.cy - K.fy * Xc[1] / z])


# ---------------------------------------------------------------------------
# trajectory file I/O


def save_trajectory(path, knots: list[tuple[float, Pose]]) -> None:
    payload = {"knots": [
        {"t": float(t), "q": quat_from_matrix(p.rotation).tolist(),
         "p": p.translation.tolist()}
        for t, p in knots
    ]}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_trajectory(path) -> list[tuple[float, Pose]]:
    with open(path) as f:
        payload = json.load(f)
    knots = []
    for entry in payload["knots"]:
        q = np.asarray(entry["q"], dtype=np.float64)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"knot quaternion not normalized (|q|={norm})")
        knots.append((float(entry["t"]), Pose(quat_to_matrix(q / norm), entry["p"])))
    times = [t for t, _ in knots]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("trajectory knots must be sorted by strictly increasing t")
    return knots
