"""Rigid-body math, pinhole camera model and ray construction.

Conventions used everywhere in this package:

* A :class:`Pose` maps points from its local frame into the parent frame,
  ``p_parent = R @ p_local + t``.  Camera poses are camera-to-world.
* A twist is a 6-vector ``[tx, ty, tz, wx, wy, wz]`` (translation first,
  rotation second), applied as a *left* increment ``exp(xi) * T``.
* Depth is z-depth along the optical axis, not distance along the ray.
* Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, InvalidDepth

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass
class Pose:
    """Rigid transform in SE(3): 3x3 rotation plus 3-vector translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3) into the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())

    def renormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) via SVD."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return Pose(r, self.translation.copy())


def compose(a: Pose, b: Pose) -> Pose:
    """a * b: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt.copy(), -rt @ p.translation)


def exp_se3(xi: np.ndarray) -> Pose:
    """Closed-form exponential map from a 6-vector twist to a pose.

    Uses the series expansion of the Rodrigues coefficients below an
    angle of 1e-8 rad to stay finite.
    """
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, omega = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    k = skew(omega)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0          # sin(t)/t
        b = 0.5 - t2 / 24.0         # (1-cos(t))/t^2
        c = 1.0 / 6.0 - t2 / 120.0  # (t-sin(t))/t^3
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / (theta ** 3)
    rot = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return Pose(rot, v @ rho)


def log_se3(p: Pose) -> np.ndarray:
    """Inverse of :func:`exp_se3`.

    Raises :class:`AngleNearPi` when the rotation angle is within 1e-6
    of pi, where the axis is no longer well conditioned.
    """
    r = p.rotation
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < _SMALL_ANGLE:
        omega = vee  # sin(t) ~ t
        k = skew(omega)
        v_inv = np.eye(3) - 0.5 * k + (1.0 / 12.0) * (k @ k)
    else:
        omega = theta / np.sin(theta) * vee
        k = skew(omega)
        coeff = (1.0 / (theta * theta)) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta)
        )
        v_inv = np.eye(3) - 0.5 * k + coeff * (k @ k)
    rho = v_inv @ p.translation
    return np.concatenate([rho, omega])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

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
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def backproject(pixel, depth: float, k: Intrinsics) -> np.ndarray:
    """Camera-frame point for a pixel at the given z-depth."""
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepth(f"depth {depth!r} must be finite and positive")
    u, v = pixel
    return depth * np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])


def backproject_batch(us: np.ndarray, vs: np.ndarray, depths: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Vectorized backprojection; caller guarantees positive depths."""
    d = np.asarray(depths, dtype=np.float64)
    x = (np.asarray(us, dtype=np.float64) - k.cx) / k.fx
    y = (np.asarray(vs, dtype=np.float64) - k.cy) / k.fy
    return np.stack([x * d, y * d, d], axis=-1)


def project(point: np.ndarray, k: Intrinsics) -> tuple[float, float]:
    """Pixel coordinates of a camera-frame point with positive z."""
    p = np.asarray(point, dtype=np.float64)
    if p[2] <= 0:
        raise InvalidDepth("point behind the camera")
    return (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)


def pixel_ray(pixel, k: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray through a pixel: (origin, unit direction)."""
    u, v = pixel
    d = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    d /= np.linalg.norm(d)
    return pose.translation.copy(), pose.rotation @ d


def pixel_rays(us: np.ndarray, vs: np.ndarray, k: Intrinsics, pose: Pose):
    """Batched :func:`pixel_ray`.

    Returns (origins (N,3), unit directions (N,3), ray_scale (N,)) where
    ray_scale converts z-depth into distance along the ray.
    """
    x = (np.asarray(us, dtype=np.float64) - k.cx) / k.fx
    y = (np.asarray(vs, dtype=np.float64) - k.cy) / k.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    scale = np.linalg.norm(d, axis=-1)
    d /= scale[:, None]
    dirs = d @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, scale


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Quaternion (x, y, z, w) from a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a quaternion in (x, y, z, w) order."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def twist_gradient(points: np.ndarray, point_grads: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. a left twist increment at zero.

    ``points`` are the points the increment acts on, expressed in the frame
    the increment lives in; ``point_grads`` the loss gradients w.r.t. those
    points in the same frame.  d(exp(xi) p)/d(xi) at xi = 0 is [I, -skew(p)].
    """
    g_t = point_grads.sum(axis=0)
    g_w = np.cross(points, point_grads).sum(axis=0)
    return np.concatenate([g_t, g_w])
