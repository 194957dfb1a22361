"""Rotations, camera poses and pinhole ray generation.

Conventions used throughout the package:

* ``CameraPose.rot`` is the camera-to-world rotation and ``CameraPose.trans``
  is the camera centre in world coordinates.
* Cameras look down their local ``-z`` axis with ``+y`` up (OpenGL style).
* Pixel ``(u, v)`` is sampled at its centre, ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

SMALL_ANGLE = 1e-8


def skew(w):
    """Cross-product matrix ``[w]x`` so that ``skew(w) @ v == cross(w, v)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _as_vec3(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite, got {a}")
    return a


def rodrigues(a):
    """Exponential map from an axis-angle vector to a rotation matrix."""
    a = _as_vec3(a, "axis-angle")
    theta2 = float(a @ a)
    theta = np.sqrt(theta2)
    k = skew(a)
    if theta < SMALL_ANGLE:
        # second-order Taylor expansion of sin(t)/t and (1 - cos(t))/t^2
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + (np.sin(theta) / theta) * k + ((1.0 - np.cos(theta)) / theta2) * (k @ k)


def left_jacobian(a):
    """Left Jacobian of SO(3) at ``a``.

    For a small increment ``e``: ``rodrigues(a + e) ~= rodrigues(J e) @ rodrigues(a)``
    with ``J = left_jacobian(a)``, hence
    ``d(rodrigues(a) @ w)/da = -skew(rodrigues(a) @ w) @ J``.
    """
    a = _as_vec3(a, "axis-angle")
    theta2 = float(a @ a)
    theta = np.sqrt(theta2)
    k = skew(a)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta2) * k
        + ((theta - np.sin(theta)) / (theta2 * theta)) * (k @ k)
    )


def log_rotation(r):
    """Inverse of :func:`rodrigues` for angles in ``[0, pi)``."""
    r = np.asarray(r, dtype=np.float64)
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-7:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off r + I
        m = (r + np.eye(3)) / 2.0
        col = int(np.argmax(np.diag(m)))
        axis = m[:, col] / np.sqrt(m[col, col])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


def so3_project(m):
    """Nearest rotation to ``m`` in the Frobenius norm."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise ValueError("so3_project expects a finite 3x3 matrix")
    u, s, vt = np.linalg.svd(m)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateInputError(f"matrix is singular (singular values {s})")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_geodesic(r1, r2):
    """Angle in radians of the relative rotation ``r1^T r2``."""
    c = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def is_rotation(m, tol=1e-9):
    m = np.asarray(m, dtype=np.float64)
    return (
        m.shape == (3, 3)
        and np.linalg.norm(m.T @ m - np.eye(3)) <= tol
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, fov_x_deg):
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2.0)
        return cls(fx, fx, width / 2.0, height / 2.0, width, height)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass
class CameraPose:
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rot = np.array(self.rot, dtype=np.float64).reshape(3, 3)
        self.trans = np.array(self.trans, dtype=np.float64).reshape(3)
        if not is_rotation(self.rot, tol=1e-6):
            raise ValueError("pose rotation is not in SO(3)")
        if not np.all(np.isfinite(self.trans)):
            raise ValueError("pose translation must be finite")

    def copy(self):
        return CameraPose(self.rot.copy(), self.trans.copy())

    def compose_delta(self, delta):
        """Apply a refinement increment: ``(exp(a) R, t + b)``."""
        return CameraPose(rodrigues(delta.a) @ self.rot, self.trans + delta.b)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        right /= np.linalg.norm(right)
        cam_up = np.cross(back, right)
        return cls(np.stack([right, cam_up, back], axis=1), eye)


@dataclass
class PoseDelta:
    """Trainable pose increment: axis-angle ``a`` and translation ``b``."""

    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.a = np.array(self.a, dtype=np.float64).reshape(3)
        self.b = np.array(self.b, dtype=np.float64).reshape(3)
        if np.linalg.norm(self.a) >= np.pi:
            raise ValueError("axis-angle magnitude must be below pi")

    def as_vector(self):
        return np.concatenate([self.a, self.b])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray


def pixel_directions(k, us, vs):
    """Unnormalised camera-frame directions through pixel centres, shape (n, 3)."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    x = (us + 0.5 - k.cx) / k.fx
    y = -(vs + 0.5 - k.cy) / k.fy
    return np.stack([x, y, -np.ones_like(x)], axis=-1)


def rotate_dirs(dirs, rot):
    """``dirs @ rot.T`` written elementwise so results do not depend on batch size."""
    return dirs[:, 0:1] * rot[:, 0] + dirs[:, 1:2] * rot[:, 1] + dirs[:, 2:3] * rot[:, 2]


def camera_rays(pose, k, us, vs):
    """World-space ray origins and unit directions for arrays of pixels."""
    us = np.asarray(us)
    vs = np.asarray(vs)
    if np.any(us < 0) or np.any(us >= k.width) or np.any(vs < 0) or np.any(vs >= k.height):
        raise ValueError("pixel coordinates outside the image")
    d = rotate_dirs(pixel_directions(k, us, vs), pose.rot)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.trans, d.shape).copy()
    return origins, d


def camera_ray(pose, k, u, v):
    origins, dirs = camera_rays(pose, k, np.array([u]), np.array([v]))
    return Ray(origins[0], dirs[0])


def image_pixels(k):
    """Pixel coordinates of a full image in row-major order."""
    vs, us = np.mgrid[0:k.height, 0:k.width]
    return us.ravel(), vs.ravel()
