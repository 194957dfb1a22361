"""Dense voxel radiance field, volume rendering and analytic gradients.

The field stores four unconstrained values per lattice point: a raw density
(``sigma = softplus(raw)``) and three raw colour channels
(``c = sigmoid(raw)``).  Lattice points span the bounding box exactly, raw
values are interpolated trilinearly and activated afterwards.  Points outside
the box have zero density and black colour.

Parameters live in one ``(n_voxels, 4)`` array indexed x-fastest:
``flat = ix + nx * (iy + ny * iz)``; column 0 is density, columns 1-3 colour.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import (
    camera_ray,
    camera_rays,
    image_pixels,
    left_jacobian,
    pixel_directions,
    rodrigues,
)

CHECKPOINT_MAGIC = b"ILNF"
CHECKPOINT_VERSION = 1

# corner offsets (dx, dy, dz) of the eight cell corners, x varying fastest
_CORNER_DX = np.array([0, 1, 0, 1, 0, 1, 0, 1])
_CORNER_DY = np.array([0, 0, 1, 1, 0, 0, 1, 1])
_CORNER_DZ = np.array([0, 0, 0, 0, 1, 1, 1, 1])


def _axis_weights(frac):
    """Per-axis linear weights ``(Q, 2)`` for x, y and z."""
    return [np.stack([1.0 - frac[:, a], frac[:, a]], axis=1) for a in range(3)]


def trilinear_weights(frac):
    wx, wy, wz = _axis_weights(frac)
    return wx[:, _CORNER_DX] * wy[:, _CORNER_DY] * wz[:, _CORNER_DZ]


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class VoxelRadianceField:
    def __init__(self, resolution, bounds_min, bounds_max, params=None):
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError("resolution needs at least 2 lattice points per axis")
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64).reshape(3)
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("bounds must have positive extent")
        nx, ny, nz = self.resolution
        if params is None:
            params = np.zeros((nx * ny * nz, 4))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (nx * ny * nz, 4):
            raise ValueError(f"params must have shape {(nx * ny * nz, 4)}, got {params.shape}")
        self.params = params
        self.cell = (self.bounds_max - self.bounds_min) / (np.array(self.resolution) - 1)

    @classmethod
    def constant(cls, resolution, bounds_min, bounds_max, density_raw=0.0, color_raw=0.0):
        f = cls(resolution, bounds_min, bounds_max)
        f.params[:, 0] = density_raw
        f.params[:, 1:] = color_raw
        return f

    @property
    def n_voxels(self):
        return self.params.shape[0]

    @property
    def density_raw(self):
        """Raw densities as an ``(nx, ny, nz)`` view."""
        nx, ny, nz = self.resolution
        return self.params[:, 0].reshape(nz, ny, nx).transpose(2, 1, 0)

    @property
    def color_raw(self):
        nx, ny, nz = self.resolution
        return self.params[:, 1:].reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)

    def flat_index(self, ix, iy, iz):
        nx, ny, _ = self.resolution
        return ix + nx * (iy + ny * iz)

    def lattice_point(self, ix, iy, iz):
        return self.bounds_min + self.cell * np.array([ix, iy, iz], dtype=np.float64)

    def lattice_points(self):
        """World coordinates of every lattice point, in flat order."""
        nx, ny, nz = self.resolution
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        return self.bounds_min + idx * self.cell

    def copy(self):
        return VoxelRadianceField(self.resolution, self.bounds_min, self.bounds_max,
                                  self.params.copy())

    def quantized(self):
        """Copy with parameters rounded through float32, as a checkpoint stores them."""
        return VoxelRadianceField(self.resolution, self.bounds_min, self.bounds_max,
                                  self.params.astype(np.float32).astype(np.float64))

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.resolution, dtype=np.int64).tobytes())
        h.update(self.bounds_min.tobytes())
        h.update(self.bounds_max.tobytes())
        h.update(np.ascontiguousarray(self.params).tobytes())
        return h.hexdigest()

    # -- interpolation ------------------------------------------------------

    def locate(self, pts):
        """Cell lookup for world points ``(P, 3)``.

        Returns the indices of points inside the bounds, their eight corner
        ids ``(Q, 8)`` and fractional cell offsets ``(Q, 3)``.
        """
        n = np.array(self.resolution)
        u = (pts - self.bounds_min) / self.cell
        inside = np.flatnonzero(np.all((u >= 0.0) & (u <= n - 1), axis=-1))
        u = u[inside]
        i0 = np.minimum(u.astype(np.int64), n - 2)  # u >= 0, so truncation is floor
        frac = u - i0
        nx, ny, _ = self.resolution
        base = i0[:, 0] + nx * (i0[:, 1] + ny * i0[:, 2])
        offsets = _CORNER_DX + nx * (_CORNER_DY + ny * _CORNER_DZ)
        return inside, base[:, None] + offsets[None, :], frac

    def interpolate_raw(self, pts):
        """Trilinearly interpolated raw values ``(P, 4)`` and the inside mask."""
        inside, ids, frac = self.locate(pts)
        raw = np.zeros((len(pts), 4))
        vals = np.take(self.params, ids, axis=0)
        raw[inside] = np.matmul(trilinear_weights(frac)[:, None, :], vals)[:, 0]
        mask = np.zeros(len(pts), dtype=bool)
        mask[inside] = True
        return mask, raw

    def query(self, pts):
        """Density ``(P,)`` and colour ``(P, 3)`` at world points ``(P, 3)``."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        inside, ids, frac = self.locate(pts)
        vals = np.take(self.params, ids, axis=0)
        raw = np.matmul(trilinear_weights(frac)[:, None, :], vals)[:, 0]
        sigma = np.zeros(len(pts))
        color = np.zeros((len(pts), 3))
        sigma[inside] = softplus(raw[:, 0])
        color[inside] = sigmoid(raw[:, 1:])
        return sigma, color

    # -- checkpoint ---------------------------------------------------------

    def save(self, path):
        """Write the binary checkpoint (little endian, f32 parameters)."""
        header = CHECKPOINT_MAGIC + struct.pack("<I3I", CHECKPOINT_VERSION, *self.resolution)
        header += struct.pack("<6d", *self.bounds_min, *self.bounds_max)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.params[:, 0].astype("<f4").tobytes())
            fh.write(self.params[:, 1:].astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        version, nx, ny, nz = struct.unpack_from("<I3I", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        bounds = struct.unpack_from("<6d", data, 20)
        nvox = nx * ny * nz
        offset = 20 + 48
        expected = offset + 16 * nvox
        if len(data) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
        density = np.frombuffer(data, dtype="<f4", count=nvox, offset=offset)
        color = np.frombuffer(data, dtype="<f4", count=3 * nvox, offset=offset + 4 * nvox)
        params = np.empty((nvox, 4))
        params[:, 0] = density
        params[:, 1:] = color.reshape(nvox, 3)
        return cls((nx, ny, nz), bounds[:3], bounds[3:], params)


def field_query(f, x):
    sigma, color = f.query(np.asarray(x, dtype=np.float64).reshape(1, 3))
    return float(sigma[0]), color[0]


@dataclass
class RaySamples:
    ts: np.ndarray  # (M,)
    points: np.ndarray  # (M, 3)


@dataclass
class RenderResult:
    color: np.ndarray  # (3,)
    weights: np.ndarray  # (M,) alpha_i * (1 - delta_i)
    transmittance: np.ndarray  # (M,) alpha_i


def sample_depths(near, far, m):
    if not (0 <= near < far) or m < 2:
        raise ValueError(f"need 0 <= near < far and m >= 2 (got {near}, {far}, {m})")
    return near + (np.arange(m) + 0.5) * (far - near) / m


def sample_ray(ray, near, far, m):
    ts = sample_depths(near, far, m)
    return RaySamples(ts, ray.origin[None, :] + ts[:, None] * ray.dir[None, :])


def segment_lengths(ts):
    """Gaps ``z_i - z_{i-1}`` with the first gap copied from the second."""
    gaps = np.diff(ts, axis=-1)
    return np.concatenate([gaps[..., :1], gaps], axis=-1)


def composite(sigma, color, gaps):
    """Volume rendering along rays: sigma (R, M), color (R, M, 3), gaps (R, M)."""
    tau = sigma * gaps
    delta = np.exp(-tau)
    # alpha_i = prod_{j<i} delta_j, as exp of an exclusive cumulative sum
    acc = np.cumsum(tau, axis=1)
    alpha = np.exp(-(acc - tau))
    weights = alpha * (1.0 - delta)
    rgb = np.sum(weights[..., None] * color, axis=1)
    return rgb, weights, alpha, delta


def render_ray(f, samples):
    sigma, color = f.query(samples.points)
    gaps = segment_lengths(samples.ts)[None, :]
    rgb, weights, alpha, _ = composite(sigma[None, :], color[None], gaps)
    return RenderResult(rgb[0], weights[0], alpha[0])


def render_rays(f, origins, dirs, near, far, m, chunk=4096):
    """Colours ``(R, 3)`` for many rays with shared midpoint depths."""
    ts = sample_depths(near, far, m)
    gaps = segment_lengths(ts)[None, :]
    out = np.empty((len(origins), 3))
    for s in range(0, len(origins), chunk):
        o = origins[s:s + chunk]
        d = dirs[s:s + chunk]
        pts = o[:, None, :] + ts[None, :, None] * d[:, None, :]
        sigma, color = f.query(pts.reshape(-1, 3))
        rgb, _, _, _ = composite(sigma.reshape(len(o), m), color.reshape(len(o), m, 3), gaps)
        out[s:s + chunk] = rgb
    return out


def render_image(f, pose, k, near, far, m):
    """Render a ``(height, width, 3)`` image from ``pose``."""
    us, vs = image_pixels(k)
    origins, dirs = camera_rays(pose, k, us, vs)
    return render_rays(f, origins, dirs, near, far, m).reshape(k.height, k.width, 3)


# -- gradients ---------------------------------------------------------------


@dataclass
class BatchGrad:
    loss: float
    per_ray_loss: np.ndarray  # (R,)
    colors: np.ndarray  # (R, 3)
    d_params: np.ndarray  # (n_voxels, 4) dense field gradient
    d_pose: np.ndarray  # (n_cameras, 6) gradient wrt [a, b] per camera


def ray_batch_grad(f, base_rot, base_trans, deltas, cam, us, vs, k, targets,
                   near, far, m, ts=None):
    """Squared-error loss and exact gradients for a batch of pixels.

    ``base_rot`` (C, 3, 3) and ``base_trans`` (C, 3) are the initial camera
    poses, ``deltas`` (C, 6) the refinement increments ``[a, b]``; ray ``r``
    comes from camera ``cam[r]`` through pixel ``(us[r], vs[r])`` and is
    compared with ``targets[r]``.  The effective pose of camera ``c`` is
    ``(rodrigues(a_c) @ base_rot[c], base_trans[c] + b_c)``.

    ``ts`` optionally overrides the per-ray depths, shape (R, M).
    """
    cam = np.asarray(cam, dtype=np.int64)
    n_cam = len(base_rot)
    n_ray = len(cam)
    rots = np.stack([rodrigues(d[:3]) @ r for d, r in zip(deltas, base_rot)])
    origins = base_trans[cam] + deltas[cam, 3:]
    w = _rotate_per_ray(pixel_directions(k, us, vs), rots[cam])
    w_norm = np.linalg.norm(w, axis=-1, keepdims=True)
    dirs = w / w_norm
    if ts is None:
        ts = np.broadcast_to(sample_depths(near, far, m), (n_ray, m))
    gaps = segment_lengths(ts)

    pts = (origins[:, None, :] + ts[..., None] * dirs[:, None, :]).reshape(-1, 3)
    inside, ids, frac = f.locate(pts)
    wx, wy, wz = _axis_weights(frac)
    weights = wx[:, _CORNER_DX] * wy[:, _CORNER_DY] * wz[:, _CORNER_DZ]
    vals = np.take(f.params, ids, axis=0)  # (Q, 8, 4)
    raw = np.matmul(weights[:, None, :], vals)[:, 0]
    sigma = np.zeros(len(pts))
    color = np.zeros((len(pts), 3))
    sigma[inside] = softplus(raw[:, 0])
    c_in = sigmoid(raw[:, 1:])
    color[inside] = c_in
    sigma = sigma.reshape(n_ray, m)
    color = color.reshape(n_ray, m, 3)

    rgb, wts, alpha, delta = composite(sigma, color, gaps)
    resid = rgb - targets
    per_ray = np.sum(resid * resid, axis=-1)
    g_rgb = 2.0 * resid

    # d rgb / d tau_k = alpha_k delta_k c_k - sum_{i>k} w_i c_i
    wc = wts[..., None] * color
    tail = rgb[:, None, :] - np.cumsum(wc, axis=1)
    d_tau = np.einsum("rmc,rc->rm", (alpha * delta)[..., None] * color - tail, g_rgb)
    d_sigma = (d_tau * gaps).reshape(-1)[inside]
    d_color = (wts[..., None] * g_rgb[:, None, :]).reshape(-1, 3)[inside]

    g_raw = np.empty((len(inside), 4))
    g_raw[:, 0] = d_sigma * sigmoid(raw[:, 0])
    g_raw[:, 1:] = d_color * c_in * (1.0 - c_in)

    flat_ids = ids.reshape(-1)
    d_params = np.empty((f.n_voxels, 4))
    for ch in range(4):
        d_params[:, ch] = np.bincount(flat_ids, weights=(weights * g_raw[:, ch:ch + 1]).reshape(-1),
                                      minlength=f.n_voxels)

    # spatial derivative of the interpolated raw values chained with g_raw:
    # q holds dL/d(corner value) per corner, laid out as [z, y, x]
    q = np.matmul(vals, g_raw[:, :, None]).reshape(-1, 2, 2, 2)
    dq_x = (q[:, :, :, 1] - q[:, :, :, 0]) * wy[:, None, :]
    dq_y = (q[:, :, 1, :] - q[:, :, 0, :]) * wx[:, None, :]
    dq_z = (q[:, 1, :, :] - q[:, 0, :, :]) * wx[:, None, :]
    d_pts = np.zeros((len(pts), 3))
    d_pts[inside, 0] = np.einsum("qzy,qz->q", dq_x, wz) / f.cell[0]
    d_pts[inside, 1] = np.einsum("qzx,qz->q", dq_y, wz) / f.cell[1]
    d_pts[inside, 2] = np.einsum("qyx,qy->q", dq_z, wy) / f.cell[2]
    d_pts = d_pts.reshape(n_ray, m, 3)
    d_origin = d_pts.sum(axis=1)
    d_dir = np.sum(ts[..., None] * d_pts, axis=1)

    # d = w / |w| with w = rodrigues(a) @ base_rot @ pixel_dir
    d_w = (d_dir - dirs * np.sum(dirs * d_dir, axis=-1, keepdims=True)) / w_norm
    # d(rodrigues(a) v)/da = -skew(rodrigues(a) v) @ J_l(a)  =>  dL/da = J_l^T (w x dL/dw)
    cross = np.cross(w, d_w)
    d_pose = np.zeros((n_cam, 6))
    for ax in range(3):
        d_pose[:, ax] = np.bincount(cam, weights=cross[:, ax], minlength=n_cam)
        d_pose[:, 3 + ax] = np.bincount(cam, weights=d_origin[:, ax], minlength=n_cam)
    for c in np.unique(cam):
        d_pose[c, :3] = left_jacobian(deltas[c, :3]).T @ d_pose[c, :3]
    return BatchGrad(float(per_ray.sum()), per_ray, rgb, d_params, d_pose)


def _rotate_per_ray(dirs, rots):
    return (dirs[:, 0:1] * rots[:, :, 0] + dirs[:, 1:2] * rots[:, :, 1]
            + dirs[:, 2:3] * rots[:, :, 2])


@dataclass
class RayGradient:
    loss: float
    color: np.ndarray  # rendered colour
    voxel_ids: np.ndarray  # touched voxels (flat indices)
    d_density_raw: np.ndarray  # (len(voxel_ids),)
    d_color_raw: np.ndarray  # (len(voxel_ids), 3)
    d_pose: np.ndarray  # (6,) wrt [a, b]


def render_ray_with_grad(f, pose_delta, base_pose, k, pixel, target, near, far, m):
    """Loss ``|C - target|^2`` of one pixel and its gradients.

    Field gradients are returned for the voxels the ray touches; the pose
    gradient is with respect to the six refinement components ``[a, b]``.
    """
    u, v = pixel
    res = ray_batch_grad(
        f, base_pose.rot[None], base_pose.trans[None], pose_delta.as_vector()[None],
        np.zeros(1, dtype=np.int64), np.array([u], dtype=np.float64),
        np.array([v], dtype=np.float64), k, np.asarray(target, dtype=np.float64)[None],
        near, far, m)
    ray = camera_ray(base_pose.compose_delta(pose_delta), k, u, v)
    _, ids, frac = f.locate(sample_ray(ray, near, far, m).points)
    touched = np.unique(ids[trilinear_weights(frac) > 0])
    return RayGradient(res.loss, res.colors[0], touched, res.d_params[touched, 0],
                       res.d_params[touched, 1:], res.d_pose[0])
