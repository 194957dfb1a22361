"""Synthetic scenes, sequential camera streams and a simulated pose estimator.

The pose estimator stands in for SfM/SLAM: every call returns the group's
poses in a fresh random rigid coordinate system, with small independent
per-camera noise, so consecutive chunks come back in unrelated gauges.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, Intrinsics, rodrigues
from .radiance import VoxelRadianceField, inverse_softplus, logit, render_image

DEFAULT_BOUNDS = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))

# density inside / outside objects, in world units^-1
SOLID_SIGMA = 40.0
EMPTY_SIGMA = 1e-4


@dataclass
class Blob:
    kind: str  # "sphere" or "box"
    center: np.ndarray
    size: float  # radius, or half edge length for boxes
    color: np.ndarray
    stripe_dir: np.ndarray
    stripe_freq: float


@dataclass
class SyntheticScene:
    gt_field: VoxelRadianceField
    bounds: tuple
    seed: int
    blobs: list


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _signed_distance(blob, pts):
    rel = pts - blob.center
    if blob.kind == "sphere":
        return np.linalg.norm(rel, axis=-1) - blob.size
    q = np.abs(rel) - blob.size
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


def generate_scene(seed, resolution=64, bounds=DEFAULT_BOUNDS, n_blobs=4):
    """Procedural scene: textured spheres and a box around the origin.

    Colours vary along a per-blob stripe direction so that opposite sides of an
    object look different and image gradients are informative for poses.
    """
    if n_blobs < 3:
        raise ValueError("need at least 3 blobs")
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    mid = (lo + hi) / 2
    half = (hi - lo) / 2
    blobs = []
    palette = rng.permutation(np.array([
        [0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.95],
        [0.95, 0.85, 0.2], [0.8, 0.3, 0.85], [0.2, 0.85, 0.85],
    ]))
    for i in range(n_blobs):
        kind = "box" if i == n_blobs - 1 else "sphere"
        size = rng.uniform(0.18, 0.3) if kind == "sphere" else rng.uniform(0.14, 0.22)
        center = mid + rng.uniform(-0.45, 0.45, size=3) * half
        direction = rng.normal(size=3)
        blobs.append(Blob(kind, center, size, palette[i % len(palette)],
                          direction / np.linalg.norm(direction), rng.uniform(6.0, 12.0)))

    f = VoxelRadianceField((resolution,) * 3, lo, hi)
    pts = f.lattice_points()
    dist = np.stack([_signed_distance(b, pts) for b in blobs], axis=1)
    nearest = np.argmin(dist, axis=1)
    d_min = dist[np.arange(len(pts)), nearest]
    # soft occupancy over about one lattice cell
    occupancy = 1.0 / (1.0 + np.exp(np.clip(d_min / (0.5 * f.cell.min()), -50, 50)))
    sigma = EMPTY_SIGMA + (SOLID_SIGMA - EMPTY_SIGMA) * occupancy
    f.params[:, 0] = inverse_softplus(sigma)
    for j, b in enumerate(blobs):
        sel = nearest == j
        phase = pts[sel] @ b.stripe_dir * b.stripe_freq
        shade = 0.55 + 0.4 * np.sin(phase)[:, None] * np.array([1.0, -0.7, 0.5])
        rgb = np.clip(b.color * shade + 0.1 * np.cos(1.7 * phase)[:, None], 0.03, 0.97)
        f.params[sel, 1:] = logit(rgb)
    return SyntheticScene(f, (lo, hi), seed, blobs)


@dataclass(frozen=True)
class RenderSettings:
    near: float = 1.2
    far: float = 4.8
    samples: int = 64


@dataclass
class ChunkStream:
    chunks: list  # T lists of (image (H, W, 3), ground-truth CameraPose)
    intrinsics: Intrinsics
    render: RenderSettings = field(default_factory=RenderSettings)

    @property
    def n_chunks(self):
        return len(self.chunks)

    def images(self, t):
        return [img for img, _ in self.chunks[t]]

    def gt_poses(self, t):
        return [pose for _, pose in self.chunks[t]]


def orbit_poses(n, radius=3.0, elevation_deg=25.0, arc_deg=180.0, start_deg=0.0):
    """Cameras on a horizontal arc looking at the origin, equal angular steps."""
    if n == 1:
        az = np.array([np.radians(start_deg)])
    else:
        az = np.radians(start_deg + arc_deg * np.arange(n) / (n - 1))
    el = np.radians(elevation_deg)
    poses = []
    for a in az:
        eye = radius * np.array([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)])
        poses.append(CameraPose.look_at(eye, np.zeros(3)))
    return poses


def default_intrinsics(width=48, height=48, fov_deg=40.0):
    return Intrinsics.from_fov(width, height, fov_deg)


def generate_stream(scene, n_chunks=4, per_chunk=8, k=None, render=None,
                    radius=3.0, elevation_deg=25.0, arc_deg=180.0):
    if n_chunks < 1 or per_chunk < 1:
        raise ValueError("need at least one chunk of at least one image")
    k = k or default_intrinsics()
    render = render or RenderSettings()
    poses = orbit_poses(n_chunks * per_chunk, radius, elevation_deg, arc_deg)
    chunks = []
    for t in range(n_chunks):
        chunk = []
        for pose in poses[t * per_chunk:(t + 1) * per_chunk]:
            img = render_image(scene.gt_field, pose, k, render.near, render.far, render.samples)
            chunk.append((img, pose))
        chunks.append(chunk)
    return ChunkStream(chunks, k, render)


# -- simulated pose estimation ----------------------------------------------


@dataclass(frozen=True)
class GaugeNoise:
    sigma_rot: float = 0.005
    sigma_trans: float = 0.005
    gauge_seed: int | None = 0  # None forces the identity gauge

    def __post_init__(self):
        if self.sigma_rot < 0 or self.sigma_trans < 0:
            raise ValueError("noise levels must be nonnegative")


def draw_gauge(gauge_seed, trans_scale=1.0):
    """Random rigid frame ``(Q, t)``; identity when ``gauge_seed`` is None."""
    if gauge_seed is None:
        return np.eye(3), np.zeros(3)
    rng = np.random.default_rng([int(gauge_seed), 0])
    return _random_rotation(rng), rng.normal(scale=trans_scale, size=3)


def simulate_sfm(poses, noise):
    """Poses expressed in a fresh random gauge ``(Q, t)`` with per-camera noise.

    Camera ``i`` comes back as ``(Q^T R_i J_i, Q^T (c_i + n_i - t))`` where
    ``J_i`` is a small random rotation and ``n_i`` a small translation.
    """
    if len(poses) == 0:
        raise ValueError("need at least one pose")
    q, t = draw_gauge(noise.gauge_seed)
    seed = 0 if noise.gauge_seed is None else int(noise.gauge_seed)
    rng = np.random.default_rng([seed, 1])
    out = []
    for p in poses:
        jitter = rodrigues(rng.normal(scale=noise.sigma_rot, size=3))
        shift = rng.normal(scale=noise.sigma_trans, size=3)
        out.append(CameraPose(q.T @ p.rot @ jitter, q.T @ (p.trans + shift - t)))
    return out


class PoseOracle:
    """Stateful wrapper that gives each estimation call its own gauge.

    The first call fixes the reconstruction frame.  ``to_world`` maps a pose
    in that frame back to the world; it is used only to simulate where an
    image rendered from a reconstructed pose actually looks from.
    """

    def __init__(self, sigma_rot=0.005, sigma_trans=0.005, seed=0):
        self.sigma_rot = sigma_rot
        self.sigma_trans = sigma_trans
        self.seed = seed
        self.calls = 0
        self._anchor = None

    def _noise(self, call):
        gauge_seed = int(np.random.default_rng([self.seed, call]).integers(2**62))
        return GaugeNoise(self.sigma_rot, self.sigma_trans, gauge_seed)

    def estimate(self, world_poses):
        noise = self._noise(self.calls)
        if self._anchor is None:
            self._anchor = draw_gauge(noise.gauge_seed)
        self.calls += 1
        return simulate_sfm(world_poses, noise)

    def to_world(self, pose):
        q, t = self._anchor
        return CameraPose(q @ pose.rot, q @ pose.trans + t)


# -- export -----------------------------------------------------------------


def write_ppm(path, img):
    img = np.asarray(img)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def pose_to_dict(pose):
    return {"rot": pose.rot.ravel().tolist(), "trans": pose.trans.tolist()}


def pose_from_dict(d):
    return CameraPose(np.array(d["rot"], dtype=np.float64).reshape(3, 3), d["trans"])


def export_stream(stream, out_dir):
    """Write ``chunk_t/img_n.ppm``, ``poses_gt.json`` and ``stream.json``."""
    os.makedirs(out_dir, exist_ok=True)
    cameras = []
    cam_id = 0
    for t, chunk in enumerate(stream.chunks):
        chunk_dir = os.path.join(out_dir, f"chunk_{t}")
        os.makedirs(chunk_dir, exist_ok=True)
        for n, (img, pose) in enumerate(chunk):
            write_ppm(os.path.join(chunk_dir, f"img_{n}.ppm"), img)
            cameras.append({"id": cam_id, "chunk": t, "index": n, **pose_to_dict(pose)})
            cam_id += 1
    with open(os.path.join(out_dir, "poses_gt.json"), "w") as fh:
        json.dump({"cameras": cameras, "intrinsics": stream.intrinsics.to_dict()}, fh, indent=1)
    meta = {
        "n_chunks": stream.n_chunks,
        "per_chunk": [len(c) for c in stream.chunks],
        "intrinsics": stream.intrinsics.to_dict(),
        "near": stream.render.near, "far": stream.render.far,
        "samples": stream.render.samples,
    }
    with open(os.path.join(out_dir, "stream.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_stream(stream_dir):
    with open(os.path.join(stream_dir, "stream.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(stream_dir, "poses_gt.json")) as fh:
        gt = json.load(fh)
    by_chunk = {}
    for cam in gt["cameras"]:
        by_chunk.setdefault(cam["chunk"], []).append(cam)
    chunks = []
    for t in range(meta["n_chunks"]):
        cams = sorted(by_chunk.get(t, []), key=lambda c: c["index"])
        chunks.append([
            (read_ppm(os.path.join(stream_dir, f"chunk_{t}", f"img_{c['index']}.ppm")),
             pose_from_dict(c))
            for c in cams
        ])
    render = RenderSettings(meta["near"], meta["far"], meta["samples"])
    return ChunkStream(chunks, Intrinsics.from_dict(meta["intrinsics"]), render)
