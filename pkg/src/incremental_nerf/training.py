"""Replay distillation, joint pose/field optimisation and the incremental loop.

Each stage trains the field on the new chunk's pixels plus pseudo ground truth
rendered by a frozen copy of the previous field at every stored camera.  Every
tracked camera carries a refinement increment ``[a, b]`` that is optimised
together with the field and folded into the stored pose when the stage ends.
Only poses and rewards persist between stages; past images are never kept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import Correspondence, apply_transfer, compute_transfer
from .errors import DivergedError
from .evaluation import evaluate_chunks
from .geometry import CameraPose, PoseDelta, camera_rays, image_pixels, rodrigues
from .pose_graph import SelectionConfig, build_graph, greedy_select
from .radiance import VoxelRadianceField, ray_batch_grad, render_rays, sample_depths
from .scene_sim import PoseOracle

log = logging.getLogger(__name__)

MODES = ("full", "no_replay", "no_transfer", "no_refine")


@dataclass
class TrainConfig:
    iters_per_stage: int = 1000
    rays_per_iter: int = 1024
    lr_field: float = 0.01
    lr_pose: float = 0.005
    field_decay: float = 0.9954
    pose_decay: float = 0.9
    pose_decay_every: int = 100
    d_select: int = 5
    s_th: float = 0.0
    lam: float = 1.0
    seed: int = 0
    grid_resolution: int = 64
    grid_half_extent: float = 1.2
    init_density_raw: float = -3.0
    init_color_raw: float = 0.0
    jitter: bool = False

    def __post_init__(self):
        if not (0 <= self.lr_field < math.inf and 0 <= self.lr_pose < math.inf):
            raise ValueError("learning rates must be finite and nonnegative")
        for name in ("field_decay", "pose_decay"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.iters_per_stage < 0 or self.rays_per_iter < 1:
            raise ValueError("iters_per_stage must be >= 0 and rays_per_iter >= 1")
        if self.pose_decay_every < 1 or self.d_select < 1:
            raise ValueError("pose_decay_every and d_select must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place; returns ``(params, state)``."""
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_scale = 1.0 / (1.0 - beta1**state.t)
    v_scale = 1.0 / (1.0 - beta2**state.t)
    denom = np.sqrt(state.v * v_scale)
    denom += eps
    params -= (lr * m_scale) * state.m / denom
    return params, state


def photometric_loss(pred, target):
    """Sum over rays of the squared colour error."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(target) or len(pred) == 0:
        raise ValueError(f"need equal nonempty ray lists, got {len(pred)} and {len(target)}")
    return float(np.sum((pred - target) ** 2))


@dataclass
class RayBatch:
    cam: np.ndarray  # camera index per ray
    us: np.ndarray
    vs: np.ndarray
    targets: np.ndarray  # (n, 3)
    source: str  # "current" or "replay"

    def __len__(self):
        return len(self.cam)

    @classmethod
    def empty(cls, source="replay"):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, np.zeros((0, 3)), source)


def distill_targets(teacher, past_poses, k, render, pixels_per_camera=None, seed=0):
    """Pseudo ground truth for past cameras rendered by the frozen teacher.

    With ``pixels_per_camera`` unset every pixel of every past camera is used;
    otherwise that many distinct pixels per camera are drawn from ``seed``.
    """
    if not past_poses:
        return RayBatch.empty()
    us_all, vs_all = image_pixels(k)
    rng = np.random.default_rng(seed)
    cams, us, vs, targets = [], [], [], []
    for c, pose in enumerate(past_poses):
        if pixels_per_camera is None:
            sel = np.arange(len(us_all))
        else:
            sel = np.sort(rng.choice(len(us_all), size=pixels_per_camera, replace=False))
        o, d = camera_rays(pose, k, us_all[sel], vs_all[sel])
        targets.append(render_rays(teacher, o, d, render.near, render.far, render.samples))
        cams.append(np.full(len(sel), c, dtype=np.int64))
        us.append(us_all[sel])
        vs.append(vs_all[sel])
    return RayBatch(np.concatenate(cams), np.concatenate(us), np.concatenate(vs),
                    np.concatenate(targets), "replay")


@dataclass
class TrainState:
    field: VoxelRadianceField
    poses: list = field(default_factory=list)  # stored camera poses (P^p)
    rewards: list = field(default_factory=list)
    chunk_of: list = field(default_factory=list)
    deltas: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    field_adam: AdamState | None = None
    pose_adam: AdamState | None = None
    iteration: int = 0

    def pose_deltas(self):
        return [PoseDelta.from_vector(d) for d in self.deltas]


@dataclass
class StageLog:
    stage: int
    losses: list
    current_losses: list
    replay_losses: list
    selected: list = field(default_factory=list)
    teacher_checksum_before: str = ""
    teacher_checksum_after: str = ""


def estimate_scene_center(poses):
    """Least-squares point closest to every camera's optical axis."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for p in poses:
        d = -p.rot[:, 2]
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ p.trans
    if len(poses) < 2 or np.linalg.cond(a) > 1e8:
        # parallel axes: fall back to a point in front of the mean camera
        mean_dir = -np.mean([p.rot[:, 2] for p in poses], axis=0)
        return np.mean([p.trans for p in poses], axis=0) + 3.0 * mean_dir
    return np.linalg.solve(a, b)


def init_field(cfg, center):
    h = cfg.grid_half_extent
    return VoxelRadianceField.constant((cfg.grid_resolution,) * 3, center - h, center + h,
                                       cfg.init_density_raw, cfg.init_color_raw)


def _ray_depths(rng, n, render, jitter):
    ts = sample_depths(render.near, render.far, render.samples)
    if not jitter:
        return None
    step = (render.far - render.near) / render.samples
    return ts[None, :] + (rng.uniform(size=(n, render.samples)) - 0.5) * step


def train_stage(state, new_poses, new_images, cfg, k, render, replay=None,
                refine=True, stage=0):
    """Jointly optimise the field and all pose increments for one stage.

    ``new_poses`` are the aligned initial poses of the incoming chunk; they are
    appended to the state's stored poses.  Returns ``(state, StageLog)``.
    """
    replay = replay if replay is not None else RayBatch.empty()
    n_past = len(state.poses)
    n_new = len(new_poses)
    poses = list(state.poses) + list(new_poses)
    base_rot = np.stack([p.rot for p in poses])
    base_trans = np.stack([p.trans for p in poses])
    deltas = np.zeros((len(poses), 6))
    images = np.stack(new_images) if n_new else np.zeros((0, k.height, k.width, 3))

    state.field_adam = AdamState.zeros_like(state.field.params)
    state.pose_adam = AdamState.zeros_like(deltas)
    rng = np.random.default_rng([cfg.seed, stage])
    n_rep = cfg.rays_per_iter // 2 if len(replay) else 0
    n_cur = cfg.rays_per_iter - n_rep if n_new else 0
    if n_cur == 0 and n_rep == 0:
        n_rep = cfg.rays_per_iter if len(replay) else 0

    total_rays = n_new * k.width * k.height + len(replay)
    epoch = min(max(1, math.ceil(total_rays / cfg.rays_per_iter)), max(cfg.iters_per_stage, 1))
    err_sum = np.zeros(len(poses))
    err_cnt = np.zeros(len(poses))
    log_ = StageLog(stage, [], [], [])

    for it in range(cfg.iters_per_stage):
        cam_c = rng.integers(n_new, size=n_cur) if n_cur else np.zeros(0, dtype=np.int64)
        u_c = rng.integers(k.width, size=n_cur)
        v_c = rng.integers(k.height, size=n_cur)
        pick = rng.integers(len(replay), size=n_rep) if n_rep else np.zeros(0, dtype=np.int64)
        cam = np.concatenate([n_past + cam_c, replay.cam[pick]])
        us = np.concatenate([u_c, replay.us[pick]])
        vs = np.concatenate([v_c, replay.vs[pick]])
        targets = np.concatenate([images[cam_c, v_c, u_c], replay.targets[pick]])
        ts = _ray_depths(rng, len(cam), render, cfg.jitter)

        res = ray_batch_grad(state.field, base_rot, base_trans, deltas, cam, us, vs, k,
                             targets, render.near, render.far, render.samples, ts=ts)
        cur_loss = photometric_loss(res.colors[:n_cur], targets[:n_cur]) if n_cur else 0.0
        rep_loss = photometric_loss(res.colors[n_cur:], targets[n_cur:]) if n_rep else 0.0
        total = cur_loss + rep_loss
        if not np.isfinite(total):
            raise DivergedError(it, stage, total)
        log_.losses.append(total)
        log_.current_losses.append(cur_loss)
        log_.replay_losses.append(rep_loss)

        if cfg.lr_field > 0:
            adam_step(state.field.params, res.d_params, state.field_adam,
                      cfg.lr_field * cfg.field_decay**it)
        if refine and cfg.lr_pose > 0:
            lr = cfg.lr_pose * cfg.pose_decay ** (it // cfg.pose_decay_every)
            adam_step(deltas, res.d_pose, state.pose_adam, lr)
        if it >= cfg.iters_per_stage - epoch:
            err_sum += np.bincount(cam, weights=res.per_ray_loss, minlength=len(poses))
            err_cnt += np.bincount(cam, minlength=len(poses))
        state.iteration += 1

    # fold the increments into the stored poses
    state.poses = [CameraPose(rodrigues(d[:3]) @ p.rot, p.trans + d[3:])
                   for p, d in zip(poses, deltas)]
    state.deltas = np.zeros((len(poses), 6))
    rewards = list(state.rewards) + [None] * n_new
    seen = err_cnt > 0
    fallback = -float(np.mean(err_sum[seen] / err_cnt[seen])) if seen.any() else 0.0
    for c in range(len(poses)):
        if seen[c]:
            rewards[c] = -float(err_sum[c] / err_cnt[c])
        elif rewards[c] is None:
            rewards[c] = fallback
    state.rewards = rewards
    return state, log_


@dataclass
class FitResult:
    state: TrainState
    metrics: list  # one dict per (stage, chunk)
    logs: list


def incremental_fit(stream, cfg, mode="full", sigma_rot=0.005, sigma_trans=0.005,
                    oracle_seed=0, on_stage_end=None, evaluate=True):
    """Train over the chunk stream one chunk at a time.

    Stage 0 estimates poses for the first chunk and trains on it alone.  Each
    later stage freezes a teacher copy of the field, picks reference cameras
    with the greedy selector, re-estimates poses for references plus new
    images in a fresh gauge, aligns the new poses with the transfer fitted on
    the references, and trains on new pixels plus teacher-rendered replay.

    ``mode`` disables one ingredient: ``no_replay`` (no distillation),
    ``no_transfer`` (new poses stay in their own gauge) or ``no_refine``
    (pose increments frozen at zero).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if stream.n_chunks < 1:
        raise ValueError("stream has no chunks")
    k, render = stream.intrinsics, stream.render
    oracle = PoseOracle(sigma_rot, sigma_trans, oracle_seed)
    refine = mode != "no_refine"
    metrics, logs = [], []
    state = None

    for t in range(stream.n_chunks):
        gt_new = stream.gt_poses(t)
        selected = []
        try:
            if t == 0:
                new_poses = oracle.estimate(gt_new)
                state = TrainState(init_field(cfg, estimate_scene_center(new_poses)))
                replay = None
                teacher_sum = ""
            else:
                teacher = state.field.copy()
                teacher_sum = teacher.checksum()
                d = min(cfg.d_select, len(state.poses))
                graph = build_graph(state.poses, state.rewards)
                selected = greedy_select(graph, SelectionConfig(d, cfg.s_th, cfg.lam)).nodes
                # the references are images rendered at stored poses; the
                # simulated estimator needs the world pose they depict
                group = [oracle.to_world(state.poses[i]) for i in selected] + gt_new
                estimated = oracle.estimate(group)
                ref_est, new_est = estimated[:d], estimated[d:]
                if mode == "no_transfer":
                    new_poses = new_est
                else:
                    tf = compute_transfer([Correspondence(state.poses[i], e)
                                           for i, e in zip(selected, ref_est)])
                    new_poses = apply_transfer(tf, new_est)
                replay = None if mode == "no_replay" else distill_targets(
                    teacher, state.poses, k, render, seed=cfg.seed + t)

            state, stage_log = train_stage(state, new_poses, stream.images(t), cfg, k, render,
                                           replay=replay, refine=refine, stage=t)
        except DivergedError as exc:
            if exc.stage is None:
                exc.stage = t
            raise
        state.chunk_of = list(state.chunk_of) + [t] * len(new_poses)
        stage_log.selected = selected
        stage_log.teacher_checksum_before = teacher_sum
        if t > 0:
            stage_log.teacher_checksum_after = teacher.checksum()
            if stage_log.teacher_checksum_after != teacher_sum:
                raise RuntimeError(f"teacher parameters changed during stage {t}")
        logs.append(stage_log)

        if evaluate:
            rows = evaluate_chunks(state.field.quantized(), state.poses, state.chunk_of, stream)
            for row in rows:
                metrics.append({"stage": t, "mode": mode, **row})
            log.info("stage %d (%s): %s", t, mode,
                     ", ".join(f"chunk {r['chunk']} {r['psnr']:.2f} dB" for r in rows))
        if on_stage_end is not None:
            on_stage_end(t, state, metrics)
    return FitResult(state, metrics, logs)
