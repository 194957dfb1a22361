"""Rendering-quality and pose-accuracy evaluation against hidden ground truth."""

from __future__ import annotations

import numpy as np

from .alignment import Correspondence, apply_transfer, compute_transfer
from .geometry import rotation_geodesic
from .metrics import psnr, ssim
from .radiance import render_image


def gauge_align(estimated, ground_truth):
    """Map estimated poses into the ground-truth frame with one rigid transform."""
    tf = compute_transfer([Correspondence(g, e) for g, e in zip(ground_truth, estimated)])
    return apply_transfer(tf, estimated)


def pose_errors(estimated, ground_truth):
    """Per-camera rotation error (degrees) and centre error after gauge alignment."""
    aligned = gauge_align(estimated, ground_truth)
    rot = np.array([np.degrees(rotation_geodesic(a.rot, g.rot))
                    for a, g in zip(aligned, ground_truth)])
    trans = np.array([np.linalg.norm(a.trans - g.trans) for a, g in zip(aligned, ground_truth)])
    return rot, trans


def evaluate_chunks(field, poses, chunk_of, stream, chunks=None):
    """Mean PSNR/SSIM and pose errors per chunk.

    ``poses`` are the stored poses of every tracked camera and ``chunk_of``
    gives the chunk each belongs to (cameras are ordered within a chunk).
    The pose gauge is fitted over all tracked cameras at once.
    """
    chunk_of = np.asarray(chunk_of)
    gt_all = []
    for t in sorted(set(chunk_of.tolist())):
        gt_all.extend(stream.gt_poses(t))
    rot_err, trans_err = pose_errors(poses, gt_all)
    r = stream.render
    rows = []
    for t in sorted(set(chunk_of.tolist())) if chunks is None else chunks:
        idx = np.flatnonzero(chunk_of == t)
        p_vals, s_vals = [], []
        for j, cam in enumerate(idx):
            img = render_image(field, poses[cam], stream.intrinsics, r.near, r.far, r.samples)
            gt = stream.chunks[t][j][0]
            p_vals.append(psnr(img, gt))
            s_vals.append(ssim(img, gt))
        rows.append({
            "chunk": int(t),
            "psnr": float(np.mean(p_vals)),
            "ssim": float(np.mean(s_vals)),
            "mean_rot_err_deg": float(np.mean(rot_err[idx])),
            "mean_trans_err": float(np.mean(trans_err[idx])),
        })
    return rows
