"""Rigid transfer between two pose coordinate systems.

A fresh pose-estimation run places cameras in an arbitrary rigid gauge.  Given
``D`` cameras known in both the reference gauge (``old``) and the new gauge
(``new``), the transfer ``(d_rot, d_trans)`` maps new-gauge poses into the
reference gauge: ``rot -> d_rot @ rot``, ``trans -> d_rot @ trans + d_trans``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, so3_project


@dataclass
class TransferTransform:
    d_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    d_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def inverse(self):
        r_inv = self.d_rot.T
        return TransferTransform(r_inv, -r_inv @ self.d_trans)


@dataclass
class Correspondence:
    old_pose: CameraPose
    new_pose: CameraPose


def compute_transfer(corr):
    """Average rotation and translation offsets over the correspondences.

    The mean of ``old.rot @ new.rot.T`` is projected back onto SO(3); without
    noise every term is the same rotation and the projection is exact.
    """
    if len(corr) == 0:
        raise ValueError("need at least one correspondence")
    rot_sum = sum(c.old_pose.rot @ c.new_pose.rot.T for c in corr)
    d_rot = so3_project(rot_sum / len(corr))
    d_trans = np.mean([c.old_pose.trans - d_rot @ c.new_pose.trans for c in corr], axis=0)
    return TransferTransform(d_rot, d_trans)


def apply_transfer(tf, poses):
    return [CameraPose(tf.d_rot @ p.rot, tf.d_rot @ p.trans + tf.d_trans) for p in poses]
