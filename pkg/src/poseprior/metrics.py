"""Evaluation metrics: MPJPE, PA-MPJPE, PCK, AUC, best-of-M, diversity.

All distances are millimeters. Joint-position metrics root-align both
poses first; the Procrustes variants additionally solve for the best
similarity transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .geometry import Camera, Pose, project, to_root_relative
from .numeric import svd_3x3
from .observation import KeypointObservation

__all__ = [
    "SimilarityTransform",
    "mpjpe",
    "procrustes_align",
    "pa_mpjpe",
    "pck",
    "auc",
    "best_of_m",
    "per_joint_std",
    "reprojection_error",
]

PCK_THRESHOLD_MM = 150.0
AUC_STEPS = 31


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray   # (3, 3), orthonormal, det +1
    scale: float
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def _paired_joints(pred: Pose, gt: Pose):
    if pred.num_joints != gt.num_joints:
        raise ValueError(f"joint count mismatch: {pred.num_joints} vs {gt.num_joints}")
    return to_root_relative(pred).joints, to_root_relative(gt).joints


def mpjpe(pred: Pose, gt: Pose) -> float:
    """Mean per-joint Euclidean distance after root alignment."""
    p, g = _paired_joints(pred, gt)
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def procrustes_align(pred: Pose, gt: Pose, with_scale: bool = True):
    """Least-squares similarity alignment of pred onto gt.

    Centroids are removed, the rotation comes from the SVD of the
    cross-covariance (with reflection correction so det = +1), and the
    scale is the optimal least-squares factor. Returns the transform
    and the transformed prediction. ``with_scale=False`` gives the
    rigid-only variant.
    """
    p = np.asarray(pred.joints, dtype=np.float64)
    g = np.asarray(gt.joints, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"joint count mismatch: {p.shape} vs {g.shape}")
    if p.shape[0] < 3:
        raise AlignmentError("need at least 3 joints for alignment")
    p_mean, g_mean = p.mean(axis=0), g.mean(axis=0)
    p0, g0 = p - p_mean, g - g_mean
    p_var = float(np.sum(p0 * p0))
    if p_var == 0.0:
        raise AlignmentError("prediction joints are all coincident")
    if np.linalg.matrix_rank(g0) < 2:
        raise AlignmentError("ground-truth joints are collinear")
    u, s, v = svd_3x3(p0.T @ g0)
    d = np.sign(np.linalg.det(v @ u.T))
    if d == 0.0:
        d = 1.0
    flip = np.ones(3)
    flip[-1] = d
    rot = v @ np.diag(flip) @ u.T
    scale = float(np.sum(s * flip)) / p_var if with_scale else 1.0
    translation = g_mean - scale * rot @ p_mean
    transform = SimilarityTransform(rotation=rot, scale=scale, translation=translation)
    return transform, transform.apply(p)


def pa_mpjpe(pred: Pose, gt: Pose, with_scale: bool = True) -> float:
    """Mean per-joint distance after Procrustes alignment."""
    _, aligned = procrustes_align(pred, gt, with_scale=with_scale)
    return float(np.mean(np.linalg.norm(aligned - np.asarray(gt.joints), axis=1)))


def pck(pred: Pose, gt: Pose, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of joints within the threshold after root alignment.

    The threshold is strict (a joint exactly at it does not count),
    except that an exactly correct joint counts at every threshold,
    including zero.
    """
    p, g = _paired_joints(pred, gt)
    dist = np.linalg.norm(p - g, axis=1)
    return float(100.0 * np.mean((dist < threshold_mm) | (dist == 0.0)))


def auc(pred: Pose, gt: Pose, max_threshold_mm: float = PCK_THRESHOLD_MM,
        n_steps: int = AUC_STEPS) -> float:
    """Mean PCK over an evenly spaced threshold grid from 0 to the maximum."""
    thresholds = np.linspace(0.0, max_threshold_mm, n_steps)
    return float(np.mean([pck(pred, gt, th) for th in thresholds]))


def best_of_m(hypotheses, gt: Pose, metric=mpjpe) -> float:
    """Minimum of the metric over a hypothesis set."""
    poses = getattr(hypotheses, "poses", hypotheses)
    if len(poses) == 0:
        raise ValueError("empty hypothesis set")
    return min(metric(h, gt) for h in poses)


def per_joint_std(hypotheses) -> float:
    """Mean over joints of the norm of the per-axis standard deviations.

    Positions are root-relative; needs at least two hypotheses.
    """
    poses = getattr(hypotheses, "poses", hypotheses)
    if len(poses) < 2:
        raise ValueError("need at least 2 hypotheses for a spread estimate")
    stacked = np.stack([to_root_relative(p).joints for p in poses])  # (M, J, 3)
    axis_std = stacked.std(axis=0)  # (J, 3), population std
    return float(np.mean(np.linalg.norm(axis_std, axis=1)))


def reprojection_error(pose: Pose, obs: KeypointObservation, cam: Camera) -> float:
    """Mean pixel distance between projected valid joints and observed means."""
    if pose.frame != "absolute_camera":
        raise ValueError("reprojection error needs an absolute camera-frame pose")
    if not np.any(obs.valid):
        raise ValueError("no valid joints in observation")
    proj = project(pose.joints[obs.valid], cam)
    return float(np.mean(np.linalg.norm(proj - obs.means[obs.valid], axis=1)))
