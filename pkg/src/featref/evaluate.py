"""Accuracy metrics between a refined reconstruction and ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import CheiralityViolation, IdMismatch
from .scene import Reconstruction, matrix_to_angle_axis, project

DEFAULT_ACCURACY_FRACTIONS = (0.001, 0.0025, 0.005)
DEFAULT_AUC_FRACTIONS = (0.001, 0.0025, 0.005)


def error_auc(errors: Sequence[float], threshold: float) -> float:
    """Area under the cumulative error curve, normalized to [0, 1].

    The recall-vs-error curve is interpolated piecewise-linearly from (0, 0)
    through the sorted error points and integrated by the trapezoidal rule up
    to the threshold.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(errs)
    if n == 0:
        return 0.0
    recall = np.arange(1, n + 1, dtype=np.float64) / n
    last = int(np.searchsorted(errs, threshold, side="right"))
    xs = np.concatenate([[0.0], errs[:last], [threshold]])
    ys = np.concatenate([[0.0], recall[:last], [recall[last - 1] if last > 0 else 0.0]])
    return float(np.trapz(ys, x=xs) / threshold)


def scene_diameter(recon: Reconstruction) -> float:
    """Diagonal of the point cloud's bounding box."""
    if not recon.points:
        return 0.0
    pts = np.stack([p.position for p in recon.points.values()])
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


@dataclass
class EvalReport:
    keypoint_error_mean: float
    keypoint_error_median: float
    point_accuracy: Dict[float, float]  # fraction-of-diameter threshold -> ratio
    point_error_auc: Dict[float, float]  # same thresholds -> AUC
    rotation_error_deg_mean: float
    translation_error_mean: float
    reprojected_error_mean: float  # px, refined vs truth points through truth poses
    scene_diameter: float
    n_points: int
    n_keypoints: int

    def to_json(self, indent: int = 2) -> str:
        payload = {
            "keypoint_error_mean_px": self.keypoint_error_mean,
            "keypoint_error_median_px": self.keypoint_error_median,
            "point_accuracy": {str(k): v for k, v in self.point_accuracy.items()},
            "point_error_auc": {str(k): v for k, v in self.point_error_auc.items()},
            "rotation_error_deg_mean": self.rotation_error_deg_mean,
            "translation_error_mean": self.translation_error_mean,
            "reprojected_error_mean_px": self.reprojected_error_mean,
            "scene_diameter": self.scene_diameter,
            "n_points": self.n_points,
            "n_keypoints": self.n_keypoints,
        }
        return json.dumps(payload, indent=indent, sort_keys=True)


def reprojected_point_errors(refined: Reconstruction, truth: Reconstruction) -> np.ndarray:
    """Mean pixel discrepancy per point between refined and true projections,
    measured through the ground-truth poses over the true track."""
    errors = []
    for pid in sorted(truth.points):
        gt = truth.points[pid]
        est = refined.points[pid]
        per_obs = []
        for obs in gt.track:
            img = truth.images[obs.image_id]
            cam = truth.cameras[img.camera_id]
            try:
                a = project(img.pose, cam, est.position)
                b = project(img.pose, cam, gt.position)
            except CheiralityViolation:
                continue
            per_obs.append(float(np.linalg.norm(a - b)))
        if per_obs:
            errors.append(float(np.mean(per_obs)))
    return np.asarray(errors)


def evaluate(
    refined: Reconstruction,
    truth: Reconstruction,
    accuracy_fractions: Tuple[float, ...] = DEFAULT_ACCURACY_FRACTIONS,
    auc_fractions: Tuple[float, ...] = DEFAULT_AUC_FRACTIONS,
) -> EvalReport:
    """Compare a refined reconstruction against ground truth.

    Point thresholds are fractions of the ground-truth scene diameter. Raises
    IdMismatch when the two reconstructions disagree on point or image ids.
    """
    if set(refined.points) != set(truth.points):
        raise IdMismatch("point id sets differ")
    if set(refined.images) != set(truth.images):
        raise IdMismatch("image id sets differ")

    kp_errors = []
    for image_id in sorted(truth.images):
        ref_img = refined.images[image_id]
        gt_img = truth.images[image_id]
        if len(ref_img.keypoints) != len(gt_img.keypoints):
            raise IdMismatch(f"keypoint counts differ in image {image_id}")
        for ref_kp, gt_kp in zip(ref_img.keypoints, gt_img.keypoints):
            kp_errors.append(float(np.linalg.norm(ref_kp.location - gt_kp.location)))
    kp_errors = np.asarray(kp_errors)

    diameter = scene_diameter(truth)
    pt_errors = np.asarray(
        [
            float(np.linalg.norm(refined.points[pid].position - truth.points[pid].position))
            for pid in sorted(truth.points)
        ]
    )
    accuracy = {
        frac: float(np.mean(pt_errors <= frac * diameter)) if len(pt_errors) else 0.0
        for frac in accuracy_fractions
    }
    auc = {
        frac: error_auc(pt_errors, frac * diameter) if len(pt_errors) else 0.0
        for frac in auc_fractions
    }

    rot_errors = []
    trans_errors = []
    for image_id in sorted(truth.images):
        R_ref = refined.images[image_id].pose.rotation
        R_gt = truth.images[image_id].pose.rotation
        w = matrix_to_angle_axis(R_ref @ R_gt.T)
        rot_errors.append(np.degrees(np.linalg.norm(w)))
        trans_errors.append(
            float(
                np.linalg.norm(
                    refined.images[image_id].pose.translation
                    - truth.images[image_id].pose.translation
                )
            )
        )

    reproj = reprojected_point_errors(refined, truth)
    return EvalReport(
        keypoint_error_mean=float(kp_errors.mean()) if len(kp_errors) else 0.0,
        keypoint_error_median=float(np.median(kp_errors)) if len(kp_errors) else 0.0,
        point_accuracy=accuracy,
        point_error_auc=auc,
        rotation_error_deg_mean=float(np.mean(rot_errors)) if rot_errors else 0.0,
        translation_error_mean=float(np.mean(trans_errors)) if trans_errors else 0.0,
        reprojected_error_mean=float(reproj.mean()) if len(reproj) else 0.0,
        scene_diameter=diameter,
        n_points=len(pt_errors),
        n_keypoints=len(kp_errors),
    )
