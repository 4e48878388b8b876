"""Core scene model: cameras, poses, points, keypoints, tracks.

Conventions:
  - Poses map world to camera: x_cam = R @ X + t.
  - Pixel coordinates are (x, y) with x along image width.
  - Local pose updates are a 6-vector (rotation increment as angle-axis,
    translation increment) applied as R <- exp(delta_w) @ R, t <- t + delta_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheiralityViolation, DegenerateGeometry

MIN_DEPTH = 1e-9

SIMPLE_PINHOLE = "SIMPLE_PINHOLE"
PINHOLE = "PINHOLE"
CAMERA_MODELS = (SIMPLE_PINHOLE, PINHOLE)


def _readonly(a) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; intrinsics are never optimized."""

    camera_id: int
    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.model not in CAMERA_MODELS:
            raise ValueError(f"unsupported camera model {self.model!r}")
        if self.model == SIMPLE_PINHOLE and self.fx != self.fy:
            raise ValueError("SIMPLE_PINHOLE requires fx == fy")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width) or not (0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def angle_axis_to_matrix(w) -> np.ndarray:
    """Rodrigues formula, safe for small angles."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_angle_axis(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-9:
        return 0.5 * v
    if abs(np.pi - theta) < 1e-6:
        # near pi the off-diagonal difference vanishes; recover axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs from the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            signs = A[k] / axis[k]
            axis = np.where(np.abs(signs) > 1e-12, np.sign(signs) * axis, axis)
            axis[k] = abs(axis[k])
        n = np.linalg.norm(axis)
        if n > 0:
            axis = axis / n
        return theta * axis
    return v * (theta / (2.0 * np.sin(theta)))


def orthonormalize_rotation(R) -> np.ndarray:
    """Nearest rotation matrix via polar decomposition (SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = U @ Vt
    if np.linalg.det(D) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        D = U @ Vt
    return D


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform, stored as rotation matrix + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation).reshape(3, 3))
        object.__setattr__(
            self, "translation", _readonly(self.translation).reshape(3)
        )

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-9):
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")

    def apply(self, points) -> np.ndarray:
        """World point(s) -> camera frame. Accepts (3,) or (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def retract(self, delta) -> "Pose":
        """Apply a 6-vector local update with re-orthonormalization."""
        delta = np.asarray(delta, dtype=np.float64).reshape(6)
        R = angle_axis_to_matrix(delta[:3]) @ self.rotation
        return Pose(orthonormalize_rotation(R), self.translation + delta[3:])

    def local_difference(self, other: "Pose") -> np.ndarray:
        """6-vector (angle-axis, translation) taking `other` to `self`."""
        w = matrix_to_angle_axis(self.rotation @ other.rotation.T)
        return np.concatenate([w, self.translation - other.translation])


@dataclass(frozen=True)
class Keypoint:
    """2D detection with its current (possibly refined) subpixel location."""

    keypoint_id: int
    image_id: int
    location: np.ndarray
    initial_location: np.ndarray
    descriptor: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "location", _readonly(self.location).reshape(2))
        object.__setattr__(
            self, "initial_location", _readonly(self.initial_location).reshape(2)
        )
        if self.descriptor is not None:
            object.__setattr__(self, "descriptor", _readonly(self.descriptor))

    @staticmethod
    def at(keypoint_id: int, image_id: int, xy, descriptor=None) -> "Keypoint":
        xy = np.asarray(xy, dtype=np.float64)
        return Keypoint(keypoint_id, image_id, xy, xy.copy(), descriptor)

    def moved_to(self, xy) -> "Keypoint":
        return replace(self, location=np.asarray(xy, dtype=np.float64))

    @property
    def drift(self) -> float:
        return float(np.linalg.norm(self.location - self.initial_location))


@dataclass(frozen=True)
class Observation:
    """Reference to one keypoint inside one image."""

    image_id: int
    keypoint_id: int

    @property
    def key(self) -> Tuple[int, int]:
        return (self.image_id, self.keypoint_id)


@dataclass
class Point3D:
    point_id: int
    position: np.ndarray
    track: Tuple[Observation, ...] = ()
    color: Tuple[int, int, int] = (0, 0, 0)
    error: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.track = tuple(self.track)
        images = [obs.image_id for obs in self.track]
        if len(set(images)) != len(images):
            raise ValueError(
                f"point {self.point_id}: multiple track observations in one image"
            )


@dataclass
class Image:
    """One registered image: camera link, pose, and its keypoint list.

    keypoint_id doubles as the index into `keypoints`.
    """

    image_id: int
    camera_id: int
    pose: Pose
    keypoints: List[Keypoint] = field(default_factory=list)
    name: str = ""

    def keypoint(self, keypoint_id: int) -> Keypoint:
        kp = self.keypoints[keypoint_id]
        if kp.keypoint_id != keypoint_id:
            raise KeyError(f"keypoint id {keypoint_id} out of order in image")
        return kp


class Reconstruction:
    """Container for the scene being refined. Single writer; readers may share."""

    def __init__(self):
        self.cameras: Dict[int, Camera] = {}
        self.images: Dict[int, Image] = {}
        self.points: Dict[int, Point3D] = {}

    def add_camera(self, camera: Camera):
        self.cameras[camera.camera_id] = camera

    def add_image(self, image: Image):
        self.images[image.image_id] = image

    def add_point(self, point: Point3D):
        self.points[point.point_id] = point

    def keypoint(self, image_id: int, keypoint_id: int) -> Keypoint:
        return self.images[image_id].keypoint(keypoint_id)

    def set_keypoint_location(self, image_id: int, keypoint_id: int, xy):
        img = self.images[image_id]
        img.keypoints[keypoint_id] = img.keypoint(keypoint_id).moved_to(xy)

    def set_point_position(self, point_id: int, xyz):
        self.points[point_id].position = np.asarray(xyz, dtype=np.float64).reshape(3)

    def set_pose(self, image_id: int, pose: Pose):
        self.images[image_id].pose = pose

    def camera_of(self, image_id: int) -> Camera:
        return self.cameras[self.images[image_id].camera_id]

    def validate(self):
        """Check all cross-references; raises ValueError on the first failure."""
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise ValueError(
                    f"image {img.image_id} references missing camera {img.camera_id}"
                )
            for i, kp in enumerate(img.keypoints):
                if kp.keypoint_id != i or kp.image_id != img.image_id:
                    raise ValueError(
                        f"image {img.image_id}: keypoint {i} has inconsistent ids"
                    )
        for pt in self.points.values():
            seen = set()
            for obs in pt.track:
                if obs.image_id in seen:
                    raise ValueError(f"point {pt.point_id}: duplicate image in track")
                seen.add(obs.image_id)
                if obs.image_id not in self.images:
                    raise ValueError(
                        f"point {pt.point_id} observed in missing image {obs.image_id}"
                    )
                img = self.images[obs.image_id]
                if not (0 <= obs.keypoint_id < len(img.keypoints)):
                    raise ValueError(
                        f"point {pt.point_id} references missing keypoint "
                        f"{obs.keypoint_id} in image {obs.image_id}"
                    )

    def copy(self) -> "Reconstruction":
        out = Reconstruction()
        out.cameras = dict(self.cameras)
        for img in self.images.values():
            out.images[img.image_id] = Image(
                img.image_id, img.camera_id, img.pose, list(img.keypoints), img.name
            )
        for pt in self.points.values():
            out.points[pt.point_id] = Point3D(
                pt.point_id, pt.position.copy(), pt.track, pt.color, pt.error
            )
        return out


# --- projection --------------------------------------------------------------


def project(pose: Pose, camera: Camera, point) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises CheiralityViolation when the depth is not safely positive.
    """
    pc = pose.apply(np.asarray(point, dtype=np.float64))
    z = pc[2]
    if z <= MIN_DEPTH:
        raise CheiralityViolation(f"depth {z:g} <= {MIN_DEPTH:g}")
    return np.array(
        [camera.fx * pc[0] / z + camera.cx, camera.fy * pc[1] / z + camera.cy]
    )


def project_with_jacobians(pose: Pose, camera: Camera, point):
    """Projection plus Jacobians w.r.t. the local pose update and the point.

    Returns (pixel (2,), d_pixel/d_pose (2, 6), d_pixel/d_point (2, 3)).
    The pose Jacobian is taken at the 6-vector update of Pose.retract.
    """
    P = np.asarray(point, dtype=np.float64)
    rp = pose.rotation @ P
    pc = rp + pose.translation
    z = pc[2]
    if z <= MIN_DEPTH:
        raise CheiralityViolation(f"depth {z:g} <= {MIN_DEPTH:g}")
    inv_z = 1.0 / z
    pixel = np.array(
        [camera.fx * pc[0] * inv_z + camera.cx, camera.fy * pc[1] * inv_z + camera.cy]
    )
    # d pixel / d camera-frame point
    d_pix_d_pc = np.array(
        [
            [camera.fx * inv_z, 0.0, -camera.fx * pc[0] * inv_z**2],
            [0.0, camera.fy * inv_z, -camera.fy * pc[1] * inv_z**2],
        ]
    )
    # camera-frame point w.r.t. rotation increment: d(exp(w) @ rp)/dw = -[rp]x
    skew_rp = np.array(
        [[0.0, -rp[2], rp[1]], [rp[2], 0.0, -rp[0]], [-rp[1], rp[0], 0.0]]
    )
    d_pc_d_pose = np.hstack([-skew_rp, np.eye(3)])
    return pixel, d_pix_d_pc @ d_pc_d_pose, d_pix_d_pc @ pose.rotation


def triangulate_dlt(observations: Sequence[Tuple[np.ndarray, Pose, Camera]]) -> np.ndarray:
    """Linear triangulation from (pixel, pose, camera) observations.

    Minimizes the algebraic DLT error; demands a clear solution and positive
    depth in every view, otherwise raises DegenerateGeometry.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least 2 observations")
    rows = []
    for pixel, pose, camera in observations:
        P = camera.k_matrix @ np.hstack(
            [pose.rotation, pose.translation.reshape(3, 1)]
        )
        x, y = np.asarray(pixel, dtype=np.float64)
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.vstack(rows)
    # scale rows for conditioning
    norms = np.linalg.norm(A, axis=1)
    norms[norms == 0] = 1.0
    _, s, Vt = np.linalg.svd(A / norms[:, None])
    if s[-2] - s[-1] < 1e-12:
        raise DegenerateGeometry("ambiguous DLT nullspace")
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        raise DegenerateGeometry("point at infinity")
    point = X[:3] / X[3]
    for _, pose, _ in observations:
        if pose.apply(point)[2] <= MIN_DEPTH:
            raise DegenerateGeometry("triangulated point behind a camera")
    return point


def reprojection_stats(recon: Reconstruction) -> dict:
    """Reprojection error statistics between projections and keypoint locations.

    Observations with cheirality violations are skipped and counted.
    """
    residuals: Dict[int, List[float]] = {}
    errors = []
    skipped = 0
    for pt in recon.points.values():
        per_point = []
        for obs in pt.track:
            img = recon.images[obs.image_id]
            cam = recon.cameras[img.camera_id]
            try:
                pix = project(img.pose, cam, pt.position)
            except CheiralityViolation:
                skipped += 1
                continue
            err = float(np.linalg.norm(pix - img.keypoint(obs.keypoint_id).location))
            per_point.append(err)
            errors.append(err)
        residuals[pt.point_id] = per_point
    if errors:
        arr = np.array(errors)
        mean, median, peak = float(arr.mean()), float(np.median(arr)), float(arr.max())
    else:
        mean = median = peak = 0.0
    return {
        "mean": mean,
        "median": median,
        "max": peak,
        "count": len(errors),
        "skipped": skipped,
        "per_point": residuals,
    }
