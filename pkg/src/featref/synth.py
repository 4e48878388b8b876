"""Synthetic multi-view scenes with analytic feature fields.

The scene is a textured plane observed by a ring of cameras. A smooth
multi-channel field lives on the plane and is sampled into each image's dense
feature map, so corresponding projections see the same feature vector and the
true correspondence of every 3D point is a strict local minimum of the
featuremetric cost.

Keypoints are true projections plus noise. Each track's anchor observation
(the one that will be frozen as the topological center) is generated with
`anchor_noise_scale` times the noise, zero by default: the refinement target
is then well defined in the ground-truth frame and accuracy gains are
measurable absolutely.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigInvalid, DegenerateGeometry
from .features import DenseFeatureMap, FeaturePatchSet, extract_patches
from .matching import Match
from .scene import (
    Camera,
    Image,
    Keypoint,
    Observation,
    Point3D,
    Pose,
    Reconstruction,
    project,
    triangulate_dlt,
)

FIELD_GAUSSIAN_BLOBS = "gaussian_blobs"
FIELD_PERLIN_LIKE = "perlin_like"

NORM_EPS = 1e-6


@dataclass
class SynthConfig:
    n_cameras: int = 10
    n_points: int = 100
    image_width: int = 640
    image_height: int = 480
    keypoint_sigma: float = 1.0
    outlier_rate: float = 0.0
    field: str = FIELD_GAUSSIAN_BLOBS
    channels: int = 8
    patch_size: int = 16
    seed: int = 0
    track_length_min: int = 4
    track_length_max: int = 0  # 0 means n_cameras
    anchor_noise_scale: float = 0.0
    noise_clip: float = 5.0  # px, keeps detections inside their patch basin
    plane_extent: float = 1.0
    camera_distance: float = 5.0
    ring_radius: float = 2.0

    def validate(self):
        if self.n_cameras < 2:
            raise ConfigInvalid("need at least 2 cameras")
        if self.n_points < 1:
            raise ConfigInvalid("need at least 1 point")
        if self.image_width < 64 or self.image_height < 64:
            raise ConfigInvalid("image size too small")
        if self.keypoint_sigma < 0 or self.outlier_rate < 0 or self.outlier_rate > 1:
            raise ConfigInvalid("bad noise model")
        if self.field not in (FIELD_GAUSSIAN_BLOBS, FIELD_PERLIN_LIKE):
            raise ConfigInvalid(f"unknown feature field {self.field!r}")
        if self.channels < 2:
            raise ConfigInvalid("need at least 2 feature channels")
        if self.patch_size < 4 or self.patch_size % 2 != 0:
            raise ConfigInvalid("patch size must be even and >= 4")
        if not (2 <= self.track_length_min):
            raise ConfigInvalid("track_length_min must be >= 2")
        return self


def load_synth_config(path) -> SynthConfig:
    """Read a TOML config; sections [scene], [noise], [features] map onto
    SynthConfig fields."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
    cfg = SynthConfig()
    mapping = {
        "scene": {
            "n_cameras", "n_points", "image_width", "image_height", "seed",
            "track_length_min", "track_length_max", "plane_extent",
            "camera_distance", "ring_radius",
        },
        "noise": {"keypoint_sigma", "outlier_rate", "anchor_noise_scale", "noise_clip"},
        "features": {"field", "channels", "patch_size"},
    }
    for section, keys in mapping.items():
        for key, value in raw.get(section, {}).items():
            if key not in keys:
                raise ConfigInvalid(f"{path}: unknown key {section}.{key}")
            setattr(cfg, key, value)
    return cfg.validate()


# --- feature fields -----------------------------------------------------------


class GaussianBlobField:
    """Sum of anisotropic Gaussian blobs per channel, plus a constant bias.

    Blobs cluster around the given anchor positions so every 3D point sits in
    textured surroundings with nonzero, direction-rich feature gradients.
    """

    def __init__(self, rng, channels: int, anchors_xy: np.ndarray,
                 extent: float, pixel_scale: float, background: int = 0):
        px = 1.0 / pixel_scale  # world units per pixel
        centers = []
        sigmas = []
        for a in np.atleast_2d(anchors_xy):
            for _ in range(3):
                centers.append(a + rng.normal(0.0, 2.0 * px, 2))
                sigmas.append(rng.uniform(2.5 * px, 5.5 * px))
        for _ in range(background):
            centers.append(rng.uniform(-extent, extent, 2))
            sigmas.append(rng.uniform(3.0 * px, 8.0 * px))
        self.centers = np.asarray(centers)
        n = len(centers)
        theta = rng.uniform(0.0, np.pi, n)
        ratio = rng.uniform(0.6, 1.0, n)
        self.radius = np.asarray(sigmas)
        self.icov = np.empty((n, 2, 2))
        for i in range(n):
            c, s = np.cos(theta[i]), np.sin(theta[i])
            R = np.array([[c, -s], [s, c]])
            s1 = self.radius[i]
            s2 = self.radius[i] * ratio[i]
            self.icov[i] = R @ np.diag([1.0 / s1**2, 1.0 / s2**2]) @ R.T
        self.amps = rng.normal(0.0, 1.0, (n, channels)) * rng.uniform(
            0.5, 1.5, (n, 1)
        )
        self.channels = channels
        self.bias = 0.6

    def evaluate(self, xy: np.ndarray) -> np.ndarray:
        """Raw (unnormalized) field at world plane points xy of shape (N, 2)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        out = np.zeros((xy.shape[0], self.channels))
        out[:, 0] = self.bias
        for i in range(len(self.centers)):
            d = xy - self.centers[i]
            q = np.einsum("ni,ij,nj->n", d, self.icov[i], d)
            near = q < 32.0
            if not np.any(near):
                continue
            out[near] += np.exp(-0.5 * q[near])[:, None] * self.amps[i]
        return out

    def sample_image(self, camera: Camera, pose: Pose) -> np.ndarray:
        grid = plane_grid(camera, pose)
        H, W = camera.height, camera.width
        out = np.zeros((H, W, self.channels))
        out[:, :, 0] = self.bias
        for i in range(len(self.centers)):
            c = self.centers[i]
            rad = 4.0 * self.radius[i]
            xs, ys = [], []
            for sx in (-1.0, 1.0):
                for sy in (-1.0, 1.0):
                    pix = project(pose, camera, (c[0] + sx * rad, c[1] + sy * rad, 0.0))
                    xs.append(pix[0])
                    ys.append(pix[1])
            x0 = max(int(np.floor(min(xs))), 0)
            x1 = min(int(np.ceil(max(xs))) + 1, W)
            y0 = max(int(np.floor(min(ys))), 0)
            y1 = min(int(np.ceil(max(ys))) + 1, H)
            if x0 >= x1 or y0 >= y1:
                continue
            d = grid[y0:y1, x0:x1] - c
            q = np.einsum("hwi,ij,hwj->hw", d, self.icov[i], d)
            out[y0:y1, x0:x1] += np.exp(-0.5 * q)[:, :, None] * self.amps[i]
        return out


class PerlinLikeField:
    """Band-limited value noise: random plane waves with per-channel phases."""

    def __init__(self, rng, channels: int, extent: float, pixel_scale: float,
                 n_waves: int = 48):
        # wavelengths between roughly 5 and 16 pixels
        lo = pixel_scale / 16.0
        hi = pixel_scale / 5.0
        freq = rng.uniform(lo, hi, n_waves)
        angle = rng.uniform(0.0, np.pi, n_waves)
        self.k = np.stack([freq * np.cos(angle), freq * np.sin(angle)], axis=1)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, (n_waves, channels))
        self.amps = rng.normal(0.0, 1.0, (n_waves, channels)) / np.sqrt(n_waves)
        self.channels = channels
        self.bias = 0.6

    def evaluate(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        arg = 2.0 * np.pi * (xy @ self.k.T)  # (N, K)
        out = np.zeros((xy.shape[0], self.channels))
        out[:, 0] = self.bias
        for ch in range(self.channels):
            out[:, ch] += np.cos(arg + self.phase[:, ch][None, :]) @ self.amps[:, ch]
        return out

    def sample_image(self, camera: Camera, pose: Pose) -> np.ndarray:
        grid = plane_grid(camera, pose).reshape(-1, 2)
        out = np.empty((grid.shape[0], self.channels))
        chunk = 65536
        for start in range(0, grid.shape[0], chunk):
            out[start : start + chunk] = self.evaluate(grid[start : start + chunk])
        return out.reshape(camera.height, camera.width, self.channels)


def plane_grid(camera: Camera, pose: Pose) -> np.ndarray:
    """World plane (z=0) coordinates hit by each pixel's ray, shape (H, W, 2)."""
    H, W = camera.height, camera.width
    xs, ys = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    d_cam = np.stack(
        [(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)],
        axis=-1,
    )
    d_world = d_cam @ pose.rotation  # rows: R^T @ d
    center = pose.center()
    t = -center[2] / d_world[..., 2]
    return center[None, None, :2] + t[..., None] * d_world[..., :2]


def sample_feature_map(field, camera: Camera, pose: Pose, image_id: int) -> DenseFeatureMap:
    raw = field.sample_image(camera, pose)
    norms = np.linalg.norm(raw, axis=2, keepdims=True)
    return DenseFeatureMap(image_id, raw / (norms + NORM_EPS))


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> Pose:
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)


# --- the generator ---------------------------------------------------------------


@dataclass
class SynthResult:
    config: SynthConfig
    truth: Reconstruction
    noisy: Reconstruction
    fmaps: Dict[int, DenseFeatureMap]
    matches: List[Match]
    patches: FeaturePatchSet
    field: object
    anchors: Dict[int, Tuple[int, int]]  # point_id -> anchor (image_id, keypoint_id)
    n_outliers: int = 0
    n_true_matches: int = 0


def synth_generate(config: SynthConfig) -> SynthResult:
    """Build ground-truth and perturbed reconstructions plus feature data.

    Deterministic for a fixed seed. The perturbed reconstruction shares the
    (fixed) ground-truth poses, carries noisy keypoints, and its points are
    triangulated from them.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    W, H = config.image_width, config.image_height
    focal = 600.0 * W / 640.0
    cam = Camera(1, "PINHOLE", W, H, focal, focal, W / 2.0, H / 2.0)
    pixel_scale = focal / config.camera_distance  # px per world unit on the plane

    # cameras on a jittered ring, looking roughly at the plane center
    poses: List[Pose] = []
    for i in range(config.n_cameras):
        angle = 2.0 * np.pi * i / config.n_cameras + rng.uniform(-0.1, 0.1)
        center = np.array(
            [
                config.ring_radius * np.cos(angle) + rng.uniform(-0.1, 0.1),
                0.6 * config.ring_radius * np.sin(angle) + rng.uniform(-0.1, 0.1),
                -config.camera_distance + rng.uniform(-0.4, 0.4),
            ]
        )
        target = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0])
        poses.append(look_at(center, target))

    # points on the plane, visible with margin in enough views
    margin = 2.0 * config.patch_size
    lmax = config.track_length_max or config.n_cameras
    lmax = min(lmax, config.n_cameras)
    points: List[np.ndarray] = []
    visibility: List[List[int]] = []
    attempts = 0
    while len(points) < config.n_points:
        attempts += 1
        if attempts > 50 * config.n_points:
            raise ConfigInvalid("could not place the requested number of points")
        xy = rng.uniform(-config.plane_extent, config.plane_extent, 2)
        P = np.array([xy[0], xy[1], 0.0])
        length = int(rng.integers(config.track_length_min, lmax + 1))
        cams = sorted(rng.choice(config.n_cameras, size=length, replace=False).tolist())
        good = []
        for i in cams:
            pix = project(poses[i], cam, P)
            if margin <= pix[0] <= W - 1 - margin and margin <= pix[1] <= H - 1 - margin:
                good.append(i)
        if len(good) < max(2, config.track_length_min // 2):
            continue
        points.append(P)
        visibility.append(good)

    # per-track noise; the anchor observation gets anchor_noise_scale * sigma
    clip = max(config.noise_clip, 1e-9)

    def draw_noise(scale):
        if scale <= 0.0:
            return np.zeros(2)
        n = rng.normal(0.0, scale, 2)
        while np.linalg.norm(n) > clip:
            n = rng.normal(0.0, scale, 2)
        return n

    keypoints_true: Dict[int, List[Keypoint]] = {i: [] for i in range(config.n_cameras)}
    keypoints_noisy: Dict[int, List[Keypoint]] = {i: [] for i in range(config.n_cameras)}
    obs_of_point: List[List[Observation]] = []
    anchors: Dict[int, Tuple[int, int]] = {}
    for pid, (P, views) in enumerate(zip(points, visibility)):
        anchor_image = min(views)
        track = []
        for i in views:
            pix = project(poses[i], cam, P)
            scale = (
                config.anchor_noise_scale * config.keypoint_sigma
                if i == anchor_image
                else config.keypoint_sigma
            )
            noisy_pix = pix + draw_noise(scale)
            kp_id = len(keypoints_true[i])
            keypoints_true[i].append(Keypoint.at(kp_id, i, pix))
            keypoints_noisy[i].append(Keypoint.at(kp_id, i, noisy_pix))
            track.append(Observation(i, kp_id))
            if i == anchor_image:
                anchors[pid] = (i, kp_id)
        obs_of_point.append(track)

    # matches: a star around the anchor plus a few member-member edges
    matches: List[Match] = []
    seen_edges = set()

    def add_match(a: Tuple[int, int], b: Tuple[int, int], w: float) -> bool:
        m = Match(a[0], a[1], b[0], b[1], w)
        if m.edge_key in seen_edges:
            return False
        seen_edges.add(m.edge_key)
        matches.append(m)
        return True

    for pid, track in enumerate(obs_of_point):
        keys = [o.key for o in track]
        anchor = anchors[pid]
        others = [k for k in keys if k != anchor]
        degree = {k: 0 for k in keys}
        for k in others:
            add_match(anchor, k, float(rng.uniform(0.75, 0.95)))
            degree[anchor] += 1
            degree[k] += 1
        n_extra = max(0, (len(others) - 2) // 2)
        cap = len(others) - 1  # keep the anchor's degree strictly maximal
        for _ in range(n_extra):
            i, j = rng.choice(len(others), size=2, replace=False)
            a, b = others[int(i)], others[int(j)]
            if a[0] == b[0] or degree[a] + 1 >= cap + 1 or degree[b] + 1 >= cap + 1:
                continue
            if add_match(a, b, float(rng.uniform(0.7, 0.9))):
                degree[a] += 1
                degree[b] += 1
    n_true = len(matches)

    n_outliers = int(round(config.outlier_rate * n_true))
    added = 0
    guard = 0
    while added < n_outliers and guard < 100 * (n_outliers + 1):
        guard += 1
        p1, p2 = rng.choice(len(points), size=2, replace=False)
        t1 = obs_of_point[int(p1)]
        t2 = obs_of_point[int(p2)]
        o1 = t1[int(rng.integers(len(t1)))]
        o2 = t2[int(rng.integers(len(t2)))]
        if o1.image_id == o2.image_id:
            continue
        if add_match(o1.key, o2.key, float(rng.uniform(0.2, 0.5))):
            added += 1

    # analytic feature field and per-image dense maps
    anchors_xy = np.asarray([p[:2] for p in points])
    if config.field == FIELD_GAUSSIAN_BLOBS:
        field = GaussianBlobField(
            rng, config.channels, anchors_xy, config.plane_extent * 1.2,
            pixel_scale, background=max(8, config.n_points // 2),
        )
    else:
        field = PerlinLikeField(
            rng, config.channels, config.plane_extent * 1.2, pixel_scale
        )
    fmaps = {
        i: sample_feature_map(field, cam, poses[i], i) for i in range(config.n_cameras)
    }

    # reconstructions
    truth = Reconstruction()
    noisy = Reconstruction()
    for recon, kps in ((truth, keypoints_true), (noisy, keypoints_noisy)):
        recon.add_camera(cam)
        for i in range(config.n_cameras):
            recon.add_image(Image(i, 1, poses[i], list(kps[i]), f"view{i:03d}"))
    for pid, (P, track) in enumerate(zip(points, obs_of_point)):
        truth.add_point(Point3D(pid, P.copy(), tuple(track)))
        obs = [
            (noisy.keypoint(o.image_id, o.keypoint_id).location, poses[o.image_id], cam)
            for o in track
        ]
        try:
            position = triangulate_dlt(obs)
        except DegenerateGeometry:
            position = P.copy()
        noisy.add_point(Point3D(pid, position, tuple(track)))
    truth.validate()
    noisy.validate()

    # detection-centered feature patches (shared by both reconstructions)
    patches = FeaturePatchSet(size=config.patch_size)
    for i in range(config.n_cameras):
        extract_patches(fmaps[i], noisy.images[i].keypoints, config.patch_size, into=patches)

    return SynthResult(
        config, truth, noisy, fmaps, matches, patches, field, anchors,
        n_outliers=added, n_true_matches=n_true,
    )
