"""Dense feature maps, per-keypoint patches, and subpixel bicubic lookup.

Feature data is stored as float32 arrays of shape (H, W, D) with (x, y)
lookups, x along width. Interpolation is Catmull-Rom bicubic with analytic
spatial derivatives; it reproduces stored node values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import KeypointOutOfBounds, MissingPatch, OutOfPatch
from .scene import Keypoint

NORM_EPS = 1e-6
DEFAULT_PATCH_SIZE = 16


def _cubic_weights(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Catmull-Rom weights and their derivatives for fractional offsets u.

    Returns (w, dw), each of shape u.shape + (4,), for the four taps at
    offsets -1, 0, 1, 2 relative to the base node.
    """
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    u3 = u2 * u
    w = np.stack(
        [
            -0.5 * u + u2 - 0.5 * u3,
            1.0 - 2.5 * u2 + 1.5 * u3,
            0.5 * u + 2.0 * u2 - 1.5 * u3,
            -0.5 * u2 + 0.5 * u3,
        ],
        axis=-1,
    )
    dw = np.stack(
        [
            -0.5 + 2.0 * u - 1.5 * u2,
            -5.0 * u + 4.5 * u2,
            0.5 + 4.0 * u - 4.5 * u2,
            -1.0 * u + 1.5 * u2,
        ],
        axis=-1,
    )
    return w, dw


def bicubic_support(width: int, height: int, xy: np.ndarray) -> np.ndarray:
    """Boolean mask of lookups with full 4x4 bicubic support on the grid."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    x, y = xy[:, 0], xy[:, 1]
    return (x >= 1.0) & (x <= width - 2.0) & (y >= 1.0) & (y <= height - 2.0)


def bicubic_interpolate(grid: np.ndarray, xy: np.ndarray):
    """Bicubic lookup of a (H, W, D) grid at points xy of shape (N, 2).

    Returns (values (N, D), derivatives (N, D, 2)); derivative columns are
    d/dx, d/dy. Raises OutOfPatch when any point lacks 4x4 support.
    """
    grid = np.asarray(grid)
    H, W = grid.shape[0], grid.shape[1]
    squeeze = np.ndim(xy) == 1
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    if not np.all(bicubic_support(W, H, xy)):
        raise OutOfPatch("lookup outside bicubic support")
    x, y = xy[:, 0], xy[:, 1]
    ix = np.clip(np.floor(x).astype(np.int64), 1, W - 3)
    iy = np.clip(np.floor(y).astype(np.int64), 1, H - 3)
    wx, dwx = _cubic_weights(x - ix)
    wy, dwy = _cubic_weights(y - iy)
    # gather the 4x4 node windows: (N, 4, 4, D) indexed [n, dy, dx, d]
    oy = iy[:, None, None] + np.arange(-1, 3)[None, :, None]
    ox = ix[:, None, None] + np.arange(-1, 3)[None, None, :]
    win = grid[oy, ox].astype(np.float64)
    values = np.einsum("ni,nj,nijd->nd", wy, wx, win)
    ddx = np.einsum("ni,nj,nijd->nd", wy, dwx, win)
    ddy = np.einsum("ni,nj,nijd->nd", dwy, wx, win)
    derivs = np.stack([ddx, ddy], axis=-1)
    if squeeze:
        return values[0], derivs[0]
    return values, derivs


def bicubic_interpolate_stacked(grids: np.ndarray, xy: np.ndarray):
    """Bicubic lookup of N same-size grids at one point each.

    grids has shape (N, S, S, D), xy (N, 2); returns values (N, D) and
    derivatives (N, D, 2). Support rules match bicubic_interpolate.
    """
    grids = np.asarray(grids)
    n, H, W = grids.shape[0], grids.shape[1], grids.shape[2]
    xy = np.asarray(xy, dtype=np.float64).reshape(n, 2)
    if not np.all(bicubic_support(W, H, xy)):
        raise OutOfPatch("lookup outside bicubic support")
    x, y = xy[:, 0], xy[:, 1]
    ix = np.clip(np.floor(x).astype(np.int64), 1, W - 3)
    iy = np.clip(np.floor(y).astype(np.int64), 1, H - 3)
    wx, dwx = _cubic_weights(x - ix)
    wy, dwy = _cubic_weights(y - iy)
    oy = iy[:, None, None] + np.arange(-1, 3)[None, :, None]
    ox = ix[:, None, None] + np.arange(-1, 3)[None, None, :]
    win = grids[np.arange(n)[:, None, None], oy, ox].astype(np.float64)
    values = np.einsum("ni,nj,nijd->nd", wy, wx, win)
    ddx = np.einsum("ni,nj,nijd->nd", wy, dwx, win)
    ddy = np.einsum("ni,nj,nijd->nd", dwy, wx, win)
    return values, np.stack([ddx, ddy], axis=-1)


@dataclass(frozen=True)
class DenseFeatureMap:
    """Per-image dense feature grid, nominally per-pixel L2-normalized."""

    image_id: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError("feature map data must have shape (H, W, D)")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def interpolate(self, xy):
        """Subpixel lookup on the full map; see bicubic_interpolate."""
        return bicubic_interpolate(self.data, xy)

    def norm_stats(self) -> Tuple[float, float]:
        norms = np.linalg.norm(self.data.astype(np.float64), axis=2)
        return float(norms.min()), float(norms.max())


@dataclass(frozen=True)
class FeaturePatch:
    """Feature window around one keypoint, addressed in image coordinates.

    `corner` is the (x0, y0) grid node of the top-left patch sample. `anchor`
    records the keypoint location at extraction time; it is not part of the
    on-disk patch format and may be None for patches read back from file.
    """

    image_id: int
    keypoint_id: int
    corner: Tuple[int, int]
    data: np.ndarray
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
            raise ValueError("patch data must have shape (S, S, D)")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "corner", (int(self.corner[0]), int(self.corner[1])))
        if self.anchor is not None:
            a = np.asarray(self.anchor, dtype=np.float64).reshape(2)
            a.setflags(write=False)
            object.__setattr__(self, "anchor", a)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def key(self) -> Tuple[int, int]:
        return (self.image_id, self.keypoint_id)

    def to_local(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) - np.asarray(self.corner, dtype=np.float64)

    def contains(self, xy) -> bool:
        """True when the lookup at xy has bicubic support inside the patch."""
        local = np.atleast_2d(self.to_local(xy))
        return bool(np.all(bicubic_support(self.size, self.size, local)))

    def interpolate(self, xy):
        """Subpixel lookup at image coordinates xy.

        Returns (feature (D,), d_feature/d_xy (D, 2)); raises OutOfPatch when
        the point leaves the patch's bicubic support.
        """
        return bicubic_interpolate(self.data, self.to_local(xy))

    def interpolate_many(self, xy):
        return bicubic_interpolate(self.data, np.atleast_2d(self.to_local(xy)))


def interpolate(patch: FeaturePatch, xy):
    """Module-level alias of FeaturePatch.interpolate."""
    return patch.interpolate(xy)


@dataclass
class FeaturePatchSet:
    """Patches keyed by (image_id, keypoint_id), with shared metadata."""

    size: int = DEFAULT_PATCH_SIZE
    channels: Optional[int] = None
    extractor: str = ""
    patches: Dict[Tuple[int, int], FeaturePatch] = field(default_factory=dict)

    def add(self, patch: FeaturePatch):
        if patch.size != self.size:
            raise ValueError(f"patch size {patch.size} != set size {self.size}")
        if self.channels is None:
            self.channels = patch.channels
        elif patch.channels != self.channels:
            raise ValueError("inconsistent channel counts in patch set")
        self.patches[patch.key] = patch

    def get(self, key: Tuple[int, int]) -> FeaturePatch:
        try:
            return self.patches[key]
        except KeyError:
            raise MissingPatch(f"no patch for (image, keypoint) {key}") from None

    def __contains__(self, key) -> bool:
        return key in self.patches

    def __len__(self) -> int:
        return len(self.patches)

    def items(self):
        return self.patches.items()


def patch_corner(initial_xy, size: int, width: int, height: int) -> Tuple[int, int]:
    """Top-left grid node of a size x size window centered on the detection.

    Rounding is half-up; the corner is clamped so the window stays inside the
    map.
    """
    half = size // 2
    x0 = int(np.floor(float(initial_xy[0]) + 0.5)) - half
    y0 = int(np.floor(float(initial_xy[1]) + 0.5)) - half
    x0 = min(max(x0, 0), width - size)
    y0 = min(max(y0, 0), height - size)
    return x0, y0


def extract_patches(
    fmap: DenseFeatureMap,
    keypoints: Iterable[Keypoint],
    size: int = DEFAULT_PATCH_SIZE,
    into: Optional[FeaturePatchSet] = None,
) -> FeaturePatchSet:
    """Cut feature windows around keypoint detections.

    Patch values are bit-exact copies of the map. Raises KeypointOutOfBounds
    for keypoints outside the image grid.
    """
    if size % 2 != 0 or size < 4:
        raise ValueError("patch size must be even and >= 4")
    if fmap.width < size or fmap.height < size:
        raise ValueError("feature map smaller than the patch size")
    out = into if into is not None else FeaturePatchSet(size=size)
    for kp in keypoints:
        x, y = float(kp.location[0]), float(kp.location[1])
        if not (0.0 <= x <= fmap.width - 1 and 0.0 <= y <= fmap.height - 1):
            raise KeypointOutOfBounds(
                f"keypoint {kp.keypoint_id} at ({x:g}, {y:g}) outside "
                f"{fmap.width}x{fmap.height} image {fmap.image_id}"
            )
        x0, y0 = patch_corner(kp.initial_location, size, fmap.width, fmap.height)
        data = fmap.data[y0 : y0 + size, x0 : x0 + size, :]
        out.add(
            FeaturePatch(fmap.image_id, kp.keypoint_id, (x0, y0), data, kp.location)
        )
    return out


# --- built-in non-learned extractors -----------------------------------------


def _normalize_channels(stack: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(stack, axis=2, keepdims=True)
    return (stack / (norms + NORM_EPS)).astype(np.float32)


def extract_gradient_features(image: np.ndarray, image_id: int = 0) -> DenseFeatureMap:
    """Three-channel map: Gaussian-smoothed intensity and its x/y derivatives.

    Channels are per-pixel L2-normalized with a small stabilizer so constant
    regions stay finite.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError("expected a grayscale image of at least 8x8 pixels")
    smoothed = gaussian_filter(img, sigma=1.0, mode="nearest")
    dx = gaussian_filter(img, sigma=1.0, order=(0, 1), mode="nearest")
    dy = gaussian_filter(img, sigma=1.0, order=(1, 0), mode="nearest")
    stack = np.stack([smoothed, dx, dy], axis=2)
    return DenseFeatureMap(image_id, _normalize_channels(stack))


def extract_ncc_intensity(
    image: np.ndarray, window: int = 3, image_id: int = 0
) -> DenseFeatureMap:
    """Mean-centered, L2-normalized intensity windows as features.

    Each pixel's channel vector is its window x window neighborhood
    (replicate-padded at borders, row-major offsets) minus the window mean,
    normalized to unit length. Untextured windows map to the all-zero vector.
    Invariant to positive affine intensity changes.
    """
    if window % 2 == 0 or not (3 <= window <= 11):
        raise ValueError("window must be odd and within [3, 11]")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a grayscale image")
    half = window // 2
    padded = np.pad(img, half, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    stack = win.reshape(img.shape[0], img.shape[1], window * window).copy()
    stack -= stack.mean(axis=2, keepdims=True)
    return DenseFeatureMap(image_id, _normalize_channels(stack))
