"""Featuremetric and geometric bundle adjustment.

Featuremetric BA minimizes, per track, the robust difference between features
sampled at the reprojections of the 3D point and a fixed reference feature
(the observation closest to the robust mean of the track's features).

Two residual modes:
  - "exact": D-dimensional residuals from bicubic feature lookups.
  - "costmap": 3-dimensional residuals (distance value and its two spatial
    derivatives) interpolated from precomputed per-observation distance
    patches with a C1 Hermite bicubic spline built from stored derivatives.

Observations whose projection leaves its patch are deactivated for the rest
of the run and reported, never clamped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    EmptyTrack,
    GaugeUnderconstrained,
    MissingPatch,
    OutOfPatch,
    TooFewInliers,
)
from .features import (
    FeaturePatch,
    FeaturePatchSet,
    bicubic_interpolate_stacked,
    bicubic_support,
)
from .optim import (
    LMOptions,
    LMProblem,
    PoseBlock,
    ResidualBlock,
    RobustLoss,
    VectorBlock,
    lm_solve,
    robust_mean,
)
from .scene import MIN_DEPTH, Pose, Reconstruction, project_with_jacobians

ObsKey = Tuple[int, int, int]  # (point_id, image_id, keypoint_id)


# --- track references --------------------------------------------------------


@dataclass(frozen=True)
class TrackReference:
    """Fixed per-track target feature: the observation nearest the robust mean."""

    point_id: int
    feature: np.ndarray
    source: Tuple[int, int]  # (image_id, keypoint_id)

    def __post_init__(self):
        f = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        f.setflags(write=False)
        object.__setattr__(self, "feature", f)


def select_reference(
    point_id: int,
    observations: Sequence[Tuple[Tuple[int, int], np.ndarray]],
    loss: Optional[RobustLoss] = None,
    max_iter: int = 20,
    tol: float = 1e-6,
) -> TrackReference:
    """Pick the observation feature closest to the robust mean of the track.

    Ties break on the lowest (image_id, keypoint_id) key.
    """
    obs = sorted(observations, key=lambda item: item[0])
    if not obs:
        raise EmptyTrack(f"point {point_id} has no observations")
    features = np.stack([np.asarray(f, dtype=np.float64) for _, f in obs])
    mu = robust_mean(features, loss, max_iter=max_iter, tol=tol)
    dists = np.linalg.norm(features - mu, axis=1)
    best = int(np.argmin(dists))  # argmin keeps the first (lowest key) on ties
    return TrackReference(point_id, features[best], obs[best][0])


def track_observation_features(
    recon: Reconstruction,
    patches: FeaturePatchSet,
    point_ids: Optional[Sequence[int]] = None,
) -> Dict[int, List[Tuple[Tuple[int, int], np.ndarray]]]:
    """Features of every track observation at its current keypoint location.

    Observations whose keypoint drifted outside their patch support are
    skipped.
    """
    ids = sorted(recon.points) if point_ids is None else sorted(point_ids)
    out: Dict[int, List[Tuple[Tuple[int, int], np.ndarray]]] = {}
    for pid in ids:
        feats = []
        for obs in recon.points[pid].track:
            patch = patches.get(obs.key)
            location = recon.keypoint(obs.image_id, obs.keypoint_id).location
            try:
                f, _ = patch.interpolate(location)
            except OutOfPatch:
                continue
            feats.append((obs.key, f))
        out[pid] = feats
    return out


def select_track_references(
    recon: Reconstruction,
    patches: FeaturePatchSet,
    loss: Optional[RobustLoss] = None,
    max_iter: int = 20,
    tol: float = 1e-6,
) -> Dict[int, TrackReference]:
    """Reference feature for every point, from current keypoint locations."""
    features = track_observation_features(recon, patches)
    refs: Dict[int, TrackReference] = {}
    for pid, feats in features.items():
        if not feats:
            raise EmptyTrack(f"point {pid} has no interpolable observations")
        refs[pid] = select_reference(pid, feats, loss, max_iter=max_iter, tol=tol)
    return refs


def observation_references(
    recon: Reconstruction, refs: Mapping[int, TrackReference]
) -> Dict[Tuple[int, int], TrackReference]:
    """Expand per-point references to a per-observation map."""
    out: Dict[Tuple[int, int], TrackReference] = {}
    for pid in sorted(refs):
        for obs in recon.points[pid].track:
            out[obs.key] = refs[pid]
    return out


# --- cost maps ----------------------------------------------------------------


@dataclass(frozen=True)
class CostMapPatch:
    """Featuremetric distance grid with its spatial derivative grids.

    d holds the euclidean feature distance to the track reference at every
    patch node; dx and dy are its central differences (one-sided at borders);
    dxy is the cross term used by the Hermite spline.
    """

    image_id: int
    keypoint_id: int
    point_id: int
    corner: Tuple[int, int]
    d: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dxy: np.ndarray

    @property
    def size(self) -> int:
        return self.d.shape[0]

    @property
    def key(self) -> Tuple[int, int]:
        return (self.image_id, self.keypoint_id)

    def to_local(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) - np.asarray(self.corner, dtype=np.float64)

    def evaluate(self, xy):
        """Residual channels (d, dd/dx, dd/dy) and their 3x2 Jacobian at xy."""
        local = self.to_local(xy).reshape(1, 2)
        if not np.all(hermite_support(self.size, local)):
            raise OutOfPatch("cost-map lookup outside the patch")
        r, J = _hermite_batch(
            self.d[None], self.dx[None], self.dy[None], self.dxy[None],
            np.zeros(1, dtype=np.int64), local,
        )
        return r[0], J[0]


@dataclass
class CostMapSet:
    size: int
    patches: Dict[Tuple[int, int], CostMapPatch] = field(default_factory=dict)

    def add(self, patch: CostMapPatch):
        if patch.size != self.size:
            raise ValueError("inconsistent cost-map sizes")
        self.patches[patch.key] = patch

    def get(self, key) -> CostMapPatch:
        try:
            return self.patches[key]
        except KeyError:
            raise MissingPatch(f"no cost map for observation {key}") from None

    def __len__(self):
        return len(self.patches)

    def items(self):
        return self.patches.items()


def build_cost_maps(
    patches: FeaturePatchSet,
    references: Mapping[Tuple[int, int], TrackReference],
) -> CostMapSet:
    """Precompute distance and derivative grids for every referenced observation."""
    out = CostMapSet(size=patches.size)
    for key in sorted(references):
        ref = references[key]
        patch = patches.get(key)
        diff = patch.data.astype(np.float64) - ref.feature
        d = np.linalg.norm(diff, axis=2)
        dx = np.gradient(d, axis=1)
        dy = np.gradient(d, axis=0)
        dxy = np.gradient(dx, axis=0)
        out.add(
            CostMapPatch(
                patch.image_id, patch.keypoint_id, ref.point_id, patch.corner,
                d, dx, dy, dxy,
            )
        )
    return out


def hermite_support(size: int, xy_local: np.ndarray) -> np.ndarray:
    """Cost-map lookups are valid on the full patch (cell-based spline)."""
    xy = np.atleast_2d(np.asarray(xy_local, dtype=np.float64))
    x, y = xy[:, 0], xy[:, 1]
    return (x >= 0.0) & (x <= size - 1.0) & (y >= 0.0) & (y <= size - 1.0)


_HERMITE_M = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [-3.0, 3.0, -2.0, -1.0],
        [2.0, -2.0, 1.0, 1.0],
    ]
)


def _hermite_batch(d, dx, dy, dxy, slots, xy_local):
    """Evaluate the Hermite bicubic spline of stacked cost grids.

    d, dx, dy, dxy: (G, S, S) node grids; slots: (N,) grid index per lookup;
    xy_local: (N, 2). Returns residual channels (N, 3) = (value, d/dx, d/dy)
    and their Jacobian (N, 3, 2) from the spline's second derivatives.
    """
    S = d.shape[1]
    x = xy_local[:, 0]
    y = xy_local[:, 1]
    ix = np.clip(np.floor(x).astype(np.int64), 0, S - 2)
    iy = np.clip(np.floor(y).astype(np.int64), 0, S - 2)
    u = x - ix
    v = y - iy
    g = slots
    ix1 = ix + 1
    iy1 = iy + 1

    F = np.empty((len(x), 4, 4))
    F[:, 0, 0] = d[g, iy, ix]
    F[:, 0, 1] = d[g, iy1, ix]
    F[:, 0, 2] = dy[g, iy, ix]
    F[:, 0, 3] = dy[g, iy1, ix]
    F[:, 1, 0] = d[g, iy, ix1]
    F[:, 1, 1] = d[g, iy1, ix1]
    F[:, 1, 2] = dy[g, iy, ix1]
    F[:, 1, 3] = dy[g, iy1, ix1]
    F[:, 2, 0] = dx[g, iy, ix]
    F[:, 2, 1] = dx[g, iy1, ix]
    F[:, 2, 2] = dxy[g, iy, ix]
    F[:, 2, 3] = dxy[g, iy1, ix]
    F[:, 3, 0] = dx[g, iy, ix1]
    F[:, 3, 1] = dx[g, iy1, ix1]
    F[:, 3, 2] = dxy[g, iy, ix1]
    F[:, 3, 3] = dxy[g, iy1, ix1]
    A = np.einsum("ij,njk,lk->nil", _HERMITE_M, F, _HERMITE_M)

    ones = np.ones_like(u)
    zeros = np.zeros_like(u)
    X = np.stack([ones, u, u * u, u**3], axis=1)
    Xd = np.stack([zeros, ones, 2 * u, 3 * u * u], axis=1)
    Xdd = np.stack([zeros, zeros, 2 * ones, 6 * u], axis=1)
    Y = np.stack([ones, v, v * v, v**3], axis=1)
    Yd = np.stack([zeros, ones, 2 * v, 3 * v * v], axis=1)
    Ydd = np.stack([zeros, zeros, 2 * ones, 6 * v], axis=1)

    def form(P, Q):
        return np.einsum("ni,nij,nj->n", P, A, Q)

    value = form(X, Y)
    sx = form(Xd, Y)
    sy = form(X, Yd)
    sxx = form(Xdd, Y)
    sxy = form(Xd, Yd)
    syy = form(X, Ydd)
    residual = np.stack([value, sx, sy], axis=1)
    jac = np.stack(
        [
            np.stack([sx, sy], axis=1),
            np.stack([sxx, sxy], axis=1),
            np.stack([sxy, syy], axis=1),
        ],
        axis=1,
    )
    return residual, jac


# --- options and report ---------------------------------------------------------

MODE_EXACT = "exact"
MODE_COSTMAP = "costmap"
POSES_FIXED = "fixed"
POSES_FREE = "free"
POSES_SUBSET = "subset"


def _default_ba_lm() -> LMOptions:
    return LMOptions(max_iterations=30, parameter_tolerance=1e-4)


@dataclass
class BAOptions:
    mode: str = MODE_EXACT
    loss: RobustLoss = field(default_factory=lambda: RobustLoss.cauchy(0.25))
    lm: LMOptions = field(default_factory=_default_ba_lm)
    pose_handling: str = POSES_FIXED
    free_images: Tuple[int, ...] = ()
    gauge: str = "auto"  # "auto" anchors the first pose and one translation
    # coordinate of the second; "none" refuses all-free pose sets

    def __post_init__(self):
        if self.mode not in (MODE_EXACT, MODE_COSTMAP):
            raise ValueError(f"unknown BA mode {self.mode!r}")
        if self.pose_handling not in (POSES_FIXED, POSES_FREE, POSES_SUBSET):
            raise ValueError(f"unknown pose handling {self.pose_handling!r}")
        if self.gauge not in ("auto", "none"):
            raise ValueError(f"unknown gauge rule {self.gauge!r}")


@dataclass
class BAReport:
    mode: str
    cost_trace: List[float]
    termination: str
    iterations: int
    dropped: List[Tuple[Hashable, int, str]]
    active_observations: int
    total_observations: int
    underconstrained_points: List[int]

    @property
    def initial_cost(self) -> float:
        return self.cost_trace[0]

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]

    def lines(self) -> List[str]:
        out = [f"mode: {self.mode}"]
        for i, c in enumerate(self.cost_trace):
            out.append(f"iteration {i}: cost {c:.9g}")
        for key, iteration, reason in self.dropped:
            out.append(f"dropped {key} at iteration {iteration}: {reason}")
        out.append(
            f"active observations: {self.active_observations}/{self.total_observations}"
        )
        if self.underconstrained_points:
            out.append(
                "underconstrained points: "
                + " ".join(str(p) for p in self.underconstrained_points)
            )
        out.append(f"termination: {self.termination} after {self.iterations} iterations")
        return out


# --- batched observation problem -------------------------------------------------


class _ObservationProblem(LMProblem):
    """BA problem evaluating all observations in vectorized stages.

    Stage 1 projects every observation's point into its image (with pixel
    Jacobians); stage 2 applies a per-mode measurement at the pixels. Failed
    observations (bad depth, out of patch) are returned as None entries so
    the engine's drop policy can retire them.
    """

    def __init__(self, cameras_by_image):
        super().__init__(on_failure="drop")
        self.cameras_by_image = cameras_by_image
        self.obs_image: List[int] = []
        self.obs_point: List[int] = []

    def register(self, image_id: int, point_id: int):
        self.obs_image.append(image_id)
        self.obs_point.append(point_id)

    # measurement interface: residual dim, and measure(slots, pixels, jac)
    def measure(self, slots, pixels, with_jacobians):
        raise NotImplementedError

    def evaluate_residuals(self, state, indices, with_jacobians):
        indices = list(indices)
        n = len(indices)
        out: Dict[int, Optional[tuple]] = {}
        if n == 0:
            return out
        slots = np.asarray(indices, dtype=np.int64)
        points = np.stack([state[("pt", self.obs_point[i])] for i in indices])
        image_ids = np.asarray([self.obs_image[i] for i in indices])

        pixels = np.empty((n, 2))
        jpix_pose = np.empty((n, 2, 6)) if with_jacobians else None
        jpix_point = np.empty((n, 2, 3)) if with_jacobians else None
        valid = np.zeros(n, dtype=bool)
        for image_id in np.unique(image_ids):
            sel = np.nonzero(image_ids == image_id)[0]
            pose: Pose = state[("pose", image_id)]
            cam = self.cameras_by_image[image_id]
            rp = points[sel] @ pose.rotation.T
            pc = rp + pose.translation
            z = pc[:, 2]
            ok = z > MIN_DEPTH
            valid[sel] = ok
            zs = np.where(ok, z, 1.0)
            inv_z = 1.0 / zs
            pixels[sel, 0] = cam.fx * pc[:, 0] * inv_z + cam.cx
            pixels[sel, 1] = cam.fy * pc[:, 1] * inv_z + cam.cy
            if with_jacobians:
                dpc = np.zeros((len(sel), 2, 3))
                dpc[:, 0, 0] = cam.fx * inv_z
                dpc[:, 0, 2] = -cam.fx * pc[:, 0] * inv_z**2
                dpc[:, 1, 1] = cam.fy * inv_z
                dpc[:, 1, 2] = -cam.fy * pc[:, 1] * inv_z**2
                skew = np.zeros((len(sel), 3, 3))
                skew[:, 0, 1] = -rp[:, 2]
                skew[:, 0, 2] = rp[:, 1]
                skew[:, 1, 0] = rp[:, 2]
                skew[:, 1, 2] = -rp[:, 0]
                skew[:, 2, 0] = -rp[:, 1]
                skew[:, 2, 1] = rp[:, 0]
                jpix_pose[sel, :, :3] = -np.einsum("nij,njk->nik", dpc, skew)
                jpix_pose[sel, :, 3:] = dpc
                jpix_point[sel] = np.einsum("nij,jk->nik", dpc, pose.rotation)

        live = np.nonzero(valid)[0]
        if live.size:
            r, dmeas, ok = self.measure(slots[live], pixels[live], with_jacobians)
        else:
            r, dmeas, ok = None, None, np.zeros(0, dtype=bool)
        for i in indices:
            out[i] = None
        for row, pos in enumerate(live):
            if not ok[row]:
                continue
            idx = indices[pos]
            if not with_jacobians:
                out[idx] = (r[row], None)
                continue
            dm = dmeas[row]
            jacs = [dm @ jpix_pose[pos], dm @ jpix_point[pos]]
            out[idx] = (r[row], jacs)
        if self.on_failure == "raise":
            for idx in indices:
                if out[idx] is None:
                    raise OutOfPatch(f"observation {self.residuals[idx].key} failed")
        return out


class _ExactProblem(_ObservationProblem):
    def __init__(self, cameras_by_image, patch_size, channels):
        super().__init__(cameras_by_image)
        self.patch_size = patch_size
        self.channels = channels
        self._stack: List[np.ndarray] = []
        self._corners: List[Tuple[int, int]] = []
        self._refs: List[np.ndarray] = []
        self.stack = None
        self.corners = None
        self.refs = None

    def register_exact(self, patch: FeaturePatch, ref: TrackReference):
        self._stack.append(patch.data)
        self._corners.append(patch.corner)
        self._refs.append(ref.feature)

    def finalize(self):
        self.stack = np.stack(self._stack)
        self.corners = np.asarray(self._corners, dtype=np.float64)
        self.refs = np.stack(self._refs)

    def measure(self, slots, pixels, with_jacobians):
        local = pixels - self.corners[slots]
        ok = bicubic_support(self.patch_size, self.patch_size, local)
        n = len(slots)
        r = np.zeros((n, self.channels))
        dm = np.zeros((n, self.channels, 2))
        sel = np.nonzero(ok)[0]
        if sel.size:
            values, derivs = bicubic_interpolate_stacked(
                self.stack[slots[sel]], local[sel]
            )
            r[sel] = values - self.refs[slots[sel]]
            dm[sel] = derivs
        return r, dm, ok


class _CostMapProblem(_ObservationProblem):
    def __init__(self, cameras_by_image, patch_size):
        super().__init__(cameras_by_image)
        self.patch_size = patch_size
        self._d: List[np.ndarray] = []
        self._dx: List[np.ndarray] = []
        self._dy: List[np.ndarray] = []
        self._dxy: List[np.ndarray] = []
        self._corners: List[Tuple[int, int]] = []

    def register_costmap(self, cm: CostMapPatch):
        self._d.append(cm.d)
        self._dx.append(cm.dx)
        self._dy.append(cm.dy)
        self._dxy.append(cm.dxy)
        self._corners.append(cm.corner)

    def finalize(self):
        self.d = np.stack(self._d)
        self.dx = np.stack(self._dx)
        self.dy = np.stack(self._dy)
        self.dxy = np.stack(self._dxy)
        self.corners = np.asarray(self._corners, dtype=np.float64)

    def measure(self, slots, pixels, with_jacobians):
        local = pixels - self.corners[slots]
        ok = hermite_support(self.patch_size, local)
        n = len(slots)
        r = np.zeros((n, 3))
        dm = np.zeros((n, 3, 2))
        sel = np.nonzero(ok)[0]
        if sel.size:
            values, jac = _hermite_batch(
                self.d, self.dx, self.dy, self.dxy, slots[sel], local[sel]
            )
            r[sel] = values
            dm[sel] = jac
        return r, dm, ok


class _GeometricProblem(_ObservationProblem):
    def __init__(self, cameras_by_image):
        super().__init__(cameras_by_image)
        self._targets: List[np.ndarray] = []

    def register_geometric(self, target_xy):
        self._targets.append(np.asarray(target_xy, dtype=np.float64))

    def finalize(self):
        self.targets = np.stack(self._targets)

    def measure(self, slots, pixels, with_jacobians):
        n = len(slots)
        r = pixels - self.targets[slots]
        dm = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        return r, dm, np.ones(n, dtype=bool)


# --- pose block construction -------------------------------------------------------


def _pose_blocks(recon: Reconstruction, opts: BAOptions):
    """PoseBlock per image, applying the pose-handling and gauge rules."""
    image_ids = sorted(recon.images)
    free: Dict[int, bool] = {}
    if opts.pose_handling == POSES_FIXED:
        free = {i: False for i in image_ids}
    elif opts.pose_handling == POSES_FREE:
        free = {i: True for i in image_ids}
    else:
        free = {i: i in set(opts.free_images) for i in image_ids}
    blocks = []
    all_free = all(free.values()) and len(image_ids) > 0
    if opts.pose_handling == POSES_FREE and all_free:
        if opts.gauge == "none":
            raise GaugeUnderconstrained(
                "all poses free and no gauge rule; fix a pose or use gauge='auto'"
            )
        anchor = image_ids[0]
        free[anchor] = False
        if len(image_ids) > 1:
            second = image_ids[1]
            t = recon.images[second].pose.translation
            fixed_coord = 3 + int(np.argmax(np.abs(t)))
            mask = np.ones(6, dtype=bool)
            mask[fixed_coord] = False
            blocks.append(
                PoseBlock(("pose", second), recon.images[second].pose, free_mask=mask)
            )
            free[second] = None  # handled
    for image_id in image_ids:
        if free.get(image_id) is None:
            continue
        blocks.append(
            PoseBlock(
                ("pose", image_id),
                recon.images[image_id].pose,
                constant=not free[image_id],
            )
        )
    return blocks


def _collect_observations(recon: Reconstruction) -> List[ObsKey]:
    obs = []
    for pid in sorted(recon.points):
        for o in recon.points[pid].track:
            obs.append((pid, o.image_id, o.keypoint_id))
    obs.sort()
    return obs


def _writeback(recon: Reconstruction, state) -> Reconstruction:
    refined = recon.copy()
    for key, value in state.items():
        if key[0] == "pose":
            refined.set_pose(key[1], value)
        elif key[0] == "pt":
            refined.set_point_position(key[1], value)
    return refined


def _report_from(result, mode, underconstrained) -> BAReport:
    return BAReport(
        mode,
        result.cost_trace,
        result.termination,
        result.iterations,
        [(d.key, d.iteration, d.reason) for d in result.dropped],
        result.active_count,
        result.total_count,
        underconstrained,
    )


# --- entry points ---------------------------------------------------------------


def featuremetric_ba(
    recon: Reconstruction,
    patches: FeaturePatchSet,
    refs: Mapping[int, TrackReference],
    opts: Optional[BAOptions] = None,
    cost_maps: Optional[CostMapSet] = None,
) -> Tuple[Reconstruction, BAReport]:
    """Refine 3D points (and poses, per the pose-handling rule) against fixed
    per-track reference features. Returns a refined copy and a run report."""
    opts = opts if opts is not None else BAOptions()
    cameras = {i: recon.camera_of(i) for i in recon.images}
    observations = _collect_observations(recon)

    if opts.mode == MODE_COSTMAP:
        if cost_maps is None:
            cost_maps = build_cost_maps(patches, observation_references(recon, refs))
        problem = _CostMapProblem(cameras, cost_maps.size)
    else:
        problem = _ExactProblem(cameras, patches.size, patches.channels)

    for block in _pose_blocks(recon, opts):
        problem.add_block(block)
    for pid in sorted(recon.points):
        problem.add_block(
            VectorBlock(("pt", pid), recon.points[pid].position, kind="point")
        )

    dim = 3 if opts.mode == MODE_COSTMAP else patches.channels
    for pid, image_id, kp_id in observations:
        if pid not in refs:
            raise MissingPatch(f"no track reference for point {pid}")
        if opts.mode == MODE_COSTMAP:
            problem.register_costmap(cost_maps.get((image_id, kp_id)))
        else:
            problem.register_exact(patches.get((image_id, kp_id)), refs[pid])
        problem.register(image_id, pid)
        problem.add_residual(
            ResidualBlock(
                (pid, image_id, kp_id),
                (("pose", image_id), ("pt", pid)),
                dim,
                None,
                loss=opts.loss,
            )
        )
    problem.finalize()
    result = lm_solve(problem, opts.lm)
    underconstrained = [
        pid for pid in sorted(recon.points) if len(recon.points[pid].track) < 2
    ]
    return _writeback(recon, result.state), _report_from(result, opts.mode, underconstrained)


def geometric_ba(
    recon: Reconstruction, opts: Optional[BAOptions] = None
) -> Tuple[Reconstruction, BAReport]:
    """Classical bundle adjustment on reprojection errors, same solver stack."""
    opts = opts if opts is not None else BAOptions()
    cameras = {i: recon.camera_of(i) for i in recon.images}
    problem = _GeometricProblem(cameras)
    for block in _pose_blocks(recon, opts):
        problem.add_block(block)
    for pid in sorted(recon.points):
        problem.add_block(
            VectorBlock(("pt", pid), recon.points[pid].position, kind="point")
        )
    for pid, image_id, kp_id in _collect_observations(recon):
        problem.register_geometric(recon.keypoint(image_id, kp_id).location)
        problem.register(image_id, pid)
        problem.add_residual(
            ResidualBlock(
                (pid, image_id, kp_id),
                (("pose", image_id), ("pt", pid)),
                2,
                None,
                loss=opts.loss,
            )
        )
    problem.finalize()
    result = lm_solve(problem, opts.lm)
    underconstrained = [
        pid for pid in sorted(recon.points) if len(recon.points[pid].track) < 2
    ]
    return _writeback(recon, result.state), _report_from(result, "geometric", underconstrained)


# --- query pose refinement --------------------------------------------------------


@dataclass
class QueryObservation:
    """One inlier 2D-3D correspondence for query-pose refinement."""

    keypoint_id: int
    patch: FeaturePatch
    location: np.ndarray  # current query keypoint location
    point: np.ndarray  # matched 3D point, held constant
    track_features: Sequence[Tuple[Tuple[int, int], np.ndarray]]


def refine_query_pose(
    pose: Pose,
    camera,
    observations: Sequence[QueryObservation],
    opts: Optional[BAOptions] = None,
) -> Tuple[Pose, BAReport]:
    """Pose-only featuremetric refinement over inlier correspondences.

    Each query keypoint is optimized against the single track observation
    feature closest to its own current feature; 3D points stay fixed.
    """
    opts = opts if opts is not None else BAOptions()
    if len(observations) < 4:
        raise TooFewInliers(f"{len(observations)} < 4 inlier correspondences")
    problem = LMProblem(on_failure="drop")
    problem.add_block(PoseBlock(("pose", "query"), pose))

    for obs in observations:
        f_query, _ = obs.patch.interpolate(obs.location)
        candidates = sorted(obs.track_features, key=lambda item: item[0])
        if not candidates:
            raise EmptyTrack(f"query keypoint {obs.keypoint_id} has no track features")
        ref = min(
            candidates,
            key=lambda item: (float(np.linalg.norm(f_query - np.asarray(item[1]))), item[0]),
        )[1]
        ref = np.asarray(ref, dtype=np.float64)
        point = np.asarray(obs.point, dtype=np.float64)
        patch = obs.patch

        def fn(values, with_jacobians, _ref=ref, _point=point, _patch=patch):
            pixel, j_pose, _ = project_with_jacobians(values[0], camera, _point)
            f, df = _patch.interpolate(pixel)
            return f - _ref, ([df @ j_pose] if with_jacobians else None)

        problem.add_residual(
            ResidualBlock(
                ("query", obs.keypoint_id),
                (("pose", "query"),),
                ref.size,
                fn,
                loss=opts.loss,
            )
        )
    result = lm_solve(problem, opts.lm)
    report = _report_from(result, "query-pose", [])
    return result.state[("pose", "query")], report
