"""Featuremetric keypoint adjustment over tentative tracks.

Keypoint locations in a track are refined so that features sampled at them
agree along the match edges. The most-connected keypoint is frozen to anchor
the track; every other keypoint is confined to a ball of radius `max_drift`
around its initial detection. Runs before any geometric estimation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import MissingPatch, TrackTooSmall
from .features import FeaturePatchSet, bicubic_interpolate_stacked
from .matching import NodeKey, TentativeTrack, topological_center
from .optim import (
    LMOptions,
    LMProblem,
    LMResult,
    ResidualBlock,
    RobustLoss,
    VectorBlock,
    lm_solve,
)

DEFAULT_MAX_DRIFT = 8.0


def _default_ka_lm() -> LMOptions:
    return LMOptions(max_iterations=100, parameter_tolerance=1e-4)


@dataclass
class KAOptions:
    """Keypoint-adjustment settings; max_drift must stay within half the
    patch size so lookups remain inside the stored patches."""

    max_drift: float = DEFAULT_MAX_DRIFT
    loss: RobustLoss = field(default_factory=lambda: RobustLoss.cauchy(0.25))
    lm: LMOptions = field(default_factory=_default_ka_lm)
    min_confidence: float = 1e-3

    def __post_init__(self):
        if self.max_drift <= 0:
            raise ValueError("max_drift must be positive")

    def check_patch_size(self, size: int):
        if self.max_drift > size / 2:
            raise ValueError(
                f"max_drift {self.max_drift} exceeds half the patch size {size}"
            )


def drift_ball_projection(center: np.ndarray, radius: float):
    """Projection onto the closed ball around the initial detection.

    The shrink factor guarantees the projected point never exceeds the
    radius, even after rounding.
    """
    center = np.asarray(center, dtype=np.float64).copy()

    def project(value: np.ndarray) -> np.ndarray:
        offset = value - center
        norm = float(np.linalg.norm(offset))
        if norm <= radius:
            return value
        return center + offset * (radius / norm) * (1.0 - 1e-12)

    return project


@dataclass
class KAResult:
    """Refined locations and solver diagnostics for one track."""

    track_id: int
    locations: Dict[NodeKey, np.ndarray]
    initial_cost: float
    final_cost: float
    cost_trace: List[float]
    termination: str
    iterations: int
    frozen: NodeKey


class _TrackProblem(LMProblem):
    """Per-track problem with batched feature lookups.

    Every member's patch has the same size, so all lookups of one evaluation
    run as a single stacked bicubic call; edge residuals reuse them.
    """

    def __init__(self, members, frozen_locations, patch_stack, corners):
        super().__init__(on_failure="reject")
        self.members = members
        self.frozen_locations = frozen_locations
        self.patch_stack = patch_stack
        self.corners = corners
        self.member_index = {k: i for i, k in enumerate(members)}

    def _lookup_all(self, state):
        pts = np.empty((len(self.members), 2))
        for i, key in enumerate(self.members):
            loc = state[key] if key in state else self.frozen_locations[key]
            pts[i] = loc - self.corners[i]
        return bicubic_interpolate_stacked(self.patch_stack, pts)

    def evaluate_residuals(self, state, indices, with_jacobians):
        values, derivs = self._lookup_all(state)  # OutOfPatch propagates
        out = {}
        for idx in indices:
            rb = self.residuals[idx]
            a, b = rb.key  # edge endpoints
            ia, ib = self.member_index[a], self.member_index[b]
            r = values[ia] - values[ib]
            if not with_jacobians:
                out[idx] = (r, None)
                continue
            jacs = []
            for bk in rb.block_keys:
                J = derivs[self.member_index[bk]]
                jacs.append(-J if bk == b else J)
            out[idx] = (r, jacs)
        return out


def adjust_track(
    track: TentativeTrack,
    patches: FeaturePatchSet,
    opts: Optional[KAOptions] = None,
    locations: Optional[Mapping[NodeKey, np.ndarray]] = None,
) -> KAResult:
    """Refine the keypoint locations of one tentative track.

    Minimizes the confidence-weighted robust feature differences along the
    track's match edges. The topological center is held fixed; all refined
    locations satisfy the drift bound. Initial locations default to the patch
    anchors recorded at extraction time.
    """
    opts = opts if opts is not None else KAOptions()
    if len(track.members) < 2:
        raise TrackTooSmall(f"track {track.track_id} has {len(track.members)} member(s)")
    opts.check_patch_size(patches.size)

    init: Dict[NodeKey, np.ndarray] = {}
    for key in track.members:
        patch = patches.get(key)
        if locations is not None and key in locations:
            init[key] = np.asarray(locations[key], dtype=np.float64).copy()
        elif patch.anchor is not None:
            init[key] = np.asarray(patch.anchor, dtype=np.float64).copy()
        else:
            raise MissingPatch(
                f"patch for {key} has no anchor and no location was supplied"
            )

    frozen = topological_center(track)
    members = list(track.members)
    patch_stack = np.stack([patches.get(k).data for k in members])
    corners = np.array([patches.get(k).corner for k in members], dtype=np.float64)
    problem = _TrackProblem(members, {frozen: init[frozen]}, patch_stack, corners)
    for key in members:
        if key == frozen:
            continue
        problem.add_block(
            VectorBlock(
                key,
                init[key],
                project=drift_ball_projection(init[key], opts.max_drift),
            )
        )

    edges = [(a, b, w) for a, b, w in track.edges if w >= opts.min_confidence]
    dim = patches.channels or patch_stack.shape[-1]
    for a, b, w in edges:
        block_keys = tuple(k for k in (a, b) if k != frozen)
        if not block_keys:
            continue
        problem.add_residual(
            ResidualBlock((a, b), block_keys, dim, None, loss=opts.loss, weight=w)
        )

    if not problem.residuals:
        return KAResult(
            track.track_id, init, 0.0, 0.0, [0.0], "no_residuals", 0, frozen
        )

    result = lm_solve(problem, opts.lm)
    refined = dict(init)
    for key in members:
        if key != frozen:
            refined[key] = np.asarray(result.state[key], dtype=np.float64)
    return KAResult(
        track.track_id,
        refined,
        result.cost_trace[0],
        result.final_cost,
        result.cost_trace,
        result.termination,
        result.iterations,
        frozen,
    )


@dataclass
class AdjustAllResult:
    locations: Dict[NodeKey, np.ndarray]
    reports: Dict[int, KAResult]
    failures: Dict[int, str]


def adjust_all(
    tracks: Sequence[TentativeTrack],
    patches: FeaturePatchSet,
    opts: Optional[KAOptions] = None,
    locations: Optional[Mapping[NodeKey, np.ndarray]] = None,
    workers: int = 1,
) -> AdjustAllResult:
    """Adjust every track independently; failing tracks are reported, not raised.

    Tracks share no keypoints, so results do not depend on processing order
    or on the number of workers.
    """
    opts = opts if opts is not None else KAOptions()

    def run(track):
        try:
            return track.track_id, adjust_track(track, patches, opts, locations), None
        except (MissingPatch, TrackTooSmall) as exc:
            return track.track_id, None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, tracks))
    else:
        outcomes = [run(t) for t in tracks]

    merged: Dict[NodeKey, np.ndarray] = {}
    reports: Dict[int, KAResult] = {}
    failures: Dict[int, str] = {}
    for track_id, report, error in outcomes:
        if report is None:
            failures[track_id] = error
            continue
        reports[track_id] = report
        merged.update(report.locations)
    return AdjustAllResult(merged, reports, failures)


def adjust_query_keypoints(
    keypoints,
    matched_points: Mapping[int, Sequence[int]],
    patches: FeaturePatchSet,
    track_features: Mapping[int, Sequence[Tuple[Hashable, np.ndarray]]],
    opts: Optional[KAOptions] = None,
) -> Dict[int, np.ndarray]:
    """Refine query keypoints against their tentatively matched 3D tracks.

    For each matched track, the reference is the observation feature most
    similar to the query's feature at its initial location (chosen once);
    the keypoint then minimizes the robust feature distance to the selected
    references, subject to the drift bound. Keypoints are independent.
    """
    opts = opts if opts is not None else KAOptions()
    opts.check_patch_size(patches.size)
    refined: Dict[int, np.ndarray] = {}
    for kp in keypoints:
        point_ids = matched_points.get(kp.keypoint_id, ())
        if not point_ids:
            continue
        patch = patches.get((kp.image_id, kp.keypoint_id))
        init = np.asarray(kp.location, dtype=np.float64)
        f_query, _ = patch.interpolate(init)
        references = []
        for pid in point_ids:
            candidates = track_features[pid]
            best = min(
                candidates,
                key=lambda item: (float(np.linalg.norm(f_query - item[1])), item[0]),
            )
            references.append(np.asarray(best[1], dtype=np.float64))

        problem = LMProblem(on_failure="reject")
        problem.add_block(
            VectorBlock(
                "p",
                init.copy(),
                project=drift_ball_projection(init, opts.max_drift),
            )
        )
        for i, ref in enumerate(references):
            def fn(values, with_jacobians, _ref=ref):
                f, df = patch.interpolate(values[0])
                return f - _ref, ([df] if with_jacobians else None)

            problem.add_residual(
                ResidualBlock(
                    (kp.keypoint_id, i), ("p",), ref.size, fn, loss=opts.loss
                )
            )
        result = lm_solve(problem, opts.lm)
        refined[kp.keypoint_id] = np.asarray(result.state["p"], dtype=np.float64)
    return refined
