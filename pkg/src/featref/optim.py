"""Robustified Levenberg-Marquardt engine with Schur-complement reduction.

The engine works on problems made of parameter blocks (plain vectors or
poses, optionally constant or coordinate-masked) and residual blocks, each
with its own robust loss and weight. Per-block costs are weight * rho(|r|^2).

Robustification uses the corrected Gauss-Newton weighting: residual and
Jacobian are scaled by sqrt(weight * rho'); the rho'' correction is clamped
away since it is non-positive for the implemented losses, keeping all
normal-equation blocks positive semi-definite.

Residual evaluation may fail (cheirality, patch boundary). Problems choose a
policy: "raise" propagates, "reject" treats any failing trial step as
infeasible, "drop" permanently deactivates failing residuals once a step that
excludes them is accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import (
    CheiralityViolation,
    EmptyInput,
    NumericalFailure,
    OutOfPatch,
    SingularPointBlock,
)
from .scene import Pose

RESIDUAL_FAILURES = (CheiralityViolation, OutOfPatch)

# diagonal entries are clamped to at least this before multiplicative damping,
# so zero-information blocks still receive a finite regularizer
DAMPING_DIAGONAL_FLOOR = 1e-6


# --- robust losses ------------------------------------------------------------


@dataclass(frozen=True)
class RobustLoss:
    """Robust norm applied to squared residual vector norms."""

    kind: str = "trivial"  # "trivial" or "cauchy"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("trivial", "cauchy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "cauchy" and self.scale <= 0:
            raise ValueError("cauchy loss needs a positive scale")

    @staticmethod
    def trivial() -> "RobustLoss":
        return RobustLoss("trivial", 1.0)

    @staticmethod
    def cauchy(scale: float = 0.25) -> "RobustLoss":
        return RobustLoss("cauchy", scale)


def loss_evaluate(loss: RobustLoss, s):
    """Evaluate rho(s), rho'(s), rho''(s) at squared norm(s) s (scalar or array)."""
    s = np.asarray(s, dtype=np.float64)
    if loss.kind == "trivial":
        one = np.ones_like(s)
        return s, one, np.zeros_like(s)
    c2 = loss.scale * loss.scale
    t = 1.0 + s / c2
    return c2 * np.log(t), 1.0 / t, -(1.0 / c2) / (t * t)


def robust_mean(
    features,
    loss: Optional[RobustLoss] = None,
    max_iter: int = 20,
    tol: float = 1e-6,
    return_info: bool = False,
):
    """Minimize sum of robust norms of (f - mu) by IRLS from the plain mean.

    Weights are rho'(|f - mu|^2). Stops when the mean moves less than tol.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[None, :]
    if F.shape[0] == 0:
        raise EmptyInput("robust_mean of an empty feature list")
    if loss is None:
        loss = RobustLoss.cauchy(0.25)

    def objective(mu):
        s = np.sum((F - mu) ** 2, axis=1)
        return float(np.sum(loss_evaluate(loss, s)[0]))

    mu = F.mean(axis=0)
    trace = [objective(mu)]
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        s = np.sum((F - mu) ** 2, axis=1)
        w = loss_evaluate(loss, s)[1]
        wsum = float(w.sum())
        if wsum <= 0.0:
            break
        mu_new = (w[:, None] * F).sum(axis=0) / wsum
        step = float(np.linalg.norm(mu_new - mu))
        mu = mu_new
        trace.append(objective(mu))
        if step < tol:
            break
    if return_info:
        return mu, {"iterations": iterations, "objective_trace": trace}
    return mu


# --- parameter blocks ----------------------------------------------------------


@dataclass
class VectorBlock:
    """Plain euclidean parameter block with optional coordinate mask/projection."""

    key: Hashable
    value: np.ndarray
    constant: bool = False
    free_mask: Optional[np.ndarray] = None
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kind: str = "generic"  # "generic", "camera" or "point"

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64).reshape(-1)
        if self.free_mask is not None:
            self.free_mask = np.asarray(self.free_mask, dtype=bool).reshape(
                self.value.shape
            )

    @property
    def full_dim(self) -> int:
        return self.value.size

    @property
    def mask(self) -> np.ndarray:
        if self.free_mask is None:
            return np.ones(self.full_dim, dtype=bool)
        return self.free_mask

    @property
    def tangent_dim(self) -> int:
        return 0 if self.constant else int(self.mask.sum())

    def plus(self, value: np.ndarray, delta: np.ndarray) -> np.ndarray:
        out = np.asarray(value, dtype=np.float64).copy()
        out[self.mask] += delta
        if self.project is not None:
            out = self.project(out)
        return out

    def difference(self, new, old) -> np.ndarray:
        return np.asarray(new, dtype=np.float64) - np.asarray(old, dtype=np.float64)


@dataclass
class PoseBlock:
    """SE(3) block updated by a 6-vector (angle-axis, translation) retraction."""

    key: Hashable
    value: Pose
    constant: bool = False
    free_mask: Optional[np.ndarray] = None  # over the 6 local coordinates
    kind: str = "camera"
    project = None

    def __post_init__(self):
        if self.free_mask is not None:
            self.free_mask = np.asarray(self.free_mask, dtype=bool).reshape(6)

    @property
    def full_dim(self) -> int:
        return 6

    @property
    def mask(self) -> np.ndarray:
        if self.free_mask is None:
            return np.ones(6, dtype=bool)
        return self.free_mask

    @property
    def tangent_dim(self) -> int:
        return 0 if self.constant else int(self.mask.sum())

    def plus(self, value: Pose, delta: np.ndarray) -> Pose:
        full = np.zeros(6)
        full[self.mask] = delta
        return value.retract(full)

    def difference(self, new: Pose, old: Pose) -> np.ndarray:
        return new.local_difference(old)


@dataclass
class ResidualBlock:
    """One robustified residual term referencing parameter blocks by key.

    fn(values, with_jacobians) must return (r, jacobians or None) where
    jacobians line up with block_keys and carry full local dimensions
    (masking is the engine's business).
    """

    key: Hashable
    block_keys: Tuple[Hashable, ...]
    dim: int
    fn: Callable
    loss: RobustLoss = field(default_factory=RobustLoss.trivial)
    weight: float = 1.0


class LMProblem:
    """Container of parameter and residual blocks."""

    def __init__(self, on_failure: str = "raise"):
        if on_failure not in ("raise", "reject", "drop"):
            raise ValueError("on_failure must be raise, reject or drop")
        self.blocks: Dict[Hashable, object] = {}
        self.residuals: List[ResidualBlock] = []
        self.on_failure = on_failure

    def add_block(self, block):
        if block.key in self.blocks:
            raise ValueError(f"duplicate parameter block {block.key!r}")
        self.blocks[block.key] = block
        return block

    def add_residual(self, residual: ResidualBlock):
        for bk in residual.block_keys:
            if bk not in self.blocks:
                raise ValueError(f"residual references unknown block {bk!r}")
        self.residuals.append(residual)
        return residual

    def initial_state(self) -> Dict[Hashable, object]:
        return {k: b.value for k, b in self.blocks.items()}

    def evaluate_residuals(
        self,
        state: Dict[Hashable, object],
        indices: Sequence[int],
        with_jacobians: bool,
    ) -> Dict[int, Optional[tuple]]:
        """Evaluate the listed residual blocks at `state`.

        Returns {index: (r, jacobians) or None}; None marks a failed
        evaluation when the failure policy is not "raise".
        """
        out: Dict[int, Optional[tuple]] = {}
        for idx in indices:
            rb = self.residuals[idx]
            values = tuple(state[k] for k in rb.block_keys)
            try:
                out[idx] = rb.fn(values, with_jacobians)
            except RESIDUAL_FAILURES:
                if self.on_failure == "raise":
                    raise
                out[idx] = None
        return out


# --- linear algebra -------------------------------------------------------------


@dataclass
class PointSystem:
    """Normal-equation contribution of a single point block."""

    h_pp: np.ndarray  # (d, d)
    g_p: np.ndarray  # (d,)
    coupling: np.ndarray  # (NC, d)


@dataclass
class SchurSystem:
    """Block normal equations H delta = g with a camera part and independent
    point parts (point-point coupling must be block-diagonal)."""

    h_cc: np.ndarray  # (NC, NC)
    g_c: np.ndarray  # (NC,)
    points: Dict[Hashable, PointSystem]

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """Assemble the full joint system (for checks and fallbacks)."""
        keys = sorted(self.points, key=repr)
        nc = self.h_cc.shape[0]
        dims = [self.points[k].h_pp.shape[0] for k in keys]
        n = nc + sum(dims)
        H = np.zeros((n, n))
        g = np.zeros(n)
        H[:nc, :nc] = self.h_cc
        g[:nc] = self.g_c
        off = nc
        for k, d in zip(keys, dims):
            pb = self.points[k]
            H[off : off + d, off : off + d] = pb.h_pp
            H[:nc, off : off + d] = pb.coupling
            H[off : off + d, :nc] = pb.coupling.T
            g[off : off + d] = pb.g_p
            off += d
        return H, g


def _solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(A)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def schur_solve(
    system: SchurSystem, point_regularization: float = 0.0
) -> Tuple[np.ndarray, Dict[Hashable, np.ndarray]]:
    """Solve the block system by eliminating the point blocks.

    Forms the reduced camera system, solves it, then back-substitutes each
    point. Raises SingularPointBlock when a point's Hessian block cannot be
    factorized even after adding `point_regularization` to its diagonal; the
    reduced camera solve propagates numpy's LinAlgError on singularity.
    """
    nc = system.h_cc.shape[0]
    reduced = system.h_cc.astype(np.float64).copy()
    rhs = system.g_c.astype(np.float64).copy()
    factors: Dict[Hashable, np.ndarray] = {}
    for key in sorted(system.points, key=repr):
        pb = system.points[key]
        h_pp = pb.h_pp
        try:
            np.linalg.cholesky(h_pp)
        except np.linalg.LinAlgError:
            if point_regularization > 0.0:
                h_pp = h_pp + point_regularization * np.eye(h_pp.shape[0])
            try:
                np.linalg.cholesky(h_pp)
            except np.linalg.LinAlgError:
                raise SingularPointBlock(
                    f"point block {key!r} is singular"
                ) from None
        factors[key] = h_pp
        hinv_bt = _solve_spd(h_pp, pb.coupling.T)  # (d, NC)
        reduced -= pb.coupling @ hinv_bt
        rhs -= pb.coupling @ _solve_spd(h_pp, pb.g_p)
    if nc > 0:
        delta_c = np.linalg.solve(reduced, rhs)
    else:
        delta_c = np.zeros(0)
    deltas_p: Dict[Hashable, np.ndarray] = {}
    for key in sorted(system.points, key=repr):
        pb = system.points[key]
        deltas_p[key] = _solve_spd(factors[key], pb.g_p - pb.coupling.T @ delta_c)
    return delta_c, deltas_p


# --- options and results --------------------------------------------------------


@dataclass
class LMOptions:
    max_iterations: int = 100
    parameter_tolerance: float = 1e-4
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 10.0
    embedded_point_iterations: int = 10
    max_damping: float = 1e8

    def __post_init__(self):
        for name in (
            "max_iterations",
            "parameter_tolerance",
            "initial_damping",
            "damping_increase",
            "damping_decrease",
            "max_damping",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embedded_point_iterations < 0:
            raise ValueError("embedded_point_iterations must be >= 0")


@dataclass
class DroppedResidual:
    key: Hashable
    iteration: int
    reason: str


@dataclass
class LMResult:
    state: Dict[Hashable, object]
    cost_trace: List[float]
    termination: str
    iterations: int
    dropped: List[DroppedResidual]
    active_count: int
    total_count: int

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]


# --- the solver ------------------------------------------------------------------


class _Workspace:
    """Index maps shared by the assembly and solve steps."""

    def __init__(self, problem: LMProblem):
        self.problem = problem
        self.dense_keys: List[Hashable] = []
        self.point_keys: List[Hashable] = []
        for key, block in problem.blocks.items():
            if block.tangent_dim == 0:
                continue
            if block.kind == "point":
                self.point_keys.append(key)
            else:
                self.dense_keys.append(key)
        # Schur elimination needs each residual to touch at most one point
        self.schur_ok = True
        point_set = set(self.point_keys)
        for rb in problem.residuals:
            if sum(1 for k in rb.block_keys if k in point_set) > 1:
                self.schur_ok = False
                break
        if not self.schur_ok:
            self.dense_keys = self.dense_keys + self.point_keys
            self.point_keys = []
        self.offsets: Dict[Hashable, int] = {}
        off = 0
        for key in self.dense_keys:
            self.offsets[key] = off
            off += problem.blocks[key].tangent_dim
        self.nc = off
        self.point_residuals: Dict[Hashable, List[int]] = {k: [] for k in self.point_keys}
        for idx, rb in enumerate(problem.residuals):
            for k in rb.block_keys:
                if k in self.point_residuals:
                    self.point_residuals[k].append(idx)

    @property
    def has_free(self) -> bool:
        return self.nc > 0 or bool(self.point_keys)


def _robust_scale(rb: ResidualBlock, r: np.ndarray) -> Tuple[float, float]:
    """(cost contribution, residual/Jacobian scaling) for one residual block."""
    s = float(r @ r)
    rho, rho1, _ = loss_evaluate(rb.loss, s)
    cost = rb.weight * float(rho)
    scale = math.sqrt(max(rb.weight * float(rho1), 0.0))
    return cost, scale


def _evaluate_costs(problem, state, indices) -> Tuple[Dict[int, float], Set[int]]:
    """Per-residual robust costs at `state`; returns (costs, failed indices)."""
    results = problem.evaluate_residuals(state, indices, with_jacobians=False)
    costs: Dict[int, float] = {}
    failed: Set[int] = set()
    for idx in indices:
        res = results.get(idx)
        if res is None:
            failed.add(idx)
            continue
        r = np.asarray(res[0], dtype=np.float64)
        costs[idx] = _robust_scale(problem.residuals[idx], r)[0]
    return costs, failed


def build_normal_equations(
    problem: LMProblem,
    state: Dict[Hashable, object],
    active: Sequence[int],
    workspace: Optional[_Workspace] = None,
) -> Tuple[SchurSystem, Set[int]]:
    """Assemble robustified normal equations over the active residuals.

    Returns (system, failed_indices); the gradient is stored negated so that
    schur_solve(system) directly yields the descent update.
    """
    ws = workspace if workspace is not None else _Workspace(problem)
    h_cc = np.zeros((ws.nc, ws.nc))
    g_c = np.zeros(ws.nc)
    points: Dict[Hashable, PointSystem] = {}
    results = problem.evaluate_residuals(state, active, with_jacobians=True)
    failed: Set[int] = set()
    for idx in active:
        res = results.get(idx)
        if res is None:
            failed.add(idx)
            continue
        rb = problem.residuals[idx]
        r = np.asarray(res[0], dtype=np.float64)
        jacs = res[1]
        _, scale = _robust_scale(rb, r)
        if scale == 0.0:
            continue
        r_s = scale * r
        dense_parts: List[Tuple[int, int, np.ndarray]] = []
        point_part: Optional[Tuple[Hashable, np.ndarray]] = None
        for bk, J in zip(rb.block_keys, jacs):
            block = problem.blocks[bk]
            if block.tangent_dim == 0:
                continue
            Jm = scale * np.asarray(J, dtype=np.float64)[:, block.mask]
            if bk in ws.offsets:
                dense_parts.append((ws.offsets[bk], block.tangent_dim, Jm))
            else:
                point_part = (bk, Jm)
        for oi, di, Ji in dense_parts:
            g_c[oi : oi + di] -= Ji.T @ r_s
            for oj, dj, Jj in dense_parts:
                h_cc[oi : oi + di, oj : oj + dj] += Ji.T @ Jj
        if point_part is not None:
            pk, Jp = point_part
            ps = points.get(pk)
            if ps is None:
                d = problem.blocks[pk].tangent_dim
                ps = PointSystem(np.zeros((d, d)), np.zeros(d), np.zeros((ws.nc, d)))
                points[pk] = ps
            ps.h_pp += Jp.T @ Jp
            ps.g_p -= Jp.T @ r_s
            for oi, di, Ji in dense_parts:
                ps.coupling[oi : oi + di, :] += Ji.T @ Jp
    return SchurSystem(h_cc, g_c, points), failed


def _damped(system: SchurSystem, damping: float) -> SchurSystem:
    def damp(H):
        if H.size == 0:
            return H.copy()
        d = np.maximum(np.diag(H), DAMPING_DIAGONAL_FLOOR)
        return H + np.diag(damping * d)

    return SchurSystem(
        damp(system.h_cc),
        system.g_c.copy(),
        {
            k: PointSystem(damp(p.h_pp), p.g_p.copy(), p.coupling.copy())
            for k, p in system.points.items()
        },
    )


def _apply_step(problem, ws, state, delta_c, deltas_p):
    new_state = dict(state)
    for key in ws.dense_keys:
        block = problem.blocks[key]
        off = ws.offsets[key]
        new_state[key] = block.plus(state[key], delta_c[off : off + block.tangent_dim])
    for key, dp in deltas_p.items():
        block = problem.blocks[key]
        new_state[key] = block.plus(state[key], dp)
    return new_state


def _max_change(problem, ws, new_state, state) -> float:
    moved = 0.0
    for key in ws.dense_keys + ws.point_keys:
        block = problem.blocks[key]
        diff = np.asarray(block.difference(new_state[key], state[key]))
        if diff.size:
            moved = max(moved, float(np.max(np.abs(diff))))
    return moved


def _embedded_point_pass(problem, ws, state, active, opts) -> Dict[Hashable, object]:
    """Re-minimize each free point independently after a camera update.

    Every accepted inner step strictly lowers that point's own cost, so the
    global cost cannot increase. Failures leave the point unchanged.
    """
    new_state = dict(state)
    active_set = set(active)
    for key in ws.point_keys:
        indices = [i for i in ws.point_residuals[key] if i in active_set]
        if not indices:
            continue
        block = problem.blocks[key]
        costs, failed = _evaluate_costs(problem, new_state, indices)
        live = [i for i in indices if i not in failed]
        if not live:
            continue
        local_cost = sum(costs[i] for i in live)
        damping = opts.initial_damping
        for _ in range(opts.embedded_point_iterations):
            results = problem.evaluate_residuals(new_state, live, with_jacobians=True)
            d = block.tangent_dim
            H = np.zeros((d, d))
            g = np.zeros(d)
            ok = True
            for i in live:
                res = results.get(i)
                if res is None:
                    ok = False
                    break
                rb = problem.residuals[i]
                r = np.asarray(res[0], dtype=np.float64)
                _, scale = _robust_scale(rb, r)
                kpos = rb.block_keys.index(key)
                Jm = scale * np.asarray(res[1][kpos], dtype=np.float64)[:, block.mask]
                H += Jm.T @ Jm
                g -= Jm.T @ (scale * r)
            if not ok:
                break
            accepted = False
            while damping <= opts.max_damping:
                Hd = H + np.diag(
                    damping * np.maximum(np.diag(H), DAMPING_DIAGONAL_FLOOR)
                )
                try:
                    delta = _solve_spd(Hd, g)
                except np.linalg.LinAlgError:
                    damping *= opts.damping_increase
                    continue
                candidate = dict(new_state)
                candidate[key] = block.plus(new_state[key], delta)
                cand_costs, cand_failed = _evaluate_costs(problem, candidate, live)
                if cand_failed:
                    damping *= opts.damping_increase
                    continue
                cand_cost = sum(cand_costs[i] for i in live)
                if cand_cost < local_cost:
                    new_state[key] = candidate[key]
                    local_cost = cand_cost
                    damping = max(damping / opts.damping_decrease, 1e-12)
                    accepted = True
                    step = float(np.max(np.abs(delta))) if delta.size else 0.0
                    if step < opts.parameter_tolerance:
                        accepted = False  # converged; stop inner loop
                    break
                damping *= opts.damping_increase
            if not accepted:
                break
    return new_state


def lm_solve(problem: LMProblem, opts: Optional[LMOptions] = None) -> LMResult:
    """Minimize the problem's robustified cost by damped Gauss-Newton steps.

    The accepted-cost trace is non-increasing. Termination is one of
    "converged" (parameter change below tolerance), "max_iterations",
    "stalled" (no acceptable step up to the damping cap) or
    "no_free_parameters".
    """
    opts = opts if opts is not None else LMOptions()
    ws = _Workspace(problem)
    state = problem.initial_state()
    total = len(problem.residuals)
    all_indices = list(range(total))
    dropped: List[DroppedResidual] = []

    costs, failed = _evaluate_costs(problem, state, all_indices)
    if failed and problem.on_failure == "reject":
        raise NumericalFailure("residuals are infeasible at the initial state")
    active = [i for i in all_indices if i not in failed]
    for i in sorted(failed):
        dropped.append(DroppedResidual(problem.residuals[i].key, 0, "initial"))
    cost = sum(costs[i] for i in active)
    trace = [cost]

    if not ws.has_free:
        return LMResult(state, trace, "no_free_parameters", 0, dropped, len(active), total)

    damping = opts.initial_damping
    termination = "max_iterations"
    iterations = 0
    for outer in range(1, opts.max_iterations + 1):
        iterations = outer
        system, eval_failed = build_normal_equations(problem, state, active, ws)
        if eval_failed:
            # active residuals failing at the current accepted state
            if problem.on_failure == "drop":
                for i in sorted(eval_failed):
                    dropped.append(
                        DroppedResidual(problem.residuals[i].key, outer, "current state")
                    )
                active = [i for i in active if i not in eval_failed]
                cost = sum(_evaluate_costs(problem, state, active)[0].values())
                trace.append(cost)
                continue
            raise NumericalFailure("residual evaluation failed at an accepted state")

        accepted = False
        small_step = False
        while damping <= opts.max_damping:
            damped = _damped(system, damping)
            try:
                delta_c, deltas_p = schur_solve(
                    damped, point_regularization=damping * DAMPING_DIAGONAL_FLOOR
                )
            except (np.linalg.LinAlgError, SingularPointBlock):
                damping *= opts.damping_increase
                if damping > opts.max_damping:
                    raise NumericalFailure(
                        f"normal equations singular at damping {damping:g}"
                    ) from None
                continue
            step_norm = 0.0
            if delta_c.size:
                step_norm = float(np.max(np.abs(delta_c)))
            for dp in deltas_p.values():
                if dp.size:
                    step_norm = max(step_norm, float(np.max(np.abs(dp))))
            if not np.isfinite(step_norm):
                damping *= opts.damping_increase
                if damping > opts.max_damping:
                    raise NumericalFailure("non-finite update")
                continue
            candidate = _apply_step(problem, ws, state, delta_c, deltas_p)
            try:
                cand_costs, cand_failed = _evaluate_costs(problem, candidate, active)
            except RESIDUAL_FAILURES:
                if problem.on_failure == "reject":
                    # candidate left the feasible region; shrink the step
                    damping *= opts.damping_increase
                    continue
                raise
            if cand_failed and problem.on_failure != "drop":
                damping *= opts.damping_increase
                continue
            live = [i for i in active if i not in cand_failed]
            cand_cost = sum(cand_costs[i] for i in live)
            base_cost = sum(costs[i] for i in live if i in costs)
            if cand_cost < base_cost:
                for i in sorted(cand_failed):
                    dropped.append(
                        DroppedResidual(problem.residuals[i].key, outer, "left support")
                    )
                active = live
                moved = _max_change(problem, ws, candidate, state)
                state = candidate
                costs = cand_costs
                cost = cand_cost
                damping = max(damping / opts.damping_decrease, 1e-12)
                accepted = True
                if opts.embedded_point_iterations > 0 and ws.point_keys and ws.nc > 0:
                    state = _embedded_point_pass(problem, ws, state, active, opts)
                    costs, _ = _evaluate_costs(problem, state, active)
                    cost = sum(costs.values())
                trace.append(cost)
                if moved < opts.parameter_tolerance:
                    termination = "converged"
                break
            if step_norm < opts.parameter_tolerance:
                small_step = True
                break
            damping *= opts.damping_increase
        if small_step:
            termination = "converged"
            break
        if not accepted:
            termination = "stalled"
            break
        if termination == "converged":
            break

    for key, block in problem.blocks.items():
        block.value = state[key]
    return LMResult(state, trace, termination, iterations, dropped, len(active), total)
