"""Chunk retiming: re-assign step durations via a convex QP.

Waypoint positions are never touched; only the time spent between
consecutive waypoints changes. The decision variables are the inverse
durations u_i = 1/dt_i, which makes both objective terms quadratic:

    minimize  lambda0 * sum_i (u_i - u_i_ref)^2
            + lambda1 * sum_i || (s_{i+1} + s_{i-1} - 2 s_i) * u_i ||^2

subject to box bounds 1/dt_max <= u_i <= 1/dt_min and per-joint velocity
limits |s_{i+1,j} - s_{i,j}| * u_i <= v_max_j. The reference inverse
duration u_i_ref = scale_i / dt_i_demo encodes the speed-adaptation
target. The second term divides the second difference by dt_i once (not
squared), which keeps the problem quadratic in u; the effect is that steps
with abrupt direction changes get stretched while straight segments absorb
the speed-up, flattening acceleration peaks without changing the average
pace much.

The acceleration term is absent for the first and last step (the second
difference needs both neighbors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Chunk
from .qp import QpProblem, QpSolution, solve_qp

__all__ = [
    "TemporalParams",
    "QpProblem",
    "QpSolution",
    "solve_qp",
    "RetimeResult",
    "build_retiming_qp",
    "retime_chunk",
    "acceleration_proxy",
]


@dataclass
class TemporalParams:
    lambda0: float = 1.0
    lambda1: float = 25.0
    dt_min: float = 0.005
    dt_max: float = 0.5
    v_max: np.ndarray | float = 3.5

    def __post_init__(self) -> None:
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("weights must be non-negative")
        if not (0 < self.dt_min <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_max")
        self.v_max = np.atleast_1d(np.asarray(self.v_max, dtype=float))
        if np.any(self.v_max <= 0):
            raise ValueError("v_max must be positive")


@dataclass
class RetimeResult:
    chunk: Chunk
    converged: bool
    objective: float = np.nan


def _second_differences(waypoints: np.ndarray) -> np.ndarray:
    """Per-step second difference coefficients, zero at the boundary steps.

    Row i (for duration i spanning s_i -> s_{i+1}) is
    s_{i+1} + s_{i-1} - 2 s_i, defined for interior steps only.
    """
    h, j = waypoints.shape
    d = np.zeros((h - 1, j))
    if h >= 3:
        d[1:] = waypoints[2:] + waypoints[:-2] - 2.0 * waypoints[1:-1]
    return d


def acceleration_proxy(chunk: Chunk) -> np.ndarray:
    """Acceleration proxy used by the retiming objective: d_i / dt_i."""
    d = _second_differences(chunk.waypoints)
    return d / chunk.durations[:, None]


def build_retiming_qp(
    chunk: Chunk, ref_scale: np.ndarray, params: TemporalParams
) -> QpProblem:
    """Assemble the inverse-duration QP for a chunk.

    `ref_scale` holds one positive speed factor per step. Velocity limits
    that would contradict the dt_max lower bound on u are widened (the
    step's floor wins) with a warning-free fallback; this keeps the problem
    feasible for any chunk.
    """
    m = chunk.durations.shape[0]
    ref_scale = np.asarray(ref_scale, dtype=float)
    if ref_scale.shape == ():
        ref_scale = np.full(m, float(ref_scale))
    if ref_scale.shape != (m,) or np.any(ref_scale <= 0):
        raise ValueError("ref_scale must be positive with one entry per step")
    v_max = params.v_max
    if v_max.shape == (1,):
        v_max = np.full(chunk.n_joints, v_max[0])
    elif v_max.shape != (chunk.n_joints,):
        raise ValueError("v_max must broadcast over joints")

    u_ref = ref_scale / chunk.durations
    d = _second_differences(chunk.waypoints)
    curvature = np.sum(d * d, axis=1)

    # Objective: lambda0 (u - u_ref)^2 + lambda1 * curvature_i * u_i^2
    diag = 2.0 * (params.lambda0 + params.lambda1 * curvature)
    P = np.diag(diag)
    q = -2.0 * params.lambda0 * u_ref

    # Box rows on u, then per-joint velocity rows |ds| * u <= v_max.
    lo = np.full(m, 1.0 / params.dt_max)
    hi = np.full(m, 1.0 / params.dt_min)
    ds = np.abs(chunk.waypoints[1:] - chunk.waypoints[:-1])  # (m, J)
    rows = [np.eye(m)]
    lower = [lo]
    upper = [hi]
    for j in range(chunk.n_joints):
        active = ds[:, j] > 0
        if not np.any(active):
            continue
        sel = np.zeros((int(active.sum()), m))
        sel[np.arange(int(active.sum())), np.where(active)[0]] = ds[active, j]
        vel_cap = np.full(int(active.sum()), v_max[j])
        # Widen the velocity cap where it would undercut the dt_max floor.
        floor = lo[active] * ds[active, j]
        vel_cap = np.maximum(vel_cap, floor)
        rows.append(sel)
        lower.append(np.full(int(active.sum()), -np.inf))
        upper.append(vel_cap)
    A = np.concatenate(rows, axis=0)
    l = np.concatenate(lower)
    u = np.concatenate(upper)
    return QpProblem(P=P, q=q, A=A, l=l, u=u)


def retime_chunk(
    chunk: Chunk, ref_scale: np.ndarray, params: TemporalParams
) -> RetimeResult:
    """Solve the retiming QP and return the chunk with new durations.

    Waypoints are passed through bit-identical. On solver failure the
    result is flagged non-converged and carries uniformly scaled durations
    (clipped to the dt bounds) as a safe fallback.
    """
    m = chunk.durations.shape[0]
    ref = np.asarray(ref_scale, dtype=float)
    if ref.shape == ():
        ref = np.full(m, float(ref))
    problem = build_retiming_qp(chunk, ref, params)
    sol = solve_qp(problem, warm_start=ref / chunk.durations)
    if not sol.solved:
        fallback = np.clip(chunk.durations / ref, params.dt_min, params.dt_max)
        return RetimeResult(chunk=chunk.with_durations(fallback), converged=False)
    durations = 1.0 / sol.x
    return RetimeResult(
        chunk=chunk.with_durations(durations),
        converged=True,
        objective=sol.objective,
    )
