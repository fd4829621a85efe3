"""Client-side receding-horizon tracking of the retimed reference.

The plant realizes commands through q_{k+1} = a q_k + (1-a) y_k, so running
it at speed requires commanding *beyond* the reference: the tracker solves,
at every tick, a constrained QP over the next N commands that minimizes

    sum_k [ ||q_k - r_k||^2 + lambda_cmd ||y_k - r_k||^2
            + lambda_lag ||y_k - q_k||^2 + lambda_d1 ||y_k - y_{k-1}||^2
            + lambda_d2 ||y_k - 2 y_{k-1} + y_{k-2}||^2 ]
    + lambda_f ||q_N - r_N||^2

subject to joint bounds on y, a command-state gap bound d_max (which caps
how aggressive the pre-amplification may get), and first/second difference
limits on the command sequence. The predicted states q_k are eliminated by
unrolling the known linear dynamics, so the QP is dense in the commands
only; with the dynamics being identical and independent per joint, the
per-joint problems share one matrix structure and are solved as a batch
against a single cached factorization. That is what keeps a tick within a
10 ms servo budget.

State estimation: feedback arrives delayed, so the tracker keeps a log of
issued commands and replays their effect through the lag model from the
feedback's sample time up to now, yielding a corrected current state.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import JointVector
from .qp import QpProblem, QpStructure, solve_qp

__all__ = [
    "SpatialParams",
    "TrackerState",
    "Tracker",
    "TickResult",
    "replay_correction",
    "build_tracker_qp",
    "tracker_tick",
]


@dataclass
class SpatialParams:
    N: int = 20
    h: float = 0.01
    lambda_cmd: float = 0.005
    lambda_lag: float = 0.005
    lambda_d1: float = 0.02
    lambda_d2: float = 0.01
    lambda_f: float = 1.0
    q_min: np.ndarray | float = -2.8
    q_max: np.ndarray | float = 2.8
    d_max: np.ndarray | float = 0.35
    v_max_cmd: np.ndarray | float = 6.0
    a_max_cmd: np.ndarray | float = 250.0

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ValueError("horizon N must be at least 2")
        if self.h <= 0:
            raise ValueError("tick h must be positive")
        for name in ("lambda_cmd", "lambda_lag", "lambda_d1", "lambda_d2", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def per_joint(self, name: str, n_joints: int) -> np.ndarray:
        value = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
        if value.shape == (1,):
            return np.full(n_joints, value[0])
        if value.shape != (n_joints,):
            raise ValueError(f"{name} must be scalar or per-joint")
        return value


@dataclass
class TrackerState:
    """Per-robot tracking state owned by the control loop."""

    y_prev1: JointVector
    y_prev2: JointVector
    corrected_q: JointVector
    command_log: list = field(default_factory=list)  # (timestamp, command)
    warm_primal: np.ndarray | None = None
    warm_dual: np.ndarray | None = None
    warm_active: list | None = None


@dataclass
class TickResult:
    command: JointVector
    degraded: bool
    solve_seconds: float
    iterations: int


def _unrolled_dynamics(a: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """State maps: q = S @ y + a_pow * q0, rows k = 0..N."""
    s = np.zeros((n + 1, n))
    for k in range(1, n + 1):
        # q_k = a^k q0 + (1-a) * sum_{i<k} a^(k-1-i) y_i
        s[k, :k] = (1.0 - a) * a ** np.arange(k - 1, -1, -1)
    a_pow = a ** np.arange(n + 1)
    return s, a_pow


def _difference_rows(n: int, order: int) -> np.ndarray:
    d = np.eye(n)
    if order >= 1:
        d[1:, :] -= np.eye(n)[:-1, :]
    if order == 2:
        d2 = np.eye(n)
        d2[1:, :] -= 2.0 * np.eye(n)[:-1, :]
        d2[2:, :] += np.eye(n)[:-2, :]
        return d2
    return d


class Tracker:
    """Receding-horizon tracker for a fixed (params, lag, joint count)."""

    def __init__(self, params: SpatialParams, a: float, n_joints: int) -> None:
        if not (0.0 < a < 1.0):
            raise ValueError("lag coefficient a must lie in (0, 1)")
        self.params = params
        self.a = a
        self.n_joints = n_joints
        n = params.N
        self.S, self.a_pow = _unrolled_dynamics(a, n)
        eye = np.eye(n)
        d1 = _difference_rows(n, 1)
        d2 = _difference_rows(n, 2)

        weights = []
        blocks = []
        # realized-trajectory tracking, k = 1..N-1 (k=0 is a constant)
        blocks.append(self.S[1:n])
        weights.append(np.ones(n - 1))
        # terminal
        blocks.append(self.S[n : n + 1])
        weights.append(np.array([params.lambda_f]))
        # command proximity to reference
        blocks.append(eye)
        weights.append(np.full(n, params.lambda_cmd))
        # pre-amplification magnitude
        blocks.append(eye - self.S[:n])
        weights.append(np.full(n, params.lambda_lag))
        # command velocity / curvature regularization
        blocks.append(d1)
        weights.append(np.full(n, params.lambda_d1))
        blocks.append(d2)
        weights.append(np.full(n, params.lambda_d2))

        g = np.concatenate(blocks, axis=0)
        w = np.concatenate(weights)
        wsqrt = np.sqrt(w)
        self.Gw = g * wsqrt[:, None]
        self._wsqrt = wsqrt
        self._row_slices = {}
        offset = 0
        for name, block in zip(
            ("track", "terminal", "cmd", "lag", "d1", "d2"), blocks
        ):
            self._row_slices[name] = slice(offset, offset + block.shape[0])
            offset += block.shape[0]
        self.P = 2.0 * self.Gw.T @ self.Gw

        # Constraints: box on y, command-state gap, rate, curvature.
        self.A = np.concatenate([eye, eye - self.S[:n], d1, d2], axis=0)
        self._con_slices = {
            "box": slice(0, n),
            "gap": slice(n, 2 * n),
            "rate": slice(2 * n, 3 * n),
            "curv": slice(3 * n, 4 * n),
        }
        self.structure = QpStructure(
            self.P, self.A, eps_abs=1e-7, eps_rel=1e-7, check_every=10,
            max_iter=2500,
        )
        self._n_rows = g.shape[0]
        # constant per-tick bound templates
        p, j = params, n_joints
        self._q_min = p.per_joint("q_min", j)
        self._q_max = p.per_joint("q_max", j)
        self._d_max = p.per_joint("d_max", j)
        self._v_max = p.per_joint("v_max_cmd", j)
        self._a_max = p.per_joint("a_max_cmd", j)
        # The state-gap bound anchors on the noisy state estimate; planning
        # against a slightly tightened bound keeps the next tick's problem
        # feasible when the estimate moves (recursive feasibility margin).
        # The emitted command is still checked against the full bound.
        self._d_plan = self._d_max - np.minimum(0.01 * self._d_max, 0.005)
        self._box_l = np.tile(self._q_min, (n, 1))
        self._box_u = np.tile(self._q_max, (n, 1))
        self._rate_band = np.tile(p.h * self._v_max, (n, 1))
        self._curv_band = np.tile(p.h * p.h * self._a_max, (n, 1))

    def shift_dual(self, dual: np.ndarray) -> np.ndarray:
        """Advance a dual iterate one tick: shift each constraint family."""
        out = dual.copy()
        for sl in self._con_slices.values():
            block = dual[sl]
            out[sl] = np.vstack([block[1:], block[-1:]])
        return out

    # -- per-tick data -----------------------------------------------------

    def _targets(self, q0, y1, y2, ref) -> np.ndarray:
        n, j = self.params.N, self.n_joints
        s0 = self.a_pow[:, None] * q0[None, :]  # (N+1, J)
        h = np.zeros((self._n_rows, j))
        h[self._row_slices["track"]] = ref[1:n] - s0[1:n]
        h[self._row_slices["terminal"]] = ref[n : n + 1] - s0[n : n + 1]
        h[self._row_slices["cmd"]] = ref[:n]
        h[self._row_slices["lag"]] = s0[:n]
        d1 = np.zeros((n, j))
        d1[0] = y1
        h[self._row_slices["d1"]] = d1
        d2 = np.zeros((n, j))
        d2[0] = 2.0 * y1 - y2
        d2[1] = -y1
        h[self._row_slices["d2"]] = d2
        return h

    def _bounds(self, q0, y1, y2) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        n, j = p.N, self.n_joints
        l = np.empty((4 * n, j))
        u = np.empty((4 * n, j))
        l[self._con_slices["box"]] = self._box_l
        u[self._con_slices["box"]] = self._box_u
        s0 = self.a_pow[:n, None] * q0[None, :]
        l[self._con_slices["gap"]] = s0 - self._d_plan[None, :]
        u[self._con_slices["gap"]] = s0 + self._d_plan[None, :]
        shift = np.zeros((n, j))
        shift[0] = y1
        l[self._con_slices["rate"]] = shift - self._rate_band
        u[self._con_slices["rate"]] = shift + self._rate_band
        shift2 = np.zeros((n, j))
        shift2[0] = 2.0 * y1 - y2
        shift2[1] = -y1
        l[self._con_slices["curv"]] = shift2 - self._curv_band
        u[self._con_slices["curv"]] = shift2 + self._curv_band
        return l, u

    def linear_term(self, q0, y1, y2, ref) -> np.ndarray:
        h = self._targets(q0, y1, y2, ref)
        return -2.0 * self.Gw.T @ (self._wsqrt[:, None] * h)

    def solve_window(
        self,
        q0,
        y1,
        y2,
        ref,
        warm: tuple | None = None,
        warm_active: list | None = None,
    ):
        """Solve the batched per-joint QPs; returns (Y (N, J), solution).

        Tries the exact warm-started active-set path first (typical tick:
        zero or few working-set changes); falls back to the splitting
        solver when it does not certify optimality.
        """
        q_lin = self.linear_term(q0, y1, y2, ref)
        l, u = self._bounds(q0, y1, y2)
        sol = self.structure.solve_active(q_lin, l, u, warm_active=warm_active)
        if sol is None:
            sol = self.structure.solve(q_lin, l, u, warm_start=warm)
        return sol.x, sol


def build_tracker_qp(
    q0: JointVector,
    y_prev1: JointVector,
    y_prev2: JointVector,
    reference: np.ndarray,
    params: SpatialParams,
    a: float,
) -> QpProblem:
    """Full stacked QP over all joints (joint-major variable ordering).

    This is the contract surface and test oracle path; the per-tick solve
    uses the batched per-joint structure, which is the same problem.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim == 1:
        reference = reference[:, None]
    n_joints = reference.shape[1]
    if reference.shape[0] != params.N + 1:
        raise ValueError(f"reference needs N+1={params.N + 1} rows")
    q0 = np.asarray(q0, dtype=float)
    y1 = np.asarray(y_prev1, dtype=float)
    y2 = np.asarray(y_prev2, dtype=float)
    tracker = Tracker(params, a, n_joints)
    q_lin = tracker.linear_term(q0, y1, y2, reference)
    l, u = tracker._bounds(q0, y1, y2)
    n = params.N
    big_p = np.kron(np.eye(n_joints), tracker.P)
    big_a = np.kron(np.eye(n_joints), tracker.A)
    big_q = q_lin.T.reshape(-1)
    big_l = l.T.reshape(-1)
    big_u = u.T.reshape(-1)
    return QpProblem(P=big_p, q=big_q, A=big_a, l=big_l, u=big_u)


def replay_correction(
    feedback: tuple[float, JointVector],
    command_log: list,
    a: float,
    h: float,
    q_min: np.ndarray | None = None,
    q_max: np.ndarray | None = None,
) -> tuple[JointVector, bool]:
    """Corrected current state from delayed feedback plus the command log.

    Folds q <- a q + (1-a) y over every logged command issued at or after
    the feedback sample time. Missing ticks are bridged by holding the last
    command (zero-order hold); the second return value flags whether such a
    gap was encountered. Commands are clamped to the joint limits when
    given, matching the firmware-side clamp in the plant.
    """
    t_fb, q = feedback
    q = np.asarray(q, dtype=float).copy()
    gap = False
    relevant = sorted(
        ((t, y) for t, y in command_log if t >= t_fb - 1e-9), key=lambda item: item[0]
    )
    cursor = t_fb
    prev_y = None
    for t, y in relevant:
        missing = int(round((t - cursor) / h))
        if missing > 0 and prev_y is not None:
            gap = True
            for _ in range(missing):
                q = a * q + (1.0 - a) * prev_y
        y = np.asarray(y, dtype=float)
        if q_min is not None:
            y = np.clip(y, q_min, q_max)
        q = a * q + (1.0 - a) * y
        cursor = t + h
        prev_y = y
    return q, gap


def tracker_tick(
    tracker: Tracker,
    state: TrackerState,
    reference: np.ndarray,
    now: float,
) -> TickResult:
    """One control tick: solve the window, emit and log the first command.

    Warm-started from the previous solution shifted one step. On solver
    failure the previous command is advanced toward the reference under the
    rate limit and the tick is flagged degraded. The emitted command is
    projected into the hard constraint set as a final guard.
    """
    p = tracker.params
    j = tracker.n_joints
    ref = np.asarray(reference, dtype=float)
    if ref.ndim == 1:
        ref = ref[:, None]
    start = time.perf_counter()
    warm = None
    if state.warm_primal is not None:
        warm = (state.warm_primal, state.warm_dual)
    y_matrix, sol = tracker.solve_window(
        state.corrected_q, state.y_prev1, state.y_prev2, ref,
        warm=warm, warm_active=state.warm_active,
    )
    elapsed = time.perf_counter() - start

    degraded = not sol.solved
    if degraded and sol.status == "max_iter":
        # best-effort iterate: near-feasible and far better than a myopic
        # step; the projection below enforces the hard bounds exactly
        command = y_matrix[0].copy()
        state.warm_primal = np.vstack([y_matrix[1:], y_matrix[-1:]])
        state.warm_dual = tracker.shift_dual(sol.y)
        state.warm_active = None
    elif degraded:
        step = np.clip(
            ref[0] - state.y_prev1, -tracker._v_max * p.h, tracker._v_max * p.h
        )
        command = state.y_prev1 + step
        state.warm_primal = None
        state.warm_dual = None
        state.warm_active = None
    else:
        command = y_matrix[0].copy()
        state.warm_primal = np.vstack([y_matrix[1:], y_matrix[-1:]])
        state.warm_dual = tracker.shift_dual(sol.y)
        state.warm_active = sol.active_sets

    # Hard-constraint projection (numerical guard, normally a no-op). If the
    # state-gap band conflicts with the kinematic bands (a large estimate
    # jump), the kinematic limits win: they protect the hardware.
    kin_lo = np.maximum.reduce(
        [
            tracker._q_min,
            state.y_prev1 - p.h * tracker._v_max,
            2.0 * state.y_prev1 - state.y_prev2 - p.h**2 * tracker._a_max,
        ]
    )
    kin_hi = np.minimum.reduce(
        [
            tracker._q_max,
            state.y_prev1 + p.h * tracker._v_max,
            2.0 * state.y_prev1 - state.y_prev2 + p.h**2 * tracker._a_max,
        ]
    )
    lo = np.maximum(kin_lo, state.corrected_q - tracker._d_max)
    hi = np.minimum(kin_hi, state.corrected_q + tracker._d_max)
    use_full = lo <= hi
    lo = np.where(use_full, lo, kin_lo)
    hi = np.where(use_full, hi, kin_hi)
    valid = lo <= hi
    command = np.where(valid, np.clip(command, lo, hi), command)

    state.command_log.append((now, command.copy()))
    state.y_prev2 = state.y_prev1
    state.y_prev1 = command.copy()
    # Model-propagated estimate between feedback packets.
    state.corrected_q = tracker.a * state.corrected_q + (1.0 - tracker.a) * command
    return TickResult(
        command=command,
        degraded=degraded,
        solve_seconds=elapsed,
        iterations=sol.iterations,
    )
