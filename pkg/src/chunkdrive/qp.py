"""Dense convex QP solver based on ADMM operator splitting.

Solves problems of the form

    minimize    1/2 x' P x + q' x
    subject to  l <= A x <= u

with P symmetric positive semidefinite. The iteration is the standard
operator-splitting scheme (regularized KKT solve, projection, dual update,
over-relaxation) followed by an active-set polish step that solves the
equality-constrained KKT system on the detected active set, so converged
solutions reach residuals far below the termination tolerance.

Two entry points:

- :func:`solve_qp` for a single problem.
- :class:`QpStructure` for repeated solves that share (P, A) and only change
  (q, l, u), optionally batched column-wise. The KKT factorization is done
  once and reused, which is what makes the per-tick tracking solve cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "QpProblem",
    "QpSolution",
    "QpStructure",
    "solve_qp",
    "SOLVED",
    "MAX_ITER",
    "PRIMAL_INFEASIBLE",
    "DUAL_INFEASIBLE",
]

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"

_SYM_TOL = 1e-12


@dataclass
class QpProblem:
    """Canonical box/linear-inequality QP data."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n = self.P.shape[0]
        if self.P.shape != (n, n):
            raise ValueError("P must be square")
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > _SYM_TOL * max(
            1.0, np.max(np.abs(self.P), initial=0.0)
        ):
            raise ValueError("P must be symmetric")
        if self.A.ndim != 2 or self.A.shape[1] != n:
            raise ValueError("A must have shape (m, n)")
        m = self.A.shape[0]
        if self.q.shape != (n,) or self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("q/l/u dimensions inconsistent with P/A")
        if np.any(self.l > self.u):
            raise ValueError("l must be <= u elementwise")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = field(default=np.nan)
    active_sets: list | None = None

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


class QpStructure:
    """Reusable solver state for a fixed (P, A) sparsity-free dense QP.

    `solve` accepts q/l/u either as vectors or as (n, B)/(m, B) column
    batches; each column is an independent QP sharing the factorization.
    """

    def __init__(
        self,
        P: np.ndarray,
        A: np.ndarray,
        *,
        sigma: float = 1e-6,
        rho: float = 0.1,
        alpha: float = 1.6,
        eps_abs: float = 1e-7,
        eps_rel: float = 1e-7,
        eps_inf: float = 1e-9,
        max_iter: int = 50_000,
        check_every: int = 25,
        adapt_rho: bool = True,
        polish: bool = True,
    ) -> None:
        self.P = np.ascontiguousarray(P, dtype=float)
        self.A = np.ascontiguousarray(A, dtype=float)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        # Row equilibration of A: mixed constraint scales (position bounds vs
        # per-tick rate/curvature rows) otherwise stall the splitting.
        row_norm = np.max(np.abs(self.A), axis=1, initial=0.0) if self.m else np.zeros(0)
        self._row_scale = np.where(row_norm > 1e-12, 1.0 / np.maximum(row_norm, 1e-12), 1.0)
        self.A_scaled = np.ascontiguousarray(self.A * self._row_scale[:, None])
        self._ata = self.A_scaled.T @ self.A_scaled
        self.sigma = sigma
        self.rho = rho
        self.alpha = alpha
        self.eps_abs = eps_abs
        self.eps_rel = eps_rel
        self.eps_inf = eps_inf
        self.max_iter = max_iter
        self.check_every = check_every
        self.adapt_rho = adapt_rho
        self.polish = polish
        self._kkt_factor = None
        self._kkt_rho = None
        # Unconstrained fast path: P + sigma*I is always PD.
        self._reg_factor = scipy.linalg.cho_factor(
            self.P + self.sigma * np.eye(self.n), check_finite=False
        )

    # -- factorization ----------------------------------------------------

    def _factorize(self, rho: float) -> None:
        # Reduced form: n x n Cholesky of P + sigma I + rho A'A; the z-step
        # follows as z_tilde = A x_tilde.
        reg = self.P + self.sigma * np.eye(self.n) + rho * self._ata
        self._kkt_factor = scipy.linalg.cho_factor(reg, check_finite=False)
        self._kkt_rho = rho

    # -- main solve --------------------------------------------------------

    def solve(
        self,
        q: np.ndarray,
        l: np.ndarray,
        u: np.ndarray,
        warm_start: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> QpSolution:
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        qb = q.reshape(self.n, 1) if single else q
        nb = qb.shape[1]
        lb = np.asarray(l, dtype=float)
        ub = np.asarray(u, dtype=float)
        if single:
            lb = lb.reshape(self.m, 1)
            ub = ub.reshape(self.m, 1)
        if np.any(lb > ub):
            raise ValueError("l must be <= u elementwise")

        x = np.zeros((self.n, nb))
        y = np.zeros((self.m, nb))
        if warm_start is not None:
            wx, wy = warm_start
            if wx is not None:
                x = np.array(wx, dtype=float).reshape(self.n, nb).copy()
            if wy is not None:
                y = np.array(wy, dtype=float).reshape(self.m, nb).copy()

        sol = self._admm(qb, lb, ub, x, y)
        if single:
            sol = QpSolution(
                x=sol.x[:, 0],
                y=sol.y[:, 0],
                status=sol.status,
                iterations=sol.iterations,
                primal_residual=sol.primal_residual,
                dual_residual=sol.dual_residual,
                objective=float(
                    0.5 * sol.x[:, 0] @ (self.P @ sol.x[:, 0]) + qb[:, 0] @ sol.x[:, 0]
                ),
            )
        return sol

    def _unconstrained_opt(self, qb: np.ndarray) -> np.ndarray:
        x = scipy.linalg.cho_solve(self._reg_factor, -qb, check_finite=False)
        # Newton refinement removes the sigma regularization bias.
        for _ in range(2):
            grad = self.P @ x + qb
            x = x - scipy.linalg.cho_solve(self._reg_factor, grad, check_finite=False)
        return x

    def _admm(self, qb, lb, ub, x, y) -> QpSolution:
        n, m, nb = self.n, self.m, qb.shape[1]

        # Fast path: if the regularized unconstrained minimizer already
        # satisfies every constraint, it is optimal (zero multipliers).
        x_uc = self._unconstrained_opt(qb)
        ax = self.A @ x_uc
        slack_l = 1e-10 + 1e-10 * np.where(np.isfinite(lb), np.abs(lb), 0.0)
        slack_u = 1e-10 + 1e-10 * np.where(np.isfinite(ub), np.abs(ub), 0.0)
        if np.all(ax >= lb - slack_l) and np.all(ax <= ub + slack_u):
            grad = self.P @ x_uc + qb
            dua = float(np.max(np.abs(grad), initial=0.0))
            if dua < self.eps_abs * 10 + self.eps_rel * float(np.max(np.abs(qb), initial=1.0)):
                return QpSolution(
                    x=x_uc, y=np.zeros((m, nb)), status=SOLVED, iterations=0,
                    primal_residual=0.0, dual_residual=dua,
                )

        # Work in the row-equilibrated space.
        scale = self._row_scale[:, None]
        lbs = lb * scale
        ubs = ub * scale
        ys = y / np.maximum(scale, 1e-300)
        a_s = self.A_scaled

        rho = self.rho
        if self._kkt_factor is None or self._kkt_rho != rho:
            self._factorize(rho)

        z = np.clip(a_s @ x, lbs, ubs)
        status = MAX_ITER
        it = 0
        pri = dua = np.inf
        x_prev = np.empty_like(x)
        y_prev = np.empty_like(ys)
        alpha = self.alpha

        for it in range(1, self.max_iter + 1):
            np.copyto(x_prev, x)
            np.copyto(y_prev, ys)

            rhs = self.sigma * x - qb + a_s.T @ (rho * z - ys)
            x_t = scipy.linalg.cho_solve(self._kkt_factor, rhs, check_finite=False)
            z_t = a_s @ x_t

            x = alpha * x_t + (1.0 - alpha) * x
            z_old = z
            z = np.clip(alpha * z_t + (1.0 - alpha) * z_old + ys / rho, lbs, ubs)
            ys = ys + rho * (alpha * z_t + (1.0 - alpha) * z_old - z)

            if it % self.check_every != 0:
                continue

            ax = a_s @ x
            r_pri = ax - z
            r_dua = self.P @ x + qb + a_s.T @ ys
            pri = float(np.max(np.abs(r_pri), initial=0.0))
            dua = float(np.max(np.abs(r_dua), initial=0.0))
            eps_pri = self.eps_abs + self.eps_rel * max(
                np.max(np.abs(ax), initial=0.0), np.max(np.abs(z), initial=0.0)
            )
            eps_dua = self.eps_abs + self.eps_rel * max(
                np.max(np.abs(self.P @ x), initial=0.0),
                np.max(np.abs(a_s.T @ ys), initial=0.0),
                np.max(np.abs(qb), initial=0.0),
            )
            if pri < eps_pri and dua < eps_dua:
                status = SOLVED
                break

            dy = ys - y_prev
            dx = x - x_prev
            if self._primal_infeasible(dy, lbs, ubs):
                return QpSolution(x=x, y=ys * scale, status=PRIMAL_INFEASIBLE,
                                  iterations=it, primal_residual=pri, dual_residual=dua)
            if self._dual_infeasible(dx, qb, lbs, ubs):
                return QpSolution(x=x, y=ys * scale, status=DUAL_INFEASIBLE,
                                  iterations=it, primal_residual=pri, dual_residual=dua)

            if self.adapt_rho and it % (self.check_every * 5) == 0:
                ratio = (pri / max(eps_pri, 1e-30)) / max(dua / max(eps_dua, 1e-30), 1e-30)
                if ratio > 5.0 or ratio < 0.2:
                    rho = float(np.clip(rho * np.sqrt(ratio), 1e-6, 1e6))
                    self._factorize(rho)

        y = ys * scale  # duals of the original (unscaled) rows
        if status == SOLVED and self.polish:
            for b in range(nb):
                xp, yp = self._polish(qb[:, b], lb[:, b], ub[:, b], x[:, b], y[:, b])
                if xp is not None:
                    x[:, b] = xp
                    y[:, b] = yp
            ax = self.A @ x
            z_full = np.clip(ax, lb, ub)
            pri = float(np.max(np.abs(ax - z_full), initial=0.0))
            dua = float(np.max(np.abs(self.P @ x + qb + self.A.T @ y), initial=0.0))

        return QpSolution(x=x, y=y, status=status, iterations=it,
                          primal_residual=pri, dual_residual=dua)

    # -- active-set path ----------------------------------------------------

    def solve_active(
        self,
        q: np.ndarray,
        l: np.ndarray,
        u: np.ndarray,
        warm_active: list | None = None,
    ) -> QpSolution | None:
        """Exact warm-started active-set solve for batched columns.

        Returns None when any column fails to converge in the iteration
        budget (caller falls back to the splitting solver). Intended for
        repeated solves whose active set changes little between calls.
        """
        qb = np.asarray(q, dtype=float)
        single = qb.ndim == 1
        if single:
            qb = qb.reshape(self.n, 1)
        nb = qb.shape[1]
        lb = np.asarray(l, dtype=float).reshape(self.m, nb if not single else 1)
        ub = np.asarray(u, dtype=float).reshape(self.m, nb if not single else 1)

        x = self._unconstrained_opt(qb)
        y = np.zeros((self.m, nb))
        sets: list = [None] * nb
        ax = self.A @ x
        tol = 1e-9
        needs = [
            b
            for b in range(nb)
            if np.any(ax[:, b] > ub[:, b] + tol) or np.any(ax[:, b] < lb[:, b] - tol)
            or (warm_active is not None and warm_active[b] and (warm_active[b][0] or warm_active[b][1]))
        ]
        for b in range(nb):
            sets[b] = (set(), set())
        ok = True
        for b in needs:
            warm = warm_active[b] if warm_active is not None else None
            res = self._active_set_column(qb[:, b], lb[:, b], ub[:, b], warm)
            if res is None:
                ok = False
                break
            x[:, b], y[:, b], sets[b] = res
        if not ok:
            return None
        ax = self.A @ x
        z = np.clip(ax, lb, ub)
        pri = float(np.max(np.abs(ax - z), initial=0.0))
        dua = float(np.max(np.abs(self.P @ x + qb + self.A.T @ y), initial=0.0))
        if pri > 1e-7 or dua > 1e-6 * max(1.0, float(np.max(np.abs(qb), initial=0.0))):
            return None
        if single:
            return QpSolution(x=x[:, 0], y=y[:, 0], status=SOLVED, iterations=0,
                              primal_residual=pri, dual_residual=dua, active_sets=sets)
        return QpSolution(x=x, y=y, status=SOLVED, iterations=0,
                          primal_residual=pri, dual_residual=dua, active_sets=sets)

    def _active_set_column(self, q, l, u, warm):
        n = self.n
        lower: set = set(warm[0]) if warm else set()
        upper: set = set(warm[1]) if warm else set()
        eq_rows = {int(r) for r in np.where(l == u)[0]}
        for r in eq_rows:
            lower.add(r)
            upper.discard(r)
        delta = 1e-11
        for _ in range(60):
            rows = sorted(lower | upper)
            k = len(rows)
            if k == 0:
                x = self._unconstrained_opt(q.reshape(-1, 1))[:, 0]
                lam = np.zeros(0)
            else:
                ared = self.A[rows]
                b = np.array([l[r] if r in lower else u[r] for r in rows])
                kkt = np.zeros((n + k, n + k))
                kkt[:n, :n] = self.P + delta * np.eye(n)
                kkt[:n, n:] = ared.T
                kkt[n:, :n] = ared
                kkt[n:, n:] = -delta * np.eye(k)
                rhs = np.concatenate([-q, b])
                try:
                    factor = scipy.linalg.lu_factor(kkt, check_finite=False)
                except scipy.linalg.LinAlgError:
                    return None
                sol = scipy.linalg.lu_solve(factor, rhs, check_finite=False)
                x = sol[:n]
                lam = sol[n:]
                if not np.all(np.isfinite(x)):
                    return None

            # Block removal: every wrong-sign multiplier leaves at once.
            removed = False
            for idx, r in enumerate(rows):
                if r in eq_rows:
                    continue
                if r in lower and lam[idx] > 1e-9:
                    lower.discard(r)
                    removed = True
                elif r in upper and lam[idx] < -1e-9:
                    upper.discard(r)
                    removed = True
            if removed:
                continue

            ax = self.A @ x
            viol_low = l - ax
            viol_up = ax - u
            tol = 1e-10
            bad_low = np.where(viol_low > tol)[0]
            bad_up = np.where(viol_up > tol)[0]
            if bad_low.size == 0 and bad_up.size == 0:
                y = np.zeros(self.m)
                for idx, r in enumerate(rows):
                    y[r] = lam[idx]
                return x, y, (lower, upper)
            # Block addition, worst violations first, capped per round.
            cand = [(float(viol_low[r]), "low", int(r)) for r in bad_low]
            cand += [(float(viol_up[r]), "up", int(r)) for r in bad_up]
            cand.sort(reverse=True)
            for _, side, r in cand[:8]:
                if side == "low":
                    lower.add(r)
                    upper.discard(r)
                else:
                    upper.add(r)
                    lower.discard(r)
        return None

    # -- infeasibility certificates ---------------------------------------

    def _primal_infeasible(self, dy, lb, ub) -> bool:
        # delta_y certifies primal infeasibility when A'dy ~ 0 and the
        # support function of [l, u] at dy is meaningfully negative. The
        # support threshold must be well above noise level or a slowly
        # converging (but feasible) warm-started solve can trip it.
        if self.m == 0:
            return False
        norm = np.max(np.abs(dy), axis=0)
        ok = norm > self.eps_inf
        if not np.any(ok):
            return False
        dyn = dy[:, ok] / norm[ok]
        lf = np.where(np.isfinite(lb[:, ok]), lb[:, ok], 0.0)
        uf = np.where(np.isfinite(ub[:, ok]), ub[:, ok], 0.0)
        support = np.sum(uf * np.maximum(dyn, 0.0) + lf * np.minimum(dyn, 0.0), axis=0)
        at_dy = np.max(np.abs(self.A.T @ dyn), axis=0)
        bound_scale = 1.0 + np.max(np.abs(np.where(np.isfinite(lb[:, ok]), lb[:, ok], 0.0)),
                                   axis=0, initial=0.0)
        return bool(np.any((support < -1e-4 * bound_scale) & (at_dy < 1e-6)))

    def _dual_infeasible(self, dx, qb, lb, ub) -> bool:
        if self.n == 0:
            return False
        norm = np.max(np.abs(dx), axis=0)
        ok = norm > self.eps_inf
        if not np.any(ok):
            return False
        dxn = dx[:, ok] / norm[ok]
        q_scale = 1.0 + np.max(np.abs(qb[:, ok]), axis=0, initial=0.0)
        descent = np.sum(qb[:, ok] * dxn, axis=0) < -1e-4 * q_scale
        if not np.any(descent):
            return False
        pdx = np.max(np.abs(self.P @ dxn), axis=0)
        adx = self.A @ dxn
        cone_ok = np.all(
            ((adx < 1e-6) | ~np.isfinite(ub[:, ok]))
            & ((adx > -1e-6) | ~np.isfinite(lb[:, ok])),
            axis=0,
        )
        return bool(np.any(descent & (pdx < 1e-6) & cone_ok))

    # -- polish ------------------------------------------------------------

    def _polish(self, q, l, u, x, y):
        tol = 1e-7 * (1.0 + np.maximum(np.abs(l), np.abs(u)))
        tol = np.where(np.isfinite(tol), tol, 1e-7)
        ax = self.A @ x
        low = (ax - l < tol) & (y < 0)
        upp = (u - ax < tol) & (y > 0)
        active = low | upp
        k = int(np.sum(active))
        if k == 0:
            xp = self._unconstrained_opt(q.reshape(-1, 1))[:, 0]
            return xp, np.zeros(self.m)
        Ared = self.A[active]
        b = np.where(low[active], l[active], u[active])
        n = self.n
        delta = 1e-9
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = self.P + delta * np.eye(n)
        kkt[:n, n:] = Ared.T
        kkt[n:, :n] = Ared
        kkt[n:, n:] = -delta * np.eye(k)
        rhs = np.concatenate([-q, b])
        try:
            factor = scipy.linalg.lu_factor(kkt, check_finite=False)
        except scipy.linalg.LinAlgError:
            return None, None
        sol = scipy.linalg.lu_solve(factor, rhs, check_finite=False)
        # Two rounds of iterative refinement to undo the delta regularization.
        kkt_exact = kkt.copy()
        kkt_exact[:n, :n] -= delta * np.eye(n)
        kkt_exact[n:, n:] += delta * np.eye(k)
        for _ in range(2):
            resid = rhs - kkt_exact @ sol
            sol = sol + scipy.linalg.lu_solve(factor, resid, check_finite=False)
        xp = sol[:n]
        yp = np.zeros(self.m)
        yp[active] = sol[n:]
        axp = self.A @ xp
        feas = float(np.max(np.maximum(axp - u, 0.0) + np.maximum(l - axp, 0.0), initial=0.0))
        dua = float(np.max(np.abs(self.P @ xp + q + self.A.T @ yp), initial=0.0))
        ax0 = self.A @ x
        pri0 = float(np.max(np.maximum(ax0 - u, 0.0) + np.maximum(l - ax0, 0.0), initial=0.0))
        dua0 = float(np.max(np.abs(self.P @ x + q + self.A.T @ y), initial=0.0))
        if feas <= max(pri0, 1e-9) and dua <= max(dua0, 1e-9):
            return xp, yp
        return None, None


def solve_qp(
    problem: QpProblem,
    warm_start: np.ndarray | tuple[np.ndarray, np.ndarray] | None = None,
    **options,
) -> QpSolution:
    """Solve a :class:`QpProblem`; returns a :class:`QpSolution`.

    `warm_start` may be a primal vector or a (primal, dual) pair. Statuses
    other than ``solved`` indicate max-iteration exhaustion (best effort
    iterate returned) or an infeasibility certificate.
    """
    structure = QpStructure(problem.P, problem.A, **options)
    ws = None
    if warm_start is not None:
        if isinstance(warm_start, tuple):
            ws = warm_start
        else:
            ws = (np.asarray(warm_start, dtype=float), None)
    sol = structure.solve(problem.q, problem.l, problem.u, warm_start=ws)
    sol.objective = problem.objective(sol.x) if sol.x.ndim == 1 else np.nan
    return sol
