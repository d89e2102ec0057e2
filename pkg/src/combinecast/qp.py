"""Discounted weighted least squares on the simplex, solved as a QP.

The squared-error criterion Σ_t p_t (y_t - w0 - w'x_t)^2 expands into
(1/2) x'Dx - c'x plus a constant, with D = X'WX and c = X'Wy over the
design matrix X whose first column is all ones.  The weight block of the
solution is constrained to the simplex (w >= 0, sum w = 1) while the
intercept stays free.  The solver is a dense dual active-set method:
start at the unconstrained minimizer, bring in the sum-to-one equality,
then add violated nonnegativity constraints one at a time, dropping
active ones whose multipliers would go negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discount import DiscountSchedule
from .errors import ContractError, ConvergenceError
from .panel import WindowView

__all__ = [
    "QuadraticProgram",
    "WeightSolution",
    "build_qp",
    "repair_pd",
    "solve_qp",
    "predict",
]

PD_FLOOR_REL = 1e-8


@dataclass(frozen=True)
class QuadraticProgram:
    """min (1/2) x'Dx - c'x over {x: weight coords on the simplex}.

    When ``has_intercept`` the variable is x = (w0, w_1..w_m) and only
    the trailing m coordinates carry simplex constraints; otherwise
    x = w.  ``constant`` is the dropped y'Wy term, kept so the achieved
    discounted loss can be reported on the original scale.
    """

    D: np.ndarray
    c: np.ndarray
    m: int
    has_intercept: bool
    constant: float
    lam: float

    def __post_init__(self):
        n = self.m + (1 if self.has_intercept else 0)
        if self.D.shape != (n, n) or self.c.shape != (n,):
            raise ContractError("QP dimensions do not match the analyst count")
        if not np.allclose(self.D, self.D.T, atol=1e-10):
            raise ContractError("D must be symmetric")

    @property
    def n_vars(self) -> int:
        return self.m + (1 if self.has_intercept else 0)

    def weight_coords(self) -> np.ndarray:
        off = 1 if self.has_intercept else 0
        return np.arange(off, off + self.m)

    def point(self, omega0: float, omega: np.ndarray) -> np.ndarray:
        if self.has_intercept:
            return np.concatenate([[omega0], omega])
        return np.asarray(omega, dtype=float)

    def loss_at(self, x: np.ndarray) -> float:
        """Discounted squared-error loss at x, constant term restored."""
        q = 0.5 * x @ self.D @ x - self.c @ x
        return float(2.0 * q + self.constant)


@dataclass(frozen=True)
class WeightSolution:
    omega0: float
    omega: np.ndarray
    lam: float
    objective: float
    iterations: int
    converged: bool
    active_set: tuple[int, ...]
    history: tuple[float, ...] = ()   # best-so-far record, derivative-free solver only

    def __post_init__(self):
        if np.any(self.omega < -1e-10):
            raise ContractError("weights below the -1e-10 clip threshold")
        if abs(self.omega.sum() - 1.0) > 1e-8:
            raise ContractError("weights must sum to one within 1e-8")


def repair_pd(D: np.ndarray, floor_rel: float = PD_FLOOR_REL) -> np.ndarray:
    """Clip eigenvalues up to floor_rel * max eigenvalue; no-op when PD enough."""
    if not np.allclose(D, D.T, atol=1e-10):
        raise ContractError("repair_pd expects a symmetric matrix")
    vals, vecs = np.linalg.eigh(D)
    top = vals[-1]
    floor = floor_rel * top if top > 0 else floor_rel
    if vals[0] >= floor:
        return D
    clipped = np.maximum(vals, floor)
    out = (vecs * clipped) @ vecs.T
    return 0.5 * (out + out.T)


def build_qp(window: WindowView, schedule: DiscountSchedule,
             intercept: bool = True) -> QuadraticProgram:
    """Assemble D = X'WX (PD-repaired) and c = X'Wy for one window."""
    if schedule.L != window.L:
        raise ContractError(
            f"schedule length {schedule.L} != window length {window.L}"
        )
    if np.isnan(window.X).any():
        raise ContractError("window must be fully imputed before building the QP")
    if intercept:
        X = np.column_stack([np.ones(window.L), window.X])
    else:
        X = window.X
    w = schedule.weights
    Xw = X * w[:, None]
    D = repair_pd(X.T @ Xw)
    c = Xw.T @ window.y
    constant = float(window.y @ (w * window.y))
    return QuadraticProgram(
        D=D, c=c, m=window.m, has_intercept=intercept,
        constant=constant, lam=schedule.lam,
    )


def _finalize(qp: QuadraticProgram, x: np.ndarray, iterations: int,
              converged: bool, active: list[int]) -> WeightSolution:
    coords = qp.weight_coords()
    omega = x[coords].copy()
    if converged:
        omega[(omega >= -1e-10) & (omega < 0)] = 0.0
    else:
        # best-iterate report: project back onto the simplex
        omega = np.maximum(omega, 0.0)
    total = omega.sum()
    omega = omega / total if total > 0 else np.full_like(omega, 1.0 / len(omega))
    omega0 = float(x[0]) if qp.has_intercept else 0.0
    return WeightSolution(
        omega0=omega0,
        omega=omega,
        lam=qp.lam,
        objective=qp.loss_at(qp.point(omega0, omega)),
        iterations=iterations,
        converged=converged,
        active_set=tuple(sorted(k for k in active if k >= 0)),
    )


def solve_qp(qp: QuadraticProgram, max_iter: int | None = None) -> WeightSolution:
    """Dual active-set solve of the simplex-constrained QP.

    Constraint ids: -1 is the sum-to-one equality (always active, never
    dropped); j in 0..m-1 is the nonnegativity bound on weight j.
    """
    n = qp.n_vars
    coords = qp.weight_coords()
    cap = max_iter if max_iter is not None else 10 * (qp.m + 1) ** 2

    def normal(k: int) -> np.ndarray:
        v = np.zeros(n)
        if k == -1:
            v[coords] = 1.0
        else:
            v[coords[k]] = 1.0
        return v

    x = np.linalg.solve(qp.D, qp.c)

    # equality first: its multiplier is sign-free and it never leaves
    n_eq = normal(-1)
    gn = np.linalg.solve(qp.D, n_eq)
    t_eq = -(n_eq @ x - 1.0) / (n_eq @ gn)
    x = x + t_eq * gn
    active: list[int] = [-1]
    u: list[float] = [t_eq]

    iterations = 0
    while True:
        slack = x[coords]
        worst = int(np.argmin(slack))
        if slack[worst] >= -1e-12:
            return _finalize(qp, x, iterations, True, active)
        p = worst
        n_p = normal(p)
        u_p = 0.0

        while True:
            iterations += 1
            if iterations > cap:
                raise ConvergenceError(
                    f"active-set iteration cap {cap} reached",
                    best=_finalize(qp, x, iterations, False, active),
                )
            N = np.column_stack([normal(k) for k in active])
            gp = np.linalg.solve(qp.D, n_p)
            GiN = np.linalg.solve(qp.D, N)
            M = N.T @ GiN
            r = np.linalg.solve(M, N.T @ gp)
            z = gp - GiN @ r

            t1, k1 = np.inf, -1
            for idx, k in enumerate(active):
                if k >= 0 and r[idx] > 1e-12:
                    cand = u[idx] / r[idx]
                    if cand < t1:
                        t1, k1 = cand, idx
            znp = float(n_p @ z)
            if znp > 1e-14:
                t2 = -(float(n_p @ x)) / znp
            else:
                t2 = np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise ContractError("QP reported infeasible; simplex is never empty")

            if np.isfinite(t2):
                x = x + t * z
            u = [ui - t * ri for ui, ri in zip(u, r)]
            u_p += t
            if t2 <= t1:
                active.append(p)
                u.append(u_p)
                break
            del active[k1], u[k1]


def predict(window: WindowView, solution: WeightSolution) -> float:
    """Out-of-sample combined forecast w0 + w'x at the target row."""
    if np.isnan(window.x_target).any():
        raise ContractError("target-row forecast missing for an eligible analyst")
    if len(solution.omega) != window.m:
        raise ContractError("solution dimension does not match the window")
    return float(solution.omega0 + solution.omega @ window.x_target)
