"""Derivative-free minimization of the win-rate and hit-rate objectives.

Both objectives share the same feasible set as the QP: weights on the
simplex plus a free (but boxed) intercept.  Gradients are unreliable
here (the win-rate surrogate has sharp transitions), so the solver is a
linear-approximation trust-region method in the spirit of COBYLA: build
a forward-difference linear model at the trust radius, step along the
projected descent direction, accept on strict improvement, shrink the
radius otherwise.

The sum-to-one equality is eliminated up front: the solver works in the
reduced coordinates u = (w_1..w_{m-1}, w0) with w_m = 1 - sum(w_j).
That keeps every iterate exactly on the constraint and the feasible set
full-dimensional (a product of a truncated simplex and an interval), so
Euclidean projection is cheap and exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .discount import DiscountSchedule
from .errors import ContractError, DomainError
from .losses import (
    DEFAULT_EPSILON,
    DEFAULT_FAMILY,
    SurrogateSpec,
    binary_targets,
    hit_rate_loss,
    surrogate_cdf,
    surrogate_for_window,
)
from .panel import WindowView
from .qp import WeightSolution

__all__ = [
    "NlpProblem",
    "HitModel",
    "cobyla_minimize",
    "win_rate_objective",
    "exact_win_rate_loss",
    "hit_rate_objective",
    "predict_hit_probability",
    "fit_win",
    "fit_hit",
    "WIN_INTERCEPT_BOUND",
    "HIT_INTERCEPT_BOUND",
]

WIN_INTERCEPT_BOUND = 10.0   # log scale
HIT_INTERCEPT_BOUND = 50.0   # log-odds scale
_PCLIP = 1e-12

# a fitted hit model is a WeightSolution read on the log-odds scale
HitModel = WeightSolution


@dataclass(frozen=True)
class NlpProblem:
    """Objective plus the simplex-and-box feasible set and stop criteria."""

    objective: Callable[[float, np.ndarray], float]
    m: int
    omega0_bound: float
    start_omega: np.ndarray | None = None
    start_omega0: float = 0.0
    radius_init: float = 0.25
    radius_final: float = 1e-6
    max_evals: int | None = None

    def __post_init__(self):
        if self.m < 1:
            raise DomainError("need at least one analyst weight")
        if self.omega0_bound <= 0:
            raise DomainError("intercept box must have positive half-width")
        if self.start_omega is None:
            object.__setattr__(self, "start_omega", np.full(self.m, 1.0 / self.m))
        if self.max_evals is None:
            object.__setattr__(self, "max_evals", 5000 * (self.m + 1))
        w = self.start_omega
        if w.shape != (self.m,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ContractError("start weights must lie on the simplex")
        if abs(self.start_omega0) > self.omega0_bound:
            raise ContractError("start intercept outside its box")


def _project_simplex_sum_one(v: np.ndarray) -> np.ndarray:
    s = np.sort(v)[::-1]
    css = np.cumsum(s)
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(s * idx > css - 1.0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _project(u: np.ndarray, bound: float) -> np.ndarray:
    """Project onto {w >= 0, sum w <= 1} x [-bound, bound]."""
    out = u.copy()
    w = out[:-1]
    if w.size:
        clipped = np.maximum(w, 0.0)
        out[:-1] = clipped if clipped.sum() <= 1.0 else _project_simplex_sum_one(w)
    out[-1] = min(max(out[-1], -bound), bound)
    return out


def _arc_step(u: np.ndarray, g: np.ndarray, gnorm: float, delta: float,
              bound: float) -> np.ndarray:
    """Longest chord of the projection arc s -> P(u - s g) within delta.

    Stepping to P(u - (delta/gnorm) g) alone stalls against active faces:
    the projection swallows most of the step, the radius shrinks on the
    short-move trigger, and the iterate freezes short of the constrained
    minimum.  Extending s until the chord reaches the trust radius keeps
    full-length moves along faces; the chord length is nondecreasing in s,
    so the doubling/bisection below is safe.  Projections are cheap and
    cost no objective evaluations.
    """
    s = delta / gnorm
    cand = _project(u - s * g, bound)
    dist = float(np.linalg.norm(cand - u))
    if dist >= delta:
        move = cand - u
        return u + move * (delta / dist)
    for _ in range(60):
        s2 = 2.0 * s
        c2 = _project(u - s2 * g, bound)
        d2 = float(np.linalg.norm(c2 - u))
        if d2 <= dist * (1.0 + 1e-12):
            break                       # arc exhausted: constrained stationary
        s, cand, dist = s2, c2, d2
        if dist >= delta:
            break
    if dist > delta:
        lo = s / 2.0
        for _ in range(60):
            mid = 0.5 * (lo + s)
            cm = _project(u - mid * g, bound)
            dm = float(np.linalg.norm(cm - u))
            if dm > delta:
                s = mid
            else:
                lo, cand, dist = mid, cm, dm
                if dm >= 0.9 * delta:
                    break
    return cand


def cobyla_minimize(problem: NlpProblem) -> WeightSolution:
    """Trust-region descent over the reduced coordinates.

    Returns the best feasible iterate.  Exhausting the evaluation budget
    is not an error: the result simply carries converged=False.
    """
    m, bound = problem.m, problem.omega0_bound

    def split(u: np.ndarray) -> tuple[float, np.ndarray]:
        w_free = u[:-1]
        omega = np.append(w_free, 1.0 - w_free.sum())
        return float(u[-1]), omega

    def evaluate(u: np.ndarray) -> float:
        omega0, omega = split(u)
        return float(problem.objective(omega0, omega))

    u = np.append(problem.start_omega[:-1], problem.start_omega0)
    n = u.size
    f = evaluate(u)
    evals = 1
    best_u, best_f = u.copy(), f
    history = [f]

    delta = problem.radius_init
    iterations = 0
    exhausted = False
    while delta > problem.radius_final:
        if evals + n + 1 > problem.max_evals:
            exhausted = True
            break
        iterations += 1
        g = np.zeros(n)
        for i in range(n):
            step = np.zeros(n)
            step[i] = delta
            fi = evaluate(u + step)
            evals += 1
            g[i] = (fi - f) / delta
        gnorm = float(np.linalg.norm(g))
        if gnorm <= 1e-15:
            delta *= 0.5
            history.append(best_f)
            continue
        cand = _arc_step(u, g, gnorm, delta, bound)
        move = cand - u
        dist = float(np.linalg.norm(move))
        fc = evaluate(cand)
        evals += 1
        predicted = max(float(-g @ move), 1e-300)
        actual = f - fc
        if fc < f:
            u, f = cand, fc
            if f < best_f:
                best_u, best_f = u.copy(), f
        # shrink on poor agreement with the model, or when the constraints
        # swallowed the step (nearly stationary against an active face)
        if actual < 0.1 * predicted or dist < 0.1 * delta:
            delta *= 0.5
        history.append(best_f)

    omega0, omega = split(best_u)
    omega = np.maximum(omega, 0.0)
    omega = omega / omega.sum()
    return WeightSolution(
        omega0=omega0,
        omega=omega,
        lam=np.nan,
        objective=best_f,
        iterations=iterations,
        converged=not exhausted,
        active_set=tuple(int(j) for j in np.flatnonzero(omega == 0.0)),
        history=tuple(history),
    )


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def _complete_rows(window: WindowView):
    if np.isnan(window.X).any():
        raise ContractError("window must be imputed before building an objective")
    return window.y, window.X, window.consensus


def win_rate_objective(window: WindowView, schedule: DiscountSchedule,
                       spec: SurrogateSpec) -> Callable[[float, np.ndarray], float]:
    """Discounted surrogate win-rate loss as a callable of (w0, w).

    Rows where the consensus equals the actual have no defined relative
    bias; they are dropped and the discount mass of the remaining rows
    renormalized.  The 1/L factor uses the original window length.
    """
    y, X, cons = _complete_rows(window)
    if schedule.L != window.L:
        raise ContractError("schedule length does not match the window")
    den = y - cons
    keep = den != 0.0
    if not keep.any():
        raise DomainError("every training row has a degenerate consensus")
    p = schedule.weights[keep]
    p = p / p.sum()
    yk, Xk, denk = y[keep], X[keep], den[keep]
    L = window.L

    def objective(omega0: float, omega: np.ndarray) -> float:
        z = np.abs((yk - omega0 - Xk @ omega) / denk) - 1.0
        return float(p @ surrogate_cdf(spec, z)) / L

    return objective


def exact_win_rate_loss(window: WindowView, schedule: DiscountSchedule,
                        omega0: float, omega: np.ndarray) -> float:
    """Discounted 0-1 win-rate loss (the true indicator, |R| > 1)."""
    y, X, cons = _complete_rows(window)
    den = y - cons
    keep = den != 0.0
    if not keep.any():
        raise DomainError("every training row has a degenerate consensus")
    p = schedule.weights[keep]
    p = p / p.sum()
    R = (y[keep] - omega0 - X[keep] @ omega) / den[keep]
    return float(p @ (np.abs(R) > 1.0)) / window.L


def hit_rate_objective(window: WindowView,
                       schedule: DiscountSchedule) -> Callable[[float, np.ndarray], float]:
    """Discounted Bernoulli NLL of the binary beat-the-consensus target."""
    y, X, cons = _complete_rows(window)
    if schedule.L != window.L:
        raise ContractError("schedule length does not match the window")
    targets = binary_targets(y, cons)
    p = schedule.weights
    L = window.L

    def objective(omega0: float, omega: np.ndarray) -> float:
        eta = omega0 + X @ omega
        phat = _sigmoid(eta)
        return float(p @ hit_rate_loss(phat, targets)) / L

    return objective


def _sigmoid(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_hit_probability(window: WindowView, solution: HitModel) -> float:
    """P(actual beats consensus) at the target row, clamped into (0, 1)."""
    if np.isnan(window.x_target).any():
        raise ContractError("target-row forecast missing for an eligible analyst")
    eta = solution.omega0 + solution.omega @ window.x_target
    p = float(_sigmoid(np.array(eta)))
    return min(max(p, _PCLIP), 1.0 - _PCLIP)


# ---------------------------------------------------------------------------
# One-call fits used by the backtest
# ---------------------------------------------------------------------------

def fit_win(window: WindowView, schedule: DiscountSchedule,
            family: str = DEFAULT_FAMILY, epsilon: float = DEFAULT_EPSILON) -> WeightSolution:
    spec = surrogate_for_window(window, family=family, epsilon=epsilon)
    obj = win_rate_objective(window, schedule, spec)
    sol = cobyla_minimize(NlpProblem(obj, window.m, WIN_INTERCEPT_BOUND))
    return _with_lambda(sol, schedule.lam)


def fit_hit(window: WindowView, schedule: DiscountSchedule) -> WeightSolution:
    obj = hit_rate_objective(window, schedule)
    sol = cobyla_minimize(NlpProblem(obj, window.m, HIT_INTERCEPT_BOUND))
    return _with_lambda(sol, schedule.lam)


def _with_lambda(sol: WeightSolution, lam: float) -> WeightSolution:
    from dataclasses import replace
    return replace(sol, lam=lam)
