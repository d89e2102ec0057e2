"""Normalized exponential discounting schedules.

The schedule puts weight p_t on training row t (t = 1..L, most recent
last), with

    p_t = exp(-lambda * (L - t)) / sum_s exp(-lambda * (L - s))

so lambda = 0 weights all rows equally and larger lambda concentrates
mass on the most recent rows.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = ["DiscountSchedule", "make_schedule"]


@dataclass(frozen=True)
class DiscountSchedule:
    """Discount weights for one window length and decay rate."""

    lam: float
    L: int
    weights: np.ndarray  # shape (L,), oldest row first, sums to 1

    def __post_init__(self):
        w = self.weights
        if w.shape != (self.L,):
            raise DomainError(f"weights shape {w.shape} != ({self.L},)")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DomainError("discount weights must be finite and nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise DomainError("discount weights must sum to 1")
        if np.any(np.diff(w) < 0):
            raise DomainError("discount weights must be nondecreasing in t")


def make_schedule(lam: float, L: int) -> DiscountSchedule:
    """Build the normalized exponential schedule for decay rate ``lam``.

    lam = 0 returns exactly uniform weights 1/L (explicit branch, no
    0/0 evaluation).  For lam > 0 the exponents are largest-last and
    bounded above by 0, so normalization never overflows.
    """
    if lam < 0:
        raise DomainError(f"discount rate must be >= 0, got {lam}")
    if L < 1:
        raise DomainError(f"window length must be >= 1, got {L}")
    if lam == 0:
        w = np.full(L, 1.0 / L)
    else:
        t = np.arange(1, L + 1)
        e = np.exp(-lam * (L - t))
        w = e / e.sum()
    w.flags.writeable = False
    return DiscountSchedule(lam=float(lam), L=int(L), weights=w)
