"""Loss functions and the smooth surrogate for the 0-1 win indicator.

Everything here is defined on the log scale.  The consensus benchmark is
the equal-weight mean of whatever forecasts are present in a row, and
the relative bias R compares the combined forecast's error against the
consensus error for the same row.  A forecast "wins" when |R| <= 1 and
"hits" when it lands on the same side of the consensus as the actual.

The win indicator I(|R| > 1) is discontinuous, so the optimizer works
with a smooth CDF stand-in (Cauchy by default, Logistic as an
alternative) whose scale gamma is calibrated so that an effective
support [z_min, z_max], measured from the training window itself, holds
probability 1 - epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, DomainError
from .panel import WindowView

__all__ = [
    "RelativeBias",
    "SurrogateSpec",
    "binary_targets",
    "calibrate_scale",
    "classify_hit",
    "consensus",
    "empirical_bounds",
    "hit_rate_loss",
    "relative_bias",
    "squared_error_loss",
    "surrogate_cdf",
    "surrogate_for_window",
    "win_rate_loss",
]

FALLBACK_BOUNDS = (-2.0, 5.0)
DEFAULT_EPSILON = 0.005
DEFAULT_FAMILY = "cauchy"
_FAMILIES = ("cauchy", "logistic")
_PCLIP = 1e-12


@dataclass(frozen=True)
class RelativeBias:
    """Signed ratio of combined-forecast error to consensus error."""

    value: float
    numerator: float
    denominator: float
    degenerate: bool


@dataclass(frozen=True)
class SurrogateSpec:
    """Calibrated smooth CDF used in place of the 0-1 win indicator."""

    family: str
    z0: float
    gamma: float
    epsilon: float
    z_min: float
    z_max: float
    fallback: bool = False

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise DomainError(f"unknown surrogate family {self.family!r}")
        if self.gamma <= 0:
            raise DomainError("surrogate scale must be positive")


def consensus(row_forecasts: np.ndarray) -> float:
    """Equal-weight mean of the present (non-NaN) forecasts in a row."""
    row = np.asarray(row_forecasts, dtype=float)
    present = ~np.isnan(row)
    if not present.any():
        raise DomainError("consensus of an empty forecast row")
    return float(row[present].mean())


def relative_bias(y: float, yhat_opt: float, yhat_eq: float) -> RelativeBias:
    num = y - yhat_opt
    den = y - yhat_eq
    if den == 0.0:
        return RelativeBias(value=math.nan, numerator=num, denominator=0.0, degenerate=True)
    return RelativeBias(value=num / den, numerator=num, denominator=den, degenerate=False)


def squared_error_loss(y: float, yhat: float) -> float:
    return (y - yhat) ** 2


def hit_rate_loss(p_hat, y_tilde):
    """Bernoulli negative log-likelihood with probabilities clamped away from 0/1."""
    p = np.clip(np.asarray(p_hat, dtype=float), _PCLIP, 1.0 - _PCLIP)
    t = np.asarray(y_tilde, dtype=float)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def win_rate_loss(R: RelativeBias | float) -> int:
    """0-1 loss on the relative bias: 1 iff |R| > 1 (ties count as wins).

    A degenerate R (consensus exactly equal to the actual) counts as a
    loss: the win is undefined there and scoring against the combined
    forecast is the conservative choice.
    """
    if isinstance(R, RelativeBias):
        if R.degenerate:
            return 1
        value = R.value
    else:
        value = float(R)
        if math.isnan(value):
            return 1
    return int(abs(value) > 1.0)


def classify_hit(y: float, yhat_opt: float, yhat_eq: float) -> int:
    """1 iff the forecast and the actual fall on the same side of consensus.

    Both comparisons are strict, so values exactly at the consensus count
    as the "below" branch.
    """
    return int((y > yhat_eq) == (yhat_opt > yhat_eq))


def binary_targets(y: np.ndarray, consensus_rows: np.ndarray) -> np.ndarray:
    """Per-row targets: 1 iff the actual beat that row's consensus."""
    return (np.asarray(y) > np.asarray(consensus_rows)).astype(float)


# ---------------------------------------------------------------------------
# Surrogate machinery
# ---------------------------------------------------------------------------

def surrogate_cdf(spec: SurrogateSpec, z):
    """Evaluate the calibrated CDF at z (scalar or array)."""
    u = (np.asarray(z, dtype=float) - spec.z0) / spec.gamma
    if spec.family == "cauchy":
        out = np.arctan(u) / np.pi + 0.5
    else:
        # piecewise form keeps exp() off huge positive arguments
        out = np.empty_like(u)
        pos = u >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
        e = np.exp(u[~pos])
        out[~pos] = e / (1.0 + e)
    # keep the range an open interval even where float64 saturates
    out = np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return float(out) if out.ndim == 0 else out


def _interval_mass(family: str, gamma: float, z_min: float, z_max: float) -> float:
    spec = SurrogateSpec(family, 0.0, gamma, 0.5, z_min, z_max)
    return float(surrogate_cdf(spec, z_max) - surrogate_cdf(spec, z_min))


def calibrate_scale(family: str, z_min: float, z_max: float,
                    epsilon: float = DEFAULT_EPSILON) -> SurrogateSpec:
    """Solve for gamma so the CDF puts mass 1 - epsilon on [z_min, z_max].

    The location is pinned at z0 = 0, the boundary between winning and
    losing values of |R| - 1.  Interval mass is strictly decreasing in
    gamma, so a sign-bracketed bisection is guaranteed once a bracket is
    found; the initial bracket [1e-8, 1e3] is widened by doubling.
    """
    if family not in _FAMILIES:
        raise DomainError(f"unknown surrogate family {family!r}")
    if not z_min < z_max:
        raise CalibrationError(f"need z_min < z_max, got [{z_min}, {z_max}]")
    if not 0.0 < epsilon < 0.5:
        raise DomainError(f"epsilon must be in (0, 0.5), got {epsilon}")

    target = 1.0 - epsilon
    lo, hi = 1e-8, 1e3
    while _interval_mass(family, hi, z_min, z_max) > target and hi < 1e12:
        hi *= 2.0
    while _interval_mass(family, lo, z_min, z_max) < target and lo > 1e-300:
        lo /= 2.0
    g_lo = _interval_mass(family, lo, z_min, z_max) - target
    g_hi = _interval_mass(family, hi, z_min, z_max) - target
    if g_lo < 0 or g_hi > 0:
        raise CalibrationError(
            f"no scale puts mass {target} on [{z_min}, {z_max}]; "
            "the interval must straddle 0"
        )
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        g = _interval_mass(family, mid, z_min, z_max) - target
        if abs(g) <= 1e-10:
            return SurrogateSpec(family, 0.0, mid, epsilon, z_min, z_max)
        if g > 0:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"bisection stalled calibrating [{z_min}, {z_max}] at epsilon={epsilon}"
    )


def empirical_bounds(window: WindowView) -> tuple[float, float]:
    """Range of z = |relative bias of a single analyst| - 1 over the window.

    Every present (row, analyst) pair contributes one value; rows whose
    consensus coincides with the actual are skipped as degenerate.
    """
    den = window.y - window.consensus
    usable = den != 0.0
    if not usable.any():
        raise CalibrationError("every window row has a degenerate consensus")
    z_vals = []
    for t in np.flatnonzero(usable):
        row = window.X[t]
        present = window.mask[t]
        if not present.any():
            continue
        z = np.abs((window.y[t] - row[present]) / den[t]) - 1.0
        z_vals.append(z)
    if not z_vals:
        raise CalibrationError("no usable forecast entries for empirical bounds")
    allz = np.concatenate(z_vals)
    return float(allz.min()), float(allz.max())


def surrogate_for_window(window: WindowView, family: str = DEFAULT_FAMILY,
                         epsilon: float = DEFAULT_EPSILON) -> SurrogateSpec:
    """Calibrate a surrogate on a window, falling back to the documented
    default interval (-2, 5) when the empirical one cannot be calibrated."""
    try:
        z_min, z_max = empirical_bounds(window)
        return calibrate_scale(family, z_min, z_max, epsilon)
    except CalibrationError:
        spec = calibrate_scale(family, *FALLBACK_BOUNDS, epsilon=epsilon)
        return SurrogateSpec(
            family, spec.z0, spec.gamma, epsilon, *FALLBACK_BOUNDS, fallback=True
        )
