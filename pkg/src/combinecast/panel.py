"""Analyst-forecast panels: validated raw data, log transform, windows.

A panel holds one ticker's quarterly actuals plus a (quarters x analysts)
grid of point forecasts with missing entries.  All estimation happens on
the natural-log scale, where a simplex-weighted combination of forecasts
is a geometric-mean combination on the original scale.

CSV contract (long format, UTF-8, header row required):

    forecasts: ticker,quarter,analyst_id,forecast[,forecast_date]
    actuals:   ticker,quarter,actual

Quarters are labeled ``YYYYQn``.  When the same (quarter, analyst) pair
appears more than once, the most recent forecast wins: by forecast_date
when that column exists, otherwise by file order (last row wins).  A
single combined file with an ``actual`` column is also accepted.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ParseError, SchemaError

__all__ = [
    "RawPanel",
    "ForecastPanel",
    "WindowView",
    "PanelSchema",
    "SynthConfig",
    "load_panel",
    "load_panels",
    "to_log",
    "synthesize_panel",
    "window_view",
]

_QUARTER_RE = re.compile(r"^(\d{4})Q([1-4])$")


def parse_quarter(label: str) -> tuple[int, int]:
    """Parse ``YYYYQn`` into a sortable (year, quarter) pair."""
    m = _QUARTER_RE.match(label.strip())
    if not m:
        raise ParseError(f"quarter label {label!r} is not of the form YYYYQn")
    return int(m.group(1)), int(m.group(2))


def _quarter_label(year: int, q: int) -> str:
    return f"{year}Q{q}"


@dataclass(frozen=True)
class RawPanel:
    """One ticker's actuals and per-analyst forecasts on the original scale.

    ``forecasts`` is a T x M float array with NaN marking a missing
    forecast.  Every present value must be strictly positive so the log
    transform is defined, and every analyst column must contain at least
    one forecast.
    """

    ticker: str
    quarters: tuple[str, ...]
    actuals: np.ndarray
    forecasts: np.ndarray
    analyst_ids: tuple[str, ...]

    def __post_init__(self):
        T, M = len(self.quarters), len(self.analyst_ids)
        keys = [parse_quarter(q) for q in self.quarters]
        if any(b <= a for a, b in zip(keys, keys[1:])):
            raise DomainError(f"{self.ticker}: quarters must be strictly increasing")
        if self.actuals.shape != (T,):
            raise DomainError(f"{self.ticker}: actuals shape {self.actuals.shape} != ({T},)")
        if self.forecasts.shape != (T, M):
            raise DomainError(
                f"{self.ticker}: forecasts shape {self.forecasts.shape} != ({T}, {M})"
            )
        if not np.all(np.isfinite(self.actuals)) or np.any(self.actuals <= 0):
            raise DomainError(f"{self.ticker}: every actual must be a positive real")
        present = ~np.isnan(self.forecasts)
        if np.any(self.forecasts[present] <= 0):
            raise DomainError(f"{self.ticker}: every present forecast must be positive")
        empty = np.flatnonzero(~present.any(axis=0))
        if empty.size:
            bad = ", ".join(self.analyst_ids[j] for j in empty)
            raise DomainError(f"{self.ticker}: analyst column(s) with no forecasts: {bad}")

    @property
    def n_quarters(self) -> int:
        return len(self.quarters)

    @property
    def n_analysts(self) -> int:
        return len(self.analyst_ids)


@dataclass(frozen=True)
class ForecastPanel:
    """Log-scale view of a RawPanel: y = log(actual), X = log(forecast)."""

    ticker: str
    quarters: tuple[str, ...]
    y: np.ndarray
    X: np.ndarray
    mask: np.ndarray
    analyst_ids: tuple[str, ...]
    raw: RawPanel

    def __post_init__(self):
        if not np.array_equal(self.mask, ~np.isnan(self.X)):
            raise ContractError("mask must flag exactly the present entries of X")

    @property
    def n_quarters(self) -> int:
        return len(self.quarters)

    @property
    def n_analysts(self) -> int:
        return len(self.analyst_ids)

    def row_consensus(self, t: int) -> float:
        """Equal-weight mean over all forecasts present in row t."""
        row = self.X[t]
        present = self.mask[t]
        if not present.any():
            raise DomainError(f"{self.ticker}: no forecasts present in row {t}")
        return float(row[present].mean())


def to_log(raw: RawPanel) -> ForecastPanel:
    """Elementwise natural log of a validated RawPanel."""
    X = np.log(raw.forecasts)
    return ForecastPanel(
        ticker=raw.ticker,
        quarters=raw.quarters,
        y=np.log(raw.actuals),
        X=X,
        mask=~np.isnan(X),
        analyst_ids=raw.analyst_ids,
        raw=raw,
    )


@dataclass(frozen=True)
class WindowView:
    """One training window plus its out-of-sample target row.

    Rows run oldest-first over panel indices [start, end]; the target is
    row end+1 of the panel.  ``X`` holds only the eligible analysts'
    columns (NaN where missing until an estimator imputes them), while
    ``consensus`` is the per-row equal-weight mean over *all* forecasts
    present in the panel row, eligible or not.
    """

    start: int
    end: int
    target: int
    y: np.ndarray           # (L,) log actuals
    X: np.ndarray           # (L, m) eligible columns
    mask: np.ndarray        # (L, m) present flags
    analyst_ids: tuple[str, ...]
    x_target: np.ndarray    # (m,) target-row forecasts, all present
    consensus: np.ndarray   # (L,) all-analyst row means
    consensus_target: float

    def __post_init__(self):
        L = self.end - self.start + 1
        if self.target != self.end + 1:
            raise ContractError("target row must immediately follow the window")
        if self.y.shape != (L,) or self.X.shape[0] != L:
            raise ContractError("window arrays must have exactly L rows")
        if np.isnan(self.x_target).any():
            raise ContractError("every eligible analyst needs a forecast at the target row")

    @property
    def L(self) -> int:
        return self.end - self.start + 1

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def filled(self, X_complete: np.ndarray) -> "WindowView":
        """Copy of this view with the forecast grid replaced by a complete one."""
        if X_complete.shape != self.X.shape or np.isnan(X_complete).any():
            raise ContractError("filled() expects a complete matrix of the same shape")
        return replace(self, X=X_complete, mask=np.ones_like(self.mask))


def window_view(panel: ForecastPanel, anchor: int, L: int, columns: Sequence[int]) -> WindowView:
    """Slice the L rows ending at ``anchor`` (0-based) plus the target row.

    ``columns`` selects the eligible analysts; each must have a present
    forecast at anchor+1.
    """
    start, target = anchor - L + 1, anchor + 1
    if start < 0 or target >= panel.n_quarters:
        raise ContractError(
            f"window [{start}, {anchor}] with target {target} falls outside the panel"
        )
    cols = np.asarray(columns, dtype=int)
    X = panel.X[start : anchor + 1, cols]
    x_target = panel.X[target, cols]
    cons = np.array([panel.row_consensus(t) for t in range(start, anchor + 1)])
    return WindowView(
        start=start,
        end=anchor,
        target=target,
        y=panel.y[start : anchor + 1].copy(),
        X=X.copy(),
        mask=panel.mask[start : anchor + 1, cols].copy(),
        analyst_ids=tuple(panel.analyst_ids[j] for j in cols),
        x_target=x_target.copy(),
        consensus=cons,
        consensus_target=panel.row_consensus(target),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PanelSchema:
    """Column-name mapping for the long-format CSV files."""

    ticker: str = "ticker"
    quarter: str = "quarter"
    analyst: str = "analyst_id"
    forecast: str = "forecast"
    forecast_date: str = "forecast_date"
    actual: str = "actual"


def _read_rows(path: Path, required: Iterable[str], schema_name: str):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: {schema_name} file missing column(s) {missing}")
        return header, list(reader)


def _parse_positive(raw: str, what: str, where: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: cannot parse {what} {raw!r}") from None
    if not np.isfinite(value) or value <= 0:
        raise DomainError(f"{where}: {what} must be positive, got {raw!r}")
    return value


def _parse_date(raw: str, where: str) -> date:
    try:
        return date.fromisoformat(raw.strip())
    except ValueError:
        raise ParseError(f"{where}: cannot parse forecast_date {raw!r}") from None


def load_panels(path: str | Path, schema: PanelSchema | None = None) -> dict[str, RawPanel]:
    """Load every ticker found at ``path`` into validated RawPanels.

    ``path`` may be a directory holding ``forecasts.csv`` + ``actuals.csv``
    or a single combined CSV carrying the actual column on each row.
    """
    schema = schema or PanelSchema()
    path = Path(path)
    if path.is_dir():
        fpath, apath = path / "forecasts.csv", path / "actuals.csv"
        if not fpath.exists() or not apath.exists():
            raise SchemaError(f"{path}: expected forecasts.csv and actuals.csv")
        fheader, frows = _read_rows(
            fpath, [schema.ticker, schema.quarter, schema.analyst, schema.forecast], "forecasts"
        )
        _, arows = _read_rows(apath, [schema.ticker, schema.quarter, schema.actual], "actuals")
        asource = str(apath)
    elif path.exists():
        fheader, frows = _read_rows(
            path,
            [schema.ticker, schema.quarter, schema.analyst, schema.forecast, schema.actual],
            "combined",
        )
        arows, asource = frows, str(path)
        fpath = path
    else:
        raise SchemaError(f"{path}: no such file or directory")

    has_date = schema.forecast_date in fheader

    # actuals: one positive value per (ticker, quarter)
    actuals: dict[str, dict[str, float]] = {}
    for i, row in enumerate(arows, start=2):
        where = f"{asource}:{i}"
        ticker = row[schema.ticker].strip()
        quarter = row[schema.quarter].strip()
        parse_quarter(quarter)
        value = _parse_positive(row[schema.actual], "actual", where)
        seen = actuals.setdefault(ticker, {})
        if quarter in seen and seen[quarter] != value:
            raise DomainError(f"{where}: conflicting actuals for {ticker} {quarter}")
        seen[quarter] = value

    # forecasts: collapse duplicates to the most recent per (quarter, analyst)
    latest: dict[str, dict[tuple[str, str], tuple]] = {}
    analysts: dict[str, list[str]] = {}
    for i, row in enumerate(frows, start=2):
        where = f"{fpath}:{i}"
        ticker = row[schema.ticker].strip()
        quarter = row[schema.quarter].strip()
        parse_quarter(quarter)
        analyst = row[schema.analyst].strip()
        value = _parse_positive(row[schema.forecast], "forecast", where)
        if ticker not in actuals or quarter not in actuals[ticker]:
            raise DomainError(f"{where}: no actual recorded for {ticker} {quarter}")
        stamp = _parse_date(row[schema.forecast_date], where) if has_date and row.get(schema.forecast_date) else date.min
        key = (quarter, analyst)
        slot = latest.setdefault(ticker, {})
        if key not in slot or stamp >= slot[key][0]:
            slot[key] = (stamp, value)
        order = analysts.setdefault(ticker, [])
        if analyst not in order:
            order.append(analyst)

    panels: dict[str, RawPanel] = {}
    for ticker, per_quarter in actuals.items():
        quarters = tuple(sorted(per_quarter, key=parse_quarter))
        ids = tuple(analysts.get(ticker, []))
        if not ids:
            raise DomainError(f"{ticker}: no forecasts found")
        grid = np.full((len(quarters), len(ids)), np.nan)
        col = {a: j for j, a in enumerate(ids)}
        qrow = {q: t for t, q in enumerate(quarters)}
        for (quarter, analyst), (_, value) in latest[ticker].items():
            grid[qrow[quarter], col[analyst]] = value
        panels[ticker] = RawPanel(
            ticker=ticker,
            quarters=quarters,
            actuals=np.array([per_quarter[q] for q in quarters]),
            forecasts=grid,
            analyst_ids=ids,
        )
    return panels


def load_panel(path: str | Path, schema: PanelSchema | None = None, ticker: str | None = None) -> RawPanel:
    """Load a single ticker's panel; errors if the file holds several."""
    panels = load_panels(path, schema)
    if ticker is not None:
        if ticker not in panels:
            raise DomainError(f"{path}: no rows for ticker {ticker!r}")
        return panels[ticker]
    if len(panels) != 1:
        raise DomainError(
            f"{path}: found {sorted(panels)}; pass ticker= to pick one"
        )
    return next(iter(panels.values()))


# ---------------------------------------------------------------------------
# Synthetic panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for synthetic panels.

    Actuals follow a log-linear growth path with optional seasonality and
    noise; analyst j forecasts the log actual plus a fixed bias and an
    AR(1) error with stationary standard deviation sigma_j.  With
    ``phi = 0`` and zero biases the analysts are conditionally
    independent given the actual, so the population-optimal simplex
    weights are the inverse-variance weights.
    """

    n_quarters: int = 36
    n_analysts: int = 10
    bias_range: tuple[float, float] = (-0.02, 0.02)
    sigma_range: tuple[float, float] = (0.02, 0.10)
    biases: tuple[float, ...] | None = None    # overrides bias_range
    sigmas: tuple[float, ...] | None = None    # overrides sigma_range
    missing_rate: float = 0.0
    phi: float = 0.0                            # forecast-error persistence
    base_level: float = 1e9                     # actual at t=0, original scale
    growth: float = 0.03                        # per-quarter log growth
    season_amp: float = 0.0
    sigma_actual: float = 0.05
    start_year: int = 2015
    ticker: str = "SYN"

    def __post_init__(self):
        if not 0 <= self.missing_rate < 1:
            raise ConfigError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if not -1 < self.phi < 1:
            raise ConfigError(f"phi must be in (-1, 1), got {self.phi}")
        if self.n_quarters < 1 or self.n_analysts < 1:
            raise ConfigError("need at least one quarter and one analyst")
        for name, override in (("biases", self.biases), ("sigmas", self.sigmas)):
            if override is not None and len(override) != self.n_analysts:
                raise ConfigError(f"{name} must list one value per analyst")
        if self.sigmas is not None and any(s <= 0 for s in self.sigmas):
            raise ConfigError("sigmas must be positive")


def synthesize_panel(config: SynthConfig, seed: int) -> RawPanel:
    """Generate a deterministic panel for ``seed`` under ``config``."""
    rng = np.random.default_rng(seed)
    T, M = config.n_quarters, config.n_analysts

    if config.biases is not None:
        bias = np.asarray(config.biases, dtype=float)
    else:
        bias = rng.uniform(*config.bias_range, size=M)
    if config.sigmas is not None:
        sigma = np.asarray(config.sigmas, dtype=float)
    else:
        sigma = rng.uniform(*config.sigma_range, size=M)

    t = np.arange(T)
    season = config.season_amp * np.sin(2 * np.pi * t / 4.0)
    log_a = (
        np.log(config.base_level)
        + config.growth * t
        + season
        + rng.normal(0.0, config.sigma_actual, size=T)
    )

    # AR(1) analyst errors with stationary variance sigma_j^2
    eps = np.empty((T, M))
    innov_sd = sigma * np.sqrt(1.0 - config.phi**2)
    eps[0] = rng.normal(0.0, sigma)
    for i in range(1, T):
        eps[i] = config.phi * eps[i - 1] + rng.normal(0.0, innov_sd)
    log_f = log_a[:, None] + bias[None, :] + eps

    missing = rng.random((T, M)) < config.missing_rate
    # keep the panel usable: at least one forecast per column and per row
    for j in range(M):
        if missing[:, j].all():
            missing[rng.integers(T), j] = False
    for i in range(T):
        if missing[i].all():
            missing[i, rng.integers(M)] = False
    forecasts = np.exp(log_f)
    forecasts[missing] = np.nan

    year, q = config.start_year, 1
    quarters = []
    for _ in range(T):
        quarters.append(_quarter_label(year, q))
        q += 1
        if q > 4:
            year, q = year + 1, 1

    return RawPanel(
        ticker=config.ticker,
        quarters=tuple(quarters),
        actuals=np.exp(log_a),
        forecasts=forecasts,
        analyst_ids=tuple(f"A{j:02d}" for j in range(M)),
    )
