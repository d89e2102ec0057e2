"""Rolling one-step-ahead evaluation harness.

Anchors are 0-based: a window covers panel rows [anchor-L+1, anchor] and
the target is row anchor+1, so a panel of T quarters yields T - L folds.
Analysts enter a fold only if they forecast the target row and cover at
least the configured fraction of the window rows.  The optimizers train
on a row-mean completed window; the Bayesian estimator receives the raw
window and handles the gaps itself.

Estimator failures and structurally impossible folds are recorded and
excluded from the rate denominators, never counted as losses.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .bayes import BayesConfig, point_forecast, sample_posterior
from .discount import make_schedule
from .errors import CombineCastError, ConfigError, DomainError
from .losses import (
    DEFAULT_EPSILON,
    DEFAULT_FAMILY,
    classify_hit,
    relative_bias,
    win_rate_loss,
)
from .nlp import fit_hit, fit_win, predict_hit_probability
from .panel import ForecastPanel, window_view
from .qp import build_qp, predict, solve_qp

__all__ = [
    "DEFAULT_LAMBDA_GRID",
    "ALL_ESTIMATORS",
    "GRID_ESTIMATORS",
    "BacktestConfig",
    "FoldResult",
    "SkipRecord",
    "RateRow",
    "BacktestReport",
    "eligible_analysts",
    "impute_row_mean",
    "run_fold",
    "run_cell",
    "iter_cells",
    "run_backtest",
    "cell_seed",
]

DEFAULT_LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
ALL_ESTIMATORS = ("qp", "nlp-win", "nlp-hit", "bayes", "naive", "seasonal-naive")
GRID_ESTIMATORS = frozenset({"qp", "nlp-win", "nlp-hit"})


@dataclass(frozen=True)
class BacktestConfig:
    L: int = 12
    H: int = 1                      # one-step-ahead only
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    threshold: float = 0.90
    estimators: tuple = ALL_ESTIMATORS
    epsilon: float = DEFAULT_EPSILON
    surrogate: str = DEFAULT_FAMILY
    bayes_chains: int = 2
    bayes_burnin: int = 10000
    bayes_keep: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.L < 2:
            raise ConfigError("window length must be at least 2")
        if self.H != 1:
            raise ConfigError("only the one-quarter horizon is supported")
        if not self.lambda_grid or any(g < 0 for g in self.lambda_grid):
            raise ConfigError("discount grid must be nonempty and nonnegative")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("eligibility threshold must lie in (0, 1]")
        unknown = [e for e in self.estimators if e not in ALL_ESTIMATORS]
        if unknown or not self.estimators:
            raise ConfigError(f"unknown estimators: {unknown or 'empty set'}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.surrogate not in ("cauchy", "logistic"):
            raise ConfigError("surrogate family must be cauchy or logistic")
        if self.bayes_chains < 1 or self.bayes_burnin < 0 or self.bayes_keep < 1:
            raise ConfigError("bad posterior sampling budget")

    def bayes_config(self, seed) -> BayesConfig:
        return BayesConfig(chains=self.bayes_chains, burnin=self.bayes_burnin,
                           keep=self.bayes_keep, seed=seed)


@dataclass(frozen=True)
class FoldResult:
    ticker: str
    estimator: str
    lam: float          # nan when the estimator takes no discount parameter
    fold: int           # 0-based counter, anchor - (L-1)
    anchor: int
    y: float
    yhat: float         # nan for nlp-hit, which predicts a probability
    yeq: float
    R: float
    hit: int
    win: float          # nan for nlp-hit
    hit_prob: float     # nan unless nlp-hit
    m_f: int


@dataclass(frozen=True)
class SkipRecord:
    ticker: str
    estimator: str
    lam: float
    fold: int
    anchor: int
    reason: str
    failed: bool        # True: estimator raised; False: fold structurally impossible


@dataclass(frozen=True)
class RateRow:
    ticker: str
    estimator: str
    lam: str            # "" (no grid), "0.25", or "mean"
    n_folds: int
    n_failed: int
    n_skipped: int
    hit_rate: float | None
    win_rate: float | None


class _Skip(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def cell_seed(master: int, ticker: str, fold: int) -> tuple:
    """Stable per-(ticker, fold) seed so worker count never changes draws."""
    return (int(master), zlib.crc32(ticker.encode("utf-8")), int(fold))


def eligible_analysts(panel: ForecastPanel, anchor: int, config: BacktestConfig) -> np.ndarray:
    start = anchor - config.L + 1
    if start < 0 or anchor + 1 >= panel.n_quarters:
        raise DomainError("window plus target row must fit inside the panel")
    window_presence = panel.mask[start:anchor + 1].mean(axis=0)
    at_target = panel.mask[anchor + 1]
    return np.flatnonzero(at_target & (window_presence >= config.threshold))


def impute_row_mean(X: np.ndarray) -> np.ndarray:
    """Fill NaNs with the mean of the present values in the same row."""
    out = np.asarray(X, dtype=float).copy()
    for t in range(out.shape[0]):
        row = out[t]
        miss = np.isnan(row)
        if not miss.any():
            continue
        if miss.all():
            raise DomainError(f"row {t} has no present forecast to average")
        row[miss] = row[~miss].mean()
    return out


def _flags(y: float, yhat: float, yeq: float):
    rb = relative_bias(y, yhat, yeq)
    win = 1 - win_rate_loss(rb)
    hit = classify_hit(y, yhat, yeq)
    return rb.value, hit, win


def run_fold(panel: ForecastPanel, anchor: int, estimator, lam: float,
             config: BacktestConfig) -> FoldResult:
    """Fit on rows anchor-L+1..anchor, score the forecast for anchor+1."""
    L = config.L
    fold = anchor - (L - 1)
    y_f = float(panel.y[anchor + 1])
    try:
        yeq = panel.row_consensus(anchor + 1)
    except DomainError:
        raise _Skip("no forecasts present at the target row")

    eligible = eligible_analysts(panel, anchor, config)
    m_f = int(eligible.size)
    name = estimator if isinstance(estimator, str) else getattr(
        estimator, "__name__", "stub")

    hit_prob = float("nan")
    if callable(estimator):
        yhat = float(estimator(panel, anchor))
    elif estimator == "naive":
        yhat = float(panel.y[anchor])
    elif estimator == "seasonal-naive":
        if anchor - 3 < 0:
            raise _Skip("seasonal benchmark needs a year of history")
        yhat = float(panel.y[anchor - 3])
    else:
        if m_f == 0:
            raise _Skip("no eligible analysts")
        window = window_view(panel, anchor, L, eligible.tolist())
        if estimator == "bayes":
            draws = sample_posterior(
                window, config.bayes_config(cell_seed(config.seed, panel.ticker, fold)))
            yhat = point_forecast(draws)
        else:
            filled = window.filled(impute_row_mean(window.X))
            schedule = make_schedule(lam, L)
            if estimator == "qp":
                solution = solve_qp(build_qp(filled, schedule, intercept=True))
                yhat = predict(filled, solution)
            elif estimator == "nlp-win":
                solution = fit_win(filled, schedule,
                                   family=config.surrogate, epsilon=config.epsilon)
                yhat = predict(filled, solution)
            elif estimator == "nlp-hit":
                model = fit_hit(filled, schedule)
                hit_prob = predict_hit_probability(filled, model)
                label = int(y_f > yeq)
                hit = int(label == int(hit_prob > 0.5))
                return FoldResult(
                    ticker=panel.ticker, estimator=name, lam=lam, fold=fold,
                    anchor=anchor, y=y_f, yhat=float("nan"), yeq=yeq,
                    R=float("nan"), hit=hit, win=float("nan"),
                    hit_prob=hit_prob, m_f=m_f,
                )
            else:
                raise ConfigError(f"unknown estimator {estimator!r}")

    R, hit, win = _flags(y_f, yhat, yeq)
    return FoldResult(
        ticker=panel.ticker, estimator=name, lam=lam, fold=fold, anchor=anchor,
        y=y_f, yhat=yhat, yeq=yeq, R=R, hit=hit, win=float(win),
        hit_prob=hit_prob, m_f=m_f,
    )


def run_cell(panel: ForecastPanel, anchor: int, estimator, lam: float,
             config: BacktestConfig):
    """One (ticker, fold, estimator, lambda) cell; never raises for data reasons."""
    name = estimator if isinstance(estimator, str) else getattr(
        estimator, "__name__", "stub")
    fold = anchor - (config.L - 1)
    try:
        return run_fold(panel, anchor, estimator, lam, config)
    except _Skip as exc:
        return SkipRecord(panel.ticker, name, lam, fold, anchor, exc.reason, False)
    except CombineCastError as exc:
        reason = f"{type(exc).__name__}: {exc}"
        return SkipRecord(panel.ticker, name, lam, fold, anchor, reason, True)


def iter_cells(panel: ForecastPanel, config: BacktestConfig):
    """Canonical cell order for one panel: anchor-major, then estimator, then lambda."""
    T = panel.n_quarters
    if T < config.L + 1:
        raise DomainError(
            f"{panel.ticker}: need at least L+1={config.L + 1} quarters, have {T}")
    for anchor in range(config.L - 1, T - 1):
        for estimator in config.estimators:
            if estimator in GRID_ESTIMATORS:
                for lam in config.lambda_grid:
                    yield anchor, estimator, lam
            else:
                yield anchor, estimator, float("nan")


def _rate(flags) -> float | None:
    vals = [f for f in flags if not (isinstance(f, float) and np.isnan(f))]
    if not vals:
        return None
    return sum(vals) / len(vals)


def _lam_key(lam: float) -> str:
    return "" if np.isnan(lam) else f"{lam:g}"


@dataclass(frozen=True)
class BacktestReport:
    folds: tuple
    skipped: tuple
    config: BacktestConfig

    def failure_count(self) -> int:
        return sum(1 for s in self.skipped if s.failed)

    def rates(self) -> list[RateRow]:
        """Per-ticker rows, a per-grid mean row, and ALL-ticker averages."""
        tickers = sorted({f.ticker for f in self.folds}
                         | {s.ticker for s in self.skipped})
        rows: list[RateRow] = []
        for ticker in tickers:
            for estimator in self.config.estimators:
                lam_keys = ([_lam_key(l) for l in self.config.lambda_grid]
                            if estimator in GRID_ESTIMATORS else [""])
                per_lam: list[RateRow] = []
                for key in lam_keys:
                    cell = [f for f in self.folds
                            if f.ticker == ticker and f.estimator == estimator
                            and _lam_key(f.lam) == key]
                    sk = [s for s in self.skipped
                          if s.ticker == ticker and s.estimator == estimator
                          and _lam_key(s.lam) == key]
                    per_lam.append(RateRow(
                        ticker=ticker, estimator=estimator, lam=key,
                        n_folds=len(cell),
                        n_failed=sum(1 for s in sk if s.failed),
                        n_skipped=sum(1 for s in sk if not s.failed),
                        hit_rate=_rate([f.hit for f in cell]),
                        win_rate=_rate([f.win for f in cell]),
                    ))
                rows.extend(per_lam)
                if estimator in GRID_ESTIMATORS and len(per_lam) > 1:
                    hr = [r.hit_rate for r in per_lam if r.hit_rate is not None]
                    wr = [r.win_rate for r in per_lam if r.win_rate is not None]
                    rows.append(RateRow(
                        ticker=ticker, estimator=estimator, lam="mean",
                        n_folds=sum(r.n_folds for r in per_lam),
                        n_failed=sum(r.n_failed for r in per_lam),
                        n_skipped=sum(r.n_skipped for r in per_lam),
                        hit_rate=sum(hr) / len(hr) if hr else None,
                        win_rate=sum(wr) / len(wr) if wr else None,
                    ))
        for estimator in self.config.estimators:
            lam_keys = ([_lam_key(l) for l in self.config.lambda_grid]
                        if estimator in GRID_ESTIMATORS else [""])
            if estimator in GRID_ESTIMATORS:
                lam_keys = lam_keys + ["mean"]
            for key in lam_keys:
                cells = [r for r in rows
                         if r.estimator == estimator and r.lam == key
                         and r.ticker != "ALL"]
                hr = [r.hit_rate for r in cells if r.hit_rate is not None]
                wr = [r.win_rate for r in cells if r.win_rate is not None]
                rows.append(RateRow(
                    ticker="ALL", estimator=estimator, lam=key,
                    n_folds=sum(r.n_folds for r in cells),
                    n_failed=sum(r.n_failed for r in cells),
                    n_skipped=sum(r.n_skipped for r in cells),
                    hit_rate=sum(hr) / len(hr) if hr else None,
                    win_rate=sum(wr) / len(wr) if wr else None,
                ))
        return rows


def run_backtest(panels, config: BacktestConfig) -> BacktestReport:
    records = []
    for panel in panels:
        for anchor, estimator, lam in iter_cells(panel, config):
            records.append(run_cell(panel, anchor, estimator, lam, config))
    folds = tuple(r for r in records if isinstance(r, FoldResult))
    skipped = tuple(r for r in records if isinstance(r, SkipRecord))
    return BacktestReport(folds=folds, skipped=skipped, config=config)
