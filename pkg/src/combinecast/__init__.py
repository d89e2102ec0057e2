"""combinecast: optimally weighted combinations of analyst forecasts."""

from .backtest import (
    BacktestConfig,
    BacktestReport,
    FoldResult,
    eligible_analysts,
    impute_row_mean,
    run_backtest,
    run_fold,
)
from .bayes import (
    BayesConfig,
    PosteriorDraws,
    diagnostics,
    point_forecast,
    predictive_draws,
    sample_posterior,
)
from .discount import DiscountSchedule, make_schedule
from .errors import (
    CalibrationError,
    CombineCastError,
    ConfigError,
    ContractError,
    ConvergenceError,
    DomainError,
    ParseError,
    SchemaError,
)
from .losses import (
    classify_hit,
    hit_rate_loss,
    relative_bias,
    squared_error_loss,
    surrogate_for_window,
    win_rate_loss,
)
from .nlp import cobyla_minimize, fit_hit, fit_win
from .panel import (
    ForecastPanel,
    PanelSchema,
    RawPanel,
    SynthConfig,
    WindowView,
    load_panel,
    load_panels,
    synthesize_panel,
    to_log,
    window_view,
)
from .qp import QuadraticProgram, WeightSolution, build_qp, predict, solve_qp

__version__ = "0.1.0"
