"""Command-line surface: synthesize panels, run backtests, fit one window.

Everything is file-in, file-out CSV.  Each command writes a manifest
(key,value CSV) recording the resolved configuration, input digests and
tool version; re-running with the same inputs and seed reproduces the
report files byte for byte, timestamps aside.

Option precedence: command-line flag, then --config JSON file, then the
built-in default.  The seed additionally falls back to the COMBINE_SEED
environment variable before its default.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import (
    ALL_ESTIMATORS,
    BacktestConfig,
    FoldResult,
    GRID_ESTIMATORS,
    eligible_analysts,
    impute_row_mean,
    iter_cells,
    run_cell,
    cell_seed,
)
from .bayes import diagnostics, export_draws, sample_posterior
from .discount import make_schedule
from .errors import CombineCastError, ConfigError
from .nlp import fit_hit, fit_win
from .panel import SynthConfig, load_panels, synthesize_panel, to_log, window_view
from .qp import build_qp, solve_qp

__all__ = ["main"]

USAGE_ERROR = 2
DATA_ERROR = 3

_DEFAULTS = {
    "L": 12,
    "lambda_grid": "0,0.25,0.5,0.75,1",
    "estimators": ",".join(ALL_ESTIMATORS),
    "threshold": 0.90,
    "epsilon": 0.005,
    "surrogate": "cauchy",
    "chains": 2,
    "burnin": 10000,
    "keep": 20000,
    "jobs": None,        # resolved to cpu count at run time
    "tickers": 23,
    "quarters": 36,
    "analysts": 10,
    "missing_rate": 0.0,
    "growth": 0.03,
    "estimator": "qp",
    "lam": 0.0,
    "anchor": None,
    "bins": 40,
}


def _fmt(v) -> str:
    """Stable CSV cell: empty for missing, shortest round-trip for floats."""
    if v is None:
        return ""
    if isinstance(v, float):
        v = float(v)  # numpy scalars repr as np.float64(...) otherwise
        if math.isnan(v):
            return ""
        if v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return "sha256:" + h.hexdigest()


def _write_manifest(out: Path, command: str, seed, inputs, config_items,
                    outputs) -> None:
    rows = [("version", __version__), ("command", command),
            ("created_utc", _dt.datetime.now(_dt.timezone.utc).isoformat()),
            ("seed", seed)]
    rows += [(f"input.{name}", _digest(p)) for name, p in inputs]
    rows += [(f"config.{k}", v) for k, v in config_items]
    rows += [(f"output.{name}", name) for name in outputs]
    _write_csv(out / "manifest.csv", ("key", "value"), rows)


class _Resolver:
    """flag > config file > default, with the seed's env fallback."""

    def __init__(self, args):
        self.args = args
        self.file = {}
        cfg_path = getattr(args, "config", None)
        if cfg_path is not None:
            p = Path(cfg_path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                self.file = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}")
            if not isinstance(self.file, dict):
                raise ConfigError("config file must hold a JSON object")

    def get(self, key):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file:
            return self.file[key]
        return _DEFAULTS[key]

    def seed(self) -> int:
        flag = getattr(self.args, "seed", None)
        if flag is not None:
            return int(flag)
        if "seed" in self.file:
            return int(self.file["seed"])
        return int(os.environ.get("COMBINE_SEED", "0"))


def _parse_grid(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(g) for g in text)
    try:
        return tuple(float(tok) for tok in str(text).split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigError(f"bad lambda grid: {text!r}")


def _parse_estimators(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(tok.strip() for tok in str(text).split(",") if tok.strip())


def _load(panel_arg: str):
    path = Path(panel_arg)
    if not path.exists():
        raise _Usage(f"panel path does not exist: {path}")
    raws = load_panels(path)
    return [to_log(raws[t]) for t in sorted(raws)]


class _Usage(Exception):
    pass


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

def _cell_task(packed):
    panel, anchor, estimator, lam, config = packed
    return run_cell(panel, anchor, estimator, lam, config)


def cmd_backtest(args) -> int:
    res = _Resolver(args)
    seed = res.seed()
    config = BacktestConfig(
        L=int(res.get("L")),
        lambda_grid=_parse_grid(res.get("lambda_grid")),
        threshold=float(res.get("threshold")),
        estimators=_parse_estimators(res.get("estimators")),
        epsilon=float(res.get("epsilon")),
        surrogate=str(res.get("surrogate")),
        bayes_chains=int(res.get("chains")),
        bayes_burnin=int(res.get("burnin")),
        bayes_keep=int(res.get("keep")),
        seed=seed,
    )
    panels = _load(args.panel)
    jobs = res.get("jobs")
    jobs = os.cpu_count() or 1 if jobs is None else max(1, int(jobs))

    tasks = [(panel, anchor, est, lam, config)
             for panel in panels
             for anchor, est, lam in iter_cells(panel, config)]
    if jobs == 1 or len(tasks) < 2:
        records = [_cell_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            chunk = max(1, len(tasks) // (jobs * 4))
            records = list(pool.map(_cell_task, tasks, chunksize=chunk))

    from .backtest import BacktestReport, SkipRecord
    report = BacktestReport(
        folds=tuple(r for r in records if isinstance(r, FoldResult)),
        skipped=tuple(r for r in records if isinstance(r, SkipRecord)),
        config=config,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "folds.csv",
        ("ticker", "estimator", "lambda", "fold", "y", "yhat", "yeq", "R",
         "hit", "win"),
        [(f.ticker, f.estimator, f.lam, f.fold, f.y, f.yhat, f.yeq, f.R,
          f.hit, f.win) for f in report.folds],
    )
    rows = report.rates()
    _write_csv(
        out / "summary.csv",
        ("ticker", "estimator", "lambda", "n_folds", "n_failed", "n_skipped",
         "hit_rate", "win_rate"),
        [(r.ticker, r.estimator, r.lam, r.n_folds, r.n_failed, r.n_skipped,
          r.hit_rate, r.win_rate) for r in rows],
    )
    _write_csv(
        out / "skipped.csv",
        ("ticker", "estimator", "lambda", "fold", "failed", "reason"),
        [(s.ticker, s.estimator, s.lam, s.fold, int(s.failed), s.reason)
         for s in report.skipped],
    )

    inputs = _input_files(Path(args.panel))
    _write_manifest(out, "backtest", seed, inputs,
                    _config_items(config, jobs=jobs),
                    ["folds.csv", "summary.csv", "skipped.csv"])

    _print_summary(rows, report)
    print(f"wrote {out / 'folds.csv'}")
    return 0


def _input_files(path: Path):
    if path.is_dir():
        return sorted(((p.name, p) for p in path.glob("*.csv")),
                      key=lambda kv: kv[0])
    return [(path.name, path)]


def _config_items(config: BacktestConfig, **extra):
    items = [
        ("L", config.L), ("H", config.H),
        ("lambda_grid", ",".join(f"{g:g}" for g in config.lambda_grid)),
        ("threshold", config.threshold),
        ("estimators", ",".join(config.estimators)),
        ("epsilon", config.epsilon), ("surrogate", config.surrogate),
        ("bayes_chains", config.bayes_chains),
        ("bayes_burnin", config.bayes_burnin),
        ("bayes_keep", config.bayes_keep),
    ]
    items += sorted(extra.items())
    return items


def _print_summary(rows, report) -> None:
    print(f"{'ticker':<8} {'estimator':<15} {'lambda':>6} {'folds':>5} "
          f"{'hit':>7} {'win':>7}")
    for r in rows:
        if r.ticker != "ALL":
            continue
        hit = "-" if r.hit_rate is None else f"{r.hit_rate:.4f}"
        win = "-" if r.win_rate is None else f"{r.win_rate:.4f}"
        print(f"{r.ticker:<8} {r.estimator:<15} {r.lam:>6} {r.n_folds:>5} "
              f"{hit:>7} {win:>7}")
    failures = report.failure_count()
    skips = len(report.skipped) - failures
    print(f"folds: {len(report.folds)}  failures: {failures}  skipped: {skips}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    res = _Resolver(args)
    seed = res.seed()
    n_tickers = int(res.get("tickers"))
    quarters = int(res.get("quarters"))
    analysts = int(res.get("analysts"))
    missing = float(res.get("missing_rate"))
    growth = float(res.get("growth"))
    if n_tickers < 1:
        raise ConfigError("need at least one ticker")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fc_rows, ac_rows = [], []
    for k in range(n_tickers):
        cfg = SynthConfig(
            n_quarters=quarters, n_analysts=analysts,
            missing_rate=missing, growth=growth,
            ticker=f"SYN{k + 1:02d}",
        )
        raw = synthesize_panel(cfg, seed * 10007 + k)
        for t, q in enumerate(raw.quarters):
            ac_rows.append((raw.ticker, q, raw.actuals[t]))
            for j, analyst in enumerate(raw.analyst_ids):
                v = raw.forecasts[t, j]
                if not math.isnan(v):
                    fc_rows.append((raw.ticker, q, analyst, v))
    _write_csv(out / "forecasts.csv",
               ("ticker", "quarter", "analyst_id", "forecast"), fc_rows)
    _write_csv(out / "actuals.csv", ("ticker", "quarter", "actual"), ac_rows)
    _write_manifest(out, "synth", seed, [],
                    [("tickers", n_tickers), ("quarters", quarters),
                     ("analysts", analysts), ("missing_rate", missing),
                     ("growth", growth)],
                    ["forecasts.csv", "actuals.csv"])
    print(f"wrote {n_tickers} panels to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    res = _Resolver(args)
    seed = res.seed()
    L = int(res.get("L"))
    estimator = str(res.get("estimator"))
    lam = float(res.get("lam"))
    panels = _load(args.panel)
    byname = {p.ticker: p for p in panels}
    ticker = args.ticker or panels[0].ticker
    if ticker not in byname:
        raise _Usage(f"unknown ticker {ticker!r}; panel holds {sorted(byname)}")
    panel = byname[ticker]

    anchor = res.get("anchor")
    anchor = panel.n_quarters - 2 if anchor is None else int(anchor)
    config = BacktestConfig(
        L=L, lambda_grid=(lam,),
        epsilon=float(res.get("epsilon")), surrogate=str(res.get("surrogate")),
        bayes_chains=int(res.get("chains")), bayes_burnin=int(res.get("burnin")),
        bayes_keep=int(res.get("keep")), seed=seed,
    )
    eligible = eligible_analysts(panel, anchor, config)
    if eligible.size == 0:
        raise ConfigError(f"no eligible analysts at anchor {anchor}")
    window = window_view(panel, anchor, L, eligible.tolist())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    if estimator == "bayes":
        draws = sample_posterior(
            window, config.bayes_config(cell_seed(seed, ticker, anchor)))
        export_draws(draws, out / "draws.csv")
        report = diagnostics(draws)
        _write_csv(out / "diagnostics.csv", ("parameter", "rhat", "ess"),
                   [(name, report.rhat[name], report.ess[name])
                    for name in sorted(report.rhat)])
        bins = int(res.get("bins"))
        counts, edges = np.histogram(draws.lam, bins=bins, range=(0.0, 1.0))
        _write_csv(out / "lambda_hist.csv", ("bin_left", "bin_right", "count"),
                   [(edges[i], edges[i + 1], int(counts[i]))
                    for i in range(bins)])
        outputs = ["draws.csv", "diagnostics.csv", "lambda_hist.csv"]
        if report.flags:
            for flag in report.flags:
                print(f"diagnostic: {flag}")
    elif estimator in GRID_ESTIMATORS:
        filled = window.filled(impute_row_mean(window.X))
        schedule = make_schedule(lam, L)
        if estimator == "qp":
            solution = solve_qp(build_qp(filled, schedule, intercept=True))
        elif estimator == "nlp-win":
            solution = fit_win(filled, schedule, family=config.surrogate,
                               epsilon=config.epsilon)
        else:
            solution = fit_hit(filled, schedule)
        rows = [("estimator", estimator), ("lambda", f"{lam:g}"),
                ("anchor", anchor), ("converged", int(solution.converged)),
                ("objective", solution.objective),
                ("intercept", solution.omega0)]
        rows += [(f"omega.{aid}", w)
                 for aid, w in zip(window.analyst_ids, solution.omega)]
        _write_csv(out / "weights.csv", ("component", "value"), rows)
        outputs = ["weights.csv"]
    else:
        raise ConfigError(f"fit supports qp, nlp-win, nlp-hit, bayes; got {estimator!r}")

    inputs = _input_files(Path(args.panel))
    _write_manifest(out, "fit", seed, inputs,
                    _config_items(config, ticker=ticker, anchor=anchor,
                                  estimator=estimator),
                    outputs)
    print(f"wrote {', '.join(outputs)} to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="combinecast",
        description="Weighted combination of analyst forecasts: "
                    "synthesize panels, backtest estimators, inspect fits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (falls back to COMBINE_SEED, then 0)")
        p.add_argument("--config", default=None,
                       help="JSON file of option defaults")
        p.add_argument("--out", default="out", help="output directory")

    b = sub.add_parser("backtest", help="rolling-window evaluation")
    b.add_argument("--panel", required=True, help="panel CSV file or directory")
    b.add_argument("--L", type=int, default=None, help="window length")
    b.add_argument("--lambda-grid", dest="lambda_grid", default=None,
                   help="comma-separated discount grid")
    b.add_argument("--estimators", default=None,
                   help=f"comma-separated subset of {','.join(ALL_ESTIMATORS)}")
    b.add_argument("--threshold", type=float, default=None,
                   help="eligibility presence fraction")
    b.add_argument("--epsilon", type=float, default=None,
                   help="surrogate tail mass")
    b.add_argument("--surrogate", choices=("cauchy", "logistic"), default=None)
    b.add_argument("--chains", type=int, default=None)
    b.add_argument("--burnin", type=int, default=None)
    b.add_argument("--keep", type=int, default=None)
    b.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: logical cores)")
    common(b)
    b.set_defaults(func=cmd_backtest)

    s = sub.add_parser("synth", help="generate synthetic panels")
    s.add_argument("--tickers", type=int, default=None)
    s.add_argument("--quarters", type=int, default=None)
    s.add_argument("--analysts", type=int, default=None)
    s.add_argument("--missing-rate", dest="missing_rate", type=float, default=None)
    s.add_argument("--growth", type=float, default=None)
    common(s)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit one window and emit weights or draws")
    f.add_argument("--panel", required=True)
    f.add_argument("--ticker", default=None)
    f.add_argument("--anchor", type=int, default=None,
                   help="0-based last training row (default: latest possible)")
    f.add_argument("--estimator", default=None,
                   help="qp, nlp-win, nlp-hit, or bayes")
    f.add_argument("--lambda", dest="lam", type=float, default=None)
    f.add_argument("--L", type=int, default=None)
    f.add_argument("--epsilon", type=float, default=None)
    f.add_argument("--surrogate", choices=("cauchy", "logistic"), default=None)
    f.add_argument("--chains", type=int, default=None)
    f.add_argument("--burnin", type=int, default=None)
    f.add_argument("--keep", type=int, default=None)
    f.add_argument("--bins", type=int, default=None, help="histogram bins")
    common(f)
    f.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except CombineCastError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
