"""Hierarchical Bayesian forecast combination with missing-data imputation.

Model, all on the log scale, for a window of L rows and m analysts:

    y_t | theta      ~ N(w0 + w'x_t, sigma^2 / p_t(lambda))
    x_{1,j}          ~ N(gamma_j, sigma_j^2)
    x_{l+1,j} | x_l  ~ N(gamma_j + phi_j (x_{l,j} - gamma_j), sigma_j^2)

    w ~ Dirichlet(alpha), w0 ~ N(0, tau2_w0), lambda ~ U(c0, d0),
    sigma^2 ~ InvGamma(a0, b0), phi_j ~ U(e0, f0),
    gamma_j ~ N(xbar_j, tau2_gamma), sigma_j^2 ~ InvGamma(g0, h0),
    with xbar_j the observed mean of column j.

Missing forecasts are treated as latent parameters and refreshed inside
the sweep from their exact normal full conditionals (AR neighbors plus
the regression row).  sigma^2, sigma_j^2 and gamma_j are conjugate;
w0, phi_j and lambda move by random-walk Metropolis (reflected at the
bounds where bounded); w moves by a Gaussian random walk on additive
log-ratio coordinates with the usual product-of-weights Jacobian in the
acceptance ratio.  Proposal scales adapt toward a 35% acceptance rate
during burn-in only and are frozen afterward.

The one-step-ahead value is predicted by N(w0 + w'x_{L+1}, sigma^2),
with the discount deliberately absent from the predictive variance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discount import make_schedule
from .errors import ConfigError, ContractError, DomainError
from .panel import WindowView

__all__ = [
    "BayesConfig",
    "ThetaDraw",
    "PosteriorDraws",
    "DiagnosticReport",
    "GibbsSampler",
    "log_posterior",
    "sample_posterior",
    "predictive_draws",
    "point_forecast",
    "diagnostics",
    "export_draws",
    "split_rhat",
    "effective_sample_size",
]

RHAT_FLAG_THRESHOLD = 1.05


@dataclass(frozen=True)
class BayesConfig:
    alpha: float = 1.0                 # Dirichlet concentration, shared across analysts
    tau2_w0: float = 1000.0
    lambda_bounds: tuple[float, float] = (0.0, 1.0)
    a0: float = 0.1
    b0: float = 0.1
    phi_bounds: tuple[float, float] = (-1.0, 1.0)
    tau2_gamma: float = 100.0
    g0: float = 0.1
    h0: float = 0.1
    chains: int = 2
    burnin: int = 10000
    keep: int = 20000
    seed: int | tuple = 0

    def __post_init__(self):
        if min(self.alpha, self.tau2_w0, self.a0, self.b0,
               self.tau2_gamma, self.g0, self.h0) <= 0:
            raise ConfigError("all prior variances, shapes and rates must be positive")
        c0, d0 = self.lambda_bounds
        if not (d0 > c0 >= 0):
            raise ConfigError("lambda bounds need d0 > c0 >= 0")
        e0, f0 = self.phi_bounds
        if not f0 > e0:
            raise ConfigError("phi bounds need f0 > e0")
        if self.chains < 1 or self.burnin < 0 or self.keep < 1:
            raise ConfigError("need chains >= 1, burnin >= 0, keep >= 1")


@dataclass(frozen=True)
class ThetaDraw:
    omega: np.ndarray
    omega0: float
    lam: float
    sigma2: float
    phi: np.ndarray
    gamma: np.ndarray
    sigma2_cols: np.ndarray
    imputed: np.ndarray   # aligned with PosteriorDraws.missing_cells

    def __post_init__(self):
        if abs(self.omega.sum() - 1.0) > 1e-10 or np.any(self.omega < 0):
            raise ContractError("omega must lie on the simplex within 1e-10")
        if self.sigma2 <= 0 or np.any(self.sigma2_cols <= 0):
            raise ContractError("variances must be positive")


@dataclass(frozen=True)
class PosteriorDraws:
    """Kept draws from all chains, concatenated chain-major."""

    omega: np.ndarray        # (S, m)
    omega0: np.ndarray       # (S,)
    lam: np.ndarray          # (S,)
    sigma2: np.ndarray       # (S,)
    phi: np.ndarray          # (S, m)
    gamma: np.ndarray        # (S, m)
    sigma2_cols: np.ndarray  # (S, m)
    imputed: np.ndarray      # (S, n_missing)
    missing_cells: tuple[tuple[int, int], ...]
    predictive: np.ndarray   # (S,)
    chains: int
    keep: int
    chain_ids: np.ndarray    # (S,)
    notes: tuple[str, ...] = ()

    @property
    def S(self) -> int:
        return self.omega.shape[0]

    @property
    def m(self) -> int:
        return self.omega.shape[1]

    def __post_init__(self):
        if self.S != self.chains * self.keep:
            raise ContractError("draw count must equal chains * keep")
        if self.predictive.shape != (self.S,):
            raise ContractError("one predictive draw per posterior draw")

    def theta(self, s: int) -> ThetaDraw:
        return ThetaDraw(
            omega=self.omega[s], omega0=float(self.omega0[s]),
            lam=float(self.lam[s]), sigma2=float(self.sigma2[s]),
            phi=self.phi[s], gamma=self.gamma[s],
            sigma2_cols=self.sigma2_cols[s], imputed=self.imputed[s],
        )

    def param_names(self, include_imputed: bool = False) -> list[str]:
        m = self.m
        names = [f"omega_{j + 1}" for j in range(m)]
        names += ["omega0", "lambda", "sigma2"]
        names += [f"phi_{j + 1}" for j in range(m)]
        names += [f"gamma_{j + 1}" for j in range(m)]
        names += [f"sigma2_col_{j + 1}" for j in range(m)]
        if include_imputed:
            names += [f"x_{t + 1}_{j + 1}" for t, j in self.missing_cells]
        return names

    def matrix(self, include_imputed: bool = False) -> np.ndarray:
        cols = [self.omega, self.omega0[:, None], self.lam[:, None],
                self.sigma2[:, None], self.phi, self.gamma, self.sigma2_cols]
        if include_imputed and self.imputed.shape[1]:
            cols.append(self.imputed)
        return np.concatenate(cols, axis=1)


def _reflect(x: float, lo: float, hi: float) -> float:
    period = 2.0 * (hi - lo)
    z = (x - lo) % period
    return lo + min(z, period - z)


def _inv_gamma(rng: np.random.Generator, shape: float, rate: float) -> float:
    return 1.0 / rng.gamma(shape, 1.0 / rate)


class GibbsSampler:
    """Metropolis-within-Gibbs kernel for one window.

    The class exists mostly for the tests: each update block is its own
    method, so a harness can freeze every other block and check a single
    full conditional against its analytic form.  ``use_likelihood=False``
    drops the y-likelihood everywhere, turning the kernel into a prior
    sampler for the same support.
    """

    def __init__(self, window: WindowView, config: BayesConfig,
                 use_likelihood: bool = True):
        if not window.mask.any(axis=0).all():
            raise DomainError("every analyst column needs at least one observed value")
        self.window = window
        self.config = config
        self.use_likelihood = use_likelihood
        self.L, self.m = window.L, window.m
        self.y = window.y
        self.obs_mask = window.mask.copy()
        self.missing_cells = tuple(
            (int(t), int(j)) for t, j in np.argwhere(~window.mask)
        )
        col_means = np.array([
            window.X[window.mask[:, j], j].mean() for j in range(self.m)
        ])
        self.xbar = col_means
        self._wcache: dict[float, np.ndarray] = {}
        self.notes: tuple[str, ...] = ()
        if np.var(self.y) == 0.0:
            self.notes += ("zero-variance actuals in window",)

        # mutable state, set by reset()
        self.X = None
        self.omega = None
        self.omega0 = 0.0
        self.lam = 0.5
        self.sigma2 = 1.0
        self.phi = None
        self.gamma = None
        self.sig2c = None
        self.scales = None
        self._accept = None
        self._attempt = None
        self.reset()

    # -- state ---------------------------------------------------------

    def reset(self):
        X = self.window.X.copy()
        for t, j in self.missing_cells:
            X[t, j] = self.xbar[j]
        self.X = X
        self.omega = np.full(self.m, 1.0 / self.m)
        self.omega0 = 0.0
        c0, d0 = self.config.lambda_bounds
        self.lam = 0.5 * (c0 + d0)
        resid = self.y - self.X @ self.omega
        self.sigma2 = max(float(np.var(resid)), 1e-4)
        self.phi = np.zeros(self.m)
        self.gamma = self.xbar.copy()
        self.sig2c = np.array([
            max(float(np.var(self.X[:, j])), 1e-4) for j in range(self.m)
        ])
        self.scales = {
            "omega": 0.2, "omega0": 0.2, "lambda": 0.1,
            "phi": np.full(self.m, 0.2),
        }
        self._accept = {"omega": 0, "omega0": 0, "lambda": 0,
                        "phi": np.zeros(self.m)}
        self._attempt = {"omega": 0, "omega0": 0, "lambda": 0,
                         "phi": np.zeros(self.m)}

    def theta(self) -> ThetaDraw:
        return ThetaDraw(
            omega=self.omega.copy(), omega0=self.omega0, lam=self.lam,
            sigma2=self.sigma2, phi=self.phi.copy(), gamma=self.gamma.copy(),
            sigma2_cols=self.sig2c.copy(),
            imputed=np.array([self.X[t, j] for t, j in self.missing_cells]),
        )

    def set_theta(self, theta: ThetaDraw):
        self.omega = theta.omega.copy()
        self.omega0 = theta.omega0
        self.lam = theta.lam
        self.sigma2 = theta.sigma2
        self.phi = theta.phi.copy()
        self.gamma = theta.gamma.copy()
        self.sig2c = theta.sigma2_cols.copy()
        for (t, j), v in zip(self.missing_cells, theta.imputed):
            self.X[t, j] = v

    # -- likelihood pieces ----------------------------------------------

    def _weights(self, lam: float) -> np.ndarray:
        w = self._wcache.get(lam)
        if w is None:
            if len(self._wcache) > 8:
                self._wcache.clear()
            w = make_schedule(lam, self.L).weights
            self._wcache[lam] = w
        return w

    def _y_loglik(self, omega0=None, omega=None, lam=None, sigma2=None) -> float:
        if not self.use_likelihood:
            return 0.0
        omega0 = self.omega0 if omega0 is None else omega0
        omega = self.omega if omega is None else omega
        lam = self.lam if lam is None else lam
        sigma2 = self.sigma2 if sigma2 is None else sigma2
        p = self._weights(lam)
        r = self.y - omega0 - self.X @ omega
        return float(
            -0.5 * self.L * math.log(2.0 * math.pi * sigma2)
            + 0.5 * np.log(p).sum()
            - 0.5 * (p @ r**2) / sigma2
        )

    def _ar_loglik_col(self, j: int, phi=None, gamma=None, sig2=None) -> float:
        phi = self.phi[j] if phi is None else phi
        gamma = self.gamma[j] if gamma is None else gamma
        sig2 = self.sig2c[j] if sig2 is None else sig2
        x = self.X[:, j]
        resid0 = x[0] - gamma
        trans = x[1:] - gamma - phi * (x[:-1] - gamma)
        ss = resid0**2 + float(trans @ trans)
        return -0.5 * self.L * math.log(2.0 * math.pi * sig2) - 0.5 * ss / sig2

    # -- conjugate blocks -----------------------------------------------

    def update_sigma2(self, rng: np.random.Generator):
        cfg = self.config
        if not self.use_likelihood:
            self.sigma2 = _inv_gamma(rng, cfg.a0, cfg.b0)
            return
        p = self._weights(self.lam)
        r = self.y - self.omega0 - self.X @ self.omega
        shape = cfg.a0 + 0.5 * self.L
        rate = cfg.b0 + 0.5 * float(p @ r**2)
        self.sigma2 = _inv_gamma(rng, shape, rate)

    def update_sigma2_cols(self, rng: np.random.Generator):
        cfg = self.config
        for j in range(self.m):
            x = self.X[:, j]
            g, ph = self.gamma[j], self.phi[j]
            resid0 = x[0] - g
            trans = x[1:] - g - ph * (x[:-1] - g)
            ss = resid0**2 + float(trans @ trans)
            self.sig2c[j] = _inv_gamma(rng, cfg.g0 + 0.5 * self.L, cfg.h0 + 0.5 * ss)

    def update_gamma(self, rng: np.random.Generator):
        cfg = self.config
        for j in range(self.m):
            x = self.X[:, j]
            ph, s2 = self.phi[j], self.sig2c[j]
            prec = 1.0 / cfg.tau2_gamma + (1.0 + (self.L - 1) * (1.0 - ph) ** 2) / s2
            pm = self.xbar[j] / cfg.tau2_gamma
            pm += (x[0] + (1.0 - ph) * float((x[1:] - ph * x[:-1]).sum())) / s2
            mean = pm / prec
            self.gamma[j] = mean + rng.normal() / math.sqrt(prec)

    # -- Metropolis blocks ----------------------------------------------

    def _bump(self, key, j=None, accepted=False):
        if j is None:
            self._attempt[key] += 1
            self._accept[key] += int(accepted)
        else:
            self._attempt[key][j] += 1
            self._accept[key][j] += int(accepted)

    def update_phi(self, rng: np.random.Generator):
        e0, f0 = self.config.phi_bounds
        for j in range(self.m):
            prop = _reflect(self.phi[j] + self.scales["phi"][j] * rng.normal(), e0, f0)
            delta = (self._ar_loglik_col(j, phi=prop)
                     - self._ar_loglik_col(j))
            accepted = math.log(rng.random()) < delta
            if accepted:
                self.phi[j] = prop
            self._bump("phi", j, accepted)

    def update_omega0(self, rng: np.random.Generator):
        tau2 = self.config.tau2_w0
        prop = self.omega0 + self.scales["omega0"] * rng.normal()
        delta = self._y_loglik(omega0=prop) - self._y_loglik()
        delta += -0.5 * (prop**2 - self.omega0**2) / tau2
        accepted = math.log(rng.random()) < delta
        if accepted:
            self.omega0 = prop
        self._bump("omega0", accepted=accepted)

    def update_omega(self, rng: np.random.Generator):
        if self.m == 1:
            return
        alpha = self.config.alpha
        v = np.log(self.omega[:-1]) - math.log(self.omega[-1])
        vp = v + self.scales["omega"] * rng.normal(size=self.m - 1)
        shift = max(float(vp.max()), 0.0)
        ev = np.exp(vp - shift)
        last = math.exp(-shift)
        prop = np.append(ev, last) / (ev.sum() + last)
        delta = self._y_loglik(omega=prop) - self._y_loglik()
        # Dirichlet prior plus the log-ratio Jacobian (product of weights)
        delta += float(alpha * (np.log(prop).sum() - np.log(self.omega).sum()))
        accepted = math.log(rng.random()) < delta
        if accepted:
            self.omega = prop
        self._bump("omega", accepted=accepted)

    def update_lambda(self, rng: np.random.Generator):
        c0, d0 = self.config.lambda_bounds
        prop = _reflect(self.lam + self.scales["lambda"] * rng.normal(), c0, d0)
        delta = self._y_loglik(lam=prop) - self._y_loglik()
        accepted = math.log(rng.random()) < delta
        if accepted:
            self.lam = prop
        self._bump("lambda", accepted=accepted)

    # -- imputation ------------------------------------------------------

    def update_missing(self, rng: np.random.Generator):
        if not self.missing_cells:
            return
        p = self._weights(self.lam)
        for t, j in self.missing_cells:
            g, ph, s2 = self.gamma[j], self.phi[j], self.sig2c[j]
            if t == 0:
                mu_prev = g
            else:
                mu_prev = g + ph * (self.X[t - 1, j] - g)
            prec = 1.0 / s2
            pm = mu_prev / s2
            if t + 1 < self.L:
                prec += ph**2 / s2
                pm += ph * (self.X[t + 1, j] - g * (1.0 - ph)) / s2
            if self.use_likelihood:
                wj = self.omega[j]
                rest = self.y[t] - self.omega0 - self.X[t] @ self.omega + wj * self.X[t, j]
                prec += wj**2 * p[t] / self.sigma2
                pm += wj * rest * p[t] / self.sigma2
            mean = pm / prec
            self.X[t, j] = mean + rng.normal() / math.sqrt(prec)

    # -- sweep and adaptation ---------------------------------------------

    def sweep(self, rng: np.random.Generator):
        self.update_missing(rng)
        self.update_gamma(rng)
        self.update_phi(rng)
        self.update_sigma2_cols(rng)
        self.update_omega(rng)
        self.update_omega0(rng)
        self.update_sigma2(rng)
        self.update_lambda(rng)

    def adapt_scales(self, batch: int):
        step = min(1.0, 5.0 / math.sqrt(batch))
        for key in ("omega", "omega0", "lambda"):
            if self._attempt[key]:
                rate = self._accept[key] / self._attempt[key]
                self.scales[key] = float(np.clip(
                    self.scales[key] * math.exp(step * (rate - 0.35)), 1e-4, 10.0,
                ))
            self._accept[key] = 0
            self._attempt[key] = 0
        att = self._attempt["phi"]
        acc = self._accept["phi"]
        for j in range(self.m):
            if att[j]:
                rate = acc[j] / att[j]
                self.scales["phi"][j] = float(np.clip(
                    self.scales["phi"][j] * math.exp(step * (rate - 0.35)), 1e-4, 10.0,
                ))
        self._accept["phi"] = np.zeros(self.m)
        self._attempt["phi"] = np.zeros(self.m)

    def run_chain(self, seed_key, burnin: int, keep: int):
        """One chain; adaptation happens during burn-in only."""
        rng = np.random.default_rng(seed_key)
        self.reset()
        m, n_miss = self.m, len(self.missing_cells)
        out = {
            "omega": np.empty((keep, m)), "omega0": np.empty(keep),
            "lam": np.empty(keep), "sigma2": np.empty(keep),
            "phi": np.empty((keep, m)), "gamma": np.empty((keep, m)),
            "sigma2_cols": np.empty((keep, m)),
            "imputed": np.empty((keep, n_miss)),
            "predictive": np.empty(keep),
        }
        batch = 0
        for it in range(burnin):
            self.sweep(rng)
            if (it + 1) % 50 == 0:
                batch += 1
                self.adapt_scales(batch)
        x_tgt = self.window.x_target
        for s in range(keep):
            self.sweep(rng)
            out["omega"][s] = self.omega
            out["omega0"][s] = self.omega0
            out["lam"][s] = self.lam
            out["sigma2"][s] = self.sigma2
            out["phi"][s] = self.phi
            out["gamma"][s] = self.gamma
            out["sigma2_cols"][s] = self.sig2c
            for i, (t, j) in enumerate(self.missing_cells):
                out["imputed"][s, i] = self.X[t, j]
            mu = self.omega0 + self.omega @ x_tgt
            out["predictive"][s] = mu + math.sqrt(self.sigma2) * rng.normal()
        return out


def log_posterior(theta: ThetaDraw, window: WindowView, config: BayesConfig,
                  use_likelihood: bool = True) -> float:
    """Joint log density of (theta, imputed values) up to the data normalizer."""
    m = window.m
    c0, d0 = config.lambda_bounds
    e0, f0 = config.phi_bounds
    if (np.any(theta.omega <= 0) or theta.sigma2 <= 0
            or np.any(theta.sigma2_cols <= 0)
            or not (c0 <= theta.lam <= d0)
            or np.any((theta.phi <= e0) | (theta.phi >= f0))):
        return -math.inf

    sampler = GibbsSampler(window, config, use_likelihood=use_likelihood)
    sampler.set_theta(theta)

    total = sampler._y_loglik()
    for j in range(m):
        total += sampler._ar_loglik_col(j)

    a = config.alpha
    total += math.lgamma(m * a) - m * math.lgamma(a)
    total += float((a - 1.0) * np.log(theta.omega).sum())
    total += -0.5 * math.log(2.0 * math.pi * config.tau2_w0) \
        - 0.5 * theta.omega0**2 / config.tau2_w0
    total += -math.log(d0 - c0)
    total += config.a0 * math.log(config.b0) - math.lgamma(config.a0) \
        - (config.a0 + 1.0) * math.log(theta.sigma2) - config.b0 / theta.sigma2
    total += -m * math.log(f0 - e0)
    for j in range(m):
        total += -0.5 * math.log(2.0 * math.pi * config.tau2_gamma) \
            - 0.5 * (theta.gamma[j] - sampler.xbar[j])**2 / config.tau2_gamma
        total += config.g0 * math.log(config.h0) - math.lgamma(config.g0) \
            - (config.g0 + 1.0) * math.log(theta.sigma2_cols[j]) \
            - config.h0 / theta.sigma2_cols[j]
    return float(total)


def sample_posterior(window: WindowView, config: BayesConfig,
                     use_likelihood: bool = True) -> PosteriorDraws:
    """Run all chains sequentially on independent generator streams."""
    sampler = GibbsSampler(window, config, use_likelihood=use_likelihood)
    base = (list(config.seed) if isinstance(config.seed, (list, tuple))
            else [config.seed])
    pieces = []
    for chain in range(config.chains):
        pieces.append(sampler.run_chain(
            [int(s) for s in base] + [chain], config.burnin, config.keep,
        ))
    cat = {k: np.concatenate([p[k] for p in pieces]) for k in pieces[0]}
    chain_ids = np.repeat(np.arange(config.chains), config.keep)
    return PosteriorDraws(
        omega=cat["omega"], omega0=cat["omega0"], lam=cat["lam"],
        sigma2=cat["sigma2"], phi=cat["phi"], gamma=cat["gamma"],
        sigma2_cols=cat["sigma2_cols"], imputed=cat["imputed"],
        missing_cells=sampler.missing_cells,
        predictive=cat["predictive"],
        chains=config.chains, keep=config.keep, chain_ids=chain_ids,
        notes=sampler.notes,
    )


def predictive_draws(draws: PosteriorDraws, target_forecasts: np.ndarray,
                     seed: int = 0) -> np.ndarray:
    """Fresh one-per-sample predictive draws at the given target row."""
    x = np.asarray(target_forecasts, dtype=float)
    if x.shape != (draws.m,) or np.isnan(x).any():
        raise ContractError("target forecasts must be complete for every analyst")
    rng = np.random.default_rng(seed)
    mu = draws.omega0 + draws.omega @ x
    return mu + np.sqrt(draws.sigma2) * rng.standard_normal(draws.S)


def point_forecast(draws: PosteriorDraws) -> float:
    """Empirical mean of the stored predictive draws."""
    return float(draws.predictive.mean())


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _split_chains(values: np.ndarray, chains: int) -> np.ndarray:
    per = values.reshape(chains, -1)
    n = per.shape[1] // 2
    if n < 1:
        return per
    return np.concatenate([per[:, :n], per[:, n:2 * n]], axis=0)


def split_rhat(values: np.ndarray, chains: int) -> float:
    """Potential scale reduction over split half-chains."""
    if np.all(values == values[0]):
        return 1.0          # exactly constant; demeaning would leave fp dust
    halves = _split_chains(values, chains)
    k, n = halves.shape
    if n < 2:
        return math.nan
    means = halves.mean(axis=1)
    W = float(halves.var(axis=1, ddof=1).mean())
    B = n * float(means.var(ddof=1)) if k > 1 else 0.0
    if W == 0.0:
        return 1.0 if B == 0.0 else math.inf
    var_hat = (n - 1) / n * W + B / n
    return math.sqrt(var_hat / W)


def _acf_fft(x: np.ndarray) -> np.ndarray:
    n = len(x)
    xd = x - x.mean()
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(xd, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real / n
    return acov


def effective_sample_size(values: np.ndarray, chains: int) -> float:
    """Autocorrelation-based ESS with paired truncation over split chains."""
    if np.all(values == values[0]):
        return 0.0
    halves = _split_chains(values, chains)
    k, n = halves.shape
    if n < 2:
        return math.nan
    acovs = np.stack([_acf_fft(h) for h in halves])
    W = float(acovs[:, 0].mean() * n / (n - 1))
    means = halves.mean(axis=1)
    B = n * float(means.var(ddof=1)) if k > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    if var_plus <= 0.0:
        return 0.0
    rho = 1.0 - (W - acovs.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev)     # enforce monotone decay
        tau += pair
        prev = pair
        t += 2
    tau = max(2.0 * tau - 1.0, 1.0)
    return float(min(k * n / tau, k * n))


@dataclass(frozen=True)
class DiagnosticReport:
    rhat: dict
    ess: dict
    flags: tuple[str, ...]

    def flagged(self) -> bool:
        return bool(self.flags)


def diagnostics(draws: PosteriorDraws, include_imputed: bool = False) -> DiagnosticReport:
    names = draws.param_names(include_imputed=include_imputed)
    mat = draws.matrix(include_imputed=include_imputed)
    rhat, ess, flags = {}, {}, []
    for i, name in enumerate(names):
        col = mat[:, i]
        r = split_rhat(col, draws.chains)
        e = effective_sample_size(col, draws.chains)
        rhat[name] = r
        ess[name] = e
        if np.all(col == col[0]):
            flags.append(f"{name}: chain stuck at a constant value")
        elif not math.isnan(r) and r > RHAT_FLAG_THRESHOLD:
            flags.append(f"{name}: split-Rhat {r:.4f} > {RHAT_FLAG_THRESHOLD}")
    for note in draws.notes:
        flags.append(note)
    return DiagnosticReport(rhat=rhat, ess=ess, flags=tuple(flags))


def export_draws(draws: PosteriorDraws, path) -> None:
    """One CSV row per kept draw, chain id first."""
    names = draws.param_names(include_imputed=True)
    mat = draws.matrix(include_imputed=True)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain"] + names)
        for cid, row in zip(draws.chain_ids, mat):
            writer.writerow([int(cid)] + [f"{v:.10g}" for v in row])
