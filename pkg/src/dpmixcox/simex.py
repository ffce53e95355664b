"""Poisson-gamma SIMEX for a Cox model with a count-based surrogate.

Extra error is added to the surrogate density W/A at noise levels
lambda, each level is refitted B times, and a quadratic in lambda through
the averaged coefficients is evaluated at lambda = -1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cox import fit_cox_batch
from .data import SurvivalDataset

log = logging.getLogger(__name__)

# Var(Y - u) with u ~ Gamma(1, 1), Y | u ~ Poisson(u) is E[u] = 1; the
# Monte Carlo check in the test suite confirms it, so draws are not rescaled
PSEUDO_ERROR_VAR = 1.0
MAX_DROP_FRACTION = 0.2


@dataclass(frozen=True)
class SimexConfig:
    lambda_grid: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    B: int = 100
    extrapolant: str = "quadratic"
    seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        object.__setattr__(self, "lambda_grid", grid)
        if len(grid) < 3:
            raise ValueError("lambda_grid needs at least 3 points for a quadratic")
        if list(grid) != sorted(grid) or grid[0] != 0.0:
            raise ValueError("lambda_grid must be sorted and start at 0")
        if len(set(grid)) != len(grid):
            raise ValueError("lambda_grid has repeated values")
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if self.extrapolant != "quadratic":
            raise ValueError(f"unknown extrapolant {self.extrapolant!r}")


@dataclass
class SimexFit:
    lambda_grid: np.ndarray
    curve: np.ndarray  # (n_lambda, p) averaged coefficients
    coef: np.ndarray  # extrapolated to lambda = -1
    extrapolant_coef: np.ndarray  # (3, p): intercept, linear, quadratic
    dropped: np.ndarray  # non-converged fits per lambda
    se: np.ndarray | None = None
    names: list = field(default_factory=list)

    def curve_rows(self):
        for k, lam in enumerate(self.lambda_grid):
            yield lam, self.curve[k], int(self.dropped[k])


def error_variance(data: SurvivalDataset) -> np.ndarray:
    """sigma2_i = mean(W) / A_i, using the overall mean count."""
    return np.full(data.n, np.mean(data.w)) / data.a


def pseudo_error(rng: np.random.Generator, size=None):
    """xi = Y - u with u ~ Gamma(1, 1) and Y | u ~ Poisson(u)."""
    u = rng.gamma(1.0, 1.0, size=size)
    return rng.poisson(u) - u


def remeasure(data: SurvivalDataset, lam: float, variances, rng: np.random.Generator) -> np.ndarray:
    """W/A + sqrt(lam) * sigma_i * xi_i; lam = 0 returns the surrogate untouched."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    base = data.surrogate
    if lam == 0:
        return base.copy()
    xi = pseudo_error(rng, data.n) / np.sqrt(PSEUDO_ERROR_VAR)
    return base + np.sqrt(lam) * np.sqrt(variances) * xi


def fit_quadratic(lams, values) -> np.ndarray:
    """Least-squares coefficients (c0, c1, c2) per column of ``values``."""
    lams = np.asarray(lams, dtype=float)
    V = np.vander(lams, 3, increasing=True)
    coef, *_ = np.linalg.lstsq(V, np.asarray(values, dtype=float), rcond=None)
    return coef


def extrapolate(lams, values, at: float = -1.0):
    c = fit_quadratic(lams, values)
    return c[0] + c[1] * at + c[2] * at * at, c


def _substream(seed, k, b):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k, b)))


def fit_simex(data: SurvivalDataset, config: SimexConfig = SimexConfig(), variances=None) -> SimexFit:
    """Coefficient order is [beta_x, beta_z1..beta_zJ].

    ``variances`` overrides the per-subject error variance (zero turns the
    remeasurement off). Fits that fail to converge are dropped from their
    level's average; more than 20% dropped at any level is an error.
    """
    if variances is None:
        variances = error_variance(data)
    variances = np.broadcast_to(np.asarray(variances, dtype=float), (data.n,))
    lams = np.asarray(config.lambda_grid)
    p = 1 + data.n_covariates
    curve = np.empty((lams.size, p))
    dropped = np.zeros(lams.size, dtype=int)
    for k, lam in enumerate(lams):
        # lambda = 0 adds no noise, so every remeasurement is the naive fit
        n_fit = 1 if lam == 0 else config.B
        X = np.empty((n_fit, data.n, p))
        for b in range(n_fit):
            X[b, :, 0] = remeasure(data, lam, variances, _substream(config.seed, k, b))
            X[b, :, 1:] = data.z
        fits = fit_cox_batch(data.u, data.delta, X)
        ok = [f.coef for f in fits if f.converged]
        dropped[k] = (n_fit - len(ok)) * (config.B // n_fit)
        if len(ok) < (1 - MAX_DROP_FRACTION) * n_fit:
            raise ArithmeticError(f"lambda={lam}: {n_fit - len(ok)} of {n_fit} Cox fits failed to converge")
        if dropped[k]:
            log.info("lambda=%g: dropped %d non-converged fits", lam, dropped[k])
        curve[k] = np.mean(ok, axis=0)
    coef, c = extrapolate(lams, curve)
    names = ["beta_x"] + [f"beta_z{j + 1}" for j in range(data.n_covariates)]
    return SimexFit(lams, curve, coef, c, dropped, names=names)


def simex_bootstrap_se(data: SurvivalDataset, config: SimexConfig = SimexConfig(), R: int = 50,
                       seed: int | None = None) -> np.ndarray:
    """Nonparametric bootstrap over subjects; SD (ddof=1) of the extrapolated coefficients."""
    if R < 2:
        raise ValueError("R must be >= 2 (50 or more recommended)")
    if R < 50:
        log.warning("bootstrap with R=%d < 50 resamples is rough", R)
    seed = config.seed if seed is None else seed
    stats = []
    for r in range(R):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10**6 + r,)))
        idx = rng.integers(0, data.n, size=data.n)
        boot = data.subset(idx)
        if not np.any(boot.delta):
            continue
        try:
            stats.append(fit_simex(boot, config).coef)
        except ArithmeticError as exc:
            log.info("bootstrap resample %d skipped: %s", r, exc)
    if len(stats) < 2:
        raise ArithmeticError("fewer than 2 usable bootstrap resamples")
    return np.std(np.array(stats), axis=0, ddof=1)
