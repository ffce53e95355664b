"""Piecewise-exponential survival likelihood, direct and Poisson-kernel forms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import HazardGrid, SurvivalDataset
from .errors import NonFiniteLik

# exp(709.78) is the largest finite double; stop short of it
MAX_ETA = 700.0


@dataclass(frozen=True, eq=False)
class IntervalExpansion:
    """One row per (subject, interval) cell carrying exposure or an event.

    A cell with zero exposure is kept only when the subject's event falls
    exactly on the interval's left knot, so per-subject event counts are
    preserved.
    """

    subject: np.ndarray
    interval: np.ndarray
    exposure: np.ndarray
    event: np.ndarray
    z: np.ndarray
    n_subjects: int
    n_intervals: int

    @property
    def offset(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.exposure)


def exposure_matrix(u: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Dense (n, L) matrix of time spent in each interval before u_i."""
    lo = knots[None, :]
    hi = np.append(knots[1:], np.inf)[None, :]
    return np.clip(np.minimum(u[:, None], hi) - lo, 0.0, None)


def expand_intervals(data: SurvivalDataset, grid: HazardGrid) -> IntervalExpansion:
    exp_mat = exposure_matrix(data.u, grid.knots)
    ev_mat = np.zeros_like(exp_mat, dtype=np.int64)
    if data.n:
        ev_mat[np.arange(data.n), grid.interval_index(data.u)] = data.delta
    keep = (exp_mat > 0) | (ev_mat > 0)
    subj, intv = np.nonzero(keep)
    return IntervalExpansion(
        subject=subj,
        interval=intv,
        exposure=exp_mat[subj, intv],
        event=ev_mat[subj, intv],
        z=data.z,
        n_subjects=data.n,
        n_intervals=grid.n_intervals,
    )


def linear_predictor(z: np.ndarray, beta_z, beta_x: float, x) -> np.ndarray:
    eta = beta_x * np.asarray(x, dtype=float)
    if z.shape[1]:
        eta = eta + z @ np.asarray(beta_z, dtype=float)
    return eta


def _check_levels(levels: np.ndarray) -> None:
    if not np.all(np.isfinite(levels) & (levels > 0)):
        raise NonFiniteLik("hazard levels must be finite and > 0")


def _check_eta(eta: np.ndarray) -> None:
    if eta.size and not np.all(np.isfinite(eta) & (eta <= MAX_ETA)):
        raise NonFiniteLik(f"linear predictor outside (-inf, {MAX_ETA}]; max = {np.max(eta)!r}")


def cumulative_hazard(t: np.ndarray, grid: HazardGrid) -> np.ndarray:
    return exposure_matrix(np.asarray(t, dtype=float), grid.knots) @ grid.levels


def loglik_direct(data: SurvivalDataset, grid: HazardGrid, beta_z, beta_x: float, x) -> float:
    """sum_i delta_i*(log h0(u_i) + eta_i) - H0(u_i)*exp(eta_i)."""
    _check_levels(grid.levels)
    eta = linear_predictor(data.z, beta_z, beta_x, x)
    _check_eta(eta)
    h_at_u = grid.levels[grid.interval_index(data.u)]
    H = cumulative_hazard(data.u, grid)
    # compensated sums keep the two forms equal to ~1 ulp per term
    val = math.fsum(data.delta * (np.log(h_at_u) + eta)) - math.fsum(H * np.exp(eta))
    if not np.isfinite(val):
        raise NonFiniteLik("log-likelihood is not finite")
    return val


def loglik_poisson_trick(expansion: IntervalExpansion, grid: HazardGrid, beta_z, beta_x, x) -> float:
    """Poisson kernel sum d*log(mu) - mu with mu = h_l * e_il * exp(eta_i).

    The parameter-free offset term d_il*log(e_il) is left out, which makes
    the value equal to :func:`loglik_direct`.
    """
    if expansion.n_subjects == 0:
        return 0.0
    _check_levels(grid.levels)
    eta = linear_predictor(expansion.z, beta_z, beta_x, x)
    _check_eta(eta)
    eta_rows = eta[expansion.subject]
    h = grid.levels[expansion.interval]
    mu = h * expansion.exposure * np.exp(eta_rows)
    val = math.fsum(expansion.event * (np.log(h) + eta_rows)) - math.fsum(mu)
    if not np.isfinite(val):
        raise NonFiniteLik("log-likelihood is not finite")
    return val


def hazard_sufficient_stats(expansion: IntervalExpansion, beta_z, beta_x, x):
    """Per-interval event counts D_l and weighted exposures E_l."""
    eta = linear_predictor(expansion.z, beta_z, beta_x, x)
    _check_eta(eta)
    L = expansion.n_intervals
    D = np.bincount(expansion.interval, weights=expansion.event, minlength=L)
    E = np.bincount(
        expansion.interval,
        weights=expansion.exposure * np.exp(eta[expansion.subject]),
        minlength=L,
    )
    return D, E
