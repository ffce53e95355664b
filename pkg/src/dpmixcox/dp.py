"""Truncated stick-breaking DP mixture of gammas for the latent densities.

Atoms are (shape, scale) pairs. Cluster labels are 0-based. The base
measure is Gamma(a0, rate eta0) x Gamma(b0, rate gamma0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import _kernels as _k
from .data import PriorSpec

STICK_EPS = _k.STICK_EPS
X_FLOOR = _k.X_FLOOR


@dataclass
class DpState:
    nu: np.ndarray
    shape: np.ndarray
    scale: np.ndarray
    c: np.ndarray
    alpha: float

    @property
    def K(self) -> int:
        return int(self.shape.size)

    @property
    def pi(self) -> np.ndarray:
        return weights_from_sticks(self.nu)

    def copy(self) -> "DpState":
        return DpState(self.nu.copy(), self.shape.copy(), self.scale.copy(), self.c.copy(), float(self.alpha))


def truncation_level(alpha: float, eps: float) -> int:
    """K = ceil(1 - alpha*log(eps)), never below 2."""
    if not alpha > 0 or not 0 < eps < 1:
        raise ValueError("need alpha > 0 and 0 < eps < 1")
    k = 1.0 - alpha * math.log(eps)
    # absorb rounding in log() so exact integers are not bumped up
    return max(2, math.ceil(k - 1e-9))


def weights_from_sticks(nu) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    remain = np.concatenate([[1.0], np.cumprod(1.0 - nu)])
    return np.concatenate([nu * remain[:-1], remain[-1:]])


def gamma_logpdf(x, shape, scale):
    """log Gamma(x; shape, scale), broadcasting."""
    return (shape - 1.0) * np.log(x) - x / scale - gammaln(shape) - shape * np.log(scale)


def sample_allocations(x, state: DpState, rng: np.random.Generator) -> np.ndarray:
    """Draw c_i with probability proportional to pi_k * Gamma(x_i; a_k, b_k)."""
    x = np.ascontiguousarray(x, dtype=float)
    c = np.empty(x.size, dtype=np.int64)
    _k.allocation_update(x, np.ascontiguousarray(state.pi), np.ascontiguousarray(state.shape, dtype=float),
                         np.ascontiguousarray(state.scale, dtype=float), rng, c, np.empty(state.K))
    return c


def cluster_counts(c, K: int) -> np.ndarray:
    return np.bincount(c, minlength=K)


def sample_sticks(c, alpha: float, K: int, rng: np.random.Generator):
    """nu_k ~ Beta(1 + n_k, alpha + sum_{j>k} n_j); returns (nu, pi)."""
    nu = np.empty(K - 1)
    _k.stick_update(np.ascontiguousarray(c, dtype=np.int64), float(alpha), rng, nu)
    return nu, weights_from_sticks(nu)


def sample_base_measure(prior: PriorSpec, rng: np.random.Generator, size):
    shape = rng.gamma(prior.a0, 1.0 / prior.eta0, size=size)
    scale = rng.gamma(prior.b0, 1.0 / prior.gamma0, size=size)
    return np.maximum(shape, X_FLOOR), np.maximum(scale, X_FLOOR)


def sample_atoms(x, c, state: DpState, prior: PriorSpec, rng: np.random.Generator, mh_scale, n_steps: int = 1):
    """Update every atom; returns (shape, scale, acceptance rate of the MH steps).

    Occupied atoms take ``n_steps`` random-walk Metropolis steps on
    (log shape, log mean), nearly orthogonal coordinates for the gamma
    likelihood. Empty atoms are drawn fresh from the base measure.
    """
    shape = np.array(state.shape, dtype=float)
    scale = np.array(state.scale, dtype=float)
    stats = np.zeros(2)
    scales = np.ascontiguousarray(np.broadcast_to(np.asarray(mh_scale, dtype=float), (2,)))
    _k.atom_update(np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(c, dtype=np.int64),
                   shape, scale, _k.pack_prior(prior), scales, int(n_steps), rng, stats)
    rate = stats[0] / stats[1] if stats[1] else float("nan")
    return shape, scale, rate


def sample_concentration(nu, alpha: float, prior: PriorSpec, rng: np.random.Generator, mh_scale: float, n_steps: int = 1):
    """Random-walk Metropolis on log(alpha); returns (alpha, acceptance rate).

    Target: alpha^(K-1) * prod(1 - nu_j)^(alpha - 1) * LogNormal(alpha).
    With no sticks (K = 1) the prior is drawn directly.
    """
    stats = np.zeros(2)
    new = _k.concentration_update(np.ascontiguousarray(nu, dtype=float), float(alpha), prior.mu_alpha,
                                  prior.sigma2_alpha, float(mh_scale), int(n_steps), rng, stats)
    return float(new), (stats[0] / stats[1] if stats[1] else 1.0)


def mixture_density(x_grid, state: DpState) -> np.ndarray:
    x_grid = np.asarray(x_grid, dtype=float)
    pi = state.pi
    dens = np.exp(gamma_logpdf(x_grid[:, None], state.shape[None, :], state.scale[None, :]))
    return dens @ pi


def sample_prior_state(K: int, n: int, prior: PriorSpec, rng: np.random.Generator) -> DpState:
    """Draw (alpha, sticks, atoms, allocations) from the prior."""
    if prior.sigma2_alpha == 0:
        alpha = math.exp(prior.mu_alpha)
    else:
        alpha = math.exp(prior.mu_alpha + math.sqrt(prior.sigma2_alpha) * rng.standard_normal())
    nu = np.clip(rng.beta(1.0, alpha, size=K - 1), STICK_EPS, 1 - STICK_EPS)
    shape, scale = sample_base_measure(prior, rng, K)
    pi = weights_from_sticks(nu)
    c = rng.choice(K, size=n, p=pi / pi.sum())
    return DpState(nu=nu, shape=shape, scale=scale, c=c, alpha=alpha)
