"""Getting-it-right check of the joint sampler.

Two simulators target the same joint distribution of parameters and data:
independent draws from the prior (marginal-conditional), and a chain that
alternates one posterior sweep with regenerating the data given the
current parameters (successive-conditional). Moments of test functions
from the two must agree; a wrong conditional update breaks the agreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dp
from .data import HazardGrid, ModelConfig, PriorSpec, SurvivalDataset
from .mcmc import ChainState, JointSampler, make_rng
from .simulation import batch_means_mcse

# moderately informative priors keep the tiny model well inside the
# numerically safe range and the test functions well mixed
GEWEKE_PRIOR = PriorSpec(
    a_h=2.0, b_h=2.0, mu_beta=0.0, sigma2_beta=0.25, mu_x=0.0, sigma2_x=0.25,
    mu_alpha=0.0, sigma2_alpha=0.25, a0=4.0, eta0=2.0, b0=4.0, gamma0=4.0,
)

TEST_FUNCTIONS = ("beta_x", "beta_z1", "beta_x^2", "log_h0", "log_h1", "log_alpha", "pi1", "x1", "mean_x", "log_x1")


@dataclass(frozen=True)
class GewekeSetup:
    """Fixed design of the tiny model: covariates, areas, censoring times, one inner knot."""

    z: np.ndarray
    a: np.ndarray
    censor: np.ndarray
    knot: float = 1.0
    K: int = 2
    prior: PriorSpec = GEWEKE_PRIOR
    scales: dict = field(default_factory=lambda: {"beta": 0.35, "atoms": (0.5, 0.3), "alpha": 1.0})

    @classmethod
    def default(cls, n: int = 10, seed: int = 11) -> "GewekeSetup":
        rng = np.random.default_rng(seed)
        return cls(z=rng.standard_normal((n, 1)), a=rng.uniform(0.5, 1.5, n), censor=rng.uniform(0.5, 3.0, n))

    @property
    def n(self) -> int:
        return self.censor.size

    @property
    def knots(self) -> np.ndarray:
        return np.array([0.0, self.knot])


def prior_state(setup: GewekeSetup, rng: np.random.Generator) -> ChainState:
    p = setup.prior
    d = dp.sample_prior_state(setup.K, setup.n, p, rng)
    x = np.maximum(rng.gamma(d.shape[d.c], d.scale[d.c]), dp.X_FLOOR)
    return ChainState(
        hazard=rng.gamma(p.a_h, 1.0 / p.b_h, 2),
        beta_z=p.mu_beta + np.sqrt(p.sigma2_beta) * rng.standard_normal(setup.z.shape[1]),
        beta_x=np.array([p.mu_x + np.sqrt(p.sigma2_x) * rng.standard_normal()]),
        x=x, nu=d.nu, shape=d.shape, scale=d.scale, c=d.c.astype(np.int64),
        alpha=np.array([d.alpha]), pi=dp.weights_from_sticks(d.nu),
    )


def simulate_data(setup: GewekeSetup, st: ChainState, rng: np.random.Generator) -> SurvivalDataset:
    """Survival times from the piecewise-constant hazard, censored at the fixed times; W ~ Poisson(x A)."""
    eta = st.beta_x[0] * st.x + setup.z @ st.beta_z
    target = rng.exponential(1.0, setup.n) * np.exp(-eta)
    h0, h1 = st.hazard
    first = h0 * setup.knot
    t = np.where(target < first, target / h0, setup.knot + (target - first) / h1)
    u = np.maximum(np.minimum(t, setup.censor), np.finfo(float).tiny)
    delta = (t <= setup.censor).astype(np.int64)
    w = rng.poisson(st.x * setup.a)
    return SurvivalDataset(u=u, delta=delta, z=setup.z, w=w, a=setup.a)


def functionals(st: ChainState) -> np.ndarray:
    bx = st.beta_x[0]
    return np.array([
        bx, st.beta_z[0], bx * bx, np.log(st.hazard[0]), np.log(st.hazard[1]),
        np.log(st.alpha[0]), st.pi[0], st.x[0], st.x.mean(), np.log(st.x[0]),
    ])


def marginal_conditional(setup: GewekeSetup, M: int, rng: np.random.Generator) -> np.ndarray:
    return np.array([functionals(prior_state(setup, rng)) for _ in range(M)])


def successive_conditional(setup: GewekeSetup, M: int, rng: np.random.Generator, sweeps_per_step: int = 1) -> np.ndarray:
    st = prior_state(setup, rng)
    data = simulate_data(setup, st, rng)
    grid = HazardGrid(setup.knots, st.hazard.copy())
    cfg = ModelConfig(m_intervals=1, k_trunc=setup.K, n_iter=1, n_burn=0, thin=1, adapt=False)
    sampler = JointSampler(data, grid, cfg, setup.prior, rng, state=st)
    sampler.beta_adapt.scale[:] = setup.scales["beta"]
    sampler.atom_adapt.scale[:] = setup.scales["atoms"]
    sampler.alpha_adapt.scale[:] = setup.scales["alpha"]
    out = np.empty((M, len(TEST_FUNCTIONS)))
    for i in range(M):
        sampler.run(sweeps_per_step)
        out[i] = functionals(sampler.state)
        sampler.set_data(simulate_data(setup, sampler.state, rng))
    return out


@dataclass
class GewekeResult:
    names: tuple
    mean_prior: np.ndarray
    mean_chain: np.ndarray
    z: np.ndarray
    alpha: float

    @property
    def critical(self) -> float:
        from scipy.stats import norm
        return float(norm.isf(self.alpha / 2))

    @property
    def passed(self) -> np.ndarray:
        return np.abs(self.z) < self.critical

    def report(self) -> str:
        lines = []
        for name, a, b, z, ok in zip(self.names, self.mean_prior, self.mean_chain, self.z, self.passed):
            lines.append(f"{name:10s} prior={a: .4f} chain={b: .4f} z={z: .2f} {'ok' if ok else 'FAIL'}")
        return "\n".join(lines)


def geweke_test(M: int = 100_000, seed: int = 0, setup: GewekeSetup | None = None, alpha: float = 0.01,
                M_prior: int | None = None) -> GewekeResult:
    """z = (mean_prior - mean_chain) / sqrt(var/M_prior + MCSE_chain^2), MCSE by batch means."""
    setup = GewekeSetup.default() if setup is None else setup
    rng_a, rng_b = (make_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    g1 = marginal_conditional(setup, M if M_prior is None else M_prior, rng_a)
    g2 = successive_conditional(setup, M, rng_b)
    m1, m2 = g1.mean(axis=0), g2.mean(axis=0)
    se1 = g1.std(axis=0, ddof=1) / np.sqrt(g1.shape[0])
    # 10 batches are too few for a long dependent chain; use 100 of them
    se2 = np.array([batch_means_mcse(g2[:, j], n_batches=100) for j in range(g2.shape[1])])
    z = (m1 - m2) / np.sqrt(se1**2 + se2**2)
    return GewekeResult(TEST_FUNCTIONS, m1, m2, z, alpha)
