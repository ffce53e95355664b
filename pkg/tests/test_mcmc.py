import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from dpmixcox.cox import fit_cox
from dpmixcox.data import HazardGrid, ModelConfig, PriorSpec, make_hazard_grid
from dpmixcox.geweke import TEST_FUNCTIONS, GewekeSetup, marginal_conditional, prior_state, simulate_data, functionals
from dpmixcox.likelihood import exposure_matrix
from dpmixcox.mcmc import (
    JointSampler,
    make_rng,
    run_chain,
    run_chains,
    update_beta,
    update_hazard,
    update_latent_x,
    write_draws_csv,
)
from dpmixcox.simulation import batch_means_mcse

QUICK = ModelConfig(m_intervals=3, k_trunc=3, n_iter=1500, n_burn=500, thin=2, knot_method="equal_length")


def test_hazard_without_data_is_the_prior():
    prior = PriorSpec()
    rng = make_rng(1)
    draws = np.array([update_hazard(np.zeros(1), np.zeros(1), prior, rng)[0] for _ in range(20_000)])
    assert stats.kstest(draws, stats.gamma(0.01, scale=100.0).cdf).pvalue > 0.01


def test_hazard_conjugate_moments():
    prior = PriorSpec()
    draws = update_hazard(np.full(100_000, 10.0), np.full(100_000, 10.0), prior, make_rng(2))
    assert draws.mean() == pytest.approx(1.0, abs=3 * 0.316 / math.sqrt(draws.size))
    assert draws.std() == pytest.approx(0.316, abs=0.004)


def test_zero_step_proposal_always_accepted(small_data):
    x = np.ones(small_data.n)
    bz, bx, eta, acc = update_beta(small_data.z, x, small_data.delta, small_data.u * 0.7, [0.2], 0.4,
                                   PriorSpec(), make_rng(3), 0.0)
    assert acc.all() and bz[0] == 0.2 and bx == 0.4
    assert np.allclose(eta, 0.2 * small_data.z[:, 0] + 0.4 * x)


def test_flat_likelihood_samples_the_prior():
    prior = PriorSpec(sigma2_beta=2.0, sigma2_x=0.5)
    rng = make_rng(4)
    n = 5
    z, x = rng.normal(size=(n, 1)), rng.gamma(2.0, 1.0, n)
    bz, bx, out = np.zeros(1), 0.0, []
    for _ in range(60_000):
        bz, bx, _, _ = update_beta(z, x, np.zeros(n), np.zeros(n), bz, bx, prior, rng, (2.0, 1.0))
        out.append((bz[0], bx))
    out = np.array(out)
    for j, var in enumerate((2.0, 0.5)):
        col = out[:, j]
        assert abs(col.mean()) < 3 * batch_means_mcse(col, 100)
        assert abs((col ** 2).mean() - var) < 3 * batch_means_mcse(col ** 2, 100)


def test_known_covariate_posterior_matches_cox_mle():
    rng = make_rng(5)
    n = 2000
    x, z = rng.gamma(2.0, 1.0, n), rng.normal(size=(n, 1))
    t = rng.exponential(np.exp(-(0.5 * x + 0.1 * z[:, 0])))
    c = rng.exponential(4.0, n)
    u, delta = np.minimum(t, c), (t <= c).astype(float)
    grid = make_hazard_grid(u, delta, 5)
    E = exposure_matrix(u, grid.knots)
    events = np.bincount(np.searchsorted(grid.knots, u, side="right") - 1, weights=delta, minlength=grid.knots.size)
    prior = PriorSpec()
    bz, bx, h = np.zeros(1), 0.0, grid.levels.copy()
    out = []
    for it in range(5000):
        eta = z @ bz + bx * x
        h = update_hazard(events, E.T @ np.exp(eta), prior, rng)
        bz, bx, _, _ = update_beta(z, x, delta, E @ h, bz, bx, prior, rng, (0.03, 0.02))
        if it >= 1000:
            out.append(bx)
    out = np.array(out)
    mle = fit_cox(u, delta, np.column_stack([x, z])).coef[0]
    assert abs(out.mean() - mle) < 2 * out.std()


def test_latent_x_exact_when_beta_x_is_zero():
    rng = make_rng(6)
    n = 200_000
    w, a = np.full(n, 3.0), np.ones(n)
    x, acc = update_latent_x(np.ones(n), w, a, np.ones(n), np.full(n, 0.7), 0.0, np.ones(n), np.ones(n), rng)
    assert acc.all()
    # Gamma(1 + 3, rate 1 + 1)
    assert abs(x.mean() - 2.0) < 3 * 1.0 / math.sqrt(n)
    assert stats.kstest(x, stats.gamma(4.0, scale=0.5).cdf).pvalue > 0.01


def test_latent_x_targets_the_full_conditional():
    # repeated MH updates of one subject must settle on the gamma-times-Cox-factor density
    rng = make_rng(7)
    w, a, delta, offset, bx, sh, sc = 4.0, 1.0, 1.0, 0.3, 0.6, 2.0, 1.5
    x = np.ones(1)
    draws = []
    for _ in range(60_000):
        x, _ = update_latent_x(x, [w], [a], [delta], [offset], bx, [sh], [sc], rng)
        draws.append(x[0])
    draws = np.array(draws)

    def dens(v):
        return v ** (sh + w - 1) * math.exp(-v * (1 / sc + a) + delta * bx * v - offset * math.exp(bx * v))

    Z = integrate.quad(dens, 0, 60)[0]
    mean = integrate.quad(lambda v: v * dens(v), 0, 60)[0] / Z
    assert abs(draws.mean() - mean) < 3 * batch_means_mcse(draws, 100)


def test_empty_draw_set(small_data):
    cfg = QUICK.replace(n_iter=300, n_burn=300)
    d = run_chain(small_data, cfg, PriorSpec(), rng=make_rng(8))
    assert d.S == 0 and d.beta_z.shape == (0, 1)


def test_same_seed_is_bit_identical(small_data):
    a = run_chain(small_data, QUICK.replace(seed=42), PriorSpec())
    b = run_chain(small_data, QUICK.replace(seed=42), PriorSpec())
    c = run_chain(small_data, QUICK.replace(seed=43), PriorSpec())
    assert a.equals(b) and not a.equals(c)


def test_draw_count_and_positivity(scenario2_data):
    cfg = QUICK.replace(n_iter=2003, n_burn=500, thin=7, store_x=True)
    d = run_chain(scenario2_data, cfg, PriorSpec(), rng=make_rng(9))
    assert d.S == (2003 - 500) // 7
    assert np.all(d.hazard > 0) and np.all(d.alpha > 0) and np.all(d.x > 0)
    assert np.allclose(d.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(d.shape > 0) and np.all(d.scale > 0)


def test_chains_agree_on_scenario_data(scenario2_data):
    cfg = ModelConfig(m_intervals=5, k_trunc=5, n_iter=20_000, n_burn=5_000, thin=5, knot_method="equal_length", seed=3)
    chains, diag = run_chains(scenario2_data, cfg, PriorSpec(), n_chains=2)
    assert diag["beta_x"]["rhat"] < 1.05
    assert 0 < diag["beta_x"]["ess"] <= 2 * chains[0].S


def test_single_chain_has_no_rhat(small_data):
    chains, diag = run_chains(small_data, QUICK, PriorSpec(), n_chains=1)
    assert diag["beta_x"]["rhat"] is None
    assert 0 < diag["beta_x"]["ess"] <= chains[0].S


def test_draws_csv_round_trip(tmp_path, small_data):
    d = run_chain(small_data, QUICK, PriorSpec(), rng=make_rng(10))
    path = tmp_path / "draws.csv"
    write_draws_csv([d], path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == d.S
    for name, col in d.columns().items():
        assert np.array_equal([float(r[name]) for r in rows], col)


def test_geweke_detects_a_wrong_conditional():
    # negative control: data come from the right prior, the sweep uses a wrong beta_x prior
    setup = GewekeSetup.default()
    wrong = replace(setup.prior, mu_x=0.5)
    rng = make_rng(12)
    st = prior_state(setup, rng)
    sampler = JointSampler(simulate_data(setup, st, rng), HazardGrid(setup.knots, st.hazard.copy()),
                           ModelConfig(m_intervals=1, k_trunc=2, n_iter=1, n_burn=0, adapt=False), wrong, rng, state=st)
    chain = []
    for _ in range(20_000):
        sampler.run(1)
        chain.append(functionals(sampler.state))
        sampler.set_data(simulate_data(setup, sampler.state, rng))
    g1, g2 = marginal_conditional(setup, 20_000, make_rng(11)), np.array(chain)
    j = TEST_FUNCTIONS.index("beta_x")
    z = (g1[:, j].mean() - g2[:, j].mean()) / math.sqrt(
        g1[:, j].var() / g1.shape[0] + batch_means_mcse(g2[:, j], 50) ** 2)
    assert abs(z) > 5
