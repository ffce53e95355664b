import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dpmixcox.data import HazardGrid, make_dataset
from dpmixcox.errors import NonFiniteLik
from dpmixcox.likelihood import (
    MAX_ETA,
    expand_intervals,
    hazard_sufficient_stats,
    loglik_direct,
    loglik_poisson_trick,
)


def one(u, delta, x=1.0, z=0.0):
    return make_dataset(u=[u], delta=[delta], w=[1], z=[[z]])


def test_exposure_splits_at_knot():
    e = expand_intervals(one(3.0, 1), HazardGrid(np.array([0.0, 2.0]), np.ones(2)))
    assert list(e.interval) == [0, 1]
    assert list(e.exposure) == [2.0, 1.0]
    assert list(e.event) == [0, 1]


def test_single_row_before_first_knot():
    e = expand_intervals(one(1.5, 0), HazardGrid(np.array([0.0, 2.0]), np.ones(2)))
    assert list(e.interval) == [0] and list(e.exposure) == [1.5] and list(e.event) == [0]


def test_event_on_knot_keeps_its_cell():
    e = expand_intervals(one(2.0, 1), HazardGrid(np.array([0.0, 2.0]), np.ones(2)))
    assert list(e.interval) == [0, 1]
    assert list(e.exposure) == [2.0, 0.0]
    assert list(e.event) == [0, 1]


def test_row_count_matches_exhaustive_scan():
    d = make_dataset(u=[0.5, 1.7, 4.0], delta=[1, 0, 1], w=[0, 0, 0])
    knots = np.array([0.0, 1.0, 2.0])
    e = expand_intervals(d, HazardGrid(knots, np.ones(3)))
    bounds = list(zip(knots, list(knots[1:]) + [math.inf]))
    expected = sum(1 for u in d.u for lo, hi in bounds if min(u, hi) - lo > 0)
    assert len(e.subject) == expected == 6


def test_one_subject_unit_hazard():
    d = one(1.0, 1)
    g = HazardGrid(np.array([0.0]), np.array([1.0]))
    assert loglik_direct(d, g, [0.0], 0.0, [0.0]) == pytest.approx(-1.0, abs=1e-15)
    assert loglik_poisson_trick(expand_intervals(d, g), g, [0.0], 0.0, [0.0]) == pytest.approx(-1.0, abs=1e-15)


def test_beta_x_zero_ignores_x(small_data):
    g = HazardGrid(np.array([0.0, 1.0, 2.0]), np.array([0.4, 0.7, 1.1]))
    a = loglik_direct(small_data, g, [0.3], 0.0, np.arange(5.0))
    b = loglik_direct(small_data, g, [0.3], 0.0, np.arange(5.0) * 17 + 3)
    assert a == b


def test_direct_matches_quadrature():
    r = np.random.default_rng(7)
    d = make_dataset(u=r.uniform(0.2, 4.0, 5), delta=r.integers(0, 2, 5), w=np.zeros(5), z=r.normal(size=(5, 2)))
    knots = np.array([0.0, 0.8, 1.9, 3.1])
    g = HazardGrid(knots, r.uniform(0.3, 2.0, 4))
    bz, bx, x = np.array([0.4, -0.2]), 0.35, r.gamma(2.0, 1.0, 5)

    def h0(t):
        return g.levels[np.searchsorted(knots, t, side="right") - 1]

    total = 0.0
    for i in range(5):
        eta = d.z[i] @ bz + bx * x[i]
        H, _ = integrate.quad(h0, 0, d.u[i], points=knots[1:], limit=200, epsabs=1e-13)
        total += d.delta[i] * (math.log(h0(d.u[i])) + eta) - H * math.exp(eta)
    assert loglik_direct(d, g, bz, bx, x) == pytest.approx(total, abs=1e-10)


def test_empty_expansion_is_zero():
    d = make_dataset(u=np.zeros(0), delta=[], w=[])
    g = HazardGrid(np.array([0.0, 1.0]), np.ones(2))
    assert loglik_poisson_trick(expand_intervals(d, g), g, [], 0.5, np.zeros(0)) == 0.0


def test_sufficient_stats_single_subject():
    d = one(3.0, 1)
    g = HazardGrid(np.array([0.0, 2.0]), np.ones(2))
    D, E = hazard_sufficient_stats(expand_intervals(d, g), [0.0], math.log(2.0), [1.0])
    assert np.allclose(E, [4.0, 2.0], rtol=1e-15)
    assert np.array_equal(D, [0, 1])


def test_sufficient_stats_match_double_loop(small_data):
    knots = np.array([0.0, 0.9, 2.0])
    g = HazardGrid(knots, np.ones(3))
    x = np.array([0.5, 1.0, 2.0, 0.1, 3.0])
    D, E = hazard_sufficient_stats(expand_intervals(small_data, g), [0.2], 0.3, x)
    hi = list(knots[1:]) + [math.inf]
    D2, E2 = np.zeros(3), np.zeros(3)
    for i in range(small_data.n):
        eta = 0.2 * small_data.z[i, 0] + 0.3 * x[i]
        for l in range(3):
            e = max(0.0, min(small_data.u[i], hi[l]) - knots[l])
            E2[l] += e * math.exp(eta)
            D2[l] += small_data.delta[i] * (knots[l] <= small_data.u[i] < hi[l])
    assert np.array_equal(D, D2)
    assert np.allclose(E, E2, rtol=1e-14)


def test_eta_zero_gives_plain_exposure(small_data):
    g = HazardGrid(np.array([0.0, 1.0]), np.ones(2))
    _, E = hazard_sufficient_stats(expand_intervals(small_data, g), [0.0], 0.0, np.ones(5))
    u = small_data.u
    assert np.allclose(E, [np.minimum(u, 1.0).sum(), np.clip(u - 1.0, 0, None).sum()])


def test_nonpositive_level_raises(small_data):
    g = HazardGrid(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    with pytest.raises(NonFiniteLik):
        loglik_direct(small_data, g, [0.0], 0.0, np.ones(5))
    with pytest.raises(NonFiniteLik):
        loglik_poisson_trick(expand_intervals(small_data, g), g, [0.0], 0.0, np.ones(5))


def test_overflowing_predictor_raises(small_data):
    g = HazardGrid(np.array([0.0]), np.ones(1))
    x = np.ones(5)
    x[2] = 2 * MAX_ETA
    with pytest.raises(NonFiniteLik):
        loglik_direct(small_data, g, [0.0], 1.0, x)


@st.composite
def instances(draw, x_scale=0.5):
    seed = draw(st.integers(0, 2**32 - 1))
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 30))
    J = int(r.integers(0, 3))
    m = int(r.integers(0, 5))
    d = make_dataset(u=r.exponential(2.0, n) + 1e-9, delta=r.integers(0, 2, n), w=r.poisson(3.0, n),
                     z=r.normal(size=(n, J)), a=r.uniform(0.5, 2.0, n))
    knots = np.concatenate([[0.0], np.sort(r.uniform(0.01, 5.0, m))])
    # integer-valued knots sometimes so that events sit exactly on them
    if r.random() < 0.3:
        knots = np.unique(np.round(knots))
        d = make_dataset(u=np.maximum(np.round(d.u), 1.0), delta=d.delta, w=d.w, z=d.z, a=d.a)
    g = HazardGrid(knots, r.gamma(2.0, 0.5, knots.size))
    return d, g, 0.5 * r.normal(size=J), 0.5 * float(r.normal()), r.gamma(2.0, x_scale, n)


@settings(max_examples=300, deadline=None)
@given(instances())
def test_factorization_identity(inst):
    d, g, bz, bx, x = inst
    e = expand_intervals(d, g)
    assert abs(loglik_direct(d, g, bz, bx, x) - loglik_poisson_trick(e, g, bz, bx, x)) <= 1e-10


@settings(max_examples=300, deadline=None)
@given(instances(x_scale=5.0))
def test_factorization_identity_relative_at_large_eta(inst):
    # exp(eta) near 1e8 leaves only relative agreement to a few ulps
    d, g, bz, bx, x = inst
    a = loglik_direct(d, g, bz, bx, x)
    b = loglik_poisson_trick(expand_intervals(d, g), g, bz, bx, x)
    assert abs(a - b) <= 1e-14 * max(1.0, abs(a))


@settings(max_examples=300, deadline=None)
@given(instances())
def test_expansion_conserves_time_and_events(inst):
    d, g, *_ = inst
    e = expand_intervals(d, g)
    assert np.allclose(np.bincount(e.subject, weights=e.exposure, minlength=d.n), d.u, rtol=4 * np.finfo(float).eps, atol=0)
    assert np.array_equal(np.bincount(e.subject, weights=e.event, minlength=d.n), d.delta)
    assert np.all((e.exposure > 0) | (e.event > 0))


@settings(max_examples=200, deadline=None)
@given(instances(), st.floats(1.01, 10.0))
def test_raising_a_level_lowers_censored_likelihood(inst, factor):
    d, g, bz, bx, x = inst
    d = make_dataset(u=d.u, delta=np.zeros(d.n), w=d.w, z=d.z, a=d.a)
    e = expand_intervals(d, g)
    base = loglik_direct(d, g, bz, bx, x)
    for l in np.unique(e.interval):
        up = g.levels.copy()
        up[l] *= factor
        assert loglik_direct(d, g.with_levels(up), bz, bx, x) < base
