"""Compiled single-sweep kernels shared by the sampler and the public update functions.

Every kernel mutates its output arrays in place and draws from a
``numpy.random.Generator``. Calling into numba with a Generator costs a few
microseconds, so whole blocks of sweeps run inside :func:`run_block`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import DegenerateWeights, NonFiniteLik

MAX_ETA = 700.0
X_FLOOR = 1e-300
STICK_EPS = 1e-12
HAZARD_FLOOR = 1e-300

# layout of the packed prior vector
P_AH, P_BH, P_MUB, P_S2B, P_FAM, P_MUX, P_SCX, P_MUA, P_S2A, P_A0, P_ETA0, P_B0, P_G0 = range(13)


def pack_prior(prior) -> np.ndarray:
    return np.array([
        prior.a_h, prior.b_h, prior.mu_beta, prior.sigma2_beta,
        0.0 if prior.beta_x_family == "normal" else 1.0,
        prior.mu_x, prior.beta_x_scale, prior.mu_alpha, prior.sigma2_alpha,
        prior.a0, prior.eta0, prior.b0, prior.gamma0,
    ])


@njit(cache=True)
def gamma_logpdf(x, shape, scale):
    return (shape - 1.0) * math.log(x) - x / scale - math.lgamma(shape) - shape * math.log(scale)


@njit(cache=True)
def weights_from_sticks(nu, out):
    remain = 1.0
    for k in range(nu.size):
        out[k] = nu[k] * remain
        remain *= 1.0 - nu[k]
    out[nu.size] = remain


@njit(cache=True)
def hazard_update(events, exposure, a_h, b_h, rng, out):
    for l in range(events.size):
        h = rng.gamma(a_h + events[l], 1.0 / (b_h + exposure[l]))
        out[l] = max(h, HAZARD_FLOOR)


@njit(cache=True)
def surv_loglik(eta, delta, cumhaz):
    s = 0.0
    for i in range(eta.size):
        if eta[i] > MAX_ETA:
            return -np.inf
        s += delta[i] * eta[i] - cumhaz[i] * math.exp(eta[i])
    return s


@njit(cache=True)
def beta_x_logprior(b, family, loc, scale):
    # additive constants dropped; only differences are used
    r = (b - loc) / scale
    if family == 0.0:
        return -0.5 * r * r
    return -math.log1p(r * r)


@njit(cache=True)
def linear_predictor(z, beta_z, beta_x, x, eta):
    n, J = z.shape
    for i in range(n):
        s = beta_x * x[i]
        for j in range(J):
            s += z[i, j] * beta_z[j]
        eta[i] = s


@njit(cache=True)
def beta_update(z, x, delta, cumhaz, beta_z, beta_x, prior, mh_scale, rng, eta, eta_new, accepted):
    """Componentwise RW Metropolis; beta_x is a length-1 array. Leaves eta current."""
    n, J = z.shape
    linear_predictor(z, beta_z, beta_x[0], x, eta)
    cur = surv_loglik(eta, delta, cumhaz)
    if not np.isfinite(cur):
        raise NonFiniteLik("current state has a non-finite log-likelihood")
    for j in range(J + 1):
        step = mh_scale[j] * rng.standard_normal()
        log_u = math.log(rng.random())
        if j < J:
            for i in range(n):
                eta_new[i] = eta[i] + step * z[i, j]
            old = beta_z[j]
            new_b = old + step
            d_prior = -0.5 * ((new_b - prior[P_MUB]) ** 2 - (old - prior[P_MUB]) ** 2) / prior[P_S2B]
        else:
            for i in range(n):
                eta_new[i] = eta[i] + step * x[i]
            old = beta_x[0]
            new_b = old + step
            d_prior = (beta_x_logprior(new_b, prior[P_FAM], prior[P_MUX], prior[P_SCX])
                       - beta_x_logprior(old, prior[P_FAM], prior[P_MUX], prior[P_SCX]))
        new = surv_loglik(eta_new, delta, cumhaz)
        if log_u < new - cur + d_prior:
            accepted[j] += 1.0
            cur = new
            for i in range(n):
                eta[i] = eta_new[i]
            if j < J:
                beta_z[j] = new_b
            else:
                beta_x[0] = new_b


@njit(cache=True)
def cox_log_factor(v, beta_x, delta_i, offset_i, zb_i):
    # zb_i is the covariate part of eta; only used to keep the full eta in range
    bx = beta_x * v
    if bx + zb_i > MAX_ETA:
        return -np.inf
    return delta_i * bx - offset_i * math.exp(bx)


@njit(cache=True)
def latent_x_update(x, w, a, delta, offset, zb, beta_x, shape, scale, c, rng, rw_mask, rw_scale, acc_indep, acc_rw):
    """Independence MH from the conjugate gamma part, or log-scale RW where masked."""
    for i in range(x.size):
        k = c[i]
        ps = shape[k] + w[i]
        pr = 1.0 / scale[k] + a[i]
        xi = x[i]
        if rw_mask[i]:
            prop = max(xi * math.exp(rw_scale * rng.standard_normal()), X_FLOOR)
            log_ratio = ((ps - 1.0) * (math.log(prop) - math.log(xi)) - pr * (prop - xi)
                         + cox_log_factor(prop, beta_x, delta[i], offset[i], zb[i])
                         - cox_log_factor(xi, beta_x, delta[i], offset[i], zb[i])
                         + math.log(prop) - math.log(xi))
            if math.log(rng.random()) < log_ratio:
                x[i] = prop
                acc_rw[i] += 1.0
        else:
            prop = max(rng.gamma(ps, 1.0 / pr), X_FLOOR)
            log_u = math.log(rng.random())
            if beta_x == 0.0 and zb[i] <= MAX_ETA:
                log_ratio = 0.0
            else:
                log_ratio = (cox_log_factor(prop, beta_x, delta[i], offset[i], zb[i])
                             - cox_log_factor(xi, beta_x, delta[i], offset[i], zb[i]))
            if log_u < log_ratio:
                x[i] = prop
                acc_indep[i] += 1.0


@njit(cache=True)
def allocation_update(x, pi, shape, scale, rng, c, logp):
    K = pi.size
    lg = np.empty(K)
    lw = np.empty(K)
    for k in range(K):
        lg[k] = math.lgamma(shape[k]) + shape[k] * math.log(scale[k])
        lw[k] = math.log(pi[k]) if pi[k] > 0.0 else -np.inf
    for i in range(x.size):
        lx = math.log(x[i])
        top = -np.inf
        for k in range(K):
            v = lw[k] + (shape[k] - 1.0) * lx - x[i] / scale[k] - lg[k]
            logp[k] = v
            if v > top:
                top = v
        if not np.isfinite(top):
            raise DegenerateWeights("all allocation masses vanished for a subject")
        total = 0.0
        for k in range(K):
            logp[k] = math.exp(logp[k] - top)
            total += logp[k]
        u = rng.random() * total
        acc = 0.0
        choice = K - 1
        for k in range(K):
            acc += logp[k]
            if u < acc:
                choice = k
                break
        c[i] = choice


@njit(cache=True)
def stick_update(c, alpha, rng, nu):
    K = nu.size + 1
    counts = np.zeros(K)
    for i in range(c.size):
        counts[c[i]] += 1.0
    after = 0.0
    tail = np.zeros(K)
    for k in range(K - 1, -1, -1):
        tail[k] = after
        after += counts[k]
    for k in range(K - 1):
        v = rng.beta(1.0 + counts[k], alpha + tail[k])
        nu[k] = min(max(v, STICK_EPS), 1.0 - STICK_EPS)


@njit(cache=True)
def atom_log_target(log_a, log_mu, n_k, sum_log_x, sum_x, a0, eta0, b0, g0):
    # density over (log shape, log mean); unit Jacobian from (log shape, log scale)
    a = math.exp(log_a)
    log_b = log_mu - log_a
    b = math.exp(log_b)
    ll = (a - 1.0) * sum_log_x - sum_x / b - n_k * (math.lgamma(a) + a * log_b)
    return ll + a0 * log_a - eta0 * a + b0 * log_b - g0 * b


@njit(cache=True)
def atom_update(x, c, shape, scale, prior, mh_scale, n_steps, rng, stats):
    """RW Metropolis on (log shape, log mean) for occupied atoms; base-measure draw for empty ones.

    stats[0] += accepted steps, stats[1] += attempted steps.
    """
    K = shape.size
    n_k = np.zeros(K)
    slx = np.zeros(K)
    sx = np.zeros(K)
    for i in range(x.size):
        k = c[i]
        n_k[k] += 1.0
        slx[k] += math.log(x[i])
        sx[k] += x[i]
    a0, eta0, b0, g0 = prior[P_A0], prior[P_ETA0], prior[P_B0], prior[P_G0]
    for k in range(K):
        if n_k[k] == 0.0:
            shape[k] = max(rng.gamma(a0, 1.0 / eta0), X_FLOOR)
            scale[k] = max(rng.gamma(b0, 1.0 / g0), X_FLOOR)
            continue
        la = math.log(shape[k])
        lm = la + math.log(scale[k])
        cur = atom_log_target(la, lm, n_k[k], slx[k], sx[k], a0, eta0, b0, g0)
        for _ in range(n_steps):
            pa = la + mh_scale[0] * rng.standard_normal()
            pm = lm + mh_scale[1] * rng.standard_normal()
            log_u = math.log(rng.random())
            if pa > 700.0 or pa - pm > 700.0 or pm - pa > 700.0:
                new = -np.inf
            else:
                new = atom_log_target(pa, pm, n_k[k], slx[k], sx[k], a0, eta0, b0, g0)
            if np.isfinite(new) and log_u < new - cur:
                la, lm, cur = pa, pm, new
                stats[0] += 1.0
            stats[1] += 1.0
        shape[k] = math.exp(la)
        scale[k] = math.exp(lm - la)


@njit(cache=True)
def concentration_update(nu, alpha, mu_alpha, s2_alpha, mh_scale, n_steps, rng, stats):
    """RW Metropolis on log(alpha); returns the new alpha."""
    if s2_alpha == 0.0:
        return math.exp(mu_alpha)
    if nu.size == 0:
        stats[0] += 1.0
        stats[1] += 1.0
        return math.exp(mu_alpha + math.sqrt(s2_alpha) * rng.standard_normal())
    K = nu.size + 1
    s = 0.0
    for k in range(nu.size):
        s += math.log1p(-nu[k])
    x = math.log(alpha)
    cur = (K - 1) * x + (alpha - 1.0) * s - 0.5 * (x - mu_alpha) ** 2 / s2_alpha
    for _ in range(n_steps):
        p = x + mh_scale * rng.standard_normal()
        log_u = math.log(rng.random())
        if p > 700.0:
            stats[1] += 1.0
            continue
        new = (K - 1) * p + (math.exp(p) - 1.0) * s - 0.5 * (p - mu_alpha) ** 2 / s2_alpha
        if log_u < new - cur:
            x, cur = p, new
            stats[0] += 1.0
        stats[1] += 1.0
    return math.exp(x)


@njit(cache=True)
def sweep(exp_mat, events, delta, w, a, z,
          hazard, beta_z, beta_x, x, nu, shape, scale, c, alpha, pi,
          prior, beta_scale, atom_scale, alpha_scale, rw_scale, rw_mask, atom_steps, alpha_steps,
          acc_beta, acc_indep, acc_rw, atom_stats, alpha_stats, rng,
          eta, eta_new, E, cumhaz, offset, zb, logp):
    n, L = exp_mat.shape
    # hazard levels
    linear_predictor(z, beta_z, beta_x[0], x, eta)
    for l in range(L):
        E[l] = 0.0
    for i in range(n):
        if eta[i] > MAX_ETA:
            raise NonFiniteLik("linear predictor overflow")
        ee = math.exp(eta[i])
        for l in range(L):
            E[l] += exp_mat[i, l] * ee
    hazard_update(events, E, prior[P_AH], prior[P_BH], rng, hazard)
    for i in range(n):
        s = 0.0
        for l in range(L):
            s += exp_mat[i, l] * hazard[l]
        cumhaz[i] = s
    # coefficients
    beta_update(z, x, delta, cumhaz, beta_z, beta_x, prior, beta_scale, rng, eta, eta_new, acc_beta)
    # latent densities
    bx = beta_x[0]
    for i in range(n):
        zb[i] = eta[i] - bx * x[i]
        offset[i] = cumhaz[i] * math.exp(zb[i])
    latent_x_update(x, w, a, delta, offset, zb, bx, shape, scale, c, rng, rw_mask, rw_scale, acc_indep, acc_rw)
    # mixture
    if shape.size > 1:
        allocation_update(x, pi, shape, scale, rng, c, logp)
        stick_update(c, alpha[0], rng, nu)
        weights_from_sticks(nu, pi)
    atom_update(x, c, shape, scale, prior, atom_scale, atom_steps, rng, atom_stats)
    alpha[0] = concentration_update(nu, alpha[0], prior[P_MUA], prior[P_S2A], alpha_scale, alpha_steps, rng, alpha_stats)


@njit(cache=True)
def run_block(n_sweeps, thin, record, start,
              exp_mat, events, delta, w, a, z,
              hazard, beta_z, beta_x, x, nu, shape, scale, c, alpha, pi,
              prior, beta_scale, atom_scale, alpha_scale, rw_scale, rw_mask, atom_steps, alpha_steps,
              acc_beta, acc_indep, acc_rw, atom_stats, alpha_stats, rng,
              out_bx, out_bz, out_h, out_alpha, out_shape, out_scale, out_pi, out_x):
    """Run ``n_sweeps`` sweeps; when ``record`` store every ``thin``-th state from row ``start``."""
    n, L = exp_mat.shape
    K = shape.size
    eta = np.empty(n)
    eta_new = np.empty(n)
    E = np.empty(L)
    cumhaz = np.empty(n)
    offset = np.empty(n)
    zb = np.empty(n)
    logp = np.empty(K)
    row = start
    for s in range(n_sweeps):
        sweep(exp_mat, events, delta, w, a, z,
              hazard, beta_z, beta_x, x, nu, shape, scale, c, alpha, pi,
              prior, beta_scale, atom_scale, alpha_scale, rw_scale, rw_mask, atom_steps, alpha_steps,
              acc_beta, acc_indep, acc_rw, atom_stats, alpha_stats, rng,
              eta, eta_new, E, cumhaz, offset, zb, logp)
        if record and (s + 1) % thin == 0 and row < out_bx.size:
            out_bx[row] = beta_x[0]
            out_bz[row, :] = beta_z
            out_h[row, :] = hazard
            out_alpha[row] = alpha[0]
            out_shape[row, :] = shape
            out_scale[row, :] = scale
            out_pi[row, :] = pi
            if out_x.shape[0] > 0:
                out_x[row, :] = x
            row += 1
    return row
