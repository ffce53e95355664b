"""Gibbs-within-Metropolis sampler for the joint survival / biomarker model.

Scan order per sweep: hazard -> beta -> latent x -> allocations -> sticks
-> atoms -> alpha. Random numbers come from ``numpy.random.Generator`` with
the PCG64 bit generator; a seed fixes every draw.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from . import dp
from .data import HazardGrid, ModelConfig, PriorSpec, SurvivalDataset, make_hazard_grid
from .errors import DegenerateWeights, NonFiniteLik, SamplerError
from .likelihood import exposure_matrix

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.3
ADAPT_EVERY = 50
# latent-x subjects whose independence proposal accepts less often than this
# during burn-in switch to a log-scale random walk
FALLBACK_ACCEPT = 0.05
# warn once |beta_x| * max(x) passes this share of the overflow limit
GUARD_WARN = 0.5


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ------------------------------------------------------------------ updates


def update_hazard(events, exposure, prior: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """Conjugate draw h_l ~ Gamma(a_h + D_l, rate b_h + E_l)."""
    events = np.ascontiguousarray(events, dtype=float)
    out = np.empty(events.size)
    _k.hazard_update(events, np.ascontiguousarray(exposure, dtype=float), prior.a_h, prior.b_h, rng, out)
    return out


def update_beta(z, x, delta, cumhaz, beta_z, beta_x, prior: PriorSpec, rng, mh_scale):
    """Componentwise random-walk Metropolis for (beta_z, beta_x).

    ``cumhaz`` holds H0(u_i). ``mh_scale`` has one entry per component,
    beta_z first and beta_x last. Returns (beta_z, beta_x, eta, accepted).
    """
    z = np.ascontiguousarray(z, dtype=float)
    n, J = z.shape
    beta_z = np.array(beta_z, dtype=float).reshape(J)
    bx = np.array([beta_x], dtype=float)
    scales = np.ascontiguousarray(np.broadcast_to(np.asarray(mh_scale, dtype=float), (J + 1,)))
    eta = np.empty(n)
    accepted = np.zeros(J + 1)
    _k.beta_update(z, np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(delta, dtype=float),
                   np.ascontiguousarray(cumhaz, dtype=float), beta_z, bx, _k.pack_prior(prior), scales,
                   rng, eta, np.empty(n), accepted)
    return beta_z, float(bx[0]), eta, accepted.astype(bool)


def latent_x_conditional(w, a, shape, scale):
    """Gamma(shape + W, rate 1/scale + A): the conjugate part of x's conditional."""
    return shape + w, 1.0 / scale + a


def update_latent_x(x, w, a, delta, offset, beta_x, shape, scale, rng, rw_mask=None, rw_scale=1.0, zb=None):
    """Metropolis-Hastings update of every latent density.

    ``offset`` is H0(u_i)*exp(beta_z'z_i); ``shape``/``scale`` are the atoms
    of each subject's own cluster. The conjugate gamma part is the
    independence proposal, which leaves
    exp(delta*beta_x*x - offset*exp(beta_x*x)) in the acceptance ratio.
    Subjects flagged in ``rw_mask`` take a random-walk step on log(x)
    instead. ``zb`` (beta_z'z_i, default 0) only guards the full linear
    predictor against overflow. Returns (x, accepted).
    """
    x = np.array(x, dtype=float)
    n = x.size
    acc_i = np.zeros(n)
    acc_r = np.zeros(n)
    mask = np.zeros(n, dtype=np.bool_) if rw_mask is None else np.ascontiguousarray(rw_mask, dtype=np.bool_)
    zb = np.zeros(n) if zb is None else np.ascontiguousarray(zb, dtype=float)
    _k.latent_x_update(x, np.ascontiguousarray(w, dtype=float), np.ascontiguousarray(a, dtype=float),
                       np.ascontiguousarray(delta, dtype=float), np.ascontiguousarray(offset, dtype=float),
                       zb, float(beta_x), np.ascontiguousarray(shape, dtype=float), np.ascontiguousarray(scale, dtype=float),
                       np.arange(n, dtype=np.int64), rng, mask, float(rw_scale), acc_i, acc_r)
    return x, (acc_i + acc_r) > 0


# ------------------------------------------------------------------ storage


@dataclass
class McmcDraws:
    """Retained posterior draws of one chain."""

    beta_x: np.ndarray
    beta_z: np.ndarray
    hazard: np.ndarray
    alpha: np.ndarray
    shape: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    knots: np.ndarray
    x: np.ndarray | None = None
    chain_id: int = 0
    seed: object = None
    acceptance: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return int(self.beta_x.size)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"beta_x": self.beta_x}
        for j in range(self.beta_z.shape[1]):
            cols[f"beta_z{j + 1}"] = self.beta_z[:, j]
        for l in range(self.hazard.shape[1]):
            cols[f"h{l}"] = self.hazard[:, l]
        cols["alpha"] = self.alpha
        for k in range(self.weights.shape[1]):
            cols[f"pi{k + 1}"] = self.weights[:, k]
            cols[f"shape{k + 1}"] = self.shape[:, k]
            cols[f"scale{k + 1}"] = self.scale[:, k]
        if self.x is not None:
            for i in range(self.x.shape[1]):
                cols[f"x{i + 1}"] = self.x[:, i]
        return cols

    def to_csv(self, path) -> None:
        write_draws_csv([self], path)

    def equals(self, other: "McmcDraws") -> bool:
        a, b = self.columns(), other.columns()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def write_draws_csv(chains: list[McmcDraws], path) -> None:
    """One row per retained draw of every chain; floats written with repr for exact round trips."""
    names = list(chains[0].columns())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "draw"] + names)
        for ch in chains:
            cols = ch.columns()
            for s in range(ch.S):
                writer.writerow([ch.chain_id, s] + [repr(float(cols[c][s])) for c in names])


# ------------------------------------------------------------------ sampler


class _Adapter:
    """Robbins-Monro tuning of a log proposal scale toward TARGET_ACCEPT."""

    def __init__(self, scale, size: int):
        self.scale = np.full(size, float(scale))
        self.rounds = 0

    def adapt(self, rate) -> None:
        self.rounds += 1
        gain = min(1.0, 3.0 / math.sqrt(self.rounds))
        rate = np.nan_to_num(np.asarray(rate, dtype=float), nan=TARGET_ACCEPT)
        self.scale[:] = self.scale * np.exp(gain * (rate - TARGET_ACCEPT))


@dataclass
class ChainState:
    """Mutable chain state; the arrays are shared with the compiled sweep."""

    hazard: np.ndarray
    beta_z: np.ndarray
    beta_x: np.ndarray  # length 1
    x: np.ndarray
    nu: np.ndarray
    shape: np.ndarray
    scale: np.ndarray
    c: np.ndarray
    alpha: np.ndarray  # length 1
    pi: np.ndarray

    @property
    def dp(self) -> dp.DpState:
        return dp.DpState(self.nu.copy(), self.shape.copy(), self.scale.copy(), self.c.copy(), float(self.alpha[0]))


class JointSampler:
    """Owns the chain state, tuning and data caches for one chain."""

    def __init__(self, data: SurvivalDataset, grid: HazardGrid, config: ModelConfig, prior: PriorSpec,
                 rng: np.random.Generator, state: ChainState | None = None):
        self.config = config
        self.prior = prior
        self.packed_prior = _k.pack_prior(prior)
        self.rng = rng
        self.knots = np.asarray(grid.knots, dtype=float)
        self.set_data(data)
        self.state = state if state is not None else self.initial_state(grid)
        J = data.n_covariates
        self.beta_adapt = _Adapter(0.1, J + 1)
        self.atom_adapt = _Adapter(0.5, 2)
        self.alpha_adapt = _Adapter(1.0, 1)
        self.rw_adapt = _Adapter(0.5, 1)
        self.rw_mask = np.zeros(data.n, dtype=np.bool_)
        self.n_total = 0
        self.reset_counts()

    def set_data(self, data: SurvivalDataset) -> None:
        """Swap in a dataset of the same size (used by the Geweke check)."""
        self.data = data
        self.exp_mat = np.ascontiguousarray(exposure_matrix(data.u, self.knots))
        interval = np.searchsorted(self.knots, data.u, side="right") - 1
        self.events = np.bincount(interval, weights=data.delta, minlength=self.knots.size).astype(float)
        self.delta = data.delta.astype(float)
        self.w = data.w.astype(float)
        self.a = np.ascontiguousarray(data.a, dtype=float)
        self.z = np.ascontiguousarray(data.z, dtype=float)

    def initial_state(self, grid: HazardGrid) -> ChainState:
        rng, prior, n = self.rng, self.prior, self.data.n
        K = self.config.k_trunc
        x = (self.w + 0.5) / self.a
        alpha = math.exp(prior.mu_alpha)
        nu = np.clip(rng.beta(1.0, alpha, size=K - 1), dp.STICK_EPS, 1 - dp.STICK_EPS)
        mean = float(np.mean(x))
        var = float(np.var(x)) if n > 1 else 1.0
        var = max(var, 1e-3 * max(mean, 1e-3))
        shape = np.full(K, mean * mean / var) * np.exp(0.25 * rng.standard_normal(K))
        scale = np.full(K, var / mean)
        c = rng.integers(0, K, size=n).astype(np.int64)
        return ChainState(
            hazard=np.array(grid.levels, dtype=float),
            beta_z=np.zeros(self.data.n_covariates),
            beta_x=np.zeros(1),
            x=x,
            nu=nu,
            shape=shape,
            scale=scale,
            c=c,
            alpha=np.array([alpha]),
            pi=dp.weights_from_sticks(nu),
        )

    def reset_counts(self) -> None:
        n = self.data.n
        self.acc_beta = np.zeros(self.data.n_covariates + 1)
        self.acc_indep = np.zeros(n)
        self.acc_rw = np.zeros(n)
        self.atom_stats = np.zeros(2)
        self.alpha_stats = np.zeros(2)
        self.n_swept = 0

    def run(self, n_sweeps: int, out: dict | None = None, start: int = 0, thin: int = 1) -> int:
        """Run ``n_sweeps`` compiled sweeps, optionally storing every ``thin``-th state in ``out``."""
        st = self.state
        if out is None:
            out = _empty_store(0, st, 0)
        try:
            row = _k.run_block(
                int(n_sweeps), int(thin), out["beta_x"].size > 0, int(start),
                self.exp_mat, self.events, self.delta, self.w, self.a, self.z,
                st.hazard, st.beta_z, st.beta_x, st.x, st.nu, st.shape, st.scale, st.c, st.alpha, st.pi,
                self.packed_prior, self.beta_adapt.scale, self.atom_adapt.scale, float(self.alpha_adapt.scale[0]),
                float(self.rw_adapt.scale[0]), self.rw_mask, int(self.config.atom_steps), int(self.config.alpha_steps),
                self.acc_beta, self.acc_indep, self.acc_rw, self.atom_stats, self.alpha_stats, self.rng,
                out["beta_x"], out["beta_z"], out["hazard"], out["alpha"], out["shape"], out["scale"],
                out["weights"], out["x"],
            )
        except (NonFiniteLik, DegenerateWeights, FloatingPointError) as exc:
            raise SamplerError(str(exc), self.n_total) from exc
        self.n_swept += n_sweeps
        self.n_total += n_sweeps
        return row

    def sweep(self) -> None:
        self.run(1)

    def adapt(self) -> None:
        """Tune proposal scales from the counts since the last call, then reset them."""
        n = max(self.n_swept, 1)
        self.beta_adapt.adapt(self.acc_beta / n)
        if self.atom_stats[1]:
            self.atom_adapt.adapt(self.atom_stats[0] / self.atom_stats[1])
        if self.alpha_stats[1]:
            self.alpha_adapt.adapt(self.alpha_stats[0] / self.alpha_stats[1])
        if self.rw_mask.any():
            self.rw_adapt.adapt(self.acc_rw[self.rw_mask].mean() / n)
        rate = self.acc_indep / n
        newly = (rate < FALLBACK_ACCEPT) & ~self.rw_mask
        if newly.any():
            log.debug("switching %d latent-x subjects to random walk", int(newly.sum()))
            self.rw_mask |= newly
        self.reset_counts()

    def acceptance(self) -> dict:
        n = max(self.n_swept, 1)
        out = {f"beta_z{j + 1}": float(v / n) for j, v in enumerate(self.acc_beta[:-1])}
        out["beta_x"] = float(self.acc_beta[-1] / n)
        out["x"] = float((self.acc_indep + self.acc_rw).mean() / n)
        out["atoms"] = float(self.atom_stats[0] / self.atom_stats[1]) if self.atom_stats[1] else float("nan")
        out["alpha"] = float(self.alpha_stats[0] / self.alpha_stats[1]) if self.alpha_stats[1] else float("nan")
        out["x_random_walk_subjects"] = int(self.rw_mask.sum())
        return out


def _empty_store(S: int, st: ChainState, n_x: int) -> dict:
    K, L, J = st.shape.size, st.hazard.size, st.beta_z.size
    return {
        "beta_x": np.empty(S), "beta_z": np.empty((S, J)), "hazard": np.empty((S, L)),
        "alpha": np.empty(S), "shape": np.empty((S, K)), "scale": np.empty((S, K)),
        "weights": np.empty((S, K)), "x": np.empty((S if n_x else 0, max(n_x, st.x.size))),
    }


def build_grid(data: SurvivalDataset, config: ModelConfig) -> HazardGrid:
    return make_hazard_grid(data.u, data.delta, config.m_intervals, method=config.knot_method)


def run_chain(data: SurvivalDataset, config: ModelConfig, prior: PriorSpec, rng=None, chain_id: int = 0,
              grid: HazardGrid | None = None) -> McmcDraws:
    """Run one chain; deterministic given ``config.seed`` (or ``rng``)."""
    seed = config.seed
    if rng is None:
        rng = make_rng(seed)
    elif not isinstance(rng, np.random.Generator):
        seed = rng
        rng = make_rng(rng)
    if grid is None:
        grid = build_grid(data, config)
    sampler = JointSampler(data, grid, config, prior, rng)
    done = 0
    while done < config.n_burn:
        step = min(ADAPT_EVERY, config.n_burn - done)
        sampler.run(step)
        done += step
        if config.adapt and step == ADAPT_EVERY:
            sampler.adapt()
    sampler.reset_counts()
    S = config.n_draws
    out = _empty_store(S, sampler.state, data.n if config.store_x else 0)
    sampler.run(config.n_iter - config.n_burn, out=out, thin=config.thin)
    xs = out.pop("x") if config.store_x else None
    out.pop("x", None)
    acceptance = sampler.acceptance()
    reach = float(np.max(np.abs(out["beta_x"]), initial=0.0) * np.max(sampler.state.x, initial=0.0))
    acceptance["near_overflow"] = reach > GUARD_WARN * _k.MAX_ETA
    if acceptance["near_overflow"]:
        log.warning("chain %d: |beta_x| * max(x) reached %.0f; the posterior is running toward the overflow guard",
                    chain_id, reach)
    return McmcDraws(**out, knots=grid.knots, x=xs, chain_id=chain_id, seed=seed, acceptance=acceptance)


# ------------------------------------------------------------------ diagnostics


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def split_rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction for an (n_chains, S) array."""
    m, S = chains.shape
    half = S // 2
    parts = np.concatenate([chains[:, :half], chains[:, S - half:]], axis=0)
    n = half
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def effective_sample_size(chains: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence; capped at the draw count."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    acov = np.array([_autocov(c) for c in chains])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    if W == 0:
        return float(m * n)
    var_plus = W * (n - 1) / n + (chains.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative and made monotone
    total = 0.0
    prev = np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau = -1.0 + 2.0 * total
    ess = m * n / max(tau, 1e-12)
    return float(min(ess, m * n))


def _run_one(args):
    data, config, prior, seed_seq, chain_id = args
    return run_chain(data, config, prior, rng=make_rng(seed_seq), chain_id=chain_id)


def run_chains(data: SurvivalDataset, config: ModelConfig, prior: PriorSpec, n_chains: int, workers: int = 1):
    """Independent chains on spawned RNG streams plus convergence diagnostics.

    Returns (draws list, diagnostics). R-hat is ``None`` for a single chain.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    streams = np.random.SeedSequence(config.seed).spawn(n_chains)
    jobs = [(data, config, prior, streams[i], i) for i in range(n_chains)]
    if workers > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(_run_one, jobs))
    else:
        chains = [_run_one(j) for j in jobs]
    for ch in chains:
        ch.seed = config.seed
    diagnostics = {}
    names = ["beta_x"] + [f"beta_z{j + 1}" for j in range(data.n_covariates)]
    for name in names:
        arr = np.array([ch.columns()[name] for ch in chains])
        if arr.shape[1] == 0:
            diagnostics[name] = {"rhat": None, "ess": None}
            continue
        diagnostics[name] = {
            "rhat": split_rhat(arr) if n_chains > 1 and arr.shape[1] >= 4 else None,
            "ess": effective_sample_size(arr),
        }
    return chains, diagnostics


def pooled(chains: list[McmcDraws], name: str) -> np.ndarray:
    return np.concatenate([ch.columns()[name] for ch in chains])
