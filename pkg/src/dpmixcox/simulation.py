"""Simulation studies: data generation, estimator runs and bias/MSE scoring.

Every replicate draws its dataset from a stream keyed by (seed, replicate)
and each estimator gets its own stream keyed by (seed, replicate,
estimator), so results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import optimize

from .cox import fit_cox
from .data import ModelConfig, PriorSpec, SurvivalDataset, make_dataset
from .errors import TooFewValues
from .inference import savage_dickey_bf10
from .mcmc import run_chain
from .simex import SimexConfig, fit_simex

log = logging.getLogger(__name__)

ESTIMATORS = ("true", "naive", "simex", "bayes_gamma", "dp_mix")
_ESTIMATOR_CODE = {name: i + 1 for i, name in enumerate(ESTIMATORS)}
PILOT_DRAWS = 100_000
N_BATCHES = 10


@dataclass(frozen=True)
class SimScenario:
    """Generative setting for one simulation study.

    ``latent`` is "gamma" (params: shape, scale), "lognormal" (mu, sigma)
    or "uniform" (upper).
    """

    name: str = "custom"
    latent: str = "gamma"
    params: tuple = (2 / 3, 3.0)
    beta_x: float = 0.5
    beta_z: tuple = (0.1,)
    n: int = 100
    censor_frac: float = 0.2
    n_reps: int = 1000
    weibull_shape: float = 1.0
    weibull_scale: float = 1.0
    area: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        object.__setattr__(self, "beta_z", tuple(float(b) for b in self.beta_z))
        need = {"gamma": 2, "lognormal": 2, "uniform": 1}
        if self.latent not in need:
            raise ValueError(f"unknown latent law {self.latent!r}")
        if len(self.params) != need[self.latent]:
            raise ValueError(f"{self.latent} takes {need[self.latent]} parameters")
        if self.latent in ("gamma", "uniform") and not all(p > 0 for p in self.params):
            raise ValueError("latent law parameters must be > 0")
        if self.latent == "lognormal" and not self.params[1] > 0:
            raise ValueError("lognormal sigma must be > 0")
        if not 0 <= self.censor_frac < 1:
            raise ValueError("censor_frac must lie in [0, 1)")
        if self.n < 1 or self.n_reps < 0:
            raise ValueError("n must be >= 1 and n_reps >= 0")
        if not (self.weibull_shape > 0 and self.weibull_scale > 0 and self.area > 0):
            raise ValueError("Weibull parameters and area must be > 0")

    def replace(self, **kw) -> "SimScenario":
        return replace(self, **kw)

    def latent_moments(self) -> tuple[float, float]:
        if self.latent == "gamma":
            a, b = self.params
            return a * b, a * b * b
        if self.latent == "lognormal":
            mu, s = self.params
            return math.exp(mu + s * s / 2), (math.exp(s * s) - 1) * math.exp(2 * mu + s * s)
        c = self.params[0]
        return c / 2, c * c / 12

    def reliability(self) -> float:
        """Var[X] / Var[W/A] under W | X ~ Poisson(X A)."""
        m, v = self.latent_moments()
        return v / (v + m / self.area)


def lognormal_match(gamma_a: float, gamma_b: float) -> tuple[float, float]:
    """(mu, sigma) of the lognormal with the mean a*b and variance a*b**2 of Gamma(a, scale b)."""
    if not (gamma_a > 0 and gamma_b > 0):
        raise ValueError("gamma parameters must be > 0")
    s2 = math.log1p(1.0 / gamma_a)
    return math.log(gamma_a * gamma_b) - s2 / 2, math.sqrt(s2)


_GAMMA_SETTINGS = ((0.1, 9.0), (2 / 3, 3.0), (2.0, 1.0), (10.0, 1.0))
_UNIFORM_UPPER = (1.8, 4.0, 20.0)


def scenario(k: int, **overrides) -> SimScenario:
    """Built-in settings 1-11: four gammas, their lognormal matches, three uniforms."""
    if 1 <= k <= 4:
        base = SimScenario(name=f"scenario{k}", latent="gamma", params=_GAMMA_SETTINGS[k - 1])
    elif 5 <= k <= 8:
        base = SimScenario(name=f"scenario{k}", latent="lognormal", params=lognormal_match(*_GAMMA_SETTINGS[k - 5]))
    elif 9 <= k <= 11:
        base = SimScenario(name=f"scenario{k}", latent="uniform", params=(_UNIFORM_UPPER[k - 9],))
    else:
        raise ValueError("built-in scenarios are numbered 1 to 11")
    return base.replace(**overrides)


def draw_latent(sc: SimScenario, rng: np.random.Generator, size: int) -> np.ndarray:
    if sc.latent == "gamma":
        return rng.gamma(sc.params[0], sc.params[1], size)
    if sc.latent == "lognormal":
        return rng.lognormal(sc.params[0], sc.params[1], size)
    return rng.uniform(0.0, sc.params[0], size)


def _event_times(sc: SimScenario, rng, size):
    x = draw_latent(sc, rng, size)
    z = rng.standard_normal((size, len(sc.beta_z)))
    eta = sc.beta_x * x + z @ np.asarray(sc.beta_z)
    # PH Weibull: S(t) = exp(-(t/scale)^shape * exp(eta))
    e = rng.exponential(1.0, size)
    t = sc.weibull_scale * (e * np.exp(-eta)) ** (1.0 / sc.weibull_shape)
    return x, z, t


def censoring_rate(sc: SimScenario, seed=0) -> float:
    """Exponential censoring rate giving the target censored fraction on a pilot sample.

    Solves mean(1 - exp(-rate * T)) = censor_frac, the expected censored
    share given the pilot event times.
    """
    if sc.censor_frac == 0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2**31 - 1,)))
    _, _, t = _event_times(sc, rng, PILOT_DRAWS)
    t = np.minimum(t, np.finfo(float).max / 1e10)

    def gap(log_rate):
        return np.mean(-np.expm1(-math.exp(log_rate) * t)) - sc.censor_frac

    return math.exp(optimize.brentq(gap, -60.0, 60.0, xtol=1e-12))


def generate_dataset(sc: SimScenario, rng: np.random.Generator, censor_rate: float | None = None) -> SurvivalDataset:
    """One replicate with x_true attached."""
    if censor_rate is None:
        censor_rate = censoring_rate(sc, sc.seed)
    x, z, t = _event_times(sc, rng, sc.n)
    if censor_rate > 0:
        c = rng.exponential(1.0 / censor_rate, sc.n)
        u, delta = np.minimum(t, c), (t <= c).astype(int)
    else:
        u, delta = t, np.ones(sc.n, dtype=int)
    # guard against exact zeros from underflow at very large eta
    u = np.maximum(u, np.finfo(float).tiny)
    w = rng.poisson(x * sc.area)
    return make_dataset(u, delta, w, z=z, a=np.full(sc.n, sc.area), x_true=x)


def batch_means_mcse(values, n_batches: int = N_BATCHES) -> float:
    """SD (ddof=1) of contiguous batch means over sqrt(n_batches); the remainder joins the last batch."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < n_batches:
        raise TooFewValues(f"need at least {n_batches} values, got {v.size}")
    size = v.size // n_batches
    means = [v[i * size:(i + 1) * size if i < n_batches - 1 else v.size].mean() for i in range(n_batches)]
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class HarnessConfig:
    """Settings shared by every estimator in a study."""

    mcmc: ModelConfig = field(default_factory=lambda: ModelConfig(
        m_intervals=5, k_trunc=5, n_iter=10_000, n_burn=5_000, thin=1, knot_method="equal_length"))
    prior: PriorSpec = field(default_factory=PriorSpec)
    simex: SimexConfig = field(default_factory=SimexConfig)

    @classmethod
    def parity(cls) -> "HarnessConfig":
        return cls(mcmc=ModelConfig(m_intervals=5, k_trunc=5, n_iter=200_000, n_burn=100_000, thin=10,
                                    knot_method="equal_length"))


def _stream(seed, *key):
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))


def _cox_coef(data: SurvivalDataset, x) -> np.ndarray:
    fit = fit_cox(data.u, data.delta, np.column_stack([x, data.z]), strict=True)
    return fit.coef


def run_estimator(name: str, data: SurvivalDataset, cfg: HarnessConfig, seed_seq) -> np.ndarray:
    """Point estimate of [beta_x, beta_z...]; Bayesian estimators report the posterior mean."""
    if name == "true":
        return _cox_coef(data, data.x_true)
    if name == "naive":
        return _cox_coef(data, data.surrogate)
    if name == "simex":
        seed = int(seed_seq.generate_state(1)[0])
        return fit_simex(data, replace(cfg.simex, seed=seed)).coef
    if name in ("bayes_gamma", "dp_mix"):
        mc = cfg.mcmc if name == "dp_mix" else cfg.mcmc.replace(k_trunc=1)
        draws = run_chain(data, mc, cfg.prior, rng=np.random.default_rng(seed_seq))
        return np.concatenate([[draws.beta_x.mean()], draws.beta_z.mean(axis=0)])
    raise ValueError(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATORS)}")


def _run_replicate(args):
    sc, estimators, cfg, rate, rep = args
    data = generate_dataset(sc, np.random.default_rng(_stream(sc.seed, rep)), censor_rate=rate)
    out = {}
    for name in estimators:
        try:
            out[name] = run_estimator(name, data, cfg, _stream(sc.seed, rep, _ESTIMATOR_CODE[name]))
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            log.info("replicate %d, %s failed: %s", rep, name, exc)
            out[name] = None
    return rep, out


@dataclass
class MetricTable:
    """Per (estimator, parameter) summaries; ``raw`` holds every replicate's estimate."""

    rows: list
    raw: dict  # estimator -> (n_reps, p) array, NaN for failures
    truth: np.ndarray
    names: list

    def get(self, estimator: str, param: str = "beta_x") -> dict:
        for r in self.rows:
            if r["estimator"] == estimator and r["param"] == param:
                return r
        raise KeyError((estimator, param))

    def to_csv(self, path) -> None:
        cols = ["estimator", "param", "truth", "mean", "bias", "mcse_bias", "mse", "mcse_mse", "n_ok", "n_fail"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(float(r[c])) for c in cols])

    def raw_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["estimator", "rep"] + self.names)
            for est, arr in self.raw.items():
                for rep, row in enumerate(arr):
                    w.writerow([est, rep] + [repr(float(v)) for v in row])


def score(raw: dict, truth, names) -> MetricTable:
    truth = np.asarray(truth, dtype=float)
    rows = []
    for est, arr in raw.items():
        for j, param in enumerate(names):
            v = arr[:, j]
            ok = v[np.isfinite(v)]
            err = ok - truth[j]
            mcse = lambda s: batch_means_mcse(s) if s.size >= N_BATCHES else float("nan")  # noqa: E731
            rows.append({
                "estimator": est, "param": param, "truth": float(truth[j]),
                "mean": float(ok.mean()) if ok.size else float("nan"),
                "bias": float(err.mean()) if ok.size else float("nan"),
                "mcse_bias": mcse(err),
                "mse": float(np.mean(err * err)) if ok.size else float("nan"),
                "mcse_mse": mcse(err * err),
                "n_ok": int(ok.size), "n_fail": int(v.size - ok.size),
            })
    return MetricTable(rows, raw, truth, list(names))


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]


def run_scenario(sc: SimScenario, estimators, cfg: HarnessConfig = HarnessConfig(), workers: int = 1) -> MetricTable:
    estimators = list(estimators)
    if not estimators:
        raise ValueError("no estimators requested")
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ValueError(f"unknown estimator(s) {', '.join(bad)}; valid: {', '.join(ESTIMATORS)}")
    rate = censoring_rate(sc, sc.seed)
    p = 1 + len(sc.beta_z)
    raw = {e: np.full((sc.n_reps, p), np.nan) for e in estimators}
    jobs = [(sc, estimators, cfg, rate, rep) for rep in range(sc.n_reps)]
    for rep, out in _map(_run_replicate, jobs, workers):
        for e, est in out.items():
            if est is not None:
                raw[e][rep] = est
    names = ["beta_x"] + [f"beta_z{j + 1}" for j in range(len(sc.beta_z))]
    return score(raw, [sc.beta_x, *sc.beta_z], names)


# ---------------------------------------------------------------- Bayes-factor study


def _bf_replicate(args):
    sc, cfg, rep = args
    data = generate_dataset(sc, np.random.default_rng(_stream(sc.seed, rep)), censor_rate=0.0)
    draws = run_chain(data, cfg.mcmc, cfg.prior, rng=np.random.default_rng(_stream(sc.seed, rep, 99)))
    try:
        return savage_dickey_bf10(draws.beta_x, cfg.prior).log_bf10
    except ArithmeticError:
        # posterior mass far from 0: the estimate underflowed, so evidence is overwhelming
        return math.inf


def bf_sampling_study(n_grid, hypothesis: str = "H1", n_reps: int = 100, cfg: HarnessConfig = HarnessConfig(),
                      seed: int = 0, workers: int = 1, latent_shape: float = 2 / 3, latent_scale: float = 3.0) -> list[dict]:
    """log BF10 quartiles per sample size with no censoring; H1 has beta_x = 0.5, H0 has 0."""
    if hypothesis not in ("H0", "H1"):
        raise ValueError("hypothesis must be 'H0' or 'H1'")
    out = []
    for i, n in enumerate(n_grid):
        sc = SimScenario(name=f"bf_{hypothesis}_n{n}", latent="gamma", params=(latent_shape, latent_scale),
                         beta_x=0.5 if hypothesis == "H1" else 0.0, n=int(n), censor_frac=0.0,
                         n_reps=n_reps, seed=int(_stream(seed, i, 0 if hypothesis == "H0" else 1).generate_state(1)[0]))
        vals = np.array(_map(_bf_replicate, [(sc, cfg, r) for r in range(n_reps)], workers))
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out.append({"n": int(n), "hypothesis": hypothesis, "q1": float(q1), "median": float(med),
                    "q3": float(q3), "n_reps": n_reps, "log_bf10": vals})
    return out


# ---------------------------------------------------------------- config files

_SCENARIO_KEYS = {f.name for f in fields(SimScenario)} | {"scenario", "shape", "scale", "mu", "sigma", "upper"}


def parse_kv(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def scenario_from_config(cfg: dict) -> SimScenario:
    """Build a SimScenario from parsed key/value pairs.

    Keys: scenario (built-in 1-11 used as the base), name, latent, shape,
    scale, mu, sigma, upper, params, beta_x, beta_z (comma list), n,
    censor_frac, n_reps, weibull_shape, weibull_scale, area, seed.
    """
    unknown = set(cfg) - _SCENARIO_KEYS
    if unknown:
        raise ValueError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    base = scenario(int(cfg["scenario"])) if "scenario" in cfg else SimScenario()
    kw = {}
    latent = cfg.get("latent", base.latent)
    if "params" in cfg:
        kw["params"] = tuple(float(v) for v in cfg["params"].split(","))
    elif latent == "gamma" and ("shape" in cfg or "scale" in cfg):
        kw["params"] = (float(cfg.get("shape", 1.0)), float(cfg.get("scale", 1.0)))
    elif latent == "lognormal" and ("mu" in cfg or "sigma" in cfg):
        kw["params"] = (float(cfg.get("mu", 0.0)), float(cfg.get("sigma", 1.0)))
    elif latent == "uniform" and "upper" in cfg:
        kw["params"] = (float(cfg["upper"]),)
    kw["latent"] = latent
    casts = {"name": str, "beta_x": float, "n": int, "censor_frac": float, "n_reps": int,
             "weibull_shape": float, "weibull_scale": float, "area": float, "seed": int}
    for k, cast in casts.items():
        if k in cfg:
            kw[k] = cast(cfg[k])
    if "beta_z" in cfg:
        kw["beta_z"] = tuple(float(v) for v in cfg["beta_z"].split(",") if v.strip())
    return base.replace(**kw)


def scenario_to_dict(sc: SimScenario) -> dict:
    return asdict(sc)
