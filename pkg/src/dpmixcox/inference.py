"""Posterior summaries, HPD intervals and Savage-Dickey Bayes factors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .data import PriorSpec
from .errors import TooFewDraws, ZeroDensity

MIN_HPD_DRAWS = 100
LOG_TINY = math.log(np.finfo(float).smallest_subnormal)

# the five-prior sensitivity protocol for beta_x: (label, family, scale)
SENSITIVITY_PRIORS = (
    ("N(0,0.01)", "normal", 0.1),
    ("N(0,1)", "normal", 1.0),
    ("N(0,10)", "normal", math.sqrt(10.0)),
    ("N(0,100)", "normal", 10.0),
    ("Cauchy(0,1)", "cauchy", 1.0),
)


def sensitivity_priors(base: PriorSpec = PriorSpec()) -> list[tuple[str, PriorSpec]]:
    out = []
    for label, family, scale in SENSITIVITY_PRIORS:
        out.append((label, replace(base, mu_x=0.0, sigma2_x=scale * scale, beta_x_family=family)))
    return out


def hpd_interval(draws, level: float = 0.95) -> tuple[float, float]:
    """Shortest window holding ceil(level * S) sorted draws; ties go to the lowest window."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    S = x.size
    if S < MIN_HPD_DRAWS:
        raise TooFewDraws(f"need at least {MIN_HPD_DRAWS} draws, got {S}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    k = math.ceil(level * S - 1e-9)
    widths = x[k - 1:] - x[: S - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


@dataclass(frozen=True)
class BayesFactorResult:
    bf10: float
    log_bf10: float
    posterior_at_0: float
    prior_at_0: float
    bandwidth: float
    method: str = "kde"


def silverman_bandwidth(draws) -> float:
    x = np.asarray(draws, dtype=float)
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return float(0.9 * spread * x.size ** (-0.2))


def kde_log_density(draws, at: float, bandwidth: float | None = None) -> tuple[float, float]:
    """log of a Gaussian kernel density estimate at one point, plus the bandwidth."""
    x = np.asarray(draws, dtype=float).ravel()
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ZeroDensity("draws have zero spread; kernel bandwidth is 0", float(np.min(np.abs(x - at))))
    r = (at - x) / h
    logd = float(logsumexp(-0.5 * r * r) - math.log(x.size * h * math.sqrt(2 * math.pi)))
    return logd, h


def savage_dickey_bf10(draws, prior: PriorSpec, test_value: float = 0.0, method: str = "kde",
                       bandwidth: float | None = None) -> BayesFactorResult:
    """BF10 = prior density / posterior density at ``test_value``.

    The posterior density comes from a Gaussian KDE (Silverman bandwidth
    unless overridden) or, with ``method="normal"``, a normal fit to the
    draws.
    """
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < 2:
        raise TooFewDraws("need at least 2 draws")
    log_prior = float(prior.beta_x_logpdf(test_value))
    if method == "kde":
        log_post, h = kde_log_density(x, test_value, bandwidth)
    elif method == "normal":
        h = float("nan")
        log_post = float(stats.norm.logpdf(test_value, np.mean(x), np.std(x, ddof=1)))
    else:
        raise ValueError(f"unknown density method {method!r}")
    # the density itself would be 0.0 as a double
    if not log_post > LOG_TINY:
        raise ZeroDensity(
            f"posterior density at {test_value} underflowed", float(np.min(np.abs(x - test_value)))
        )
    log_bf = log_prior - log_post
    return BayesFactorResult(
        bf10=math.exp(log_bf) if log_bf < 709 else math.inf,
        log_bf10=log_bf,
        posterior_at_0=math.exp(log_post),
        prior_at_0=math.exp(log_prior),
        bandwidth=h,
        method=method,
    )


@dataclass(frozen=True)
class ParamSummary:
    param: str
    mean: float
    sd: float
    lower: float
    upper: float

    @property
    def hr(self) -> float:
        return math.exp(self.mean)

    @property
    def hr_lower(self) -> float:
        return math.exp(self.lower)

    @property
    def hr_upper(self) -> float:
        return math.exp(self.upper)


@dataclass
class PosteriorSummary:
    rows: list
    bf: BayesFactorResult | None = None
    level: float = 0.95

    def table(self) -> list[dict]:
        out = []
        for r in self.rows:
            bf = self.bf.bf10 if (self.bf is not None and r.param == "beta_x") else float("nan")
            out.append({"param": r.param, "coef": r.mean, "hr": r.hr, "hr_lower": r.hr_lower,
                        "hr_upper": r.hr_upper, "bf10": bf})
        return out

    def to_csv(self, path) -> None:
        write_table(self.table(), path)

    def pretty(self) -> str:
        return format_table(self.table())


def summarize(columns: dict, names=None, prior: PriorSpec | None = None, level: float = 0.95,
              method: str = "kde", bandwidth: float | None = None) -> PosteriorSummary:
    """Mean, SD and HPD bounds for each named coefficient, plus BF10 for beta_x under ``prior``."""
    names = list(columns) if names is None else list(names)
    rows = []
    for name in names:
        x = np.asarray(columns[name], dtype=float)
        lo, hi = hpd_interval(x, level)
        rows.append(ParamSummary(name, float(np.mean(x)), float(np.std(x, ddof=1)), lo, hi))
    bf = None
    if prior is not None and "beta_x" in columns:
        bf = savage_dickey_bf10(columns["beta_x"], prior, 0.0, method, bandwidth)
    return PosteriorSummary(rows, bf, level)


def prior_sensitivity(draw_sets, test_value: float = 0.0, level: float = 0.95, method: str = "kde") -> list[dict]:
    """One row per prior from ``[(label, prior, beta_x draws), ...]``."""
    out = []
    for label, prior, draws in draw_sets:
        x = np.asarray(draws, dtype=float)
        lo, hi = hpd_interval(x, level)
        bf = savage_dickey_bf10(x, prior, test_value, method)
        mean = float(np.mean(x))
        out.append({"prior": label, "coef": mean, "sd": float(np.std(x, ddof=1)), "hr": math.exp(mean),
                    "hr_lower": math.exp(lo), "hr_upper": math.exp(hi), "bf10": bf.bf10,
                    "log_bf10": bf.log_bf10, "bandwidth": bf.bandwidth})
    return out


def write_table(rows: list[dict], path) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    cells = [[k for k in keys]]
    for r in rows:
        cells.append([f"{v:.4g}" if isinstance(v, (float, np.floating)) else str(v) for v in r.values()])
    widths = [max(len(row[i]) for row in cells) for i in range(len(keys))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)
