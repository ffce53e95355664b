"""Observed-data container, priors, sampler configuration and dataset I/O.

Gamma conventions used across the package:

* latent densities and mixture atoms use (shape, scale), so Var[X] = a * b**2;
* hazard levels and the base-measure factors use (shape, rate).
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    LengthMismatch,
    MissingColumn,
    NegativeCount,
    NoEvents,
    NonPositiveArea,
    NonPositiveTime,
)

REQUIRED_COLUMNS = ("time", "event", "w")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Per-subject survival outcome, error-free covariates and biomarker count.

    ``u`` is the observed time min(T, C), ``delta`` the event indicator,
    ``z`` an (n, J) matrix, ``w`` the cell count on a core of area ``a``.
    ``x_true`` is only known for simulated data.
    """

    u: np.ndarray
    delta: np.ndarray
    z: np.ndarray
    w: np.ndarray
    a: np.ndarray
    x_true: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.u.shape[0])

    @property
    def n_covariates(self) -> int:
        return int(self.z.shape[1])

    @property
    def surrogate(self) -> np.ndarray:
        """Observed density W / A."""
        return self.w / self.a

    def subset(self, idx: np.ndarray) -> "SurvivalDataset":
        return SurvivalDataset(
            u=self.u[idx],
            delta=self.delta[idx],
            z=self.z[idx],
            w=self.w[idx],
            a=self.a[idx],
            x_true=None if self.x_true is None else self.x_true[idx],
        )

    def equals(self, other: "SurvivalDataset") -> bool:
        """Bit-exact comparison of every field."""
        pairs = [
            (self.u, other.u),
            (self.delta, other.delta),
            (self.z, other.z),
            (self.w, other.w),
            (self.a, other.a),
        ]
        if (self.x_true is None) != (other.x_true is None):
            return False
        if self.x_true is not None:
            pairs.append((self.x_true, other.x_true))
        return all(x.shape == y.shape and np.array_equal(x, y) for x, y in pairs)


def make_dataset(u, delta, w, z=None, a=None, x_true=None) -> SurvivalDataset:
    """Build and validate a dataset from array-likes; areas default to 1."""
    u = np.asarray(u, dtype=float)
    n = u.shape[0]
    if z is None:
        z = np.zeros((n, 0))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    raw = SurvivalDataset(
        u=u,
        delta=np.asarray(delta),
        z=z,
        w=np.asarray(w),
        a=np.ones(n) if a is None else np.asarray(a, dtype=float),
        x_true=None if x_true is None else np.asarray(x_true, dtype=float),
    )
    return validate_dataset(raw)


def validate_dataset(raw: SurvivalDataset) -> SurvivalDataset:
    """Check every invariant; return a read-only copy with canonical dtypes."""
    u = np.asarray(raw.u, dtype=float).ravel()
    n = u.shape[0]
    z = np.asarray(raw.z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(n, -1) if n else z.reshape(0, 0)
    lengths = {
        "delta": np.shape(raw.delta)[0],
        "w": np.shape(raw.w)[0],
        "a": np.shape(raw.a)[0],
        "z": z.shape[0],
    }
    if raw.x_true is not None:
        lengths["x_true"] = np.shape(raw.x_true)[0]
    for name, length in lengths.items():
        if length != n:
            raise LengthMismatch(f"{name} has length {length}, expected {n}", field=name)

    bad = np.flatnonzero(~(np.isfinite(u) & (u > 0)))
    if bad.size:
        i = int(bad[0])
        raise NonPositiveTime(f"u[{i}] = {u[i]!r} is not a positive time", field="u", index=i)

    delta_raw = np.asarray(raw.delta, dtype=float)
    bad = np.flatnonzero((delta_raw != 0) & (delta_raw != 1))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"delta[{i}] = {delta_raw[i]!r} is not 0/1", field="delta", index=i)

    w_raw = np.asarray(raw.w, dtype=float)
    bad = np.flatnonzero(~np.isfinite(w_raw) | (w_raw < 0) | (w_raw != np.floor(w_raw)))
    if bad.size:
        i = int(bad[0])
        raise NegativeCount(
            f"w[{i}] = {w_raw[i]!r} is not a nonnegative integer count", field="w", index=i
        )

    a = np.asarray(raw.a, dtype=float)
    bad = np.flatnonzero(~(np.isfinite(a) & (a > 0)))
    if bad.size:
        i = int(bad[0])
        raise NonPositiveArea(f"a[{i}] = {a[i]!r} is not a positive area", field="a", index=i)

    if not np.all(np.isfinite(z)):
        i = int(np.flatnonzero(~np.all(np.isfinite(z), axis=1))[0])
        raise DataError(f"z row {i} has non-finite entries", field="z", index=i)

    x_true = None
    if raw.x_true is not None:
        x_true = np.asarray(raw.x_true, dtype=float)
        bad = np.flatnonzero(~(np.isfinite(x_true) & (x_true >= 0)))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"x_true[{i}] = {x_true[i]!r} is negative", field="x_true", index=i)
        x_true = _frozen(x_true)

    return SurvivalDataset(
        u=_frozen(u),
        delta=_frozen(delta_raw.astype(np.int64)),
        z=_frozen(z),
        w=_frozen(w_raw.astype(np.int64)),
        a=_frozen(a),
        x_true=x_true,
    )


@dataclass(frozen=True, eq=False)
class HazardGrid:
    """Knots 0 = tau_0 < ... < tau_m and one hazard level per interval.

    Interval l is [tau_l, tau_{l+1}); the last one, [tau_m, inf), is open.
    """

    knots: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        levels = np.asarray(self.levels, dtype=float)
        if knots.ndim != 1 or knots.size == 0 or knots[0] != 0.0:
            raise ValueError("knots must be a 1-d array starting at exactly 0")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if levels.shape != knots.shape:
            raise ValueError(f"need {knots.size} hazard levels, got {levels.size}")
        object.__setattr__(self, "knots", _frozen(knots))
        object.__setattr__(self, "levels", _frozen(levels))

    @property
    def n_intervals(self) -> int:
        return int(self.knots.size)

    def with_levels(self, levels) -> "HazardGrid":
        return HazardGrid(self.knots, np.asarray(levels, dtype=float))

    def interval_index(self, t: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.knots, t, side="right") - 1


def make_hazard_grid(u, delta, m: int, method: str = "quantile") -> HazardGrid:
    """Place ``m`` inner knots and start every level at the crude hazard.

    ``method="quantile"`` puts knots at the j/(m+1) quantiles of the event
    times so every interval holds events; ``"equal_length"`` splits
    [0, max(u)] into m+1 pieces of equal length. Tied quantiles collapse,
    so the grid can come back with fewer than m inner knots.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    u = np.asarray(u, dtype=float)
    delta = np.asarray(delta)
    n_events = float(np.sum(delta))
    if n_events == 0:
        raise NoEvents("no events: hazard grid is undefined", field="delta")
    if method == "quantile":
        probs = np.arange(1, m + 1) / (m + 1)
        inner = np.quantile(u[delta == 1], probs)
    elif method == "equal_length":
        inner = np.max(u) * np.arange(1, m + 1) / (m + 1)
    else:
        raise ValueError(f"unknown knot method {method!r}")
    knots = np.unique(np.concatenate([[0.0], inner]))
    crude = n_events / float(np.sum(u))
    return HazardGrid(knots, np.full(knots.size, crude))


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters; defaults are the weakly informative choices.

    Hazard levels: Gamma(a_h, rate b_h). beta_z components: N(mu_beta, sigma2_beta).
    beta_x: N(mu_x, sigma2_x), or Cauchy(mu_x, sqrt(sigma2_x)) when
    ``beta_x_family == "cauchy"``. alpha: LogNormal(mu_alpha, sigma2_alpha).
    Base measure: a ~ Gamma(a0, rate eta0), b ~ Gamma(b0, rate gamma0).
    """

    a_h: float = 0.01
    b_h: float = 0.01
    mu_beta: float = 0.0
    sigma2_beta: float = 1.0
    mu_x: float = 0.0
    sigma2_x: float = 100.0
    beta_x_family: str = "normal"
    mu_alpha: float = 0.0
    sigma2_alpha: float = 1.0
    a0: float = 0.1
    eta0: float = 0.1
    b0: float = 0.1
    gamma0: float = 0.1

    def __post_init__(self):
        for name in ("a_h", "b_h", "sigma2_beta", "sigma2_x", "a0", "eta0", "b0", "gamma0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.sigma2_alpha >= 0:
            raise ValueError("sigma2_alpha must be >= 0")
        if self.beta_x_family not in ("normal", "cauchy"):
            raise ValueError(f"unknown beta_x prior family {self.beta_x_family!r}")

    @property
    def beta_x_scale(self) -> float:
        return math.sqrt(self.sigma2_x)

    def beta_x_logpdf(self, b):
        b = np.asarray(b, dtype=float)
        s = self.beta_x_scale
        r = (b - self.mu_x) / s
        if self.beta_x_family == "normal":
            return -0.5 * r * r - math.log(s) - 0.5 * math.log(2 * math.pi)
        return -np.log1p(r * r) - math.log(math.pi * s)

    def beta_x_pdf(self, b):
        return np.exp(self.beta_x_logpdf(b))

    def label(self) -> str:
        if self.beta_x_family == "cauchy":
            return f"Cauchy(location={self.mu_x:g}, scale={self.beta_x_scale:g})"
        return f"Normal(mu={self.mu_x:g}, sigma2={self.sigma2_x:g})"


@dataclass(frozen=True)
class ModelConfig:
    """Sampler schedule and model sizes.

    ``m_intervals`` is the number of inner knots (m + 1 hazard levels);
    ``n_iter`` counts all sweeps including the ``n_burn`` burn-in sweeps.
    """

    m_intervals: int = 5
    k_trunc: int = 5
    n_iter: int = 200_000
    n_burn: int = 100_000
    thin: int = 10
    seed: int = 0
    knot_method: str = "quantile"
    store_x: bool = False
    adapt: bool = True
    atom_steps: int = 3
    alpha_steps: int = 3

    def __post_init__(self):
        if self.m_intervals < 1:
            raise ValueError("m_intervals must be >= 1")
        # K = 1 is the single-gamma (parametric) joint model
        if self.k_trunc < 1:
            raise ValueError("k_trunc must be >= 1")
        if self.n_iter <= 0:
            raise ValueError("n_iter must be > 0")
        if not 0 <= self.n_burn <= self.n_iter:
            raise ValueError("n_burn must lie in [0, n_iter]")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------- I/O


def _z_columns(names) -> list[str]:
    zs = [c for c in names if re.fullmatch(r"z\d+", c)]
    return sorted(zs, key=lambda c: int(c[1:]))


def _records_to_dataset(records: list[dict], columns) -> SurvivalDataset:
    for col in REQUIRED_COLUMNS:
        if col not in columns:
            raise MissingColumn(f"missing required column '{col}'", field=col)
    zcols = _z_columns(columns)
    n = len(records)

    def col(name, default=None):
        out = []
        for i, r in enumerate(records):
            v = r.get(name, default)
            if v is None or v == "":
                if default is None:
                    raise DataError(f"empty value for '{name}' in record {i}", field=name, index=i)
                v = default
            try:
                out.append(float(v))
            except (TypeError, ValueError):
                raise DataError(f"'{name}' in record {i} is not numeric: {v!r}", field=name, index=i)
        return np.array(out, dtype=float)

    z = np.column_stack([col(c) for c in zcols]) if zcols else np.zeros((n, 0))
    raw = SurvivalDataset(
        u=col("time"),
        delta=col("event"),
        z=z,
        w=col("w"),
        a=col("area", 1.0) if "area" in columns else np.ones(n),
        x_true=col("x_true") if "x_true" in columns else None,
    )
    return validate_dataset(raw)


def read_csv(path) -> SurvivalDataset:
    """Read ``time,event,w[,area],z1..zJ[,x_true]`` with a header row."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = [c.strip() for c in (reader.fieldnames or [])]
        records = [{k.strip(): v for k, v in row.items()} for row in reader]
    return _records_to_dataset(records, columns)


def read_json(path) -> SurvivalDataset:
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise DataError("JSON input must be an array of records")
    columns = set()
    for r in records:
        columns.update(r.keys())
    if not records:
        columns = set(REQUIRED_COLUMNS)
    return _records_to_dataset(records, columns)


def read_dataset(path) -> SurvivalDataset:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return read_json(path)
    return read_csv(path)


def _dataset_rows(data: SurvivalDataset):
    header = ["time", "event", "w", "area"] + [f"z{j + 1}" for j in range(data.n_covariates)]
    if data.x_true is not None:
        header.append("x_true")
    rows = []
    for i in range(data.n):
        row = {
            "time": float(data.u[i]),
            "event": int(data.delta[i]),
            "w": int(data.w[i]),
            "area": float(data.a[i]),
        }
        for j in range(data.n_covariates):
            row[f"z{j + 1}"] = float(data.z[i, j])
        if data.x_true is not None:
            row["x_true"] = float(data.x_true[i])
        rows.append(row)
    return header, rows


def write_csv(data: SurvivalDataset, path) -> None:
    # repr() of a Python float round-trips exactly
    header, rows = _dataset_rows(data)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            writer.writerow([repr(r[h]) for h in header])


def write_json(data: SurvivalDataset, path) -> None:
    _, rows = _dataset_rows(data)
    Path(path).write_text(json.dumps(rows))


def demo_dataset_path() -> Path:
    return Path(__file__).parent / "data" / "demo.csv"
